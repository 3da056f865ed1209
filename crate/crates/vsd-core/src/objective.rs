//! Stochastic training objective: the negative evidence lower bound.
//!
//! For a dataset of N examples and a minibatch B,
//!
//!   loss = (N/|B|) · (1/S) Σ_{s=1..S} nll_s(B)  +  λ · KL(q ‖ p),
//!
//! where nll_s is the summed negative log likelihood of one stochastic forward
//! pass and λ is the annealing weight on the KL (λ = 1 recovers the bound).
//! The N/|B| factor makes the minibatch data term an unbiased estimate of the
//! full-dataset term, so the KL is *not* rescaled per batch.
//!
//! The data term and the KL term are also returned as plain values so the
//! training loop can trace them separately.

use crate::error::Error;
use crate::layers::NoiseSource;
use crate::model::{Likelihood, Model, ModelNodes};
use crate::tape::{gaussian_nll_graph, NodeId, Tape};
use crate::tensor::Tensor;

/// Training target for one batch; must match the model likelihood.
pub enum Target<'a> {
    Labels(&'a [usize]),
    Values(&'a Tensor),
}

#[derive(Debug, Clone, Copy)]
pub struct ObjectiveSpec {
    /// Dataset size N.
    pub dataset_size: usize,
    /// KL weight λ (1 = the exact bound; < 1 during annealing).
    pub kl_weight: f64,
    /// Monte Carlo samples S per step.
    pub mc_samples: usize,
}

/// The loss node plus traced component values.
pub struct ObjectiveParts {
    pub loss: NodeId,
    /// (N/|B|)-scaled MC-averaged data term.
    pub data_term: f64,
    /// Unweighted KL (before multiplying by λ).
    pub kl_term: f64,
}

pub fn negative_elbo_graph(
    tape: &mut Tape,
    model: &Model,
    nodes: &ModelNodes,
    x: &Tensor,
    target: &Target,
    spec: ObjectiveSpec,
    noise: &mut NoiseSource,
) -> Result<ObjectiveParts, Error> {
    if spec.mc_samples == 0 {
        return Err(Error::config("mc_samples must be at least 1"));
    }
    if spec.dataset_size == 0 {
        return Err(Error::config("dataset_size must be positive"));
    }
    let batch = x.shape()[0];
    if batch == 0 {
        return Err(Error::config("empty batch"));
    }
    match (&model.likelihood, target) {
        (Likelihood::Categorical { .. }, Target::Labels(labels)) => {
            if labels.len() != batch {
                return Err(Error::config(format!(
                    "batch has {batch} rows but {} labels",
                    labels.len()
                )));
            }
        }
        (Likelihood::Gaussian { .. }, Target::Values(y)) => {
            if y.numel() != batch {
                return Err(Error::config(format!(
                    "batch has {batch} rows but {} targets",
                    y.numel()
                )));
            }
        }
        _ => {
            return Err(Error::config(
                "target kind does not match the model likelihood",
            ))
        }
    }

    let xn = tape.constant(x.clone());
    let mut nll_sum: Option<NodeId> = None;
    for _ in 0..spec.mc_samples {
        let out = model.forward_graph(tape, nodes, xn, noise);
        let nll = match (&model.likelihood, target) {
            (Likelihood::Categorical { .. }, Target::Labels(labels)) => {
                tape.softmax_cross_entropy(out, labels)
            }
            (Likelihood::Gaussian { .. }, Target::Values(y)) => {
                let rho = nodes.log_precision.expect("gaussian registers a precision node");
                gaussian_nll_graph(tape, out, y, rho)
            }
            _ => unreachable!("validated above"),
        };
        nll_sum = Some(match nll_sum {
            None => nll,
            Some(acc) => tape.add(acc, nll),
        });
    }
    let nll_avg = tape.scale(nll_sum.expect("S >= 1"), 1.0 / spec.mc_samples as f64);
    let data = tape.scale(nll_avg, spec.dataset_size as f64 / batch as f64);
    let kl = model.kl_total_graph(tape, nodes);
    let weighted_kl = tape.scale(kl, spec.kl_weight);
    let loss = tape.add(data, weighted_kl);
    Ok(ObjectiveParts {
        loss,
        data_term: tape.value(data).item(),
        kl_term: tape.value(kl).item(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelBuilder;
    use crate::rng::Rng;

    fn zeroed(mut model: Model) -> Model {
        for (name, t) in model.params_mut() {
            if name.ends_with("theta") || name.ends_with("bias") {
                *t = Tensor::zeros(t.shape());
            }
        }
        model
    }

    #[test]
    fn zero_logits_give_n_ln_c() {
        // All-zero weights make the softmax uniform; the data term collapses
        // to N·ln(classes) regardless of the batch.
        let mut rng = Rng::new(50);
        let model = zeroed(
            ModelBuilder::flat_input(4)
                .map_dense(3, 0.0, &mut rng)
                .unwrap()
                .categorical(3)
                .unwrap(),
        );
        let x = rng.gaussian_tensor(&[5, 4]);
        let labels = vec![0usize, 2, 1, 1, 0];
        let mut tape = Tape::new();
        let nodes = model.register(&mut tape);
        let mut noise_rng = Rng::new(1);
        let parts = negative_elbo_graph(
            &mut tape,
            &model,
            &nodes,
            &x,
            &Target::Labels(&labels),
            ObjectiveSpec {
                dataset_size: 120,
                kl_weight: 1.0,
                mc_samples: 1,
            },
            &mut NoiseSource::Sample(&mut noise_rng),
        )
        .unwrap();
        let want = 120.0 * 3.0f64.ln();
        assert!((parts.data_term - want).abs() < 1e-9, "{}", parts.data_term);
        assert_eq!(parts.kl_term, 0.0, "MAP with zero weights has zero penalty");
    }

    #[test]
    fn loss_is_affine_in_kl_weight() {
        let mut rng = Rng::new(51);
        let model = ModelBuilder::flat_input(3)
            .vsd_dense(4, 1, None, 0.2, None, &mut rng)
            .unwrap()
            .relu()
            .vsd_dense(2, 0, None, 0.2, None, &mut rng)
            .unwrap()
            .categorical(2)
            .unwrap();
        let x = rng.gaussian_tensor(&[4, 3]);
        let labels = vec![0usize, 1, 1, 0];
        // Freeze one noise stream so every λ sees the same data term.
        let mut plan = Vec::new();
        {
            let mut tape = Tape::new();
            let nodes = model.register(&mut tape);
            let mut noise_rng = Rng::new(7);
            let mut src = NoiseSource::Record(&mut noise_rng, &mut plan);
            negative_elbo_graph(
                &mut tape,
                &model,
                &nodes,
                &x,
                &Target::Labels(&labels),
                ObjectiveSpec { dataset_size: 40, kl_weight: 1.0, mc_samples: 2 },
                &mut src,
            )
            .unwrap();
        }
        let run = |lambda: f64| -> (f64, f64, f64) {
            let mut tape = Tape::new();
            let nodes = model.register(&mut tape);
            let mut cursor = 0;
            let mut src = NoiseSource::Replay(&plan, &mut cursor);
            let parts = negative_elbo_graph(
                &mut tape,
                &model,
                &nodes,
                &x,
                &Target::Labels(&labels),
                ObjectiveSpec { dataset_size: 40, kl_weight: lambda, mc_samples: 2 },
                &mut src,
            )
            .unwrap();
            (tape.value(parts.loss).item(), parts.data_term, parts.kl_term)
        };
        let (l0, d0, k0) = run(0.0);
        let (l1, d1, k1) = run(1.0);
        let (lh, dh, kh) = run(0.3);
        assert_eq!(d0, d1, "frozen noise pins the data term");
        assert_eq!(k0, k1, "KL value does not depend on λ");
        assert!((l0 - d0).abs() < 1e-12, "λ = 0 leaves only data");
        assert!((l1 - (d1 + k1)).abs() * 0.5 < 1e-12);
        assert!((lh - (dh + 0.3 * kh)).abs() < 1e-12);
        assert!(k0 > 0.0);
    }

    #[test]
    fn mc_average_equals_mean_of_single_sample_losses() {
        let mut rng = Rng::new(52);
        let model = ModelBuilder::flat_input(3)
            .vsd_dense(2, 1, None, 0.3, None, &mut rng)
            .unwrap()
            .categorical(2)
            .unwrap();
        let x = rng.gaussian_tensor(&[5, 3]);
        let labels = vec![0usize, 1, 0, 1, 1];
        let spec3 = ObjectiveSpec { dataset_size: 50, kl_weight: 0.0, mc_samples: 3 };
        let mut plan = Vec::new();
        let s3 = {
            let mut tape = Tape::new();
            let nodes = model.register(&mut tape);
            let mut noise_rng = Rng::new(9);
            let mut src = NoiseSource::Record(&mut noise_rng, &mut plan);
            let parts =
                negative_elbo_graph(&mut tape, &model, &nodes, &x, &Target::Labels(&labels), spec3, &mut src)
                    .unwrap();
            parts.data_term
        };
        // One draw per pass for this single noisy layer.
        assert_eq!(plan.len(), 3);
        let mut singles = Vec::new();
        for s in 0..3 {
            let mut tape = Tape::new();
            let nodes = model.register(&mut tape);
            let slice = &plan[s..s + 1];
            let mut cursor = 0;
            let mut src = NoiseSource::Replay(slice, &mut cursor);
            let parts = negative_elbo_graph(
                &mut tape,
                &model,
                &nodes,
                &x,
                &Target::Labels(&labels),
                ObjectiveSpec { mc_samples: 1, ..spec3 },
                &mut src,
            )
            .unwrap();
            singles.push(parts.data_term);
        }
        let mean = singles.iter().sum::<f64>() / 3.0;
        assert!((s3 - mean).abs() < 1e-9, "{s3} vs {mean}");
    }

    #[test]
    fn gaussian_data_term_matches_closed_form() {
        let mut rng = Rng::new(53);
        let model = ModelBuilder::flat_input(2)
            .map_dense(1, 0.0, &mut rng)
            .unwrap()
            .gaussian((4.0f64).ln(), false) // τ = 4, σ² = 0.25
            .unwrap();
        let x = rng.gaussian_tensor(&[6, 2]);
        let y = rng.gaussian_tensor(&[6, 1]);
        let mut tape = Tape::new();
        let nodes = model.register(&mut tape);
        let mut noise_rng = Rng::new(2);
        let parts = negative_elbo_graph(
            &mut tape,
            &model,
            &nodes,
            &x,
            &Target::Values(&y),
            ObjectiveSpec { dataset_size: 6, kl_weight: 1.0, mc_samples: 1 },
            &mut NoiseSource::Sample(&mut noise_rng),
        )
        .unwrap();
        // Closed form: Σ ½ ln(2πσ²) + (f−y)²/(2σ²) with the deterministic f.
        let f = model.forward(&x, &mut crate::layers::EvalMode::Mean);
        let var = 0.25;
        let mut want = 0.0;
        for i in 0..6 {
            let d = f.data()[i] - y.data()[i];
            want += 0.5 * (2.0 * std::f64::consts::PI * var).ln() + d * d / (2.0 * var);
        }
        assert!((parts.data_term - want).abs() < 1e-10);
    }

    #[test]
    fn dataset_scaling_is_linear_and_mismatches_error() {
        let mut rng = Rng::new(54);
        let model = ModelBuilder::flat_input(2)
            .map_dense(2, 0.0, &mut rng)
            .unwrap()
            .categorical(2)
            .unwrap();
        let x = rng.gaussian_tensor(&[4, 2]);
        let labels = vec![0usize, 1, 0, 1];
        let term = |n: usize| {
            let mut tape = Tape::new();
            let nodes = model.register(&mut tape);
            let mut noise_rng = Rng::new(3);
            negative_elbo_graph(
                &mut tape,
                &model,
                &nodes,
                &x,
                &Target::Labels(&labels),
                ObjectiveSpec { dataset_size: n, kl_weight: 1.0, mc_samples: 1 },
                &mut NoiseSource::Sample(&mut noise_rng),
            )
            .unwrap()
            .data_term
        };
        assert!((term(40) / term(4) - 10.0).abs() < 1e-12);

        let mut tape = Tape::new();
        let nodes = model.register(&mut tape);
        let mut noise_rng = Rng::new(4);
        let y = rng.gaussian_tensor(&[4, 1]);
        let err = negative_elbo_graph(
            &mut tape,
            &model,
            &nodes,
            &x,
            &Target::Values(&y),
            ObjectiveSpec { dataset_size: 4, kl_weight: 1.0, mc_samples: 1 },
            &mut NoiseSource::Sample(&mut noise_rng),
        );
        assert!(err.is_err(), "values against a categorical head must fail");
        let short = vec![0usize; 3];
        let mut tape = Tape::new();
        let nodes = model.register(&mut tape);
        let err = negative_elbo_graph(
            &mut tape,
            &model,
            &nodes,
            &x,
            &Target::Labels(&short),
            ObjectiveSpec { dataset_size: 4, kl_weight: 1.0, mc_samples: 1 },
            &mut NoiseSource::Sample(&mut noise_rng),
        );
        assert!(err.is_err(), "label count mismatch must fail");
    }
}
