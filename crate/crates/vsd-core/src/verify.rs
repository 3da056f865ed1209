//! Built-in self-check suite: fast, deterministic re-derivations of the
//! library's central identities, run by the CLI `verify` subcommand.
//!
//! Every check recomputes its target through an independent route (Monte
//! Carlo, finite differences, closed-form hand values, brute-force
//! enumeration) with a small budget so the whole suite finishes in seconds.
//! The heavyweight versions with tight tolerances live in the integration
//! test suite; this module exists to sanity-check a built binary in place.

use crate::diagnostics::{
    regularizer_analytic, regularizer_column_sum, regularizer_mc, regularizer_tikhonov,
    spectral_norm, stable_rank, NoiseProbe,
};
use crate::householder::{sample_structured_noise, HouseholderChain};
use crate::kl::{empirical_bayes_beta, kl_ard, kl_eb_vsd, kl_full, kl_hier_eb_expected,
    kl_lognormal_gamma};
use crate::layers::{EvalMode, Layer, NoiseSource, VsdDense};
use crate::metrics::{ece, ood_metrics};
use crate::model::{Model, ModelBuilder};
use crate::objective::Target;
use crate::rng::Rng;
use crate::tape::{finite_difference_check, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        CheckResult { name, passed, detail }
    }
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed)
}

/// Run every check. Same seed, same results, bit for bit.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    let base = Rng::new(seed);
    vec![
        householder_orthogonality(&mut base.substream(1)),
        eb_kl_identity(&mut base.substream(2)),
        eb_stationarity(&mut base.substream(3)),
        ard_degeneracy(&mut base.substream(4)),
        map_collapse(&mut base.substream(5)),
        hier_collapse(&mut base.substream(6)),
        pinned_lognormal_gamma(),
        kl_vs_mc(&mut base.substream(7)),
        noise_covariance(&mut base.substream(8)),
        gradient_check(&mut base.substream(9)),
        metric_hand_cases(),
        spectral_diagnostics(),
        regularizer_identities(&mut base.substream(10)),
    ]
}

fn random_alpha(k: usize, rng: &mut Rng) -> Vec<f64> {
    (0..k).map(|_| rng.uniform(0.05, 1.5)).collect()
}

/// Θ with entries bounded away from zero so β* = 1/(Θ²c) stays conditioned.
fn random_theta(k: usize, q: usize, rng: &mut Rng) -> Tensor {
    let data = (0..k * q)
        .map(|_| {
            let s = if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
            s * rng.uniform(0.5, 2.0)
        })
        .collect();
    Tensor::from_vec(vec![k, q], data).unwrap()
}

fn householder_orthogonality(rng: &mut Rng) -> CheckResult {
    let mut worst = 0.0f64;
    for &k in &[3usize, 8, 16] {
        for t in 1..=3usize {
            for rank in [None, Some(2)] {
                let chain = HouseholderChain::init(k, t, rank, rng);
                let u = chain.matrix();
                let gram = u.transpose().matmul(&u).unwrap();
                let dev = gram.sub(&Tensor::eye(k)).unwrap().frob_norm();
                worst = worst.max(dev);
            }
        }
    }
    CheckResult::new(
        "householder-orthogonality",
        worst < 1e-10,
        format!("max ‖UᵀU − I‖_F = {worst:.3e} over 18 chains (bound 1e-10)"),
    )
}

fn eb_kl_identity(rng: &mut Rng) -> CheckResult {
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let k = 2 + (rng.next_u64_raw() % 5) as usize;
        let q = 1 + (rng.next_u64_raw() % 3) as usize;
        let alpha = random_alpha(k, rng);
        let u = HouseholderChain::init(k, 2, None, rng).matrix();
        let theta = random_theta(k, q, rng);
        let beta = empirical_bayes_beta(&alpha, &u, &theta);
        let full = kl_full(&alpha, &u, &theta, &beta);
        let eb = kl_eb_vsd(&alpha, &u, q);
        worst = worst.max((full - eb).abs() / eb.abs().max(1.0));
    }
    CheckResult::new(
        "empirical-bayes-kl-identity",
        worst < 1e-12,
        format!("max |kl_full(β*) − kl_eb| = {worst:.3e} relative (bound 1e-12)"),
    )
}

fn eb_stationarity(rng: &mut Rng) -> CheckResult {
    let mut worst = 0.0f64;
    for _ in 0..2 {
        let (k, q) = (4usize, 2usize);
        let alpha = random_alpha(k, rng);
        let u = HouseholderChain::init(k, 2, None, rng).matrix();
        let theta = random_theta(k, q, rng);
        let beta = empirical_bayes_beta(&alpha, &u, &theta);
        for e in 0..beta.numel() {
            let b0 = beta.data()[e];
            let step = 1e-6 * b0;
            let mut up = beta.clone();
            up.data_mut()[e] = b0 + step;
            let mut dn = beta.clone();
            dn.data_mut()[e] = b0 - step;
            let d = (kl_full(&alpha, &u, &theta, &up) - kl_full(&alpha, &u, &theta, &dn))
                / (2.0 * step);
            worst = worst.max(d.abs());
        }
    }
    CheckResult::new(
        "empirical-bayes-stationarity",
        worst < 1e-8,
        format!("max |∂KL/∂β| at β* = {worst:.3e} (bound 1e-8)"),
    )
}

fn ard_degeneracy(rng: &mut Rng) -> CheckResult {
    let (k, q) = (6usize, 3usize);
    let alpha = random_alpha(k, rng);
    let vsd = kl_eb_vsd(&alpha, &Tensor::eye(k), q);
    let ard = q as f64 * kl_ard(&alpha);
    let ok = vsd == ard;
    CheckResult::new(
        "ard-degeneracy",
        ok,
        format!("identity-chain KL {vsd:.12e} vs Q × ARD {ard:.12e} (must be bitwise equal)"),
    )
}

fn map_collapse(rng: &mut Rng) -> CheckResult {
    let (k, q) = (5usize, 3usize);
    let layer = VsdDense {
        theta: rng.gaussian_tensor(&[k, q]),
        bias: rng.gaussian_tensor(&[q]),
        log_alpha: Tensor::full(&[k], -80.0),
        chain: HouseholderChain::init(k, 2, None, rng),
        hier: None,
    };
    let x = rng.gaussian_tensor(&[4, k]);
    let det = x.matmul(&layer.theta).unwrap().add(&layer.bias.reshape(&[1, q]).unwrap()).unwrap();
    let mut sample_rng = rng.substream(99);
    let sampled = Layer::VsdDense(layer).forward(&x, &mut EvalMode::Sample(&mut sample_rng));
    let dev = sampled.sub(&det).unwrap().max_abs();
    CheckResult::new(
        "map-collapse",
        dev < 1e-9,
        format!("α = e⁻⁸⁰ stochastic forward deviates from Θ-forward by {dev:.3e} (bound 1e-9)"),
    )
}

fn hier_collapse(rng: &mut Rng) -> CheckResult {
    let (k, q) = (5usize, 2usize);
    let alpha = random_alpha(k, rng);
    let u = HouseholderChain::init(k, 2, None, rng).matrix();
    let gamma = vec![0.0; k];
    let delta = vec![(-40.0f64).exp(); k];
    let hier = kl_hier_eb_expected(&gamma, &delta, &alpha, &u, q);
    let flat = kl_eb_vsd(&alpha, &u, q);
    let dev = (hier - flat).abs();
    CheckResult::new(
        "hierarchical-collapse",
        dev < 1e-6,
        format!("δ → 0, γ = 0 expected KL deviates from flat KL by {dev:.3e} (bound 1e-6)"),
    )
}

fn pinned_lognormal_gamma() -> CheckResult {
    let got = kl_lognormal_gamma(&[0.0], &[1.0], 1.0, 1.0);
    let want = 0.5f64.exp() - 0.5 - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let dev = (got - want).abs();
    CheckResult::new(
        "pinned-scale-prior-kl",
        dev < 1e-12,
        format!("KL(LogNormal(0,1) ‖ InvGamma(1,1)) = {got:.12} vs hand value {want:.12}"),
    )
}

/// KL between the induced weight posterior and the diagonal prior, estimated
/// as a Monte-Carlo log-density ratio. det(diag(Θ)U diag(α)Uᵀdiag(Θ)) is
/// computed from |det U| = 1, and the quadratic form reuses the draw's ε, so
/// the density needs no matrix inversion.
fn kl_vs_mc(rng: &mut Rng) -> CheckResult {
    let (k, q) = (3usize, 2usize);
    let alpha = random_alpha(k, rng);
    let u = HouseholderChain::init(k, 2, None, rng).matrix();
    let theta = random_theta(k, q, rng);
    let beta = empirical_bayes_beta(&alpha, &u, &theta);
    let analytic = kl_full(&alpha, &u, &theta, &beta);

    let samples = 300_000usize;
    let sqrt_a: Vec<f64> = alpha.iter().map(|a| a.sqrt()).collect();
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let mut total = 0.0;
    for j in 0..q {
        let t: Vec<f64> = (0..k).map(|i| theta.at2(i, j)).collect();
        let ln_det: f64 =
            t.iter().map(|v| (v * v).ln()).sum::<f64>() + alpha.iter().map(|a| a.ln()).sum::<f64>();
        let mut acc = 0.0;
        for _ in 0..samples {
            let eps: Vec<f64> = (0..k).map(|_| rng.next_gaussian()).collect();
            // w = Θ_:j ⊙ (1 + U(√α ⊙ ε)).
            let mut lq = -0.5 * (k as f64 * ln2pi + ln_det);
            let mut lp = 0.0;
            for i in 0..k {
                let mut xi = 1.0;
                for kk in 0..k {
                    xi += u.at2(i, kk) * sqrt_a[kk] * eps[kk];
                }
                let w = t[i] * xi;
                let b = beta.at2(i, j);
                lp += 0.5 * (b.ln() - ln2pi) - 0.5 * b * w * w;
            }
            lq -= 0.5 * eps.iter().map(|e| e * e).sum::<f64>();
            acc += lq - lp;
        }
        total += acc / samples as f64;
    }
    let rel = (total - analytic).abs() / analytic.abs();
    CheckResult::new(
        "kl-vs-monte-carlo",
        rel < 0.025,
        format!(
            "kl_full {analytic:.6} vs {samples}-sample log-ratio {total:.6} ({:.2}% off, bound 2.5%)",
            100.0 * rel
        ),
    )
}

fn noise_covariance(rng: &mut Rng) -> CheckResult {
    let k = 3usize;
    let alpha_v = random_alpha(k, rng);
    let alpha = Tensor::from_vec(vec![k], alpha_v.clone()).unwrap();
    let u = HouseholderChain::init(k, 2, None, rng).matrix();
    // True covariance U diag(α) Uᵀ.
    let mut ua = u.clone();
    for a in 0..k {
        for b in 0..k {
            ua.data_mut()[a * k + b] *= alpha_v[b];
        }
    }
    let truth = ua.matmul(&u.transpose()).unwrap();
    let samples = 120_000usize;
    let mut second = vec![0.0; k * k];
    let batch = 2_000usize;
    for _ in 0..samples / batch {
        let xi = sample_structured_noise(&u, &alpha, batch, rng);
        for r in 0..batch {
            for a in 0..k {
                let da = xi.at2(r, a) - 1.0;
                for b in 0..k {
                    second[a * k + b] += da * (xi.at2(r, b) - 1.0);
                }
            }
        }
    }
    let mut worst_z = 0.0f64;
    for a in 0..k {
        for b in 0..k {
            let emp = second[a * k + b] / samples as f64;
            let t = truth.at2(a, b);
            // Gaussian fourth-moment standard error of a covariance entry.
            let se = ((truth.at2(a, a) * truth.at2(b, b) + t * t) / samples as f64).sqrt();
            worst_z = worst_z.max((emp - t).abs() / se);
        }
    }
    CheckResult::new(
        "induced-covariance",
        worst_z < 4.0,
        format!("max |empirical − UαUᵀ| = {worst_z:.2} standard errors at n = {samples} (bound 4)"),
    )
}

fn gradient_check(rng: &mut Rng) -> CheckResult {
    let model = ModelBuilder::flat_input(3)
        .vsd_dense(3, 2, None, 0.4, Some((1.0, 1.0)), rng)
        .unwrap()
        .relu()
        .vsd_dense(2, 1, None, 0.3, None, rng)
        .unwrap()
        .categorical(2)
        .unwrap();
    let x = rng.gaussian_tensor(&[4, 3]);
    let labels = vec![0usize, 1, 1, 0];

    let mut plan = Vec::new();
    {
        let mut tape = Tape::new();
        let nodes = model.register(&mut tape);
        let xn = tape.constant(x.clone());
        let mut src = NoiseSource::Record(rng, &mut plan);
        let _ = model.forward_graph(&mut tape, &nodes, xn, &mut src);
    }
    let eval = |m: &Model| -> f64 {
        let mut tape = Tape::new();
        let nodes = m.register(&mut tape);
        let xn = tape.constant(x.clone());
        let mut cursor = 0;
        let mut src = NoiseSource::Replay(&plan, &mut cursor);
        let logits = m.forward_graph(&mut tape, &nodes, xn, &mut src);
        let nll = tape.softmax_cross_entropy(logits, &labels);
        let kl = m.kl_total_graph(&mut tape, &nodes);
        let loss = tape.add(nll, kl);
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let nodes = model.register(&mut tape);
    let xn = tape.constant(x.clone());
    let mut cursor = 0;
    let mut src = NoiseSource::Replay(&plan, &mut cursor);
    let logits = model.forward_graph(&mut tape, &nodes, xn, &mut src);
    let nll = tape.softmax_cross_entropy(logits, &labels);
    let kl = model.kl_total_graph(&mut tape, &nodes);
    let loss = tape.add(nll, kl);
    let adj = match tape.backward(loss) {
        Ok(a) => a,
        Err(e) => {
            return CheckResult::new("gradient-check", false, format!("backward failed: {e}"))
        }
    };
    let params: Vec<Tensor> = model.params().iter().map(|(_, t)| (*t).clone()).collect();
    let analytic: Vec<Tensor> = model
        .bindings(&nodes)
        .iter()
        .map(|(_, id)| adj.expect(*id).clone())
        .collect();
    let base = model.clone();
    let res = finite_difference_check(
        |ps| {
            let mut m = base.clone();
            for (slot, p) in m.params_mut().into_iter().zip(ps) {
                *slot.1 = p.clone();
            }
            eval(&m)
        },
        &params,
        &analytic,
        1e-5,
    );
    CheckResult::new(
        "gradient-check",
        res.max_err < 1e-5,
        format!(
            "max relative gradient error {:.3e} over every parameter class (bound 1e-5)",
            res.max_err
        ),
    )
}

fn metric_hand_cases() -> CheckResult {
    let m = match ood_metrics(&[3.0, 2.0, 1.0], &[2.0, 0.0]) {
        Ok(m) => m,
        Err(e) => return CheckResult::new("metric-hand-cases", false, format!("{e}")),
    };
    let auroc_ok = (m.auroc - 0.75).abs() < 1e-12;
    let det = match ood_metrics(&[1.0, 2.0, 3.0], &[0.0, 1.0, 2.0]) {
        Ok(m) => m.detection_error,
        Err(e) => return CheckResult::new("metric-hand-cases", false, format!("{e}")),
    };
    let det_ok = (det - 1.0 / 3.0).abs() < 1e-12;
    let p = Tensor::from_vec(
        vec![4, 2],
        vec![0.6, 0.4, 0.55, 0.45, 0.9, 0.1, 0.3, 0.7],
    )
    .unwrap();
    let e = ece(&p, &[0, 1, 0, 1], 2).unwrap();
    let ece_ok = (e - 0.0625).abs() < 1e-12;
    CheckResult::new(
        "metric-hand-cases",
        auroc_ok && det_ok && ece_ok,
        format!("AUROC {:.4} (want 0.75), detection error {det:.4} (want 1/3), ECE {e:.4} (want 0.0625)", m.auroc),
    )
}

fn spectral_diagnostics() -> CheckResult {
    let d = Tensor::from_vec(vec![2, 2], vec![3.0, 0.0, 0.0, 1.0]).unwrap();
    let sn = spectral_norm(&d, 100, 1e-12);
    let sr = stable_rank(&Tensor::eye(4)).unwrap();
    let ok = (sn - 3.0).abs() < 1e-12 && (sr - 4.0).abs() < 1e-9;
    CheckResult::new(
        "spectral-diagnostics",
        ok,
        format!("σ(diag(3,1)) = {sn:.6} (want 3), stable rank I₄ = {sr:.6} (want 4)"),
    )
}

fn regularizer_identities(rng: &mut Rng) -> CheckResult {
    let model = ModelBuilder::flat_input(5)
        .map_dense(4, 1.0, rng)
        .unwrap()
        .map_dense(3, 1.0, rng)
        .unwrap()
        .categorical(3)
        .unwrap();
    let x = rng.gaussian_tensor(&[6, 5]);
    let labels = vec![0usize, 1, 2, 0, 1, 2];
    let target = Target::Labels(&labels);
    let u = HouseholderChain::init(5, 2, None, rng).matrix();
    let alpha = Tensor::full(&[5], 1e-3);
    let probe = NoiseProbe { layer: 0, alpha: &alpha, u: &u };
    let an = match regularizer_analytic(&model, &x, &target, &probe) {
        Ok(v) => v,
        Err(e) => return CheckResult::new("regularizer-identities", false, format!("{e}")),
    };
    let tik = regularizer_tikhonov(&model, &x, &target, &probe).unwrap();
    let cs = regularizer_column_sum(&model, &x, &target, &probe).unwrap();
    let forms_ok = (an - tik).abs() < 1e-10 * an && (an - cs).abs() < 1e-10 * an;
    let mc = match regularizer_mc(&model, &x, &target, &probe, 3_000, rng) {
        Ok(v) => v,
        Err(e) => return CheckResult::new("regularizer-identities", false, format!("{e}")),
    };
    let mc_rel = (mc - an).abs() / an;
    CheckResult::new(
        "regularizer-identities",
        forms_ok && mc_rel < 0.10,
        format!(
            "trace {an:.4e}, Tikhonov {tik:.4e}, column-sum {cs:.4e}; MC off by {:.2}% (bound 10%)",
            100.0 * mc_rel
        ),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        for r in run_all(7) {
            assert!(r.passed, "{}: {}", r.name, r.detail);
            assert!(!r.detail.is_empty());
        }
    }

    #[test]
    fn suite_is_deterministic_and_names_unique() {
        let a = run_all(123);
        let b = run_all(123);
        assert_eq!(a, b);
        let mut names: Vec<&str> = a.iter().map(|r| r.name).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), a.len());
        assert!(all_passed(&a));
    }
}
