//! Posterior-predictive evaluation by Monte Carlo model averaging.
//!
//! S stochastic forward passes approximate the predictive distribution:
//! classification averages the per-pass softmax (not the logits), regression
//! reports the sample mean and the sample spread (1/S convention) plus the
//! observation variance 1/τ. Pass `s` always draws from substream `s` of the
//! evaluation stream, so results are a pure function of (model, inputs, seed,
//! S) and the parallel build produces the same bits as the sequential one:
//! the passes are embarrassingly parallel and the reduction runs in index
//! order either way.

use crate::error::Error;
use crate::layers::EvalMode;
use crate::model::{Likelihood, Model};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Row-wise softmax with the max-shift trick.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    assert_eq!(logits.shape().len(), 2, "softmax wants [n, classes]");
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    let mut out = Tensor::zeros(&[n, c]);
    for r in 0..n {
        let row = &logits.data()[r * c..(r + 1) * c];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &x in row {
            z += (x - mx).exp();
        }
        for j in 0..c {
            out.data_mut()[r * c + j] = (row[j] - mx).exp() / z;
        }
    }
    out
}

/// One network output per MC pass, pass `s` on substream `s`. Parallel and
/// sequential builds return identical tensors in identical order.
fn mc_outputs(model: &Model, x: &Tensor, samples: usize, rng: &Rng) -> Vec<Tensor> {
    let pass = |s: usize| {
        let mut r = rng.substream(s as u64);
        model.forward(x, &mut EvalMode::Sample(&mut r))
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..samples).into_par_iter().map(pass).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..samples).map(pass).collect()
    }
}

/// Always-sequential twin of [`mc_outputs`], kept for the determinism tests
/// and the benchmark baseline.
pub fn mc_outputs_sequential(model: &Model, x: &Tensor, samples: usize, rng: &Rng) -> Vec<Tensor> {
    (0..samples)
        .map(|s| {
            let mut r = rng.substream(s as u64);
            model.forward(x, &mut EvalMode::Sample(&mut r))
        })
        .collect()
}

/// MC-averaged class probabilities, `[n, classes]`.
pub fn predict_probs(
    model: &Model,
    x: &Tensor,
    samples: usize,
    rng: &Rng,
) -> Result<Tensor, Error> {
    let Likelihood::Categorical { classes } = &model.likelihood else {
        return Err(Error::config(
            "predict_probs needs a categorical likelihood",
        ));
    };
    if samples == 0 {
        return Err(Error::config("prediction needs at least one MC sample"));
    }
    let mut acc: Option<Tensor> = None;
    for out in mc_outputs(model, x, samples, rng) {
        assert_eq!(out.shape()[1], *classes);
        let p = softmax_rows(&out);
        acc = Some(match acc {
            None => p,
            Some(a) => a.add(&p).expect("same shape"),
        });
    }
    Ok(acc.expect("samples >= 1").scale(1.0 / samples as f64))
}

/// Predictive mean and variance of a Gaussian-likelihood model, both `[n]`.
/// Variance = spread of the S network outputs (1/S convention) + 1/τ.
pub struct RegressionPrediction {
    pub mean: Tensor,
    pub variance: Tensor,
}

pub fn predict_regression(
    model: &Model,
    x: &Tensor,
    samples: usize,
    rng: &Rng,
) -> Result<RegressionPrediction, Error> {
    if !matches!(model.likelihood, Likelihood::Gaussian { .. }) {
        return Err(Error::config(
            "predict_regression needs a gaussian likelihood",
        ));
    }
    if samples == 0 {
        return Err(Error::config("prediction needs at least one MC sample"));
    }
    let n = x.shape()[0];
    let tau = model.precision().expect("gaussian");
    let mut sum = vec![0.0; n];
    let mut sumsq = vec![0.0; n];
    for out in mc_outputs(model, x, samples, rng) {
        assert_eq!(out.numel(), n, "regression output must be one value per row");
        for (i, &v) in out.data().iter().enumerate() {
            sum[i] += v;
            sumsq[i] += v * v;
        }
    }
    let sf = samples as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / sf).collect();
    let variance: Vec<f64> = mean
        .iter()
        .zip(&sumsq)
        .map(|(m, sq)| (sq / sf - m * m).max(0.0) + 1.0 / tau)
        .collect();
    Ok(RegressionPrediction {
        mean: Tensor::from_vec(vec![n], mean).unwrap(),
        variance: Tensor::from_vec(vec![n], variance).unwrap(),
    })
}
