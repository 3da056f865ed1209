//! Evaluation metrics: likelihoods, calibration, entropy, OOD separation.
//!
//! Conventions, fixed here and relied on by the tests:
//! * NLL clamps per-example probabilities at 1e-12 before the log and counts
//!   how often the clamp fired (a clamp means the model assigned essentially
//!   zero mass to the truth).
//! * ECE bins confidence into M left-open intervals ((m−1)/M, m/M]; an exact
//!   confidence of 0 (impossible for a softmax over finitely many classes,
//!   possible for degenerate inputs) lands in the first bin.
//! * OOD scores follow "higher = more in-distribution". AUROC is the
//!   Mann-Whitney statistic with tie-averaged ranks; AUPR is average
//!   precision (precision accumulated at each recall step); FPR@95 evaluates
//!   the rule `score ≥ δ ⇒ in` at the largest δ reaching 95% TPR; detection
//!   error is the best achievable ½(FNR + FPR) over all thresholds, with
//!   ties classified as in-distribution.

use crate::error::Error;
use crate::tensor::Tensor;

/// Mean negative log likelihood of the true labels under `probs`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllResult {
    pub nll: f64,
    /// Number of examples whose probability hit the 1e-12 clamp.
    pub clamped: usize,
}

pub const PROB_CLAMP: f64 = 1e-12;

pub fn classification_nll(probs: &Tensor, labels: &[usize]) -> Result<NllResult, Error> {
    let (n, c) = check_probs(probs, labels)?;
    let mut total = 0.0;
    let mut clamped = 0;
    for (r, &l) in labels.iter().enumerate() {
        let p = probs.data()[r * c + l];
        let p = if p < PROB_CLAMP {
            clamped += 1;
            PROB_CLAMP
        } else {
            p
        };
        total -= p.ln();
    }
    Ok(NllResult {
        nll: total / n as f64,
        clamped,
    })
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy(probs: &Tensor, labels: &[usize]) -> Result<f64, Error> {
    let (n, c) = check_probs(probs, labels)?;
    let mut hits = 0usize;
    for (r, &l) in labels.iter().enumerate() {
        let row = &probs.data()[r * c..(r + 1) * c];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == l {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Expected calibration error over `bins` equal-width confidence bins.
pub fn ece(probs: &Tensor, labels: &[usize], bins: usize) -> Result<f64, Error> {
    let (n, c) = check_probs(probs, labels)?;
    if bins == 0 {
        return Err(Error::config("ece needs at least one bin"));
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut acc_sum = vec![0.0; bins];
    for (r, &l) in labels.iter().enumerate() {
        let row = &probs.data()[r * c..(r + 1) * c];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        let conf = row[best];
        // Left-open bins ((m−1)/M, m/M]; ceil maps confidence to its bin.
        let b = if conf <= 0.0 {
            0
        } else {
            ((conf * bins as f64).ceil() as usize).min(bins) - 1
        };
        count[b] += 1;
        conf_sum[b] += conf;
        acc_sum[b] += (best == l) as usize as f64;
    }
    let mut e = 0.0;
    for b in 0..bins {
        if count[b] > 0 {
            let w = count[b] as f64 / n as f64;
            e += w * (acc_sum[b] / count[b] as f64 - conf_sum[b] / count[b] as f64).abs();
        }
    }
    Ok(e)
}

fn check_probs(probs: &Tensor, labels: &[usize]) -> Result<(usize, usize), Error> {
    if probs.shape().len() != 2 {
        return Err(Error::config("probabilities must be [n, classes]"));
    }
    let (n, c) = (probs.shape()[0], probs.shape()[1]);
    if labels.len() != n {
        return Err(Error::config(format!(
            "{n} probability rows but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::config(format!("label {bad} out of range {c}")));
    }
    Ok((n, c))
}

/// Shannon entropy −Σ p ln p per row (0·ln 0 = 0), `[n]`.
pub fn predictive_entropy(probs: &Tensor) -> Tensor {
    assert_eq!(probs.shape().len(), 2, "entropy wants [n, classes]");
    let (n, c) = (probs.shape()[0], probs.shape()[1]);
    let mut out = Tensor::zeros(&[n]);
    for r in 0..n {
        let mut h = 0.0;
        for &p in &probs.data()[r * c..(r + 1) * c] {
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        out.data_mut()[r] = h;
    }
    out
}

/// Entropy divided by its maximum ln(classes), mapping to [0, 1].
pub fn normalized_entropy(probs: &Tensor) -> Tensor {
    let c = probs.shape()[1];
    assert!(c >= 2, "normalized entropy needs at least two classes");
    predictive_entropy(probs).scale(1.0 / (c as f64).ln())
}

/// Fixed-range histogram with `bins` equal cells over [lo, hi]; values at hi
/// land in the last bin, values outside the range clamp to the end bins.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn build(values: &[f64], bins: usize, lo: f64, hi: f64) -> Self {
        assert!(bins > 0 && hi > lo, "histogram needs bins and a real range");
        let mut counts = vec![0usize; bins];
        let w = (hi - lo) / bins as f64;
        for &v in values {
            let b = (((v - lo) / w).floor() as isize).clamp(0, bins as isize - 1) as usize;
            counts[b] += 1;
        }
        Histogram { lo, hi, counts }
    }

    /// Cumulative fraction of mass at or below each bin's upper edge.
    pub fn cdf(&self) -> Vec<f64> {
        let total: usize = self.counts.iter().sum();
        let mut acc = 0usize;
        self.counts
            .iter()
            .map(|&c| {
                acc += c;
                acc as f64 / total.max(1) as f64
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OodMetrics {
    pub auroc: f64,
    pub aupr_in: f64,
    pub aupr_out: f64,
    pub fpr_at_95_tpr: f64,
    pub detection_error: f64,
}

/// Separation metrics between in-distribution and OOD score samples
/// (higher score = more in-distribution).
pub fn ood_metrics(score_in: &[f64], score_out: &[f64]) -> Result<OodMetrics, Error> {
    if score_in.is_empty() || score_out.is_empty() {
        return Err(Error::config("ood metrics need both score samples"));
    }
    if score_in.iter().chain(score_out).any(|v| v.is_nan()) {
        return Err(Error::config("ood scores must not be NaN"));
    }
    Ok(OodMetrics {
        auroc: auroc(score_in, score_out),
        aupr_in: average_precision(score_in, score_out),
        aupr_out: {
            // Swap roles and flip signs so "high score" means OOD.
            let neg_out: Vec<f64> = score_out.iter().map(|v| -v).collect();
            let neg_in: Vec<f64> = score_in.iter().map(|v| -v).collect();
            average_precision(&neg_out, &neg_in)
        },
        fpr_at_95_tpr: fpr_at_tpr(score_in, score_out, 0.95),
        detection_error: detection_error(score_in, score_out),
    })
}

/// Mann-Whitney AUROC with tie-averaged ranks: P(in > out) + ½P(in = out).
fn auroc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // 1-based ranks i+1 ..= j share the average rank.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let np = pos.len() as f64;
    let nn = neg.len() as f64;
    (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn)
}

/// Average precision: sweep thresholds down the ranking, accumulate precision
/// at each positive. Ties are processed as one block (precision evaluated
/// after the whole block, weighted by the positives inside it).
fn average_precision(pos: &[f64], neg: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let np = pos.len() as f64;
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut ap = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let mut block_tp = 0usize;
        while j < all.len() && all[j].0 == all[i].0 {
            block_tp += all[j].1 as usize;
            j += 1;
        }
        tp += block_tp;
        seen = j;
        if block_tp > 0 {
            ap += (tp as f64 / seen as f64) * block_tp as f64;
        }
        i = j;
    }
    debug_assert_eq!(seen, all.len());
    ap / np
}

/// FPR of `score ≥ δ ⇒ in` at the largest δ whose TPR reaches `level`.
fn fpr_at_tpr(score_in: &[f64], score_out: &[f64], level: f64) -> f64 {
    let mut thresholds: Vec<f64> = score_in.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    let need = (level * score_in.len() as f64).ceil() as usize;
    // TPR first reaches `level` when δ equals the `need`-th highest in-score.
    let delta = thresholds[need.clamp(1, score_in.len()) - 1];
    let fp = score_out.iter().filter(|&&s| s >= delta).count();
    fp as f64 / score_out.len() as f64
}

/// min_δ ½(FNR + FPR) for the rule `score ≥ δ ⇒ in`.
fn detection_error(score_in: &[f64], score_out: &[f64]) -> f64 {
    let mut deltas: Vec<f64> = score_in.iter().chain(score_out).cloned().collect();
    deltas.sort_by(|a, b| a.total_cmp(b));
    deltas.dedup();
    let mut best = f64::INFINITY;
    // +inf classifies everything as OOD (FNR 1, FPR 0).
    let eval = |delta: f64| {
        let fnr = score_in.iter().filter(|&&s| s < delta).count() as f64 / score_in.len() as f64;
        let fpr = score_out.iter().filter(|&&s| s >= delta).count() as f64 / score_out.len() as f64;
        0.5 * (fnr + fpr)
    };
    for &d in &deltas {
        best = best.min(eval(d));
    }
    best = best.min(eval(f64::INFINITY));
    best
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RegressionMetrics {
    pub rmse: f64,
    /// Mean Gaussian negative log density ½ln(2πv) + (y−m)²/(2v).
    pub mean_nll: f64,
}

pub fn regression_metrics(
    mean: &Tensor,
    variance: &Tensor,
    targets: &Tensor,
) -> Result<RegressionMetrics, Error> {
    let n = mean.numel();
    if variance.numel() != n || targets.numel() != n || n == 0 {
        return Err(Error::config(
            "regression metrics need aligned non-empty mean/variance/targets",
        ));
    }
    if variance.data().iter().any(|&v| v <= 0.0) {
        return Err(Error::config("predictive variance must be positive"));
    }
    let mut sse = 0.0;
    let mut nll = 0.0;
    for i in 0..n {
        let d = mean.data()[i] - targets.data()[i];
        let v = variance.data()[i];
        sse += d * d;
        nll += 0.5 * (2.0 * std::f64::consts::PI * v).ln() + d * d / (2.0 * v);
    }
    Ok(RegressionMetrics {
        rmse: (sse / n as f64).sqrt(),
        mean_nll: nll / n as f64,
    })
}
