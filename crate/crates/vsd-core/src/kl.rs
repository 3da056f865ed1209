//! KL divergences for multiplicative structured Gaussian posteriors.
//!
//! Notation: a layer has weight matrix Θ ∈ R^{K×Q}; the posterior over the
//! weights is induced by a noise row ξ ~ N(1_K, U·diag(α)·Uᵀ) acting as
//! W = diag(ξ)·Θ, with U orthogonal. Write c_i = 1 + Σ_k α_k·U²_{ik}
//! (the i-th diagonal entry of I + U·diag(α)·Uᵀ).
//!
//! * [`kl_eb_vsd`]: KL to the empirical-Bayes optimal zero-mean Gaussian
//!   prior with per-weight precisions β. At the optimum the β drop out:
//!   KL = (Q/2)·Σ_i ln(c_i/α_i).
//! * [`kl_full`]: the same KL at an explicit β (column-factored prior
//!   N(0, diag(1/β_:j))), used to verify the optimum:
//!   (1/2)·Σ_{ij} [ −ln β_ij − ln(α_i·Θ²_ij) − 1 + β_ij·Θ²_ij·c_i ].
//! * [`empirical_bayes_beta`]: the stationary β*_ij = 1/(Θ²_ij·c_i);
//!   kl_full at β* collapses to kl_eb_vsd identically.
//! * [`kl_ard`]: diagonal special case, 0.5·Σ_i ln((1+α_i)/α_i) per output
//!   column; kl_eb_vsd with U = I equals Q·kl_ard bit-for-bit because both
//!   evaluate the same expression (see the ratio form used below).
//! * [`kl_lognormal_gamma`]: KL(LogNormal(γ, δ) ‖ InvGamma(a, b)) for the
//!   per-dimension scale latent z of the hierarchical variant.
//! * [`kl_hier_eb_expected`]: E_z of the structured KL under the scale
//!   latent, (Q/2)·Σ_i [ e^{γ_i+δ_i/2} − γ_i − 1 + ln(c_i/α_i) ]; collapses
//!   to kl_eb_vsd at γ = 0, δ → 0.
//!
//! Each formula has a `_graph` twin that builds the same expression on a
//! [`Tape`] from log-domain parameter nodes (positivity by construction).

use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// c_i = 1 + Σ_k α_k U²_{ik} for each row i.
fn row_scales(alpha: &[f64], u: &Tensor) -> Vec<f64> {
    let k = alpha.len();
    assert_eq!(u.shape(), &[k, k], "U must be K x K");
    (0..k)
        .map(|i| {
            let mut s = 1.0;
            for j in 0..k {
                let uij = u.at2(i, j);
                s += alpha[j] * uij * uij;
            }
            s
        })
        .collect()
}

/// KL at the empirical-Bayes optimal prior: (Q/2)·Σ_i ln(c_i/α_i).
pub fn kl_eb_vsd(alpha: &[f64], u: &Tensor, q: usize) -> f64 {
    let c = row_scales(alpha, u);
    let s: f64 = c
        .iter()
        .zip(alpha)
        .map(|(&ci, &ai)| (ci / ai).ln())
        .sum();
    (q as f64 / 2.0) * s
}

/// Diagonal-noise KL per output column: 0.5·Σ_i ln((1+α_i)/α_i).
/// Written as a ratio so the U = I case of [`kl_eb_vsd`] matches exactly.
pub fn kl_ard(alpha: &[f64]) -> f64 {
    0.5 * alpha.iter().map(|&a| ((1.0 + a) / a).ln()).sum::<f64>()
}

/// Full KL at an explicit per-weight prior precision matrix β (K×Q):
/// (1/2)·Σ_{ij} [ −ln β_ij − ln(α_i Θ²_ij) − 1 + β_ij Θ²_ij c_i ].
pub fn kl_full(alpha: &[f64], u: &Tensor, theta: &Tensor, beta: &Tensor) -> f64 {
    let k = alpha.len();
    assert_eq!(theta.shape()[0], k, "theta rows must match alpha");
    assert_eq!(theta.shape(), beta.shape(), "beta must align with theta");
    let q = theta.shape()[1];
    let c = row_scales(alpha, u);
    let mut total = 0.0;
    for i in 0..k {
        for j in 0..q {
            let t2 = theta.at2(i, j) * theta.at2(i, j);
            let b = beta.at2(i, j);
            total += -b.ln() - (alpha[i] * t2).ln() - 1.0 + b * t2 * c[i];
        }
    }
    0.5 * total
}

/// Stationary prior precisions β*_ij = 1/(Θ²_ij c_i); plugging them into
/// [`kl_full`] recovers [`kl_eb_vsd`].
pub fn empirical_bayes_beta(alpha: &[f64], u: &Tensor, theta: &Tensor) -> Tensor {
    let k = alpha.len();
    let q = theta.shape()[1];
    let c = row_scales(alpha, u);
    let mut beta = Tensor::zeros(&[k, q]);
    for i in 0..k {
        for j in 0..q {
            let t2 = theta.at2(i, j) * theta.at2(i, j);
            beta.set2(i, j, 1.0 / (t2 * c[i]));
        }
    }
    beta
}

/// KL(LogNormal(γ_i, δ_i) ‖ InvGamma(a, b)) summed over dimensions:
/// Σ_i [ lnΓ(a) − a·ln b + a·γ_i + b·e^{−γ_i+δ_i/2} − ½·ln δ_i − ½ − ½·ln 2π ].
/// δ is the variance of ln z. At γ=0, δ=1, a=b=1 this is
/// e^{1/2} − 1/2 − ln(2π)/2 ≈ 0.2297827375.
pub fn kl_lognormal_gamma(gamma: &[f64], delta: &[f64], a: f64, b: f64) -> f64 {
    assert_eq!(gamma.len(), delta.len());
    assert!(a > 0.0 && b > 0.0, "inverse-gamma prior needs a, b > 0");
    let const_term = libm::lgamma(a) - a * b.ln() - 0.5 - 0.5 * (2.0 * std::f64::consts::PI).ln();
    gamma
        .iter()
        .zip(delta)
        .map(|(&g, &d)| {
            assert!(d > 0.0, "log-variance delta must be positive");
            const_term + a * g + b * (-g + d / 2.0).exp() - 0.5 * d.ln()
        })
        .sum()
}

/// Expected structured KL under the scale latent z_i = e^{γ_i + √δ_i ε}:
/// (Q/2)·Σ_i [ e^{γ_i+δ_i/2} − γ_i − 1 + ln(c_i/α_i) ].
pub fn kl_hier_eb_expected(
    gamma: &[f64],
    delta: &[f64],
    alpha: &[f64],
    u: &Tensor,
    q: usize,
) -> f64 {
    assert_eq!(gamma.len(), alpha.len());
    assert_eq!(delta.len(), alpha.len());
    let c = row_scales(alpha, u);
    let s: f64 = (0..alpha.len())
        .map(|i| (gamma[i] + delta[i] / 2.0).exp() - gamma[i] - 1.0 + (c[i] / alpha[i]).ln())
        .sum();
    (q as f64 / 2.0) * s
}

/// Tape node for the vector c = 1 + U²·α, shape `[K, 1]`.
fn row_scales_graph(tape: &mut Tape, log_alpha: NodeId, u: NodeId) -> NodeId {
    let k = tape.value(log_alpha).numel();
    let alpha = tape.exp(log_alpha);
    let acol = tape.reshape(alpha, &[k, 1]);
    let u2 = tape.mul(u, u);
    let s = tape.matmul(u2, acol);
    tape.add_scalar(s, 1.0)
}

/// Graph twin of [`kl_eb_vsd`] from log α.
pub fn kl_eb_vsd_graph(tape: &mut Tape, log_alpha: NodeId, u: NodeId, q: usize) -> NodeId {
    let k = tape.value(log_alpha).numel();
    let c = row_scales_graph(tape, log_alpha, u);
    let lc = tape.ln(c);
    let la = tape.reshape(log_alpha, &[k, 1]);
    let diff = tape.sub(lc, la); // ln c_i − ln α_i
    let s = tape.sum(diff);
    tape.scale(s, q as f64 / 2.0)
}

/// Graph twin of [`kl_ard`] scaled by the column count Q (whole-layer KL).
pub fn kl_ard_graph(tape: &mut Tape, log_alpha: NodeId, q: usize) -> NodeId {
    let alpha = tape.exp(log_alpha);
    let ap1 = tape.add_scalar(alpha, 1.0);
    let ratio = tape.div(ap1, alpha);
    let l = tape.ln(ratio);
    let s = tape.sum(l);
    tape.scale(s, q as f64 / 2.0)
}

/// Graph twin of [`kl_lognormal_gamma`] from (γ, ln δ) nodes.
pub fn kl_lognormal_gamma_graph(
    tape: &mut Tape,
    gamma: NodeId,
    log_delta: NodeId,
    a: f64,
    b: f64,
) -> NodeId {
    let k = tape.value(gamma).numel() as f64;
    let const_term =
        libm::lgamma(a) - a * b.ln() - 0.5 - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let delta = tape.exp(log_delta);
    let half_d = tape.scale(delta, 0.5);
    let neg_g = tape.neg(gamma);
    let arg = tape.add(neg_g, half_d);
    let e = tape.exp(arg);
    let be = tape.scale(e, b);
    let ag = tape.scale(gamma, a);
    let half_ld = tape.scale(log_delta, 0.5);
    let t0 = tape.sub(be, half_ld);
    let t1 = tape.add(t0, ag);
    let s = tape.sum(t1);
    tape.add_scalar(s, k * const_term)
}

/// Graph twin of [`kl_hier_eb_expected`].
pub fn kl_hier_eb_graph(
    tape: &mut Tape,
    gamma: NodeId,
    log_delta: NodeId,
    log_alpha: NodeId,
    u: NodeId,
    q: usize,
) -> NodeId {
    let k = tape.value(log_alpha).numel();
    let c = row_scales_graph(tape, log_alpha, u);
    let lc = tape.ln(c);
    let la = tape.reshape(log_alpha, &[k, 1]);
    let lratio = tape.sub(lc, la);
    let delta = tape.exp(log_delta);
    let half_d = tape.scale(delta, 0.5);
    let gcol = tape.reshape(gamma, &[k, 1]);
    let hcol = tape.reshape(half_d, &[k, 1]);
    let arg = tape.add(gcol, hcol);
    let ez = tape.exp(arg); // e^{γ+δ/2}
    let t0 = tape.sub(ez, gcol);
    let t1 = tape.add(t0, lratio);
    let t2 = tape.add_scalar(t1, -1.0);
    let s = tape.sum(t2);
    tape.scale(s, q as f64 / 2.0)
}
