//! Curvature diagnostics: the quadratic penalty that multiplicative
//! structured noise induces on the training loss, plus spectral norms and
//! stable ranks of weight matrices.
//!
//! The probe injects noise ξ = 1 + (ε⊙√α)Uᵀ at the input of one designated
//! layer of an otherwise deterministic (mean) network. To second order the
//! expected loss increase is
//!
//!   R = (1/2n) Σᵢ tr(Jᵢᵀ H_out Jᵢ · diag(hᵢ) U diag(α) Uᵀ diag(hᵢ)),
//!
//! with hᵢ the probed activation, Jᵢ = ∂f/∂hᵢ, and H_out the Gauss–Newton
//! output Hessian (identity for squared error, diag(p) − ppᵀ for softmax
//! cross-entropy). Three algebraically identical contractions are computed
//! through different code paths so they can cross-check each other, and the
//! Monte-Carlo estimator measures the loss increase directly with antithetic
//! ±ε pairs (the pairing cancels the first-order term exactly, which
//! otherwise dominates the variance at small α).
//!
//! Caveat for ReLU networks: the quadratic form linearizes at the mean
//! activation pattern. A pre-activation within ~√α of a kink crosses it with
//! probability ∝ √α and deviates by O(√α), a systematic O(α) contribution
//! that the curvature form does not see and that antithetic pairing does not
//! cancel. MC and analytic values therefore converge to each other as α → 0
//! only where the activation pattern is stable — exactly on (deep) linear
//! networks, approximately elsewhere.

use crate::error::Error;
use crate::layers::{EvalMode, LayerNodes, NoiseSource};
use crate::model::Model;
use crate::objective::Target;
use crate::predict::softmax_rows;
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Where and with what covariance to inject multiplicative noise.
pub struct NoiseProbe<'a> {
    /// Index of the layer whose input is perturbed.
    pub layer: usize,
    /// Marginal noise variances, `[k]`, all ≥ 0.
    pub alpha: &'a Tensor,
    /// Orthogonal mixing matrix, `[k, k]`.
    pub u: &'a Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RegularizerEstimate {
    pub mc_value: f64,
    pub analytic_value: f64,
    /// Largest marginal noise variance used for the probe.
    pub noise_scale: f64,
}

/// Validate the probe and return the mean-network activation it perturbs.
fn probe_input(model: &Model, x: &Tensor, probe: &NoiseProbe) -> Result<Tensor, Error> {
    if probe.layer >= model.layers.len() {
        return Err(Error::config(format!(
            "probe layer {} out of range ({} layers)",
            probe.layer,
            model.layers.len()
        )));
    }
    let mut h = x.clone();
    for layer in &model.layers[..probe.layer] {
        h = layer.forward(&h, &mut EvalMode::Mean);
    }
    if h.shape().len() != 2 {
        return Err(Error::config(format!(
            "probe needs a flat [n, k] activation, layer {} sees {:?}",
            probe.layer,
            h.shape()
        )));
    }
    let k = h.shape()[1];
    if probe.alpha.numel() != k {
        return Err(Error::config(format!(
            "probe alpha has {} entries for a width-{k} activation",
            probe.alpha.numel()
        )));
    }
    if probe.alpha.data().iter().any(|a| !a.is_finite() || *a < 0.0) {
        return Err(Error::config("probe alpha must be finite and nonnegative"));
    }
    if probe.u.shape() != [k, k] {
        return Err(Error::config(format!(
            "probe mixing matrix must be [{k}, {k}], got {:?}",
            probe.u.shape()
        )));
    }
    Ok(h)
}

/// Mean-network forward through the layers at and after the probe.
fn rest_forward(model: &Model, layer: usize, h: &Tensor) -> Tensor {
    let mut out = h.clone();
    for l in &model.layers[layer..] {
        out = l.forward(&out, &mut EvalMode::Mean);
    }
    out
}

/// Probe loss at the network output: mean squared error ½‖f−y‖² for value
/// targets, mean softmax cross-entropy for labels.
fn probe_loss(out: &Tensor, target: &Target) -> Result<f64, Error> {
    let n = out.shape()[0];
    match target {
        Target::Values(y) => {
            if y.shape() != out.shape() {
                return Err(Error::config(format!(
                    "target shape {:?} does not match output {:?}",
                    y.shape(),
                    out.shape()
                )));
            }
            let sse: f64 = out
                .data()
                .iter()
                .zip(y.data())
                .map(|(f, t)| (f - t) * (f - t))
                .sum();
            Ok(0.5 * sse / n as f64)
        }
        Target::Labels(labels) => {
            let c = out.shape()[1];
            if labels.len() != n {
                return Err(Error::config(format!(
                    "{n} output rows but {} labels",
                    labels.len()
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
                return Err(Error::config(format!("label {bad} out of range {c}")));
            }
            let mut total = 0.0;
            for (i, &l) in labels.iter().enumerate() {
                let row = &out.data()[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                total += lse - row[l];
            }
            Ok(total / n as f64)
        }
    }
}

/// Monte-Carlo estimate of E_ξ[ℓ(f(h⊙ξ))] − ℓ(f(h)) with `pairs` antithetic
/// ±ε draws.
pub fn regularizer_mc(
    model: &Model,
    x: &Tensor,
    target: &Target,
    probe: &NoiseProbe,
    pairs: usize,
    rng: &mut Rng,
) -> Result<f64, Error> {
    if pairs == 0 {
        return Err(Error::config("regularizer_mc needs at least one pair"));
    }
    let h = probe_input(model, x, probe)?;
    let (n, k) = (h.shape()[0], h.shape()[1]);
    let base = probe_loss(&rest_forward(model, probe.layer, &h), target)?;
    let sqrt_a = probe.alpha.map(|a| a.sqrt()).reshape(&[1, k])?;
    let ut = probe.u.transpose();
    let mut acc = 0.0;
    for _ in 0..pairs {
        let eps = rng.gaussian_tensor(&[n, k]);
        let delta = eps.mul(&sqrt_a)?.matmul(&ut)?;
        let up = h.mul(&delta.add_scalar(1.0))?;
        let dn = h.mul(&delta.neg().add_scalar(1.0))?;
        let lu = probe_loss(&rest_forward(model, probe.layer, &up), target)?;
        let ld = probe_loss(&rest_forward(model, probe.layer, &dn), target)?;
        acc += 0.5 * (lu + ld);
    }
    Ok(acc / pairs as f64 - base)
}

/// Per-example Jacobians of the mean network's output with respect to the
/// probed activation, plus the mean output itself.
struct ProbeJacobians {
    /// One `[c, k]` matrix per example.
    j: Vec<Tensor>,
    /// Mean-network output, `[n, c]`.
    out: Tensor,
    /// Probed activation, `[n, k]`.
    h: Tensor,
}

fn probe_jacobians(model: &Model, x: &Tensor, probe: &NoiseProbe) -> Result<ProbeJacobians, Error> {
    let h = probe_input(model, x, probe)?;
    let (n, k) = (h.shape()[0], h.shape()[1]);
    let out = rest_forward(model, probe.layer, &h);
    if out.shape().len() != 2 || out.shape()[0] != n {
        return Err(Error::config(format!(
            "probe expects a flat [n, c] network output, got {:?}",
            out.shape()
        )));
    }
    let c = out.shape()[1];
    // One reverse sweep per output coordinate: the adjoint of hᵢ under
    // Σᵢ out[i, cc] is row cc of Jᵢ (examples do not interact). The tape is
    // single-sweep by design, so each coordinate gets a fresh graph.
    let mut j = vec![Tensor::zeros(&[c, k]); n];
    for cc in 0..c {
        let mut tape = Tape::new();
        let h_node = tape.param(h.clone());
        let rest = &model.layers[probe.layer..];
        let nodes: Vec<LayerNodes> = rest.iter().map(|l| l.register(&mut tape)).collect();
        let mut cur = h_node;
        for (l, ln) in rest.iter().zip(&nodes) {
            cur = l.forward_graph(&mut tape, ln, cur, &mut NoiseSource::Mean);
        }
        let mut mask = Tensor::zeros(&[1, c]);
        mask.data_mut()[cc] = 1.0;
        let m = tape.constant(mask);
        let picked = tape.mul(cur, m);
        let root = tape.sum(picked);
        let adj = tape.backward(root)?;
        let g = adj.expect(h_node);
        for i in 0..n {
            for kk in 0..k {
                j[i].data_mut()[cc * k + kk] = g.data()[i * k + kk];
            }
        }
    }
    Ok(ProbeJacobians { j, out, h })
}

/// Output-Hessian factor of the probe loss.
enum OutHessian {
    /// Squared error: identity.
    Identity,
    /// Softmax cross-entropy: diag(p) − ppᵀ at the mean logits, `[n, c]`.
    Softmax(Tensor),
}

fn out_hessian(out: &Tensor, target: &Target) -> Result<OutHessian, Error> {
    // Loss validation runs on the mean output once so the quadratic forms
    // can assume consistent shapes.
    probe_loss(out, target)?;
    Ok(match target {
        Target::Values(_) => OutHessian::Identity,
        Target::Labels(_) => OutHessian::Softmax(softmax_rows(out)),
    })
}

/// Gauss–Newton trace form: (1/2n) Σᵢ Σ_{ab} (JᵢᵀH_outJᵢ)_{ab} h_{ia} h_{ib}
/// (U diag(α) Uᵀ)_{ab}.
pub fn regularizer_analytic(
    model: &Model,
    x: &Tensor,
    target: &Target,
    probe: &NoiseProbe,
) -> Result<f64, Error> {
    let pj = probe_jacobians(model, x, probe)?;
    let hess = out_hessian(&pj.out, target)?;
    let k = pj.h.shape()[1];
    let n = pj.h.shape()[0];
    // Ω̃ = U diag(α) Uᵀ, formed once.
    let mut ua = probe.u.clone();
    for a in 0..k {
        for b in 0..k {
            ua.data_mut()[a * k + b] *= probe.alpha.data()[b];
        }
    }
    let omega = ua.matmul(&probe.u.transpose())?;
    let mut acc = 0.0;
    for i in 0..n {
        let g = gauss_newton(&pj.j[i], &hess, i);
        let hrow = &pj.h.data()[i * k..(i + 1) * k];
        let mut v = 0.0;
        for a in 0..k {
            for b in 0..k {
                v += g.data()[a * k + b] * hrow[a] * hrow[b] * omega.data()[a * k + b];
            }
        }
        acc += 0.5 * v;
    }
    Ok(acc / n as f64)
}

/// JᵀH_outJ for one example.
fn gauss_newton(j: &Tensor, hess: &OutHessian, row: usize) -> Tensor {
    match hess {
        OutHessian::Identity => j.transpose().matmul(j).expect("JᵀJ"),
        OutHessian::Softmax(p) => {
            let (c, k) = (j.shape()[0], j.shape()[1]);
            let prow = &p.data()[row * c..(row + 1) * c];
            // q = pᵀJ; (HJ)_c = p_c (J_c − q).
            let mut q = vec![0.0; k];
            for cc in 0..c {
                for kk in 0..k {
                    q[kk] += prow[cc] * j.data()[cc * k + kk];
                }
            }
            let mut hj = Tensor::zeros(&[c, k]);
            for cc in 0..c {
                for kk in 0..k {
                    hj.data_mut()[cc * k + kk] = prow[cc] * (j.data()[cc * k + kk] - q[kk]);
                }
            }
            j.transpose().matmul(&hj).expect("JᵀHJ")
        }
    }
}

/// Factorized form: (1/2n) Σᵢ ‖Lᵢᵀ Jᵢ diag(hᵢ) U diag(√α)‖²_F with
/// H_out = LLᵀ (L = I for squared error, (I − p1ᵀ)diag(√p) for softmax).
pub fn regularizer_tikhonov(
    model: &Model,
    x: &Tensor,
    target: &Target,
    probe: &NoiseProbe,
) -> Result<f64, Error> {
    let pj = probe_jacobians(model, x, probe)?;
    let hess = out_hessian(&pj.out, target)?;
    let (n, k) = (pj.h.shape()[0], pj.h.shape()[1]);
    let mut acc = 0.0;
    for i in 0..n {
        let j = &pj.j[i];
        let c = j.shape()[0];
        let hrow = &pj.h.data()[i * k..(i + 1) * k];
        // B = J diag(h) U diag(√α).
        let mut jh = j.clone();
        for cc in 0..c {
            for kk in 0..k {
                jh.data_mut()[cc * k + kk] *= hrow[kk];
            }
        }
        let mut b = jh.matmul(probe.u).expect("J diag(h) U");
        for cc in 0..c {
            for kk in 0..k {
                b.data_mut()[cc * k + kk] *= probe.alpha.data()[kk].sqrt();
            }
        }
        let fro2 = match &hess {
            OutHessian::Identity => b.data().iter().map(|v| v * v).sum::<f64>(),
            OutHessian::Softmax(p) => {
                // LᵀB = diag(√p)(B − 1 pᵀB).
                let prow = &p.data()[i * c..(i + 1) * c];
                let mut r = vec![0.0; k];
                for cc in 0..c {
                    for kk in 0..k {
                        r[kk] += prow[cc] * b.data()[cc * k + kk];
                    }
                }
                let mut s = 0.0;
                for cc in 0..c {
                    for kk in 0..k {
                        let v = prow[cc].sqrt() * (b.data()[cc * k + kk] - r[kk]);
                        s += v * v;
                    }
                }
                s
            }
        };
        acc += 0.5 * fro2;
    }
    Ok(acc / n as f64)
}

/// Column-sum form: (1/2n) Σᵢ Σₖ αₖ (J diag(h) u_k)ᵀ H_out (J diag(h) u_k),
/// never materializing JᵀH_outJ.
pub fn regularizer_column_sum(
    model: &Model,
    x: &Tensor,
    target: &Target,
    probe: &NoiseProbe,
) -> Result<f64, Error> {
    let pj = probe_jacobians(model, x, probe)?;
    let hess = out_hessian(&pj.out, target)?;
    let (n, k) = (pj.h.shape()[0], pj.h.shape()[1]);
    let mut acc = 0.0;
    for i in 0..n {
        let j = &pj.j[i];
        let c = j.shape()[0];
        let hrow = &pj.h.data()[i * k..(i + 1) * k];
        let mut v = 0.0;
        for col in 0..k {
            let alpha = probe.alpha.data()[col];
            if alpha == 0.0 {
                continue;
            }
            // y = J (h ⊙ u_col).
            let mut y = vec![0.0; c];
            for cc in 0..c {
                let mut s = 0.0;
                for kk in 0..k {
                    s += j.data()[cc * k + kk] * hrow[kk] * probe.u.data()[kk * k + col];
                }
                y[cc] = s;
            }
            let quad = match &hess {
                OutHessian::Identity => y.iter().map(|v| v * v).sum::<f64>(),
                OutHessian::Softmax(p) => {
                    let prow = &p.data()[i * c..(i + 1) * c];
                    let ey: f64 = prow.iter().zip(&y).map(|(p, y)| p * y).sum();
                    let ey2: f64 = prow.iter().zip(&y).map(|(p, y)| p * y * y).sum();
                    ey2 - ey * ey
                }
            };
            v += alpha * quad;
        }
        acc += 0.5 * v;
    }
    Ok(acc / n as f64)
}

/// MC and analytic estimates side by side.
pub fn regularizer_estimate(
    model: &Model,
    x: &Tensor,
    target: &Target,
    probe: &NoiseProbe,
    pairs: usize,
    rng: &mut Rng,
) -> Result<RegularizerEstimate, Error> {
    let mc_value = regularizer_mc(model, x, target, probe, pairs, rng)?;
    let analytic_value = regularizer_analytic(model, x, target, probe)?;
    if !mc_value.is_finite() || !analytic_value.is_finite() {
        return Err(Error::NonFinite {
            ctx: "regularizer estimate",
            what: format!("mc {mc_value}, analytic {analytic_value}"),
        });
    }
    Ok(RegularizerEstimate {
        mc_value,
        analytic_value,
        noise_scale: probe.alpha.data().iter().fold(0.0f64, |m, &a| m.max(a)),
    })
}

/// Largest singular value by power iteration on WᵀW. Returns 0 for the zero
/// matrix. Runs from two deterministic starts (all-ones and the basis vector
/// of the absolutely largest column) and keeps the larger estimate, so a
/// start vector orthogonal to the top singular space cannot silently return
/// a smaller singular value.
pub fn spectral_norm(w: &Tensor, iters: usize, tol: f64) -> f64 {
    assert_eq!(w.shape().len(), 2, "spectral norm wants a matrix");
    let c = w.shape()[1];
    if w.data().iter().all(|&v| v == 0.0) {
        return 0.0;
    }
    let wt = w.transpose();
    let mut jmax = 0;
    let mut vmax = 0.0f64;
    for (idx, &v) in w.data().iter().enumerate() {
        if v.abs() > vmax {
            vmax = v.abs();
            jmax = idx % c;
        }
    }
    let mut basis = Tensor::zeros(&[c, 1]);
    basis.data_mut()[jmax] = 1.0;
    let mut best = 0.0f64;
    for start in [Tensor::ones(&[c, 1]), basis] {
        let mut v = start.scale(1.0 / start.frob_norm());
        let mut sigma = 0.0f64;
        for _ in 0..iters.max(1) {
            let wv = w.matmul(&v).expect("Wv");
            let s = wv.frob_norm();
            if s == 0.0 {
                sigma = 0.0;
                break;
            }
            let next = wt.matmul(&wv).expect("WᵀWv");
            let nn = next.frob_norm();
            if nn == 0.0 {
                sigma = s;
                break;
            }
            v = next.scale(1.0 / nn);
            let done = (s - sigma).abs() <= tol * s.max(f64::MIN_POSITIVE);
            sigma = s;
            if done {
                break;
            }
        }
        best = best.max(sigma);
    }
    best
}

/// ‖W‖²_F / ‖W‖²₂ ∈ [1, min(rows, cols)].
pub fn stable_rank(w: &Tensor) -> Result<f64, Error> {
    if w.data().iter().all(|&v| v == 0.0) {
        return Err(Error::Domain {
            op: "stable_rank",
            what: "zero matrix".into(),
        });
    }
    let s = spectral_norm(w, 10_000, 1e-13);
    Ok(w.frob_norm().powi(2) / (s * s))
}
