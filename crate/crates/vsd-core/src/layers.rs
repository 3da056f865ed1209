//! Variational layers: structured multiplicative dropout plus baselines.
//!
//! Every noisy layer injects noise on its *input activations* (the dropout
//! view): a row x becomes x ⊙ ξ before the affine map. Because
//! (x ⊙ ξ)·Θ = x·(diag(ξ)·Θ), this is identical to sampling the weight matrix
//! W = diag(ξ)·Θ (the weight-space view); a test below checks the two views
//! agree to float accuracy.
//!
//! Layer variants:
//! * [`VsdDense`] / [`VsdConv`]: ξ ~ N(1, U·diag(α)·Uᵀ) with U a Householder
//!   chain. The dense layer optionally carries a per-dimension scale latent
//!   z_i = e^{γ_i + √δ_i ε} (one draw shared across the batch) multiplying ξ.
//!   Conv noise is per input channel, shared across spatial positions, which
//!   equals scaling each kernel slice.
//! * [`BaselineDense`]: MAP (no noise, weight-decay surrogate), BBB
//!   (mean-field Gaussian weights, sampled in weight space), MCD (Bernoulli
//!   dropout with inverted scaling), VD (diagonal Gaussian noise, α clamped
//!   below 1), ARD-VD (diagonal noise with the ARD closed-form KL).
//!
//! Each layer offers a pure forward for evaluation ([`Layer::forward`]) and a
//! tape forward for training ([`Layer::forward_graph`]); a test pins the two
//! paths to each other. Stochastic draws flow through [`NoiseSource`], which
//! can record and replay them so gradient checks can freeze the noise.

use serde::{Deserialize, Serialize};

use crate::householder::{sample_structured_noise, ChainNodes, HouseholderChain};
use crate::kl;
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Constants of the sigmoid fit to the diagonal log-uniform KL
/// (the standard variational-dropout approximation).
const VD_K1: f64 = 0.63576;
const VD_K2: f64 = 1.87320;
const VD_K3: f64 = 1.48695;

/// Hard upper clamp for VD droprates: α ≤ 1 − 1e-6.
pub const VD_LOG_ALPHA_MAX: f64 = -1.000_000_500_000_333_4e-6; // ln(1 - 1e-6)

/// Stochastic draws during graph building. `Record` captures every tensor so
/// `Replay` can rebuild the exact same graph at perturbed parameters. `Mean`
/// pins every draw at its expectation (ε = 0, dropout mask = 1), which turns
/// the built graph into the deterministic mean network.
pub enum NoiseSource<'a> {
    Sample(&'a mut Rng),
    Record(&'a mut Rng, &'a mut Vec<Tensor>),
    Replay(&'a [Tensor], &'a mut usize),
    Mean,
}

impl<'a> NoiseSource<'a> {
    pub fn gaussian(&mut self, shape: &[usize]) -> Tensor {
        match self {
            NoiseSource::Sample(rng) => rng.gaussian_tensor(shape),
            NoiseSource::Record(rng, log) => {
                let t = rng.gaussian_tensor(shape);
                log.push(t.clone());
                t
            }
            NoiseSource::Replay(plan, cursor) => Self::replay(plan, cursor, shape),
            NoiseSource::Mean => Tensor::zeros(shape),
        }
    }

    /// Inverted-dropout mask: entries are 0 with probability p, else 1/(1−p).
    pub fn dropout_mask(&mut self, shape: &[usize], p: f64) -> Tensor {
        assert!((0.0..1.0).contains(&p), "dropout rate must be in [0,1)");
        let draw = |rng: &mut Rng| {
            let keep = 1.0 - p;
            let mut t = Tensor::zeros(shape);
            for v in t.data_mut() {
                *v = if rng.next_f64() < keep { 1.0 / keep } else { 0.0 };
            }
            t
        };
        match self {
            NoiseSource::Sample(rng) => draw(rng),
            NoiseSource::Record(rng, log) => {
                let t = draw(rng);
                log.push(t.clone());
                t
            }
            NoiseSource::Replay(plan, cursor) => Self::replay(plan, cursor, shape),
            NoiseSource::Mean => Tensor::ones(shape),
        }
    }

    fn replay(plan: &[Tensor], cursor: &mut usize, shape: &[usize]) -> Tensor {
        let t = plan
            .get(*cursor)
            .unwrap_or_else(|| panic!("replay plan exhausted at draw {cursor}"))
            .clone();
        assert_eq!(t.shape(), shape, "replayed draw has wrong shape");
        *cursor += 1;
        t
    }
}

/// Pure-forward mode: deterministic mean pass or one stochastic pass.
pub enum EvalMode<'a> {
    /// ξ = 1 (and z = e^γ for the hierarchical variant): the deterministic
    /// shortcut. Prediction never uses this for Bayesian variants; it exists
    /// for point evaluation and the α → 0 identity.
    Mean,
    Sample(&'a mut Rng),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HierScale {
    /// Mean of ln z, `[K]`.
    pub gamma: Tensor,
    /// ln of the variance of ln z, `[K]`.
    pub log_delta: Tensor,
    /// Inverse-gamma prior shape.
    pub a: f64,
    /// Inverse-gamma prior rate.
    pub b: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VsdDense {
    pub theta: Tensor,     // [K, Q]
    pub bias: Tensor,      // [Q]
    pub log_alpha: Tensor, // [K]
    pub chain: HouseholderChain,
    pub hier: Option<HierScale>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum BaselineVariant {
    Map {
        length_scale: f64,
    },
    Bbb {
        log_sigma: Tensor, // [K, Q]
        prior_sigma: f64,
    },
    Mcd {
        p: f64,
        length_scale: f64,
    },
    Vd {
        log_alpha: Tensor, // [K]
    },
    ArdVd {
        log_alpha: Tensor, // [K]
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineDense {
    pub theta: Tensor, // [K, Q]; the posterior mean for BBB
    pub bias: Tensor,  // [Q]
    pub variant: BaselineVariant,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VsdConv {
    pub kernel: Tensor,    // [co, ci, kh, kw]
    pub bias: Tensor,      // [co]
    pub log_alpha: Tensor, // [ci]
    pub chain: HouseholderChain,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Layer {
    VsdDense(VsdDense),
    BaselineDense(BaselineDense),
    VsdConv(VsdConv),
    Relu,
    Flatten,
    MaxPool2,
    AvgPool2,
}

/// Tape handles for one layer's parameters (empty for stateless layers).
pub enum LayerNodes {
    VsdDense {
        theta: NodeId,
        bias: NodeId,
        log_alpha: NodeId,
        chain: ChainNodes,
        hier: Option<(NodeId, NodeId)>, // (gamma, log_delta)
    },
    BaselineDense {
        theta: NodeId,
        bias: NodeId,
        extra: Option<NodeId>, // log_sigma (BBB) or log_alpha (VD family)
    },
    VsdConv {
        kernel: NodeId,
        bias: NodeId,
        log_alpha: NodeId,
        chain: ChainNodes,
    },
    Stateless,
}

impl Layer {
    /// Pure forward pass.
    pub fn forward(&self, x: &Tensor, mode: &mut EvalMode) -> Tensor {
        match self {
            Layer::VsdDense(l) => l.forward(x, mode),
            Layer::BaselineDense(l) => l.forward(x, mode),
            Layer::VsdConv(l) => l.forward(x, mode),
            Layer::Relu => x.relu(),
            Layer::Flatten => {
                let n = x.shape()[0];
                let rest: usize = x.shape()[1..].iter().product();
                x.reshape(&[n, rest]).expect("flatten")
            }
            Layer::MaxPool2 => pool2(x, true),
            Layer::AvgPool2 => pool2(x, false),
        }
    }

    /// Register parameters (and the chain's U) on the tape.
    pub fn register(&self, tape: &mut Tape) -> LayerNodes {
        match self {
            Layer::VsdDense(l) => LayerNodes::VsdDense {
                theta: tape.param(l.theta.clone()),
                bias: tape.param(l.bias.clone()),
                log_alpha: tape.param(l.log_alpha.clone()),
                chain: l.chain.register(tape),
                hier: l.hier.as_ref().map(|h| {
                    (tape.param(h.gamma.clone()), tape.param(h.log_delta.clone()))
                }),
            },
            Layer::BaselineDense(l) => LayerNodes::BaselineDense {
                theta: tape.param(l.theta.clone()),
                bias: tape.param(l.bias.clone()),
                extra: match &l.variant {
                    BaselineVariant::Bbb { log_sigma, .. } => Some(tape.param(log_sigma.clone())),
                    BaselineVariant::Vd { log_alpha } | BaselineVariant::ArdVd { log_alpha } => {
                        Some(tape.param(log_alpha.clone()))
                    }
                    _ => None,
                },
            },
            Layer::VsdConv(l) => LayerNodes::VsdConv {
                kernel: tape.param(l.kernel.clone()),
                bias: tape.param(l.bias.clone()),
                log_alpha: tape.param(l.log_alpha.clone()),
                chain: l.chain.register(tape),
            },
            _ => LayerNodes::Stateless,
        }
    }

    /// Training forward pass on the tape. One call is one stochastic draw.
    pub fn forward_graph(
        &self,
        tape: &mut Tape,
        nodes: &LayerNodes,
        x: NodeId,
        noise: &mut NoiseSource,
    ) -> NodeId {
        match (self, nodes) {
            (Layer::VsdDense(l), LayerNodes::VsdDense { theta, bias, log_alpha, chain, hier }) => {
                l.forward_graph(tape, *theta, *bias, *log_alpha, chain, *hier, x, noise)
            }
            (Layer::BaselineDense(l), LayerNodes::BaselineDense { theta, bias, extra }) => {
                l.forward_graph(tape, *theta, *bias, *extra, x, noise)
            }
            (Layer::VsdConv(l), LayerNodes::VsdConv { kernel, bias, log_alpha, chain }) => {
                l.forward_graph(tape, *kernel, *bias, *log_alpha, chain, x, noise)
            }
            (Layer::Relu, _) => tape.relu(x),
            (Layer::Flatten, _) => {
                let sh = tape.value(x).shape().to_vec();
                let rest: usize = sh[1..].iter().product();
                tape.reshape(x, &[sh[0], rest])
            }
            (Layer::MaxPool2, _) => tape.max_pool2(x),
            (Layer::AvgPool2, _) => tape.avg_pool2(x),
            _ => unreachable!("layer/nodes mismatch"),
        }
    }

    /// KL between the layer posterior and its prior (weight-decay surrogate
    /// for MAP/MCD). `None` for stateless layers.
    pub fn kl_graph(&self, tape: &mut Tape, nodes: &LayerNodes) -> Option<NodeId> {
        match (self, nodes) {
            (Layer::VsdDense(l), LayerNodes::VsdDense { theta: _, log_alpha, chain, hier, .. }) => {
                let q = l.theta.shape()[1];
                Some(match hier {
                    None => kl::kl_eb_vsd_graph(tape, *log_alpha, chain.u, q),
                    Some((gamma, log_delta)) => {
                        kl::kl_hier_eb_graph(tape, *gamma, *log_delta, *log_alpha, chain.u, q)
                    }
                })
            }
            (Layer::BaselineDense(l), LayerNodes::BaselineDense { theta, extra, .. }) => {
                let q = l.theta.shape()[1];
                Some(match &l.variant {
                    BaselineVariant::Map { length_scale }
                    | BaselineVariant::Mcd { length_scale, .. } => {
                        let sq = tape.mul(*theta, *theta);
                        let s = tape.sum(sq);
                        tape.scale(s, length_scale * length_scale / 2.0)
                    }
                    BaselineVariant::Bbb { prior_sigma, .. } => {
                        let log_sigma = extra.expect("bbb log_sigma");
                        bbb_kl_graph(tape, *theta, log_sigma, *prior_sigma)
                    }
                    BaselineVariant::Vd { .. } => {
                        let log_alpha = extra.expect("vd log_alpha");
                        vd_kl_graph(tape, log_alpha, q)
                    }
                    BaselineVariant::ArdVd { .. } => {
                        let log_alpha = extra.expect("ard log_alpha");
                        kl::kl_ard_graph(tape, log_alpha, q)
                    }
                })
            }
            (Layer::VsdConv(l), LayerNodes::VsdConv { log_alpha, chain, .. }) => {
                let q = l.kernel.shape()[0] * l.kernel.shape()[2] * l.kernel.shape()[3];
                Some(kl::kl_eb_vsd_graph(tape, *log_alpha, chain.u, q))
            }
            _ => None,
        }
    }

    /// KL of a hierarchical layer's scale latent against its inverse-gamma
    /// prior; accounted separately from [`Layer::kl_graph`] in the objective.
    pub fn scale_prior_kl_graph(&self, tape: &mut Tape, nodes: &LayerNodes) -> Option<NodeId> {
        match (self, nodes) {
            (Layer::VsdDense(l), LayerNodes::VsdDense { hier: Some((g, ld)), .. }) => {
                let h = l.hier.as_ref().unwrap();
                Some(kl::kl_lognormal_gamma_graph(tape, *g, *ld, h.a, h.b))
            }
            _ => None,
        }
    }

    /// Pure value of [`Layer::kl_graph`].
    pub fn kl_value(&self) -> f64 {
        match self {
            Layer::VsdDense(l) => {
                let q = l.theta.shape()[1];
                let alpha: Vec<f64> = l.log_alpha.data().iter().map(|v| v.exp()).collect();
                let u = l.chain.matrix();
                match &l.hier {
                    None => kl::kl_eb_vsd(&alpha, &u, q),
                    Some(h) => {
                        let delta: Vec<f64> = h.log_delta.data().iter().map(|v| v.exp()).collect();
                        kl::kl_hier_eb_expected(h.gamma.data(), &delta, &alpha, &u, q)
                    }
                }
            }
            Layer::BaselineDense(l) => {
                let q = l.theta.shape()[1];
                match &l.variant {
                    BaselineVariant::Map { length_scale }
                    | BaselineVariant::Mcd { length_scale, .. } => {
                        let ssq: f64 = l.theta.data().iter().map(|v| v * v).sum();
                        length_scale * length_scale / 2.0 * ssq
                    }
                    BaselineVariant::Bbb { log_sigma, prior_sigma } => {
                        bbb_kl_value(&l.theta, log_sigma, *prior_sigma)
                    }
                    BaselineVariant::Vd { log_alpha } => vd_kl_value(log_alpha, q),
                    BaselineVariant::ArdVd { log_alpha } => {
                        let alpha: Vec<f64> = log_alpha.data().iter().map(|v| v.exp()).collect();
                        q as f64 * kl::kl_ard(&alpha)
                    }
                }
            }
            Layer::VsdConv(l) => {
                let q = l.kernel.shape()[0] * l.kernel.shape()[2] * l.kernel.shape()[3];
                let alpha: Vec<f64> = l.log_alpha.data().iter().map(|v| v.exp()).collect();
                kl::kl_eb_vsd(&alpha, &l.chain.matrix(), q)
            }
            _ => 0.0,
        }
    }

    /// Pure value of [`Layer::scale_prior_kl_graph`].
    pub fn scale_prior_kl_value(&self) -> f64 {
        match self {
            Layer::VsdDense(VsdDense { hier: Some(h), .. }) => {
                let delta: Vec<f64> = h.log_delta.data().iter().map(|v| v.exp()).collect();
                kl::kl_lognormal_gamma(h.gamma.data(), &delta, h.a, h.b)
            }
            _ => 0.0,
        }
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        match self {
            Layer::VsdDense(l) => {
                out.push(("theta".into(), &l.theta));
                out.push(("bias".into(), &l.bias));
                out.push(("log_alpha".into(), &l.log_alpha));
                for (n, t) in l.chain.params() {
                    out.push((n.into(), t));
                }
                if let Some(h) = &l.hier {
                    out.push(("gamma".into(), &h.gamma));
                    out.push(("log_delta".into(), &h.log_delta));
                }
            }
            Layer::BaselineDense(l) => {
                out.push(("theta".into(), &l.theta));
                out.push(("bias".into(), &l.bias));
                match &l.variant {
                    BaselineVariant::Bbb { log_sigma, .. } => {
                        out.push(("log_sigma".into(), log_sigma))
                    }
                    BaselineVariant::Vd { log_alpha } | BaselineVariant::ArdVd { log_alpha } => {
                        out.push(("log_alpha".into(), log_alpha))
                    }
                    _ => {}
                }
            }
            Layer::VsdConv(l) => {
                out.push(("kernel".into(), &l.kernel));
                out.push(("bias".into(), &l.bias));
                out.push(("log_alpha".into(), &l.log_alpha));
                for (n, t) in l.chain.params() {
                    out.push((n.into(), t));
                }
            }
            _ => {}
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        match self {
            Layer::VsdDense(l) => {
                out.push(("theta".into(), &mut l.theta));
                out.push(("bias".into(), &mut l.bias));
                out.push(("log_alpha".into(), &mut l.log_alpha));
                for (n, t) in l.chain.params_mut() {
                    out.push((n.into(), t));
                }
                if let Some(h) = &mut l.hier {
                    out.push(("gamma".into(), &mut h.gamma));
                    out.push(("log_delta".into(), &mut h.log_delta));
                }
            }
            Layer::BaselineDense(l) => {
                out.push(("theta".into(), &mut l.theta));
                out.push(("bias".into(), &mut l.bias));
                match &mut l.variant {
                    BaselineVariant::Bbb { log_sigma, .. } => {
                        out.push(("log_sigma".into(), log_sigma))
                    }
                    BaselineVariant::Vd { log_alpha } | BaselineVariant::ArdVd { log_alpha } => {
                        out.push(("log_alpha".into(), log_alpha))
                    }
                    _ => {}
                }
            }
            Layer::VsdConv(l) => {
                out.push(("kernel".into(), &mut l.kernel));
                out.push(("bias".into(), &mut l.bias));
                out.push(("log_alpha".into(), &mut l.log_alpha));
                for (n, t) in l.chain.params_mut() {
                    out.push((n.into(), t));
                }
            }
            _ => {}
        }
        out
    }

    /// (name, node) pairs aligned with [`Layer::params_mut`] order.
    pub fn bindings(&self, nodes: &LayerNodes) -> Vec<(String, NodeId)> {
        let mut out: Vec<(String, NodeId)> = Vec::new();
        match (self, nodes) {
            (Layer::VsdDense(l), LayerNodes::VsdDense { theta, bias, log_alpha, chain, hier }) => {
                out.push(("theta".into(), *theta));
                out.push(("bias".into(), *bias));
                out.push(("log_alpha".into(), *log_alpha));
                for (n, id) in l.chain.bindings(chain) {
                    out.push((n.into(), id));
                }
                if let Some((g, d)) = hier {
                    out.push(("gamma".into(), *g));
                    out.push(("log_delta".into(), *d));
                }
            }
            (Layer::BaselineDense(l), LayerNodes::BaselineDense { theta, bias, extra }) => {
                out.push(("theta".into(), *theta));
                out.push(("bias".into(), *bias));
                match &l.variant {
                    BaselineVariant::Bbb { .. } => {
                        out.push(("log_sigma".into(), extra.expect("bbb")))
                    }
                    BaselineVariant::Vd { .. } | BaselineVariant::ArdVd { .. } => {
                        out.push(("log_alpha".into(), extra.expect("vd")))
                    }
                    _ => {}
                }
            }
            (Layer::VsdConv(l), LayerNodes::VsdConv { kernel, bias, log_alpha, chain }) => {
                out.push(("kernel".into(), *kernel));
                out.push(("bias".into(), *bias));
                out.push(("log_alpha".into(), *log_alpha));
                for (n, id) in l.chain.bindings(chain) {
                    out.push((n.into(), id));
                }
            }
            _ => {}
        }
        out
    }

    /// Post-step projection: VD droprates are clamped to α < 1.
    pub fn project(&mut self) {
        if let Layer::BaselineDense(BaselineDense {
            variant: BaselineVariant::Vd { log_alpha },
            ..
        }) = self
        {
            for v in log_alpha.data_mut() {
                if *v > VD_LOG_ALPHA_MAX {
                    *v = VD_LOG_ALPHA_MAX;
                }
            }
        }
    }
}

impl VsdDense {
    fn forward(&self, x: &Tensor, mode: &mut EvalMode) -> Tensor {
        let k = self.theta.shape()[0];
        match mode {
            EvalMode::Mean => {
                let xin = match &self.hier {
                    None => x.clone(),
                    // Deterministic shortcut pins z at its δ → 0 limit e^γ.
                    Some(h) => {
                        let z = h.gamma.exp().reshape(&[1, k]).unwrap();
                        x.mul(&z).unwrap()
                    }
                };
                xin.matmul(&self.theta)
                    .expect("dense shapes")
                    .add(&self.bias)
                    .unwrap()
            }
            EvalMode::Sample(rng) => {
                let n = x.shape()[0];
                let alpha = self.log_alpha.exp();
                let u = self.chain.matrix();
                let mut xi = sample_structured_noise(&u, &alpha, n, rng);
                if let Some(h) = &self.hier {
                    let z = sample_scale(h, rng);
                    xi = xi.mul(&z.reshape(&[1, k]).unwrap()).unwrap();
                }
                let noisy = x.mul(&xi).expect("noise shape");
                noisy
                    .matmul(&self.theta)
                    .unwrap()
                    .add(&self.bias)
                    .unwrap()
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward_graph(
        &self,
        tape: &mut Tape,
        theta: NodeId,
        bias: NodeId,
        log_alpha: NodeId,
        chain: &ChainNodes,
        hier: Option<(NodeId, NodeId)>,
        x: NodeId,
        noise: &mut NoiseSource,
    ) -> NodeId {
        let n = tape.value(x).shape()[0];
        let k = self.theta.shape()[0];
        let eps = noise.gaussian(&[n, k]);
        let epsn = tape.constant(eps);
        let half_la = tape.scale(log_alpha, 0.5);
        let sqrt_a = tape.exp(half_la);
        let sqrt_a_row = tape.reshape(sqrt_a, &[1, k]);
        let scaled = tape.mul(epsn, sqrt_a_row);
        let ut = tape.transpose(chain.u);
        let rot = tape.matmul(scaled, ut);
        let mut xi = tape.add_scalar(rot, 1.0);
        if let Some((gamma, log_delta)) = hier {
            let eps_z = noise.gaussian(&[1, k]);
            let ez = tape.constant(eps_z);
            let half_ld = tape.scale(log_delta, 0.5);
            let sqrt_d = tape.exp(half_ld);
            let sqrt_d_row = tape.reshape(sqrt_d, &[1, k]);
            let spread = tape.mul(sqrt_d_row, ez);
            let g_row = tape.reshape(gamma, &[1, k]);
            let arg = tape.add(g_row, spread);
            let z = tape.exp(arg);
            xi = tape.mul(xi, z);
        }
        let noisy = tape.mul(x, xi);
        let y = tape.matmul(noisy, theta);
        tape.add(y, bias)
    }
}

/// One draw of the scale latent z = e^{γ + √δ ε}, shape `[K]`.
fn sample_scale(h: &HierScale, rng: &mut Rng) -> Tensor {
    let k = h.gamma.numel();
    let mut z = Tensor::zeros(&[k]);
    for i in 0..k {
        let sd = (0.5 * h.log_delta.data()[i]).exp();
        z.data_mut()[i] = (h.gamma.data()[i] + sd * rng.next_gaussian()).exp();
    }
    z
}

impl BaselineDense {
    fn forward(&self, x: &Tensor, mode: &mut EvalMode) -> Tensor {
        let k = self.theta.shape()[0];
        let deterministic = |x: &Tensor| {
            x.matmul(&self.theta)
                .expect("dense shapes")
                .add(&self.bias)
                .unwrap()
        };
        match (mode, &self.variant) {
            (EvalMode::Mean, _) | (_, BaselineVariant::Map { .. }) => deterministic(x),
            (EvalMode::Sample(rng), BaselineVariant::Bbb { log_sigma, .. }) => {
                let eps = rng.gaussian_tensor(self.theta.shape());
                let w = self
                    .theta
                    .add(&log_sigma.exp().mul(&eps).unwrap())
                    .unwrap();
                x.matmul(&w).unwrap().add(&self.bias).unwrap()
            }
            (EvalMode::Sample(rng), BaselineVariant::Mcd { p, .. }) => {
                let keep = 1.0 - p;
                let mask = Tensor::zeros(&[x.shape()[0], k]).map(|_| {
                    if rng.next_f64() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                deterministic(&x.mul(&mask).unwrap())
            }
            (EvalMode::Sample(rng), BaselineVariant::Vd { log_alpha })
            | (EvalMode::Sample(rng), BaselineVariant::ArdVd { log_alpha }) => {
                let n = x.shape()[0];
                let sqrt_a = log_alpha.map(|v| (0.5 * v).exp()).reshape(&[1, k]).unwrap();
                let eps = rng.gaussian_tensor(&[n, k]);
                let xi = eps.mul(&sqrt_a).unwrap().add_scalar(1.0);
                deterministic(&x.mul(&xi).unwrap())
            }
        }
    }

    fn forward_graph(
        &self,
        tape: &mut Tape,
        theta: NodeId,
        bias: NodeId,
        extra: Option<NodeId>,
        x: NodeId,
        noise: &mut NoiseSource,
    ) -> NodeId {
        let n = tape.value(x).shape()[0];
        let k = self.theta.shape()[0];
        match &self.variant {
            BaselineVariant::Map { .. } => {
                let y = tape.matmul(x, theta);
                tape.add(y, bias)
            }
            BaselineVariant::Bbb { .. } => {
                let log_sigma = extra.expect("bbb log_sigma");
                let eps = noise.gaussian(self.theta.shape());
                let epsn = tape.constant(eps);
                let sigma = tape.exp(log_sigma);
                let dw = tape.mul(sigma, epsn);
                let w = tape.add(theta, dw);
                let y = tape.matmul(x, w);
                tape.add(y, bias)
            }
            BaselineVariant::Mcd { p, .. } => {
                let mask = noise.dropout_mask(&[n, k], *p);
                let m = tape.constant(mask);
                let mx = tape.mul(x, m);
                let y = tape.matmul(mx, theta);
                tape.add(y, bias)
            }
            BaselineVariant::Vd { .. } | BaselineVariant::ArdVd { .. } => {
                let log_alpha = extra.expect("vd log_alpha");
                let eps = noise.gaussian(&[n, k]);
                let epsn = tape.constant(eps);
                let half_la = tape.scale(log_alpha, 0.5);
                let sqrt_a = tape.exp(half_la);
                let sqrt_a_row = tape.reshape(sqrt_a, &[1, k]);
                let spread = tape.mul(epsn, sqrt_a_row);
                let xi = tape.add_scalar(spread, 1.0);
                let mx = tape.mul(x, xi);
                let y = tape.matmul(mx, theta);
                tape.add(y, bias)
            }
        }
    }
}

/// Mean-field Gaussian-vs-Gaussian KL: Σ [ ln(σp/σ) + (σ² + μ²)/(2σp²) − ½ ].
fn bbb_kl_value(mu: &Tensor, log_sigma: &Tensor, prior_sigma: f64) -> f64 {
    let lp = prior_sigma.ln();
    mu.data()
        .iter()
        .zip(log_sigma.data())
        .map(|(&m, &ls)| {
            let s2 = (2.0 * ls).exp();
            lp - ls + (s2 + m * m) / (2.0 * prior_sigma * prior_sigma) - 0.5
        })
        .sum()
}

fn bbb_kl_graph(tape: &mut Tape, mu: NodeId, log_sigma: NodeId, prior_sigma: f64) -> NodeId {
    let two_ls = tape.scale(log_sigma, 2.0);
    let s2 = tape.exp(two_ls);
    let mu2 = tape.mul(mu, mu);
    let num = tape.add(s2, mu2);
    let scaled = tape.scale(num, 1.0 / (2.0 * prior_sigma * prior_sigma));
    let t = tape.sub(scaled, log_sigma);
    let shifted = tape.add_scalar(t, prior_sigma.ln() - 0.5);
    tape.sum(shifted)
}

/// Sigmoid-fit approximation of the diagonal log-uniform KL, per input
/// dimension, times the Q output columns sharing the noise:
/// KL ≈ Q · Σ_i [ k1 − k1·sigmoid(k2 + k3·ln α_i) + ½·ln(1 + 1/α_i) ].
fn vd_kl_value(log_alpha: &Tensor, q: usize) -> f64 {
    let s: f64 = log_alpha
        .data()
        .iter()
        .map(|&la| {
            let a = la.exp();
            let sig = 1.0 / (1.0 + (-(VD_K2 + VD_K3 * la)).exp());
            VD_K1 - VD_K1 * sig + 0.5 * ((1.0 + a) / a).ln()
        })
        .sum();
    q as f64 * s
}

fn vd_kl_graph(tape: &mut Tape, log_alpha: NodeId, q: usize) -> NodeId {
    let k = tape.value(log_alpha).numel();
    let scaled_la = tape.scale(log_alpha, VD_K3);
    let arg = tape.add_scalar(scaled_la, VD_K2);
    let neg = tape.neg(arg);
    let e = tape.exp(neg);
    let denom = tape.add_scalar(e, 1.0);
    let ones = tape.constant(Tensor::ones(&[k]));
    let sig = tape.div(ones, denom);
    let ksig = tape.scale(sig, -VD_K1);
    let alpha = tape.exp(log_alpha);
    let ap1 = tape.add_scalar(alpha, 1.0);
    let ratio = tape.div(ap1, alpha);
    let lr = tape.ln(ratio);
    let half_lr = tape.scale(lr, 0.5);
    let t0 = tape.add(ksig, half_lr);
    let t1 = tape.add_scalar(t0, VD_K1);
    let s = tape.sum(t1);
    tape.scale(s, q as f64)
}

/// Pure 2x2/stride-2 pooling (max or average), `[n,c,h,w]` with even h, w.
fn pool2(x: &Tensor, max: bool) -> Tensor {
    let sh = x.shape();
    assert_eq!(sh.len(), 4, "pool wants [n,c,h,w]");
    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    assert!(h % 2 == 0 && w % 2 == 0, "pool wants even h, w");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for img in 0..n * c {
        let base = img * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut vals = [0.0; 4];
                for dy in 0..2 {
                    for dx in 0..2 {
                        vals[dy * 2 + dx] = x.data()[base + (2 * oy + dy) * w + 2 * ox + dx];
                    }
                }
                let v = if max {
                    vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                } else {
                    vals.iter().sum::<f64>() * 0.25
                };
                out.data_mut()[(img * oh + oy) * ow + ox] = v;
            }
        }
    }
    out
}

/// Convolution geometry and gather-index builders shared by the pure and the
/// tape paths (one index table means the two paths cannot disagree).
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self, crate::error::Error> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(crate::error::Error::config(format!(
                "conv wants 4-d input and kernel, got {input:?} / {kernel:?}"
            )));
        }
        let (n, ci, h, w) = (input[0], input[1], input[2], input[3]);
        let (kh, kw) = (kernel[2], kernel[3]);
        if kernel[1] != ci {
            return Err(crate::error::Error::config(format!(
                "kernel expects {} input channels, input has {ci}",
                kernel[1]
            )));
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(crate::error::Error::config(
                "kernel larger than padded input or zero stride",
            ));
        }
        if (h + 2 * pad - kh) % stride != 0 || (w + 2 * pad - kw) % stride != 0 {
            return Err(crate::error::Error::config(
                "conv geometry does not tile: (size + 2*pad - kernel) % stride != 0",
            ));
        }
        Ok(ConvGeom {
            n,
            ci,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Index table turning `[n,ci,h,w]` into patch rows
    /// `[n*oh*ow, ci*kh*kw]`; out-of-bounds (padding) entries read zero.
    pub fn im2col_index(&self) -> Vec<usize> {
        let g = *self;
        let mut idx = Vec::with_capacity(g.n * g.oh * g.ow * g.ci * g.kh * g.kw);
        for ni in 0..g.n {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    for ci in 0..g.ci {
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let y = (oy * g.stride + ky) as isize - g.pad as isize;
                                let x = (ox * g.stride + kx) as isize - g.pad as isize;
                                if y < 0 || x < 0 || y >= g.h as isize || x >= g.w as isize {
                                    idx.push(usize::MAX);
                                } else {
                                    idx.push(
                                        ((ni * g.ci + ci) * g.h + y as usize) * g.w + x as usize,
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
        idx
    }

    /// Index table permuting matmul output `[n*oh*ow, co]` to `[n,co,oh,ow]`.
    pub fn out_permute_index(&self, co: usize) -> Vec<usize> {
        let g = *self;
        let mut idx = Vec::with_capacity(g.n * co * g.oh * g.ow);
        for ni in 0..g.n {
            for c in 0..co {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        idx.push(((ni * g.oh + oy) * g.ow + ox) * co + c);
                    }
                }
            }
        }
        idx
    }
}

/// Pure gather with the same semantics as the tape op.
pub fn pure_gather(src: &Tensor, index: &[usize], shape: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(shape);
    for (o, &s) in index.iter().enumerate() {
        out.data_mut()[o] = if s == usize::MAX { 0.0 } else { src.data()[s] };
    }
    out
}

impl VsdConv {
    fn geom(&self, input: &[usize]) -> ConvGeom {
        ConvGeom::new(input, self.kernel.shape(), self.stride, self.pad)
            .expect("conv geometry validated at model build")
    }

    fn forward(&self, x: &Tensor, mode: &mut EvalMode) -> Tensor {
        let noisy = match mode {
            EvalMode::Mean => x.clone(),
            EvalMode::Sample(rng) => {
                let n = x.shape()[0];
                let ci = x.shape()[1];
                let alpha = self.log_alpha.exp();
                let u = self.chain.matrix();
                let xi = sample_structured_noise(&u, &alpha, n, rng);
                x.mul(&xi.reshape(&[n, ci, 1, 1]).unwrap()).unwrap()
            }
        };
        let g = self.geom(x.shape());
        let co = self.kernel.shape()[0];
        let cols = pure_gather(
            &noisy,
            &g.im2col_index(),
            &[g.n * g.oh * g.ow, g.ci * g.kh * g.kw],
        );
        let w2d = self
            .kernel
            .reshape(&[co, g.ci * g.kh * g.kw])
            .unwrap()
            .transpose();
        let out = cols.matmul(&w2d).unwrap().add(&self.bias).unwrap();
        pure_gather(&out, &g.out_permute_index(co), &[g.n, co, g.oh, g.ow])
    }

    #[allow(clippy::too_many_arguments)]
    fn forward_graph(
        &self,
        tape: &mut Tape,
        kernel: NodeId,
        bias: NodeId,
        log_alpha: NodeId,
        chain: &ChainNodes,
        x: NodeId,
        noise: &mut NoiseSource,
    ) -> NodeId {
        let in_shape = tape.value(x).shape().to_vec();
        let (n, ci) = (in_shape[0], in_shape[1]);
        let eps = noise.gaussian(&[n, ci]);
        let epsn = tape.constant(eps);
        let half_la = tape.scale(log_alpha, 0.5);
        let sqrt_a = tape.exp(half_la);
        let sqrt_a_row = tape.reshape(sqrt_a, &[1, ci]);
        let scaled = tape.mul(epsn, sqrt_a_row);
        let ut = tape.transpose(chain.u);
        let rot = tape.matmul(scaled, ut);
        let xi = tape.add_scalar(rot, 1.0);
        let xi4 = tape.reshape(xi, &[n, ci, 1, 1]);
        let noisy = tape.mul(x, xi4);

        let g = self.geom(&in_shape);
        let co = self.kernel.shape()[0];
        let cols = tape.gather(
            noisy,
            g.im2col_index(),
            &[g.n * g.oh * g.ow, g.ci * g.kh * g.kw],
        );
        let w2d = tape.reshape(kernel, &[co, g.ci * g.kh * g.kw]);
        let wt = tape.transpose(w2d);
        let out = tape.matmul(cols, wt);
        let out = tape.add(out, bias);
        tape.gather(out, g.out_permute_index(co), &[g.n, co, g.oh, g.ow])
    }
}
