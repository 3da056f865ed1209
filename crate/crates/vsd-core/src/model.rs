//! A model is an ordered layer stack plus an output likelihood.
//!
//! Parameters live inside the layers as plain tensors. For a training step the
//! model is registered on a fresh tape ([`Model::register`]), which creates one
//! leaf per parameter and materializes each Householder chain's U exactly once;
//! repeated stochastic forward passes ([`Model::forward_graph`]) then reuse
//! those nodes, so Monte Carlo averaging never duplicates parameter state.
//!
//! [`Model::params_mut`], [`Model::params`], and [`Model::bindings`] all walk
//! layers in the same order and produce identically named slots; the optimizer
//! pairs adjoints with parameters purely by this shared order (a test pins the
//! alignment). Names are `layers.<index>.<local>` plus `log_precision` for a
//! learnable Gaussian observation noise.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::layers::{
    BaselineDense, BaselineVariant, ConvGeom, EvalMode, HierScale, Layer, LayerNodes, NoiseSource,
    VsdConv, VsdDense,
};
use crate::householder::HouseholderChain;
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Initial ln δ for hierarchical scale latents: the posterior over z starts
/// nearly deterministic at e^γ = 1.
pub const INIT_LOG_DELTA: f64 = -6.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Likelihood {
    /// Softmax over `classes` logits.
    Categorical { classes: usize },
    /// y ~ N(f(x), 1/τ) with τ = exp(log_precision), optionally learned.
    Gaussian {
        log_precision: Tensor, // scalar
        learn_precision: bool,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub layers: Vec<Layer>,
    pub likelihood: Likelihood,
}

/// Tape handles produced by [`Model::register`].
pub struct ModelNodes {
    pub layers: Vec<LayerNodes>,
    /// Present for Gaussian likelihoods; a constant leaf when the precision
    /// is fixed, a parameter leaf when it is learned.
    pub log_precision: Option<NodeId>,
}

impl Model {
    /// Pure forward pass through every layer.
    pub fn forward(&self, x: &Tensor, mode: &mut EvalMode) -> Tensor {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h, mode);
        }
        h
    }

    pub fn register(&self, tape: &mut Tape) -> ModelNodes {
        let layers = self.layers.iter().map(|l| l.register(tape)).collect();
        let log_precision = match &self.likelihood {
            Likelihood::Categorical { .. } => None,
            Likelihood::Gaussian {
                log_precision,
                learn_precision,
            } => Some(if *learn_precision {
                tape.param(log_precision.clone())
            } else {
                tape.constant(log_precision.clone())
            }),
        };
        ModelNodes {
            layers,
            log_precision,
        }
    }

    /// One stochastic forward pass on the tape (one fresh noise draw per
    /// noisy layer). Call repeatedly on the same `nodes` for MC samples.
    pub fn forward_graph(
        &self,
        tape: &mut Tape,
        nodes: &ModelNodes,
        x: NodeId,
        noise: &mut NoiseSource,
    ) -> NodeId {
        let mut h = x;
        for (layer, ln) in self.layers.iter().zip(&nodes.layers) {
            h = layer.forward_graph(tape, ln, h, noise);
        }
        h
    }

    /// Total KL of all layers (including hierarchical scale priors).
    pub fn kl_total_graph(&self, tape: &mut Tape, nodes: &ModelNodes) -> NodeId {
        let mut terms = Vec::new();
        for (layer, ln) in self.layers.iter().zip(&nodes.layers) {
            if let Some(n) = layer.kl_graph(tape, ln) {
                terms.push(n);
            }
            if let Some(n) = layer.scale_prior_kl_graph(tape, ln) {
                terms.push(n);
            }
        }
        match terms.split_first() {
            None => tape.scalar(0.0),
            Some((&first, rest)) => rest.iter().fold(first, |acc, &t| tape.add(acc, t)),
        }
    }

    /// Pure value of [`Model::kl_total_graph`].
    pub fn kl_total_value(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.kl_value() + l.scale_prior_kl_value())
            .sum()
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.params() {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        if let Likelihood::Gaussian {
            log_precision,
            learn_precision: true,
        } = &self.likelihood
        {
            out.push(("log_precision".into(), log_precision));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in layer.params_mut() {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        if let Likelihood::Gaussian {
            log_precision,
            learn_precision: true,
        } = &mut self.likelihood
        {
            out.push(("log_precision".into(), log_precision));
        }
        out
    }

    /// (name, node) pairs aligned with [`Model::params_mut`] order.
    pub fn bindings(&self, nodes: &ModelNodes) -> Vec<(String, NodeId)> {
        let mut out = Vec::new();
        for (i, (layer, ln)) in self.layers.iter().zip(&nodes.layers).enumerate() {
            for (name, id) in layer.bindings(ln) {
                out.push((format!("layers.{i}.{name}"), id));
            }
        }
        if let (
            Likelihood::Gaussian {
                learn_precision: true,
                ..
            },
            Some(id),
        ) = (&self.likelihood, nodes.log_precision)
        {
            out.push(("log_precision".into(), id));
        }
        out
    }

    /// Post-step projections (droprate clamps) on every layer.
    pub fn project(&mut self) {
        for layer in &mut self.layers {
            layer.project();
        }
    }

    /// Divergence guard: every parameter must be finite.
    pub fn assert_params_finite(&self) -> Result<(), Error> {
        for (name, t) in self.params() {
            t.assert_finite("parameter").map_err(|e| match e {
                Error::NonFinite { what, .. } => Error::NonFinite {
                    ctx: "parameter",
                    what: format!("{name}: {what}"),
                },
                other => other,
            })?;
        }
        Ok(())
    }

    /// Observation precision τ of a Gaussian likelihood.
    pub fn precision(&self) -> Option<f64> {
        match &self.likelihood {
            Likelihood::Gaussian { log_precision, .. } => Some(log_precision.item().exp()),
            _ => None,
        }
    }
}

/// Shape-checked model construction. The builder tracks the per-example shape
/// (no batch dimension) and rejects layers that do not fit.
pub struct ModelBuilder {
    shape: Vec<usize>,
    layers: Vec<Layer>,
}

impl ModelBuilder {
    pub fn flat_input(features: usize) -> Self {
        ModelBuilder {
            shape: vec![features],
            layers: Vec::new(),
        }
    }

    pub fn image_input(channels: usize, height: usize, width: usize) -> Self {
        ModelBuilder {
            shape: vec![channels, height, width],
            layers: Vec::new(),
        }
    }

    fn flat_dim(&self, what: &str) -> Result<usize, Error> {
        if self.shape.len() == 1 {
            Ok(self.shape[0])
        } else {
            Err(Error::config(format!(
                "{what} needs a flat input, current shape is {:?}; insert flatten",
                self.shape
            )))
        }
    }

    fn dense_init(k: usize, q: usize, rng: &mut Rng) -> (Tensor, Tensor) {
        // He-style fan-in scaling keeps activations O(1) through ReLU stacks.
        let scale = (2.0 / k as f64).sqrt();
        (rng.gaussian_tensor(&[k, q]).scale(scale), Tensor::zeros(&[q]))
    }

    /// Structured-noise dense layer; `hier` carries the inverse-gamma prior
    /// (a, b) of the optional per-dimension scale latent.
    #[allow(clippy::too_many_arguments)]
    pub fn vsd_dense(
        mut self,
        outputs: usize,
        reflections: usize,
        rank: Option<usize>,
        init_alpha: f64,
        hier: Option<(f64, f64)>,
        rng: &mut Rng,
    ) -> Result<Self, Error> {
        let k = self.flat_dim("vsd_dense")?;
        if init_alpha <= 0.0 {
            return Err(Error::config("init_alpha must be positive"));
        }
        if let Some(r) = rank {
            if r == 0 || r >= k {
                return Err(Error::config(format!(
                    "low-rank width must be in 1..{k}, got {r}"
                )));
            }
        }
        let (theta, bias) = Self::dense_init(k, outputs, rng);
        self.layers.push(Layer::VsdDense(VsdDense {
            theta,
            bias,
            log_alpha: Tensor::full(&[k], init_alpha.ln()),
            chain: HouseholderChain::init(k, reflections, rank, rng),
            hier: hier.map(|(a, b)| HierScale {
                gamma: Tensor::zeros(&[k]),
                log_delta: Tensor::full(&[k], INIT_LOG_DELTA),
                a,
                b,
            }),
        }));
        self.shape = vec![outputs];
        Ok(self)
    }

    pub fn map_dense(
        mut self,
        outputs: usize,
        length_scale: f64,
        rng: &mut Rng,
    ) -> Result<Self, Error> {
        let k = self.flat_dim("map_dense")?;
        let (theta, bias) = Self::dense_init(k, outputs, rng);
        self.layers.push(Layer::BaselineDense(BaselineDense {
            theta,
            bias,
            variant: BaselineVariant::Map { length_scale },
        }));
        self.shape = vec![outputs];
        Ok(self)
    }

    pub fn bbb_dense(
        mut self,
        outputs: usize,
        prior_sigma: f64,
        init_log_sigma: f64,
        rng: &mut Rng,
    ) -> Result<Self, Error> {
        let k = self.flat_dim("bbb_dense")?;
        if prior_sigma <= 0.0 {
            return Err(Error::config("prior_sigma must be positive"));
        }
        let (theta, bias) = Self::dense_init(k, outputs, rng);
        self.layers.push(Layer::BaselineDense(BaselineDense {
            theta,
            bias,
            variant: BaselineVariant::Bbb {
                log_sigma: Tensor::full(&[k, outputs], init_log_sigma),
                prior_sigma,
            },
        }));
        self.shape = vec![outputs];
        Ok(self)
    }

    pub fn mcd_dense(
        mut self,
        outputs: usize,
        p: f64,
        length_scale: f64,
        rng: &mut Rng,
    ) -> Result<Self, Error> {
        let k = self.flat_dim("mcd_dense")?;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout rate must be in [0,1), got {p}")));
        }
        let (theta, bias) = Self::dense_init(k, outputs, rng);
        self.layers.push(Layer::BaselineDense(BaselineDense {
            theta,
            bias,
            variant: BaselineVariant::Mcd { p, length_scale },
        }));
        self.shape = vec![outputs];
        Ok(self)
    }

    pub fn vd_dense(
        mut self,
        outputs: usize,
        init_alpha: f64,
        ard_kl: bool,
        rng: &mut Rng,
    ) -> Result<Self, Error> {
        let k = self.flat_dim("vd_dense")?;
        if init_alpha <= 0.0 || (!ard_kl && init_alpha >= 1.0) {
            return Err(Error::config("init_alpha must be in (0,1) for VD"));
        }
        let (theta, bias) = Self::dense_init(k, outputs, rng);
        let log_alpha = Tensor::full(&[k], init_alpha.ln());
        self.layers.push(Layer::BaselineDense(BaselineDense {
            theta,
            bias,
            variant: if ard_kl {
                BaselineVariant::ArdVd { log_alpha }
            } else {
                BaselineVariant::Vd { log_alpha }
            },
        }));
        self.shape = vec![outputs];
        Ok(self)
    }

    /// Structured-noise convolution with a square kernel; noise is per input
    /// channel.
    #[allow(clippy::too_many_arguments)]
    pub fn vsd_conv(
        mut self,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        reflections: usize,
        rank: Option<usize>,
        init_alpha: f64,
        rng: &mut Rng,
    ) -> Result<Self, Error> {
        if self.shape.len() != 3 {
            return Err(Error::config(format!(
                "vsd_conv needs [c,h,w] input, current shape is {:?}",
                self.shape
            )));
        }
        let (c, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        let geom = ConvGeom::new(
            &[1, c, h, w],
            &[out_channels, c, kernel, kernel],
            stride,
            pad,
        )?;
        if init_alpha <= 0.0 {
            return Err(Error::config("init_alpha must be positive"));
        }
        let fan_in = c * kernel * kernel;
        let scale = (2.0 / fan_in as f64).sqrt();
        self.layers.push(Layer::VsdConv(VsdConv {
            kernel: rng
                .gaussian_tensor(&[out_channels, c, kernel, kernel])
                .scale(scale),
            bias: Tensor::zeros(&[out_channels]),
            log_alpha: Tensor::full(&[c], init_alpha.ln()),
            chain: HouseholderChain::init(c, reflections, rank, rng),
            stride,
            pad,
        }));
        self.shape = vec![out_channels, geom.oh, geom.ow];
        Ok(self)
    }

    pub fn relu(mut self) -> Self {
        self.layers.push(Layer::Relu);
        self
    }

    pub fn flatten(mut self) -> Self {
        let n: usize = self.shape.iter().product();
        self.layers.push(Layer::Flatten);
        self.shape = vec![n];
        self
    }

    fn pool(mut self, layer: Layer, what: &str) -> Result<Self, Error> {
        if self.shape.len() != 3 || self.shape[1] % 2 != 0 || self.shape[2] % 2 != 0 {
            return Err(Error::config(format!(
                "{what} needs [c, even h, even w], current shape is {:?}",
                self.shape
            )));
        }
        self.shape = vec![self.shape[0], self.shape[1] / 2, self.shape[2] / 2];
        self.layers.push(layer);
        Ok(self)
    }

    pub fn max_pool2(self) -> Result<Self, Error> {
        self.pool(Layer::MaxPool2, "max_pool2")
    }

    pub fn avg_pool2(self) -> Result<Self, Error> {
        self.pool(Layer::AvgPool2, "avg_pool2")
    }

    pub fn categorical(self, classes: usize) -> Result<Model, Error> {
        if self.shape != [classes] {
            return Err(Error::config(format!(
                "categorical head over {classes} classes needs output shape [{classes}], model produces {:?}",
                self.shape
            )));
        }
        Ok(Model {
            layers: self.layers,
            likelihood: Likelihood::Categorical { classes },
        })
    }

    pub fn gaussian(self, init_log_precision: f64, learn_precision: bool) -> Result<Model, Error> {
        if self.shape != [1] {
            return Err(Error::config(format!(
                "gaussian head needs output shape [1], model produces {:?}",
                self.shape
            )));
        }
        Ok(Model {
            layers: self.layers,
            likelihood: Likelihood::Gaussian {
                log_precision: Tensor::scalar(init_log_precision),
                learn_precision,
            },
        })
    }
}
