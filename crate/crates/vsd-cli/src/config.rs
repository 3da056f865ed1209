//! Experiment configuration: one TOML file describing the model, objective,
//! optimizer, and data; command-line flags override file values.
//!
//! Precedence, highest first: CLI flag, `VSD_OUTPUT_ROOT` (output directory
//! only), config file, built-in default. Unknown keys anywhere in the file
//! are rejected. After overrides are applied the fully resolved config is
//! snapshotted into the run directory as `resolved.toml`; re-running `train`
//! on that snapshot reproduces the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vsd_core::model::{Model, ModelBuilder};
use vsd_core::optim::{LrSchedule, Optimizer};
use vsd_core::rng::Rng;
use vsd_core::train::TrainSpec;

use crate::data::DataSection;
use crate::fail::Fail;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub model: ModelSection,
    #[serde(default)]
    pub objective: ObjectiveSection,
    pub train: TrainSection,
    pub data: DataSection,
    /// Second dataset for `ood`; scored against the primary test split.
    #[serde(default)]
    pub ood_data: Option<DataSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    /// Run name; becomes the output subdirectory.
    pub name: String,
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Feature shape of one example: `[d]` for flat inputs, `[c, h, w]` for images.
    pub input: Vec<usize>,
    #[serde(default)]
    pub layer: Vec<LayerSection>,
    pub likelihood: LikelihoodSection,
}

/// One network layer. `kind` selects the variant; only the fields that kind
/// uses may be set (anything else is a config error, same as an unknown key).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSection {
    /// vsd_dense | map_dense | bbb_dense | mcd_dense | vd_dense | vsd_conv |
    /// relu | flatten | max_pool2 | avg_pool2
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    /// Householder reflections T (vsd_dense, vsd_conv). 0 keeps U = I.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reflections: Option<usize>,
    /// Low-rank width r of the shared reflection map; absent = full rank.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_alpha: Option<f64>,
    /// Hierarchical scale prior InvGamma(a, b); both or neither.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hier_a: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hier_b: Option<f64>,
    /// Weight-decay strength (map_dense, mcd_dense).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub length_scale: Option<f64>,
    /// Bernoulli drop probability (mcd_dense).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropout_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prior_sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_log_sigma: Option<f64>,
    /// VD flavour: true = ARD KL (unbounded α), false = sigmoid-fit KL.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ard: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pad: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LikelihoodSection {
    /// categorical | gaussian
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    /// ln τ for the Gaussian likelihood y ~ N(f(x), 1/τ).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_log_precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learn_precision: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveSection {
    /// Final KL weight λ.
    pub kl_weight: f64,
    /// Linear λ ramp over this many leading epochs (0 = no annealing).
    pub kl_anneal_epochs: usize,
    /// MC samples per objective evaluation during training.
    pub mc_samples: usize,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        ObjectiveSection {
            kl_weight: 1.0,
            kl_anneal_epochs: 0,
            mc_samples: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    /// adam | sgd
    #[serde(default = "default_optimizer")]
    pub optimizer: String,
    pub lr: f64,
    /// SGD momentum γ; ignored by Adam.
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// constant | step
    #[serde(default = "default_schedule")]
    pub schedule: String,
    #[serde(default = "default_step_gamma")]
    pub step_gamma: f64,
    #[serde(default = "default_step_every")]
    pub step_every: usize,
    /// MC samples for `eval` / `ood` (flag-overridable).
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
}

fn default_optimizer() -> String {
    "adam".into()
}
fn default_momentum() -> f64 {
    0.9
}
fn default_schedule() -> String {
    "constant".into()
}
fn default_step_gamma() -> f64 {
    0.3
}
fn default_step_every() -> usize {
    10
}
fn default_eval_samples() -> usize {
    100
}

/// Flag values that beat the file; `None` keeps the file value.
#[derive(Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub kl_weight: Option<f64>,
    pub batch_size: Option<usize>,
    pub mc_samples: Option<usize>,
    pub name: Option<String>,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, Fail> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Fail::config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Fail::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply flag overrides, then fold `VSD_OUTPUT_ROOT` into `output_dir`
    /// (flag > env > file), so the resolved snapshot is self-contained.
    pub fn resolve(&mut self, ov: &Overrides) -> Result<(), Fail> {
        if let Some(s) = ov.seed {
            self.experiment.seed = s;
        }
        if let Some(e) = ov.epochs {
            self.train.epochs = e;
        }
        if let Some(lr) = ov.lr {
            self.train.lr = lr;
        }
        if let Some(l) = ov.kl_weight {
            self.objective.kl_weight = l;
        }
        if let Some(b) = ov.batch_size {
            self.train.batch_size = b;
        }
        if let Some(s) = ov.mc_samples {
            self.objective.mc_samples = s;
        }
        if let Some(n) = &ov.name {
            self.experiment.name = n.clone();
        }
        match (&ov.output_dir, std::env::var_os("VSD_OUTPUT_ROOT")) {
            (Some(dir), _) => self.experiment.output_dir = dir.clone(),
            (None, Some(root)) => self.experiment.output_dir = PathBuf::from(root),
            (None, None) => {}
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), Fail> {
        let name = &self.experiment.name;
        if name.is_empty() || name.contains(['/', '\\']) || name == "." || name == ".." {
            return Err(Fail::config(format!(
                "experiment.name {name:?} must be a plain directory name"
            )));
        }
        if self.model.input.is_empty() || self.model.input.iter().any(|&d| d == 0) {
            return Err(Fail::config("model.input must be non-empty positive dims"));
        }
        if !matches!(self.model.input.len(), 1 | 3) {
            return Err(Fail::config("model.input must be [features] or [c, h, w]"));
        }
        match self.train.optimizer.as_str() {
            "adam" | "sgd" => {}
            other => return Err(Fail::config(format!("unknown optimizer {other:?}"))),
        }
        match self.train.schedule.as_str() {
            "constant" | "step" => {}
            other => return Err(Fail::config(format!("unknown lr schedule {other:?}"))),
        }
        if self.train.epochs == 0 {
            return Err(Fail::config("train.epochs must be positive"));
        }
        if self.train.eval_samples == 0 {
            return Err(Fail::config("train.eval_samples must be positive"));
        }
        self.data.validate()?;
        if let Some(ood) = &self.ood_data {
            ood.validate()?;
        }
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.experiment.output_dir.join(&self.experiment.name)
    }

    pub fn to_toml(&self) -> Result<String, Fail> {
        toml::to_string_pretty(self).map_err(|e| Fail::Other(format!("toml: {e}")))
    }

    /// Hash of everything that shapes the training trajectory: seed, model,
    /// objective, optimizer settings, and data. `train.epochs` and
    /// `train.eval_samples` are excluded so a resumed run may extend the
    /// epoch budget without invalidating its checkpoint.
    pub fn spec_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("config is a map");
        obj.remove("ood_data");
        if let Some(exp) = obj.get_mut("experiment").and_then(|e| e.as_object_mut()) {
            exp.remove("name");
            exp.remove("output_dir");
        }
        if let Some(train) = obj.get_mut("train").and_then(|t| t.as_object_mut()) {
            train.remove("epochs");
            train.remove("eval_samples");
        }
        // serde_json maps are sorted, so the rendering is canonical.
        let canon = serde_json::to_string(&v).expect("value serializes");
        let mut h = Sha256::new();
        h.update(canon.as_bytes());
        format!("{:x}", h.finalize())
    }

    pub fn optimizer(&self) -> Optimizer {
        match self.train.optimizer.as_str() {
            "sgd" => Optimizer::sgd(self.train.lr, self.train.momentum),
            _ => Optimizer::adam(self.train.lr),
        }
    }

    pub fn train_spec(&self) -> TrainSpec {
        TrainSpec {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            mc_samples: self.objective.mc_samples,
            kl_weight: self.objective.kl_weight,
            kl_anneal_epochs: self.objective.kl_anneal_epochs,
            base_lr: self.train.lr,
            schedule: match self.train.schedule.as_str() {
                "step" => LrSchedule::Step {
                    gamma: self.train.step_gamma,
                    every: self.train.step_every,
                },
                _ => LrSchedule::Constant,
            },
        }
    }

    pub fn build_model(&self, rng: &mut Rng) -> Result<Model, Fail> {
        let mut b = match self.model.input.as_slice() {
            [d] => ModelBuilder::flat_input(*d),
            [c, h, w] => ModelBuilder::image_input(*c, *h, *w),
            _ => unreachable!("validated"),
        };
        for (i, layer) in self.model.layer.iter().enumerate() {
            b = build_layer(b, layer, rng)
                .map_err(|f| prefix_fail(f, &format!("model.layer[{i}]")))?;
        }
        let lik = &self.model.likelihood;
        let model = match lik.kind.as_str() {
            "categorical" => {
                reject_fields(
                    "likelihood kind \"categorical\"",
                    &[
                        ("init_log_precision", lik.init_log_precision.is_some()),
                        ("learn_precision", lik.learn_precision.is_some()),
                    ],
                )?;
                let classes = lik
                    .classes
                    .ok_or_else(|| Fail::config("categorical likelihood needs classes"))?;
                b.categorical(classes)
            }
            "gaussian" => {
                reject_fields(
                    "likelihood kind \"gaussian\"",
                    &[("classes", lik.classes.is_some())],
                )?;
                b.gaussian(
                    lik.init_log_precision.unwrap_or(0.0),
                    lik.learn_precision.unwrap_or(true),
                )
            }
            other => {
                return Err(Fail::config(format!(
                    "unknown likelihood kind {other:?} (expected categorical or gaussian)"
                )))
            }
        };
        model.map_err(Fail::from)
    }
}

/// Error out when a layer/likelihood kind received fields it does not use.
fn reject_fields(ctx: &str, set: &[(&str, bool)]) -> Result<(), Fail> {
    for (field, present) in set {
        if *present {
            return Err(Fail::config(format!("{ctx} does not take field {field:?}")));
        }
    }
    Ok(())
}

fn prefix_fail(f: Fail, ctx: &str) -> Fail {
    match f {
        Fail::Config(m) => Fail::Config(format!("{ctx}: {m}")),
        other => other,
    }
}

fn build_layer(b: ModelBuilder, l: &LayerSection, rng: &mut Rng) -> Result<ModelBuilder, Fail> {
    let need_width = || {
        l.width
            .ok_or_else(|| Fail::config(format!("kind {:?} needs width", l.kind)))
    };
    // Fields outside each kind's set below are rejected up front.
    let mut allowed: &[&str] = &[];
    match l.kind.as_str() {
        "vsd_dense" => {
            allowed = &["width", "reflections", "rank", "init_alpha", "hier_a", "hier_b"]
        }
        "map_dense" => allowed = &["width", "length_scale"],
        "bbb_dense" => allowed = &["width", "prior_sigma", "init_log_sigma"],
        "mcd_dense" => allowed = &["width", "dropout_p", "length_scale"],
        "vd_dense" => allowed = &["width", "init_alpha", "ard"],
        "vsd_conv" => {
            allowed = &["out_channels", "kernel", "stride", "pad", "reflections", "rank", "init_alpha"]
        }
        "relu" | "flatten" | "max_pool2" | "avg_pool2" => {}
        other => return Err(Fail::config(format!("unknown layer kind {other:?}"))),
    }
    let present: &[(&str, bool)] = &[
        ("width", l.width.is_some()),
        ("reflections", l.reflections.is_some()),
        ("rank", l.rank.is_some()),
        ("init_alpha", l.init_alpha.is_some()),
        ("hier_a", l.hier_a.is_some()),
        ("hier_b", l.hier_b.is_some()),
        ("length_scale", l.length_scale.is_some()),
        ("dropout_p", l.dropout_p.is_some()),
        ("prior_sigma", l.prior_sigma.is_some()),
        ("init_log_sigma", l.init_log_sigma.is_some()),
        ("ard", l.ard.is_some()),
        ("out_channels", l.out_channels.is_some()),
        ("kernel", l.kernel.is_some()),
        ("stride", l.stride.is_some()),
        ("pad", l.pad.is_some()),
    ];
    for (field, is_set) in present {
        if *is_set && !allowed.contains(field) {
            return Err(Fail::config(format!(
                "kind {:?} does not take field {field:?}",
                l.kind
            )));
        }
    }
    let hier = match (l.hier_a, l.hier_b) {
        (Some(a), Some(b)) => Some((a, b)),
        (None, None) => None,
        _ => {
            return Err(Fail::config(
                "hier_a and hier_b must be given together".to_string(),
            ))
        }
    };
    let out = match l.kind.as_str() {
        "vsd_dense" => b.vsd_dense(
            need_width()?,
            l.reflections.unwrap_or(1),
            l.rank,
            l.init_alpha.unwrap_or(0.5),
            hier,
            rng,
        )?,
        "map_dense" => b.map_dense(need_width()?, l.length_scale.unwrap_or(0.0), rng)?,
        "bbb_dense" => b.bbb_dense(
            need_width()?,
            l.prior_sigma.unwrap_or(1.0),
            l.init_log_sigma.unwrap_or(-3.0),
            rng,
        )?,
        "mcd_dense" => b.mcd_dense(
            need_width()?,
            l.dropout_p.unwrap_or(0.5),
            l.length_scale.unwrap_or(0.0),
            rng,
        )?,
        "vd_dense" => b.vd_dense(
            need_width()?,
            l.init_alpha.unwrap_or(0.5),
            l.ard.unwrap_or(false),
            rng,
        )?,
        "vsd_conv" => {
            let co = l
                .out_channels
                .ok_or_else(|| Fail::config("vsd_conv needs out_channels"))?;
            let kernel = l.kernel.ok_or_else(|| Fail::config("vsd_conv needs kernel"))?;
            b.vsd_conv(
                co,
                kernel,
                l.stride.unwrap_or(1),
                l.pad.unwrap_or(0),
                l.reflections.unwrap_or(1),
                l.rank,
                l.init_alpha.unwrap_or(0.5),
                rng,
            )?
        }
        "relu" => b.relu(),
        "flatten" => b.flatten(),
        "max_pool2" => b.max_pool2()?,
        "avg_pool2" => b.avg_pool2()?,
        _ => unreachable!("kind vetted above"),
    };
    Ok(out)
}
