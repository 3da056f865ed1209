//! The five subcommands. Everything here is deterministic given the config:
//! stream 0 of the experiment seed initializes parameters, stream 2 drives
//! training (shuffles + noise), stream 3 drives evaluation, stream 4 drives
//! diagnostics; data generation and splitting use `data.split_seed`
//! (defaulting to the experiment seed) on streams 11/12.

use std::path::PathBuf;

use serde_json::json;
use vsd_core::diagnostics::{regularizer_estimate, spectral_norm, stable_rank, NoiseProbe};
use vsd_core::layers::Layer;
use vsd_core::metrics::{
    accuracy, classification_nll, ece, ood_metrics, predictive_entropy, regression_metrics,
    Histogram,
};
use vsd_core::model::{Likelihood, Model};
use vsd_core::objective::Target;
use vsd_core::predict::{predict_probs, predict_regression};
use vsd_core::rng::Rng;
use vsd_core::tensor::Tensor;
use vsd_core::train::{run_epochs, Dataset, Targets, TrainSpec};
use vsd_core::verify;

use crate::checkpoint::{self, Checkpoint, SCHEMA_VERSION};
use crate::config::ExperimentConfig;
use crate::data::{self, DatasetHandle};
use crate::fail::Fail;
use crate::report::{
    atomic_write, write_classification_csv, write_entropy_histogram, write_json,
    write_regression_csv, TraceFile,
};

pub const ECE_BINS: usize = 15;
pub const ENTROPY_BINS: usize = 20;

/// Flatten image tensors for dense-input models; leave shapes alone otherwise.
fn shaped_for_model(x: &Tensor, cfg: &ExperimentConfig) -> Result<Tensor, Fail> {
    let n = x.shape()[0];
    let features = x.numel() / n.max(1);
    let want: usize = cfg.model.input.iter().product();
    if features != want {
        return Err(Fail::data(format!(
            "dataset rows have {features} features but model.input wants {want}"
        )));
    }
    match cfg.model.input.as_slice() {
        [d] => x.reshape(&[n, *d]).map_err(Fail::from),
        [c, h, w] => x.reshape(&[n, *c, *h, *w]).map_err(Fail::from),
        _ => unreachable!("validated"),
    }
}

fn check_model_data(model: &Model, handle: &DatasetHandle) -> Result<(), Fail> {
    match (&model.likelihood, &handle.train.targets) {
        (Likelihood::Categorical { classes }, Targets::Labels(_)) => {
            if let Some(c) = handle.classes {
                if *classes < c {
                    return Err(Fail::config(format!(
                        "model has {classes} classes but {} provides {c}",
                        handle.source
                    )));
                }
            }
            Ok(())
        }
        (Likelihood::Gaussian { .. }, Targets::Values(_)) => Ok(()),
        (Likelihood::Categorical { .. }, Targets::Values(_)) => Err(Fail::config(format!(
            "{} is a regression source but the likelihood is categorical",
            handle.source
        ))),
        (Likelihood::Gaussian { .. }, Targets::Labels(_)) => Err(Fail::config(format!(
            "{} is a classification source but the likelihood is gaussian",
            handle.source
        ))),
    }
}

fn default_checkpoint(cfg: &ExperimentConfig) -> PathBuf {
    cfg.run_dir().join("checkpoint.json")
}

fn load_model(cfg: &ExperimentConfig, explicit: &Option<PathBuf>) -> Result<Checkpoint, Fail> {
    let path = explicit.clone().unwrap_or_else(|| default_checkpoint(cfg));
    checkpoint::load(&path)
}

pub fn cmd_train(cfg: &ExperimentConfig, resume: bool) -> Result<(), Fail> {
    let run_dir = cfg.run_dir();
    std::fs::create_dir_all(&run_dir)?;
    atomic_write(&run_dir.join("resolved.toml"), cfg.to_toml()?.as_bytes())?;

    let handle = data::load(&cfg.data, cfg.experiment.seed)?;
    let spec_hash = cfg.spec_hash();
    let ck_path = default_checkpoint(cfg);
    let trace_path = run_dir.join("trace.csv");

    let seed = cfg.experiment.seed;
    let (mut model, mut opt, mut train_rng, start_epoch, trace) = if resume && ck_path.exists() {
        let ck = checkpoint::load(&ck_path)?;
        if ck.spec_hash != spec_hash {
            return Err(Fail::config(
                "checkpoint belongs to a different training spec (hash mismatch); \
                 remove it or restore the original config"
                    .to_string(),
            ));
        }
        let trace = TraceFile::resume(trace_path, ck.epoch)?;
        (
            ck.model,
            ck.optimizer,
            Rng::restore(&ck.train_rng),
            ck.epoch,
            trace,
        )
    } else {
        let mut init_rng = Rng::new(seed).substream(0);
        let model = cfg.build_model(&mut init_rng)?;
        let trace = TraceFile::fresh(trace_path)?;
        (model, cfg.optimizer(), Rng::new(seed).substream(2), 0, trace)
    };
    check_model_data(&model, &handle)?;

    let train_set = Dataset {
        x: shaped_for_model(&handle.train.x, cfg)?,
        targets: handle.train.targets.clone(),
    };
    let total = cfg.train.epochs;
    if start_epoch >= total {
        println!("checkpoint already at epoch {start_epoch} >= train.epochs {total}; nothing to do");
        return Ok(());
    }
    let spec = cfg.train_spec();
    for epoch in start_epoch..total {
        let one = TrainSpec {
            epochs: 1,
            ..spec.clone()
        };
        let rows = run_epochs(&mut model, &mut opt, &train_set, &one, epoch, &mut train_rng)?;
        let row = &rows[0];
        trace.append(row)?;
        // Checkpoint after every epoch: on divergence the previous epoch's
        // file is the surviving "last good" state.
        checkpoint::save(
            &ck_path,
            &Checkpoint {
                schema_version: SCHEMA_VERSION,
                epoch: epoch + 1,
                spec_hash: spec_hash.clone(),
                model: model.clone(),
                optimizer: opt.clone(),
                train_rng: train_rng.state(),
            },
        )?;
        println!(
            "epoch {}/{total} objective {:.6} data {:.6} kl {:.6} lr {} lambda {}",
            epoch + 1,
            row.objective,
            row.data_term,
            row.kl_term,
            row.lr,
            row.kl_weight
        );
    }
    println!("wrote {}", run_dir.display());
    Ok(())
}

pub fn cmd_eval(
    cfg: &ExperimentConfig,
    ckpt: &Option<PathBuf>,
    split: &str,
    samples_flag: Option<usize>,
) -> Result<(), Fail> {
    let handle = data::load(&cfg.data, cfg.experiment.seed)?;
    let ck = load_model(cfg, ckpt)?;
    check_model_data(&ck.model, &handle)?;
    let ds = handle.split(split)?;
    let x = shaped_for_model(&ds.x, cfg)?;
    let samples = samples_flag.unwrap_or(cfg.train.eval_samples);
    let eval_rng = Rng::new(cfg.experiment.seed).substream(3);
    let run_dir = cfg.run_dir();

    let metrics = match (&ck.model.likelihood, &ds.targets) {
        (Likelihood::Categorical { .. }, Targets::Labels(labels)) => {
            let probs = predict_probs(&ck.model, &x, samples, &eval_rng)?;
            let acc = accuracy(&probs, labels)?;
            let nll = classification_nll(&probs, labels)?;
            let cal = ece(&probs, labels, ECE_BINS)?;
            let ent = predictive_entropy(&probs);
            write_classification_csv(
                &run_dir.join(format!("predictions_{split}.csv")),
                &probs,
                labels,
            )?;
            json!({
                "accuracy": acc,
                "error": 1.0 - acc,
                "nll": nll.nll,
                "nll_clamped_terms": nll.clamped,
                "ece": cal,
                "ece_bins": ECE_BINS,
                "mean_entropy": ent.mean(),
            })
        }
        (Likelihood::Gaussian { .. }, Targets::Values(y)) => {
            let pred = predict_regression(&ck.model, &x, samples, &eval_rng)?;
            let m = regression_metrics(&pred.mean, &pred.variance, y)?;
            write_regression_csv(
                &run_dir.join(format!("predictions_{split}.csv")),
                y,
                &pred.mean,
                &pred.variance,
            )?;
            serde_json::to_value(&m)?
        }
        _ => unreachable!("check_model_data"),
    };
    let report = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "eval",
        "source": handle.source,
        "split": split,
        "samples": samples,
        "metrics": metrics,
    });
    let path = run_dir.join(format!("metrics_{split}.json"));
    write_json(&path, &report)?;
    println!("{}", serde_json::to_string(&report["metrics"])?);
    println!("wrote {}", path.display());
    Ok(())
}

pub fn cmd_ood(
    cfg: &ExperimentConfig,
    ckpt: &Option<PathBuf>,
    samples_flag: Option<usize>,
) -> Result<(), Fail> {
    let in_handle = data::load(&cfg.data, cfg.experiment.seed)?;
    let ood_section = cfg
        .ood_data
        .as_ref()
        .ok_or_else(|| Fail::config("ood needs an [ood_data] section"))?;
    // The OOD set is standardized with the in-distribution training
    // statistics: the model must see it exactly as it would see test data.
    let mut raw = ood_section.clone();
    raw.normalize = Some(false);
    let out_handle = data::load(&raw, cfg.experiment.seed)?;
    let ck = load_model(cfg, ckpt)?;
    check_model_data(&ck.model, &in_handle)?;
    let Likelihood::Categorical { classes } = ck.model.likelihood else {
        return Err(Fail::config("ood scoring needs a categorical likelihood"));
    };

    let x_in = shaped_for_model(&in_handle.test.x, cfg)?;
    let mut x_out = out_handle.test.x.clone();
    if let Some(norm) = &in_handle.norm {
        x_out = norm.apply(&x_out);
    }
    let x_out = shaped_for_model(&x_out, cfg)?;

    let samples = samples_flag.unwrap_or(cfg.train.eval_samples);
    let eval_rng = Rng::new(cfg.experiment.seed).substream(3);
    let probs_in = predict_probs(&ck.model, &x_in, samples, &eval_rng)?;
    let probs_out = predict_probs(&ck.model, &x_out, samples, &eval_rng)?;
    let ent_in = predictive_entropy(&probs_in);
    let ent_out = predictive_entropy(&probs_out);
    // In-distribution inputs should look confident: score = −entropy.
    let score_in: Vec<f64> = ent_in.data().iter().map(|e| -e).collect();
    let score_out: Vec<f64> = ent_out.data().iter().map(|e| -e).collect();
    let m = ood_metrics(&score_in, &score_out)?;

    let hi = (classes as f64).ln();
    let hist_in = Histogram::build(ent_in.data(), ENTROPY_BINS, 0.0, hi);
    let hist_out = Histogram::build(ent_out.data(), ENTROPY_BINS, 0.0, hi);
    let run_dir = cfg.run_dir();
    write_entropy_histogram(&run_dir.join("entropy.csv"), &hist_in, &hist_out)?;

    let report = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "ood",
        "in_source": in_handle.source,
        "out_source": out_handle.source,
        "samples": samples,
        "score": "negative predictive entropy",
        "metrics": serde_json::to_value(&m)?,
        "mean_entropy_in": ent_in.mean(),
        "mean_entropy_out": ent_out.mean(),
    });
    let path = run_dir.join("ood.json");
    write_json(&path, &report)?;
    println!("{}", serde_json::to_string(&report["metrics"])?);
    println!("wrote {} and {}", path.display(), run_dir.join("entropy.csv").display());
    Ok(())
}

pub fn cmd_diagnose(
    cfg: &ExperimentConfig,
    ckpt: &Option<PathBuf>,
    probe_layer: Option<usize>,
    pairs: usize,
) -> Result<(), Fail> {
    let handle = data::load(&cfg.data, cfg.experiment.seed)?;
    let ck = load_model(cfg, ckpt)?;
    check_model_data(&ck.model, &handle)?;

    let mut layer_stats = Vec::new();
    for (i, layer) in ck.model.layers.iter().enumerate() {
        let (kind, w) = match layer {
            Layer::VsdDense(l) => ("vsd_dense", Some(l.theta.clone())),
            Layer::BaselineDense(l) => ("dense", Some(l.theta.clone())),
            Layer::VsdConv(l) => {
                let shape = l.kernel.shape().to_vec();
                let co = shape[0];
                ("vsd_conv", Some(l.kernel.reshape(&[co, l.kernel.numel() / co])?))
            }
            _ => (layer_name(layer), None),
        };
        if let Some(w) = w {
            let sn = spectral_norm(&w, 10_000, 1e-12);
            let sr = stable_rank(&w).ok();
            layer_stats.push(json!({
                "index": i,
                "kind": kind,
                "spectral_norm": sn,
                "stable_rank": sr,
            }));
        }
    }

    // Curvature-vs-noise probe on the first structured layer (or --layer).
    let probe_idx = match probe_layer {
        Some(i) => Some(i),
        None => ck
            .model
            .layers
            .iter()
            .position(|l| matches!(l, Layer::VsdDense(_))),
    };
    let regularizer = match probe_idx {
        None => serde_json::Value::Null,
        Some(idx) => {
            let Some(Layer::VsdDense(l)) = ck.model.layers.get(idx) else {
                return Err(Fail::config(format!(
                    "--layer {idx} is not a structured dense layer"
                )));
            };
            let n = handle.train.len().min(256);
            let rows: Vec<usize> = (0..n).collect();
            let sub = handle.train.select(&rows);
            let x = shaped_for_model(&sub.x, cfg)?;
            let target = match &sub.targets {
                Targets::Labels(lab) => Target::Labels(lab),
                Targets::Values(v) => Target::Values(v),
            };
            let alpha = l.log_alpha.exp();
            let u = l.chain.matrix();
            let probe = NoiseProbe {
                layer: idx,
                alpha: &alpha,
                u: &u,
            };
            let mut rng = Rng::new(cfg.experiment.seed).substream(4);
            let est = regularizer_estimate(&ck.model, &x, &target, &probe, pairs, &mut rng)?;
            let mut v = serde_json::to_value(&est)?;
            v["layer"] = json!(idx);
            v["pairs"] = json!(pairs);
            v["batch_rows"] = json!(n);
            v
        }
    };

    let report = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "diagnose",
        "diagnostics": {
            "layers": layer_stats,
            "regularizer": regularizer,
        },
    });
    let path = cfg.run_dir().join("diagnostics.json");
    write_json(&path, &report)?;
    println!("{}", serde_json::to_string(&report["diagnostics"])?);
    println!("wrote {}", path.display());
    Ok(())
}

fn layer_name(layer: &Layer) -> &'static str {
    match layer {
        Layer::VsdDense(_) => "vsd_dense",
        Layer::BaselineDense(_) => "dense",
        Layer::VsdConv(_) => "vsd_conv",
        Layer::Relu => "relu",
        Layer::Flatten => "flatten",
        Layer::MaxPool2 => "max_pool2",
        Layer::AvgPool2 => "avg_pool2",
    }
}

pub fn cmd_verify(seed: u64) -> Result<(), Fail> {
    let results = verify::run_all(seed);
    for r in &results {
        let tag = if r.passed { "  ok  " } else { " FAIL " };
        println!("{tag}{} — {}", r.name, r.detail);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!(
        "{} checks, {} failed (seed {seed})",
        results.len(),
        failed
    );
    if failed > 0 {
        return Err(Fail::Other(format!("{failed} verification checks failed")));
    }
    Ok(())
}
