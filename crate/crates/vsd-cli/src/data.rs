//! Dataset ingestion: synthetic generators, CSV tables, and IDX image files,
//! with deterministic splits and train-split-only normalization.
//!
//! Sources:
//! * `synthetic-cubic` — x ~ U[−4, 4], y = x³ + N(0, noise_sd²); the test
//!   split is a noise-free grid over [−6, 6] so far-from-data behaviour is
//!   visible.
//! * `synthetic-two-cluster` — covariates in two separated bands
//!   U[0.5, 1.5] ∪ U[2.5, 3.5] with targets at two flat levels ∓1, so the
//!   transition location inside the gap is unidentified by the data; test
//!   grid spans [0, 4] including the gap.
//! * `synthetic-two-moons` — two interleaved half-circles with Gaussian
//!   jitter, balanced classes.
//! * `synthetic-blob` — an isotropic Gaussian cloud at `center`; single
//!   dummy class, built as an out-of-distribution partner for the moons.
//! * `csv-regression` / `csv-classification` — header row required; every
//!   non-label column is a feature; classification labels are integers
//!   0..C−1.
//! * `idx-images` — big-endian IDX (ubyte), images scaled to [0, 1]; parse
//!   failures report the byte offset.
//!
//! All shuffling and generation derive from `split_seed` (default: the
//! experiment seed), never from the training stream, so the same data falls
//! out regardless of model or optimizer settings. Feature normalization
//! statistics come from the training split alone and are then applied to
//! every split.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vsd_core::rng::Rng;
use vsd_core::tensor::Tensor;
use vsd_core::train::{Dataset, Targets};

use crate::fail::Fail;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// synthetic-cubic | synthetic-two-cluster | synthetic-two-moons |
    /// synthetic-blob | csv-regression | csv-classification | idx-images
    pub source: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_train: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_test: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_sd: Option<f64>,
    /// Seed for generation and split shuffling; defaults to the experiment seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_seed: Option<u64>,
    /// Fraction of the training split carved off for validation (default 0).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_fraction: Option<f64>,
    /// CSV only: test carve when no test_path is given (default 0.1).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_fraction: Option<f64>,
    /// Default: true for csv/idx sources, false for synthetic ones.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalize: Option<bool>,
    /// Blob center (synthetic-blob); its length sets the dimension.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_path: Option<PathBuf>,
    /// Default "target" (regression) or "label" (classification).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_column: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
}

pub const SOURCES: &[&str] = &[
    "synthetic-cubic",
    "synthetic-two-cluster",
    "synthetic-two-moons",
    "synthetic-blob",
    "csv-regression",
    "csv-classification",
    "idx-images",
];

impl DataSection {
    pub fn validate(&self) -> Result<(), Fail> {
        if !SOURCES.contains(&self.source.as_str()) {
            return Err(Fail::config(format!(
                "unknown data source {:?} (expected one of {})",
                self.source,
                SOURCES.join(", ")
            )));
        }
        let allowed: &[&str] = match self.source.as_str() {
            "csv-regression" | "csv-classification" => &[
                "path",
                "test_path",
                "label_column",
                "split_seed",
                "val_fraction",
                "test_fraction",
                "normalize",
            ],
            "idx-images" => &[
                "train_images",
                "train_labels",
                "test_images",
                "test_labels",
                "split_seed",
                "val_fraction",
                "normalize",
            ],
            "synthetic-blob" => &[
                "n_train",
                "n_test",
                "noise_sd",
                "split_seed",
                "val_fraction",
                "normalize",
                "center",
            ],
            _ => &[
                "n_train",
                "n_test",
                "noise_sd",
                "split_seed",
                "val_fraction",
                "normalize",
            ],
        };
        let present = [
            ("n_train", self.n_train.is_some()),
            ("n_test", self.n_test.is_some()),
            ("noise_sd", self.noise_sd.is_some()),
            ("split_seed", self.split_seed.is_some()),
            ("val_fraction", self.val_fraction.is_some()),
            ("test_fraction", self.test_fraction.is_some()),
            ("normalize", self.normalize.is_some()),
            ("center", self.center.is_some()),
            ("path", self.path.is_some()),
            ("test_path", self.test_path.is_some()),
            ("label_column", self.label_column.is_some()),
            ("train_images", self.train_images.is_some()),
            ("train_labels", self.train_labels.is_some()),
            ("test_images", self.test_images.is_some()),
            ("test_labels", self.test_labels.is_some()),
        ];
        for (field, is_set) in present {
            if is_set && !allowed.contains(&field) {
                return Err(Fail::config(format!(
                    "data source {:?} does not take field {field:?}",
                    self.source
                )));
            }
        }
        for (field, v) in [
            ("val_fraction", self.val_fraction),
            ("test_fraction", self.test_fraction),
        ] {
            if let Some(f) = v {
                if !(0.0..1.0).contains(&f) {
                    return Err(Fail::config(format!("{field} must be in [0, 1), got {f}")));
                }
            }
        }
        if let Some(sd) = self.noise_sd {
            if !(sd.is_finite() && sd >= 0.0) {
                return Err(Fail::config(format!("noise_sd must be >= 0, got {sd}")));
            }
        }
        if let Some(n) = self.n_train {
            if n == 0 {
                return Err(Fail::config("n_train must be positive"));
            }
        }
        Ok(())
    }
}

/// Per-feature affine map fit on the training split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Normalizer {
    /// Training-split statistics; constant features keep sd = 1 so they map
    /// to exactly zero instead of NaN.
    pub fn fit(x: &Tensor) -> Normalizer {
        let n = x.shape()[0];
        let d = x.numel() / n;
        let mut mean = vec![0.0; d];
        let mut sd = vec![0.0; d];
        for r in 0..n {
            for (j, m) in mean.iter_mut().enumerate() {
                *m += x.data()[r * d + j];
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        for r in 0..n {
            for j in 0..d {
                let dv = x.data()[r * d + j] - mean[j];
                sd[j] += dv * dv;
            }
        }
        for s in sd.iter_mut() {
            *s = (*s / n as f64).sqrt();
            if *s < 1e-12 {
                *s = 1.0;
            }
        }
        Normalizer { mean, sd }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let n = x.shape()[0];
        let d = x.numel() / n;
        assert_eq!(d, self.mean.len(), "feature count changed");
        let mut out = x.clone();
        for r in 0..n {
            for j in 0..d {
                let v = &mut out.data_mut()[r * d + j];
                *v = (*v - self.mean[j]) / self.sd[j];
            }
        }
        out
    }
}

#[derive(Debug)]
pub struct DatasetHandle {
    pub source: String,
    pub train: Dataset,
    /// May be empty when val_fraction = 0.
    pub val: Dataset,
    pub test: Dataset,
    pub norm: Option<Normalizer>,
    /// Number of classes for classification sources.
    pub classes: Option<usize>,
}

impl DatasetHandle {
    pub fn split(&self, name: &str) -> Result<&Dataset, Fail> {
        match name {
            "train" => Ok(&self.train),
            "test" => Ok(&self.test),
            "val" => {
                if self.val.is_empty() {
                    Err(Fail::config(
                        "val split is empty; set data.val_fraction > 0",
                    ))
                } else {
                    Ok(&self.val)
                }
            }
            other => Err(Fail::config(format!(
                "unknown split {other:?} (expected train, val, or test)"
            ))),
        }
    }
}

pub fn load(section: &DataSection, fallback_seed: u64) -> Result<DatasetHandle, Fail> {
    section.validate()?;
    let seed = section.split_seed.unwrap_or(fallback_seed);
    // Substream 11 generates, substream 12 shuffles splits; both are
    // insulated from model init and training streams.
    let mut gen_rng = Rng::new(seed).substream(11);
    let mut split_rng = Rng::new(seed).substream(12);

    let (mut train, mut test, classes) = match section.source.as_str() {
        "synthetic-cubic" => synthetic_cubic(section, &mut gen_rng),
        "synthetic-two-cluster" => synthetic_two_cluster(section, &mut gen_rng),
        "synthetic-two-moons" => synthetic_two_moons(section, &mut gen_rng),
        "synthetic-blob" => synthetic_blob(section, &mut gen_rng),
        "csv-regression" => load_csv(section, false, &mut split_rng)?,
        "csv-classification" => load_csv(section, true, &mut split_rng)?,
        "idx-images" => load_idx(section)?,
        _ => unreachable!("validated"),
    };

    // Validation carve comes off the (possibly already carved) train split.
    let val_fraction = section.val_fraction.unwrap_or(0.0);
    let n = train.len();
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let val = if n_val > 0 {
        let order = split_rng.shuffled_indices(n);
        let val = train.select(&order[..n_val]);
        train = train.select(&order[n_val..]);
        val
    } else {
        Dataset {
            x: Tensor::zeros(&[0, features_of(&train)]),
            targets: empty_targets(&train.targets),
        }
    };
    let mut val = val;

    let default_normalize = matches!(
        section.source.as_str(),
        "csv-regression" | "csv-classification" | "idx-images"
    );
    let norm = if section.normalize.unwrap_or(default_normalize) {
        let norm = Normalizer::fit(&train.x);
        train.x = norm.apply(&train.x);
        if !val.is_empty() {
            val.x = norm.apply(&val.x);
        }
        test.x = norm.apply(&test.x);
        Some(norm)
    } else {
        None
    };

    train.validate().map_err(|e| Fail::data(e.to_string()))?;
    test.validate().map_err(|e| Fail::data(e.to_string()))?;
    Ok(DatasetHandle {
        source: section.source.clone(),
        train,
        val,
        test,
        norm,
        classes,
    })
}

fn features_of(d: &Dataset) -> usize {
    if d.len() == 0 {
        0
    } else {
        d.x.numel() / d.len()
    }
}

fn empty_targets(like: &Targets) -> Targets {
    match like {
        Targets::Labels(_) => Targets::Labels(Vec::new()),
        Targets::Values(_) => Targets::Values(Tensor::zeros(&[0, 1])),
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

fn cubic_dataset(xs: Vec<f64>, noise_sd: f64, rng: &mut Rng) -> Dataset {
    let n = xs.len();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| x * x * x + noise_sd * rng.next_gaussian())
        .collect();
    Dataset {
        x: Tensor::from_vec(vec![n, 1], xs).unwrap(),
        targets: Targets::Values(Tensor::from_vec(vec![n, 1], ys).unwrap()),
    }
}

fn synthetic_cubic(s: &DataSection, rng: &mut Rng) -> (Dataset, Dataset, Option<usize>) {
    let n_train = s.n_train.unwrap_or(20);
    let n_test = s.n_test.unwrap_or(121);
    let noise_sd = s.noise_sd.unwrap_or(3.0);
    let xs: Vec<f64> = (0..n_train).map(|_| rng.uniform(-4.0, 4.0)).collect();
    let train = cubic_dataset(xs, noise_sd, rng);
    let test = cubic_dataset(linspace(-6.0, 6.0, n_test.max(2)), 0.0, rng);
    (train, test, None)
}

fn synthetic_two_cluster(s: &DataSection, rng: &mut Rng) -> (Dataset, Dataset, Option<usize>) {
    let n_train = s.n_train.unwrap_or(100);
    let n_test = s.n_test.unwrap_or(161);
    let noise_sd = s.noise_sd.unwrap_or(0.1);
    // Two flat levels with a wide covariate gap: nothing in the data pins
    // where the transition happens, so a faithful posterior must spread it
    // across the gap. Targets sit at -1 left of the gap midpoint, +1 right.
    let xs: Vec<f64> = (0..n_train)
        .map(|i| {
            if i % 2 == 0 {
                rng.uniform(0.5, 1.5)
            } else {
                rng.uniform(2.5, 3.5)
            }
        })
        .collect();
    let train = step_dataset(xs, noise_sd, rng);
    let test = step_dataset(linspace(0.0, 4.0, n_test.max(2)), 0.0, rng);
    (train, test, None)
}

fn step_dataset(xs: Vec<f64>, noise_sd: f64, rng: &mut Rng) -> Dataset {
    let n = xs.len();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| if x < 2.0 { -1.0 } else { 1.0 } + noise_sd * rng.next_gaussian())
        .collect();
    Dataset {
        x: Tensor::from_vec(vec![n, 1], xs).unwrap(),
        targets: Targets::Values(Tensor::from_vec(vec![n, 1], ys).unwrap()),
    }
}

fn moons(n: usize, noise_sd: f64, rng: &mut Rng) -> Dataset {
    let mut x = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let t = rng.uniform(0.0, std::f64::consts::PI);
        let (cx, cy) = if i % 2 == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        x.push(cx + noise_sd * rng.next_gaussian());
        x.push(cy + noise_sd * rng.next_gaussian());
        labels.push(i % 2);
    }
    Dataset {
        x: Tensor::from_vec(vec![n, 2], x).unwrap(),
        targets: Targets::Labels(labels),
    }
}

fn synthetic_two_moons(s: &DataSection, rng: &mut Rng) -> (Dataset, Dataset, Option<usize>) {
    let n_train = s.n_train.unwrap_or(500);
    let n_test = s.n_test.unwrap_or(500);
    let noise_sd = s.noise_sd.unwrap_or(0.15);
    let train = moons(n_train, noise_sd, rng);
    let test = moons(n_test, noise_sd, rng);
    (train, test, Some(2))
}

fn synthetic_blob(s: &DataSection, rng: &mut Rng) -> (Dataset, Dataset, Option<usize>) {
    let center = s.center.clone().unwrap_or_else(|| vec![0.0, 0.0]);
    let noise_sd = s.noise_sd.unwrap_or(1.0);
    let d = center.len();
    let mut blob = |n: usize| -> Dataset {
        let mut x = Vec::with_capacity(n * d);
        for _ in 0..n {
            for &c in &center {
                x.push(c + noise_sd * rng.next_gaussian());
            }
        }
        Dataset {
            x: Tensor::from_vec(vec![n, d], x).unwrap(),
            targets: Targets::Labels(vec![0; n]),
        }
    };
    let train = blob(s.n_train.unwrap_or(200));
    let test = blob(s.n_test.unwrap_or(200));
    (train, test, Some(1))
}

/// Parse one CSV file: header row, features in column order, labels in
/// `label_column`. Returns (x, raw label strings).
fn read_csv_table(path: &Path, label_column: &str) -> Result<(Tensor, Vec<String>), Fail> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Fail::data(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Fail::data(format!("{}: {e}", path.display())))?
        .clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| {
            Fail::data(format!(
                "{}: no column named {label_column:?} (header: {})",
                path.display(),
                headers.iter().collect::<Vec<_>>().join(", ")
            ))
        })?;
    let d = headers.len() - 1;
    if d == 0 {
        return Err(Fail::data(format!(
            "{}: need at least one feature column besides {label_column:?}",
            path.display()
        )));
    }
    let mut x = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Fail::data(format!("{}: {e}", path.display())))?;
        if record.len() != headers.len() {
            return Err(Fail::data(format!(
                "{}: row {} has {} fields, header has {}",
                path.display(),
                row + 1,
                record.len(),
                headers.len()
            )));
        }
        for (col, field) in record.iter().enumerate() {
            if col == label_idx {
                if field.trim().is_empty() {
                    return Err(Fail::data(format!(
                        "{}: row {} is missing its label",
                        path.display(),
                        row + 1
                    )));
                }
                labels.push(field.trim().to_string());
            } else {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Fail::data(format!(
                        "{}: row {} column {:?}: cannot parse {field:?} as a number",
                        path.display(),
                        row + 1,
                        &headers[col]
                    ))
                })?;
                x.push(v);
            }
        }
    }
    let n = labels.len();
    if n == 0 {
        return Err(Fail::data(format!("{}: no data rows", path.display())));
    }
    Ok((Tensor::from_vec(vec![n, d], x).unwrap(), labels))
}

fn parse_labels(raw: &[String], path: &Path) -> Result<Vec<usize>, Fail> {
    raw.iter()
        .enumerate()
        .map(|(row, s)| {
            s.parse::<usize>().map_err(|_| {
                Fail::data(format!(
                    "{}: row {}: label {s:?} is not a class index (expected 0..C-1)",
                    path.display(),
                    row + 1
                ))
            })
        })
        .collect()
}

fn parse_values(raw: &[String], path: &Path) -> Result<Tensor, Fail> {
    let vals: Vec<f64> = raw
        .iter()
        .enumerate()
        .map(|(row, s)| {
            s.parse::<f64>().map_err(|_| {
                Fail::data(format!(
                    "{}: row {}: target {s:?} is not a number",
                    path.display(),
                    row + 1
                ))
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(Tensor::from_vec(vec![vals.len(), 1], vals).unwrap())
}

fn load_csv(
    s: &DataSection,
    classification: bool,
    split_rng: &mut Rng,
) -> Result<(Dataset, Dataset, Option<usize>), Fail> {
    let path = s
        .path
        .as_ref()
        .ok_or_else(|| Fail::config("csv source needs data.path"))?;
    let default_label = if classification { "label" } else { "target" };
    let label_column = s.label_column.as_deref().unwrap_or(default_label);
    let to_dataset = |path: &Path| -> Result<(Dataset, Vec<String>), Fail> {
        let (x, raw) = read_csv_table(path, label_column)?;
        let targets = if classification {
            Targets::Labels(parse_labels(&raw, path)?)
        } else {
            Targets::Values(parse_values(&raw, path)?)
        };
        Ok((Dataset { x, targets }, raw))
    };
    let (full, _) = to_dataset(path)?;
    let (train, test) = if let Some(tp) = &s.test_path {
        let (test, _) = to_dataset(tp)?;
        if features_of(&test) != features_of(&full) {
            return Err(Fail::data(format!(
                "{} has {} features but {} has {}",
                path.display(),
                features_of(&full),
                tp.display(),
                features_of(&test)
            )));
        }
        (full, test)
    } else {
        let n = full.len();
        let n_test = ((n as f64) * s.test_fraction.unwrap_or(0.1)).round() as usize;
        if n_test == 0 || n_test >= n {
            return Err(Fail::data(format!(
                "cannot carve a test split of {n_test} rows from {n}"
            )));
        }
        let order = split_rng.shuffled_indices(n);
        (full.select(&order[n_test..]), full.select(&order[..n_test]))
    };
    let classes = if classification {
        let max = [&train, &test]
            .iter()
            .flat_map(|d| match &d.targets {
                Targets::Labels(l) => l.iter(),
                Targets::Values(_) => unreachable!(),
            })
            .max()
            .copied()
            .unwrap_or(0);
        Some(max + 1)
    } else {
        None
    };
    Ok((train, test, classes))
}

/// Big-endian IDX container. `want_dims` is 3 for image stacks, 1 for label
/// vectors; every failure names the byte offset that broke the parse.
fn read_idx(path: &Path, want_dims: usize) -> Result<(Vec<usize>, Vec<u8>), Fail> {
    let bytes =
        std::fs::read(path).map_err(|e| Fail::data(format!("{}: {e}", path.display())))?;
    let need = |n: usize| -> Result<(), Fail> {
        if bytes.len() < n {
            Err(Fail::data(format!(
                "{}: file ends at byte {}, need {n}",
                path.display(),
                bytes.len()
            )))
        } else {
            Ok(())
        }
    };
    need(4)?;
    if bytes[0] != 0 || bytes[1] != 0 {
        let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
        return Err(Fail::data(format!(
            "{}: bad magic 0x{magic:08x} at byte 0 (first two bytes must be zero)",
            path.display()
        )));
    }
    if bytes[2] != 0x08 {
        return Err(Fail::data(format!(
            "{}: unsupported element type 0x{:02x} at byte 2 (only ubyte 0x08)",
            path.display(),
            bytes[2]
        )));
    }
    let ndim = bytes[3] as usize;
    if ndim != want_dims {
        return Err(Fail::data(format!(
            "{}: magic declares {ndim} dimensions at byte 3, expected {want_dims}",
            path.display()
        )));
    }
    need(4 + 4 * ndim)?;
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let o = 4 + 4 * i;
        dims.push(u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize);
    }
    let payload: usize = dims.iter().product();
    let total = 4 + 4 * ndim + payload;
    if bytes.len() != total {
        return Err(Fail::data(format!(
            "{}: file has {} bytes, dims {dims:?} need exactly {total}",
            path.display(),
            bytes.len()
        )));
    }
    Ok((dims, bytes[4 + 4 * ndim..].to_vec()))
}

fn idx_pair(images: &Path, labels: &Path) -> Result<Dataset, Fail> {
    let (dims, pixels) = read_idx(images, 3)?;
    let (ldims, lab) = read_idx(labels, 1)?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    if ldims[0] != n {
        return Err(Fail::data(format!(
            "{} has {n} images but {} has {} labels",
            images.display(),
            labels.display(),
            ldims[0]
        )));
    }
    let x: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Dataset {
        x: Tensor::from_vec(vec![n, 1, h, w], x).unwrap(),
        targets: Targets::Labels(lab.iter().map(|&b| b as usize).collect()),
    })
}

fn load_idx(s: &DataSection) -> Result<(Dataset, Dataset, Option<usize>), Fail> {
    let get = |field: &str, v: &Option<PathBuf>| -> Result<PathBuf, Fail> {
        v.clone()
            .ok_or_else(|| Fail::config(format!("idx-images needs data.{field}")))
    };
    let train = idx_pair(
        &get("train_images", &s.train_images)?,
        &get("train_labels", &s.train_labels)?,
    )?;
    let test = idx_pair(
        &get("test_images", &s.test_images)?,
        &get("test_labels", &s.test_labels)?,
    )?;
    let max = [&train, &test]
        .iter()
        .flat_map(|d| match &d.targets {
            Targets::Labels(l) => l.iter(),
            Targets::Values(_) => unreachable!(),
        })
        .max()
        .copied()
        .unwrap_or(0);
    Ok((train, test, Some(max + 1)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn section(toml_body: &str) -> DataSection {
        let s: DataSection = toml::from_str(toml_body).unwrap();
        s.validate().unwrap();
        s
    }

    fn labels(ds: &Dataset) -> &[usize] {
        match &ds.targets {
            Targets::Labels(l) => l,
            Targets::Values(_) => panic!("expected labels"),
        }
    }

    fn values(ds: &Dataset) -> &Tensor {
        match &ds.targets {
            Targets::Values(v) => v,
            Targets::Labels(_) => panic!("expected values"),
        }
    }

    #[test]
    fn sources_reject_fields_of_other_sources() {
        let s: DataSection =
            toml::from_str("source = \"synthetic-two-moons\"\nlabel_column = \"y\"").unwrap();
        let err = s.validate().unwrap_err().to_string();
        assert!(err.contains("does not take field \"label_column\""), "{err}");

        let s: DataSection = toml::from_str("source = \"nope\"").unwrap();
        let err = s.validate().unwrap_err().to_string();
        assert!(err.contains("unknown data source"), "{err}");

        let s: DataSection =
            toml::from_str("source = \"synthetic-cubic\"\nval_fraction = 1.0").unwrap();
        let err = s.validate().unwrap_err().to_string();
        assert!(err.contains("val_fraction must be in [0, 1)"), "{err}");
    }

    #[test]
    fn generation_is_a_pure_function_of_the_split_seed() {
        let s = section("source = \"synthetic-two-moons\"\nsplit_seed = 5");
        let a = load(&s, 1).unwrap();
        let b = load(&s, 2).unwrap();
        assert_eq!(a.train.x.data(), b.train.x.data(), "fallback seed must not matter");

        let s2 = section("source = \"synthetic-two-moons\"\nsplit_seed = 6");
        let c = load(&s2, 1).unwrap();
        assert_ne!(a.train.x.data(), c.train.x.data());

        // Without split_seed the experiment seed is the fallback.
        let s3 = section("source = \"synthetic-two-moons\"");
        let d = load(&s3, 5).unwrap();
        assert_eq!(a.train.x.data(), d.train.x.data());
    }

    #[test]
    fn val_carve_comes_out_of_the_training_split() {
        let s = section(
            "source = \"synthetic-two-moons\"\nn_train = 100\nval_fraction = 0.2",
        );
        let h = load(&s, 3).unwrap();
        assert_eq!(h.train.len(), 80);
        assert_eq!(h.val.len(), 20);
        assert_eq!(h.classes, Some(2));
        assert!(h.split("val").is_ok());

        let err = h.split("bogus").unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");

        let no_val = load(&section("source = \"synthetic-two-moons\""), 3).unwrap();
        let err = no_val.split("val").unwrap_err().to_string();
        assert!(err.contains("val split is empty"), "{err}");
    }

    #[test]
    fn cubic_test_split_is_a_noise_free_grid() {
        let h = load(&section("source = \"synthetic-cubic\""), 9).unwrap();
        assert_eq!(h.train.len(), 20);
        assert_eq!(h.test.len(), 121);
        let x = h.test.x.data();
        let y = values(&h.test).data();
        assert_eq!(x[0], -6.0);
        assert_eq!(x[120], 6.0);
        for i in 0..121 {
            assert_eq!(y[i], x[i] * x[i] * x[i], "grid must be noise-free");
        }
        for &v in h.train.x.data() {
            assert!((-4.0..=4.0).contains(&v));
        }
    }

    #[test]
    fn two_cluster_covariates_leave_the_gap_empty() {
        let h = load(&section("source = \"synthetic-two-cluster\""), 4).unwrap();
        assert_eq!(h.train.len(), 100);
        let xs = h.train.x.data();
        let ys = values(&h.train).data();
        for (x, y) in xs.iter().zip(ys) {
            let in_left = (0.5..=1.5).contains(x);
            let in_right = (2.5..=3.5).contains(x);
            assert!(in_left || in_right, "covariate {x} inside the gap");
            let level = if *x < 2.0 { -1.0 } else { 1.0 };
            assert!((y - level).abs() < 1.0, "target {y} far from its level");
        }
        // Noise-free test grid spans the gap.
        let gx = h.test.x.data();
        let gy = values(&h.test).data();
        assert_eq!((gx[0], gx[160]), (0.0, 4.0));
        assert!(gy.iter().all(|&v| v == -1.0 || v == 1.0));
    }

    #[test]
    fn blob_dimension_follows_its_center() {
        let h = load(
            &section("source = \"synthetic-blob\"\ncenter = [1.0, -2.0, 3.0]"),
            8,
        )
        .unwrap();
        assert_eq!(h.train.x.shape()[1], 3);
        assert_eq!(h.classes, Some(1));
        assert!(labels(&h.train).iter().all(|&l| l == 0));
    }

    #[test]
    fn csv_classification_infers_classes_and_checks_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        std::fs::write(&p, "a,b,label\n1.0,2.0,0\n3.0,4.0,2\n5.0,6.0,1\n0.5,0.5,0\n").unwrap();
        let body = format!(
            "source = \"csv-classification\"\npath = \"{}\"\nlabel_column = \"label\"\ntest_fraction = 0.25\nnormalize = false",
            p.display()
        );
        let h = load(&section(&body), 1).unwrap();
        assert_eq!(h.classes, Some(3), "classes = max label + 1");
        assert_eq!(h.train.len() + h.test.len(), 4);
        assert_eq!(h.test.len(), 1);

        std::fs::write(&p, "a,label\n1.0,0\nnot_a_number,1\n").unwrap();
        let err = load(&section(&body), 1).unwrap_err().to_string();
        assert!(err.contains("row 2") && err.contains("column \"a\""), "{err}");

        std::fs::write(&p, "a,b\n1.0,2.0\n").unwrap();
        let err = load(&section(&body), 1).unwrap_err().to_string();
        assert!(err.contains("no column named \"label\""), "{err}");
    }

    #[test]
    fn normalization_statistics_come_from_the_training_split_only() {
        let dir = tempfile::tempdir().unwrap();
        let train = dir.path().join("train.csv");
        let test = dir.path().join("test.csv");
        // Train feature: mean 1, population sd 1. Test values far away.
        std::fs::write(&train, "x,y\n0.0,0.0\n2.0,0.0\n").unwrap();
        std::fs::write(&test, "x,y\n11.0,0.0\n").unwrap();
        let body = format!(
            "source = \"csv-regression\"\npath = \"{}\"\ntest_path = \"{}\"\nlabel_column = \"y\"",
            train.display(),
            test.display()
        );
        let h = load(&section(&body), 1).unwrap();
        assert_eq!(h.train.x.data(), &[-1.0, 1.0]);
        // (11 - 1) / 1: the test split is transformed with train statistics.
        assert_eq!(h.test.x.data(), &[10.0]);
        let norm = h.norm.as_ref().unwrap();
        assert_eq!((norm.mean[0], norm.sd[0]), (1.0, 1.0));
    }

    #[test]
    fn constant_features_normalize_to_zero() {
        let t = Tensor::from_vec(vec![3, 1], vec![5.0, 5.0, 5.0]).unwrap();
        let n = Normalizer::fit(&t);
        assert_eq!(n.sd[0], 1.0, "sd floor keeps constants finite");
        assert!(n.apply(&t).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn idx_failures_name_the_offending_byte() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.idx");
        let write = |bytes: &[u8]| std::fs::write(&p, bytes).unwrap();

        write(&[9, 0, 8, 1]);
        let err = read_idx(&p, 1).unwrap_err().to_string();
        assert!(err.contains("bad magic") && err.contains("at byte 0"), "{err}");

        write(&[0, 0, 7, 1]);
        let err = read_idx(&p, 1).unwrap_err().to_string();
        assert!(
            err.contains("unsupported element type 0x07 at byte 2"),
            "{err}"
        );

        write(&[0, 0, 8, 3, 0, 0, 0, 1]);
        let err = read_idx(&p, 1).unwrap_err().to_string();
        assert!(
            err.contains("declares 3 dimensions at byte 3, expected 1"),
            "{err}"
        );

        write(&[0, 0]);
        let err = read_idx(&p, 1).unwrap_err().to_string();
        assert!(err.contains("ends at byte 2, need 4"), "{err}");

        write(&[0, 0, 8, 1, 0, 0, 0, 5, 1, 2, 3]);
        let err = read_idx(&p, 1).unwrap_err().to_string();
        assert!(
            err.contains("file has 11 bytes") && err.contains("need exactly 13"),
            "{err}"
        );

        write(&[0, 0, 8, 2, 0, 0, 0, 2, 0, 0, 0, 3, 10, 20, 30, 40, 50, 60]);
        let (dims, payload) = read_idx(&p, 2).unwrap();
        assert_eq!(dims, vec![2, 3]);
        assert_eq!(payload, vec![10, 20, 30, 40, 50, 60]);
    }

    #[test]
    fn idx_pair_scales_pixels_and_counts_labels() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("img.idx");
        let lab = dir.path().join("lab.idx");
        // Two 2x2 images.
        std::fs::write(
            &images,
            [0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, 0, 51, 102, 255, 0, 0, 0, 0],
        )
        .unwrap();
        std::fs::write(&lab, [0, 0, 8, 1, 0, 0, 0, 2, 1, 0]).unwrap();
        let ds = idx_pair(&images, &lab).unwrap();
        assert_eq!(ds.x.shape(), &[2, 1, 2, 2]);
        assert_eq!(ds.x.data()[1], 51.0 / 255.0);
        assert_eq!(ds.x.data()[3], 1.0);
        assert_eq!(labels(&ds), &[1, 0]);

        // Label count must match the image count.
        std::fs::write(&lab, [0, 0, 8, 1, 0, 0, 0, 1, 1]).unwrap();
        let err = idx_pair(&images, &lab).unwrap_err().to_string();
        assert!(err.contains("2 images") && err.contains("1 labels"), "{err}");
    }
}
