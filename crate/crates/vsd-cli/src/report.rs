//! Report emission: atomic file writes, the per-epoch trace CSV, metric and
//! diagnostic JSON, prediction CSVs, and the OOD entropy histogram.
//!
//! Every file lands via write-temp-then-rename, so a crash never leaves a
//! half-written artifact. Float columns are printed with Rust's shortest
//! round-trip formatting: equal bits give equal bytes, which the determinism
//! gate (train twice, compare traces) relies on.
//!
//! Trace CSV schema (one row per epoch, in order):
//! `epoch,objective,data_term,kl_term,lr,kl_weight`

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use vsd_core::train::EpochTrace;

use crate::fail::Fail;

/// Write-temp-then-rename within the destination directory.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), Fail> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Fail> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

pub const TRACE_HEADER: &str = "epoch,objective,data_term,kl_term,lr,kl_weight";

pub fn trace_row(t: &EpochTrace) -> String {
    format!(
        "{},{},{},{},{},{}",
        t.epoch, t.objective, t.data_term, t.kl_term, t.lr, t.kl_weight
    )
}

/// Append-only trace writer. A fresh run truncates and writes the header; a
/// resumed run requires the file to hold exactly `expect_rows` data rows
/// already (anything else means the trace does not belong to the checkpoint).
#[derive(Debug)]
pub struct TraceFile {
    path: PathBuf,
}

impl TraceFile {
    pub fn fresh(path: PathBuf) -> Result<TraceFile, Fail> {
        atomic_write(&path, format!("{TRACE_HEADER}\n").as_bytes())?;
        Ok(TraceFile { path })
    }

    pub fn resume(path: PathBuf, expect_rows: usize) -> Result<TraceFile, Fail> {
        let text = fs::read_to_string(&path)
            .map_err(|e| Fail::config(format!("cannot resume trace {}: {e}", path.display())))?;
        let mut lines = text.lines();
        if lines.next() != Some(TRACE_HEADER) {
            return Err(Fail::config(format!(
                "{}: trace header does not match {TRACE_HEADER:?}",
                path.display()
            )));
        }
        let rows = lines.count();
        if rows != expect_rows {
            return Err(Fail::config(format!(
                "{}: trace has {rows} rows but the checkpoint completed {expect_rows} epochs",
                path.display()
            )));
        }
        Ok(TraceFile { path })
    }

    /// Appends one completed epoch. Not atomic (append semantics are the
    /// point); the checkpoint written after it is the recovery anchor.
    pub fn append(&self, t: &EpochTrace) -> Result<(), Fail> {
        let mut f = fs::OpenOptions::new().append(true).open(&self.path)?;
        writeln!(f, "{}", trace_row(t))?;
        Ok(())
    }
}

/// `row,label,pred,p0..p{C-1}` for classification predictions.
pub fn write_classification_csv(
    path: &Path,
    probs: &vsd_core::Tensor,
    labels: &[usize],
) -> Result<(), Fail> {
    let (n, c) = (probs.shape()[0], probs.shape()[1]);
    let mut out = String::from("row,label,pred");
    for j in 0..c {
        out.push_str(&format!(",p{j}"));
    }
    out.push('\n');
    for i in 0..n {
        let row = &probs.data()[i * c..(i + 1) * c];
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(j, _)| j)
            .unwrap();
        out.push_str(&format!("{i},{},{pred}", labels[i]));
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

/// `row,target,mean,variance` for regression predictions; `variance` is the
/// full predictive variance (MC spread + observation noise 1/τ).
pub fn write_regression_csv(
    path: &Path,
    targets: &vsd_core::Tensor,
    mean: &vsd_core::Tensor,
    variance: &vsd_core::Tensor,
) -> Result<(), Fail> {
    let n = mean.numel();
    let mut out = String::from("row,target,mean,variance\n");
    for i in 0..n {
        out.push_str(&format!(
            "{i},{},{},{}\n",
            targets.data()[i],
            mean.data()[i],
            variance.data()[i]
        ));
    }
    atomic_write(path, out.as_bytes())
}

/// `bin_lo,bin_hi,count_in,count_out,cdf_in,cdf_out` over a shared range.
pub fn write_entropy_histogram(
    path: &Path,
    hist_in: &vsd_core::metrics::Histogram,
    hist_out: &vsd_core::metrics::Histogram,
) -> Result<(), Fail> {
    assert_eq!(hist_in.counts.len(), hist_out.counts.len());
    assert_eq!(hist_in.lo, hist_out.lo);
    assert_eq!(hist_in.hi, hist_out.hi);
    let bins = hist_in.counts.len();
    let width = (hist_in.hi - hist_in.lo) / bins as f64;
    let (cdf_in, cdf_out) = (hist_in.cdf(), hist_out.cdf());
    let mut out = String::from("bin_lo,bin_hi,count_in,count_out,cdf_in,cdf_out\n");
    for b in 0..bins {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            hist_in.lo + b as f64 * width,
            hist_in.lo + (b + 1) as f64 * width,
            hist_in.counts[b],
            hist_out.counts[b],
            cdf_in[b],
            cdf_out[b]
        ));
    }
    atomic_write(path, out.as_bytes())
}
