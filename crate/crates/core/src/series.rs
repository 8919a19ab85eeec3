//! Raw series ingestion, instance normalization, and patching.
//!
//! Every series entering the model passes through the same two steps:
//! per-series standardization to zero mean / unit variance, then
//! segmentation into fixed-length non-overlapping patches. The trailing
//! remainder that does not fill a whole patch is dropped and counted.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default divisor epsilon for instance normalization.
pub const NORM_EPS: f64 = 1e-8;

/// A univariate time series with optional textual context.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TimeSeries {
    pub series_id: String,
    pub values: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domain_tag: Option<String>,
}

impl TimeSeries {
    pub fn new(series_id: impl Into<String>, values: Vec<f64>) -> Self {
        TimeSeries {
            series_id: series_id.into(),
            values,
            context: None,
            domain_tag: None,
        }
    }

    pub fn with_context(mut self, context: impl Into<String>) -> Self {
        self.context = Some(context.into());
        self
    }

    pub fn with_domain(mut self, tag: impl Into<String>) -> Self {
        self.domain_tag = Some(tag.into());
        self
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Checks the type invariants: non-empty, all values finite.
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::data(&self.series_id, "empty series"));
        }
        if let Some(pos) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(
                &self.series_id,
                format!("non-finite value at index {pos}"),
            ));
        }
        Ok(())
    }
}

/// A standardized series together with the statistics needed to invert it.
#[derive(Debug, Clone)]
pub struct NormalizedSeries {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub eps: f64,
}

/// Normalized values cut into an `N x P` grid of non-overlapping patches.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    /// Row-major `num_patches x patch_len`.
    pub patches: Vec<f64>,
    pub num_patches: usize,
    pub patch_len: usize,
    pub dropped_tail: usize,
}

impl PatchGrid {
    pub fn row(&self, j: usize) -> &[f64] {
        &self.patches[j * self.patch_len..(j + 1) * self.patch_len]
    }
}

/// Standardize a series to zero mean and unit variance.
///
/// Uses the population standard deviation; `eps` is added to the divisor
/// so constant series map to all-zeros instead of erroring.
pub fn instance_normalize(series: &TimeSeries, eps: f64) -> Result<NormalizedSeries> {
    series.validate()?;
    if eps < 0.0 || !eps.is_finite() {
        return Err(Error::config("normalization eps must be finite and >= 0"));
    }
    let n = series.values.len() as f64;
    let mean = series.values.iter().sum::<f64>() / n;
    let var = series.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let denom = std + eps;
    let values = if denom == 0.0 {
        vec![0.0; series.values.len()]
    } else {
        series.values.iter().map(|v| (v - mean) / denom).collect()
    };
    Ok(NormalizedSeries {
        values,
        mean,
        std,
        eps,
    })
}

/// Cut a normalized series into `floor(L / P)` non-overlapping patches.
pub fn patch(norm: &NormalizedSeries, patch_len: usize) -> Result<PatchGrid> {
    if patch_len == 0 {
        return Err(Error::config("patch length must be >= 1"));
    }
    let len = norm.values.len();
    if len < patch_len {
        return Err(Error::config(format!(
            "series shorter than one patch: length {len} < patch length {patch_len}"
        )));
    }
    let num_patches = len / patch_len;
    let kept = num_patches * patch_len;
    Ok(PatchGrid {
        patches: norm.values[..kept].to_vec(),
        num_patches,
        patch_len,
        dropped_tail: len - kept,
    })
}

/// Invert instance normalization: `values * std + mean`.
pub fn denormalize(values: &[f64], mean: f64, std: f64) -> Vec<f64> {
    values.iter().map(|v| v * std + mean).collect()
}

/// Read line-delimited series records from a file.
pub fn read_series_file(path: impl AsRef<Path>) -> Result<Vec<TimeSeries>> {
    let file = std::fs::File::open(path.as_ref())?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TimeSeries = serde_json::from_str(&line).map_err(|e| {
            Error::Parse(format!(
                "{}:{}: bad series record: {e}",
                path.as_ref().display(),
                lineno + 1
            ))
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Write series as line-delimited records.
pub fn write_series_file(path: impl AsRef<Path>, series: &[TimeSeries]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    for s in series {
        let line = serde_json::to_string(s).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(file, "{line}")?;
    }
    file.flush()?;
    Ok(())
}
