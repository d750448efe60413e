//! Quantile filtering of training samples by prediction error.

use std::fmt::Write as _;

use thiserror::Error;

use crate::dataio::{Mask, SampleRecord, IGNORE_INDEX};

#[derive(Debug, Error, PartialEq)]
pub enum DenoiseError {
    #[error("prediction is {pred:?} but ground truth is {gt:?}")]
    ShapeMismatch { pred: (usize, usize), gt: (usize, usize) },
    #[error("cannot take a quantile of an empty list")]
    EmptyList,
    #[error("sample {0:?} has no error score")]
    UnscoredRecord(String),
    #[error("quantile {0} outside (0, 1)")]
    BadQuantile(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorScore {
    pub sample_id: String,
    pub error_rate: f64,
    pub evaluated_pixels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenoiseMode {
    /// Remove whole samples above the threshold.
    DropSamples,
    /// Keep every sample; zero the loss on each mask's highest-error pixels.
    DownweightPixels,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiseConfig {
    pub quantile: f64,
    pub mode: DenoiseMode,
    pub ignore_index: u8,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self { quantile: 0.975, mode: DenoiseMode::DropSamples, ignore_index: IGNORE_INDEX }
    }
}

pub fn score(sample_id: &str, pred: &Mask, gt: &Mask, ignore: u8) -> Result<ErrorScore, DenoiseError> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(DenoiseError::ShapeMismatch { pred: (pred.height, pred.width), gt: (gt.height, gt.width) });
    }
    let mut evaluated = 0usize;
    let mut wrong = 0usize;
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        if g != ignore {
            evaluated += 1;
            wrong += usize::from(p != g);
        }
    }
    let error_rate = if evaluated == 0 { 0.0 } else { wrong as f64 / evaluated as f64 };
    Ok(ErrorScore { sample_id: sample_id.to_string(), error_rate, evaluated_pixels: evaluated })
}

/// Fraction of non-ignored pixels where the prediction disagrees.
pub fn pixel_error_rate(pred: &Mask, gt: &Mask, ignore: u8) -> Result<f64, DenoiseError> {
    Ok(score("", pred, gt, ignore)?.error_rate)
}

/// 1-indexed nearest rank `ceil(q * n)`, clamped to `[1, n]`. The tiny
/// slack keeps decimal quantiles like 0.975 from rounding up a whole rank
/// when their binary value sits just above the decimal one.
pub fn nearest_rank(q: f64, n: usize) -> usize {
    ((q * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

pub fn quantile_threshold(errors: &[f64], q: f64) -> Result<f64, DenoiseError> {
    if !(q > 0.0 && q < 1.0) {
        return Err(DenoiseError::BadQuantile(q));
    }
    if errors.is_empty() {
        return Err(DenoiseError::EmptyList);
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[nearest_rank(q, sorted.len()) - 1])
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterEntry {
    pub sample_id: String,
    pub error_rate: f64,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterReport {
    pub threshold: f64,
    pub entries: Vec<FilterEntry>,
}

impl FilterReport {
    pub fn dropped(&self) -> usize {
        self.entries.iter().filter(|e| !e.kept).count()
    }

    pub fn dropped_ids(&self) -> Vec<&str> {
        self.entries.iter().filter(|e| !e.kept).map(|e| e.sample_id.as_str()).collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("# threshold\t{}\n# sample_id\terror_rate\tstatus\n", self.threshold);
        for e in &self.entries {
            let status = if e.kept { "kept" } else { "dropped" };
            writeln!(s, "{}\t{}\t{}", e.sample_id, e.error_rate, status).expect("string write");
        }
        s
    }
}

/// Keeps records at or below the quantile threshold, in their original
/// order; strictly greater error rates are dropped.
pub fn filter_dataset(
    records: &[SampleRecord],
    cfg: &DenoiseConfig,
) -> Result<(Vec<SampleRecord>, FilterReport), DenoiseError> {
    let scores = records
        .iter()
        .map(|r| {
            let e = r.error_rate.ok_or_else(|| DenoiseError::UnscoredRecord(r.sample_id.clone()))?;
            Ok(ErrorScore { sample_id: r.sample_id.clone(), error_rate: e, evaluated_pixels: 0 })
        })
        .collect::<Result<Vec<_>, DenoiseError>>()?;
    let report = filter_scores(&scores, cfg)?;
    let kept = records.iter().zip(&report.entries).filter(|(_, e)| e.kept).map(|(r, _)| r.clone()).collect();
    Ok((kept, report))
}

/// [`filter_dataset`] over bare scores.
pub fn filter_scores(scores: &[ErrorScore], cfg: &DenoiseConfig) -> Result<FilterReport, DenoiseError> {
    let rates: Vec<f64> = scores.iter().map(|s| s.error_rate).collect();
    let threshold = quantile_threshold(&rates, cfg.quantile)?;
    let entries = scores
        .iter()
        .map(|s| FilterEntry { sample_id: s.sample_id.clone(), error_rate: s.error_rate, kept: s.error_rate <= threshold })
        .collect();
    Ok(FilterReport { threshold, entries })
}

/// 0 for pixels whose error exceeds the map's own `q` quantile, else 1.
pub fn pixel_weight_map(per_pixel_errors: &[f64], q: f64) -> Result<Vec<f64>, DenoiseError> {
    let t = quantile_threshold(per_pixel_errors, q)?;
    Ok(per_pixel_errors.iter().map(|&e| if e > t { 0.0 } else { 1.0 }).collect())
}
