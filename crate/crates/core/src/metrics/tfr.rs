//! Treatment-feature ratio over matched treated/untreated views.

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Result, TltError};
use crate::model::{ops, TltModel};

/// Denominators at or below this value leave the score undefined.
pub const TFR_DENOMINATOR_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfrReport {
    pub layer: usize,
    /// `None` where the untreated features sum to at most the guard.
    pub scores: Vec<Option<f64>>,
    pub pairs: usize,
    /// Mean of the defined scores.
    pub mean: f64,
    /// Mean of the top 1% of defined scores (at least one score).
    pub top1_mean: f64,
}

impl TfrReport {
    pub fn undefined(&self) -> usize {
        self.scores.iter().filter(|s| s.is_none()).count()
    }
}

/// `s_l = sum_j |treated[j][l] - untreated[j][l]| / sum_j |untreated[j][l]|`.
pub fn tfr_from_features(layer: usize, untreated: &[Vec<f64>], treated: &[Vec<f64>]) -> Result<TfrReport> {
    if untreated.is_empty() {
        return Err(TltError::Precondition("no matched pairs".into()));
    }
    if untreated.len() != treated.len() {
        return Err(TltError::Precondition("treated and untreated views differ in count".into()));
    }
    let width = untreated[0].len();
    if untreated.iter().chain(treated).any(|f| f.len() != width) {
        return Err(TltError::Precondition("feature vectors differ in length".into()));
    }
    let scores: Vec<Option<f64>> = (0..width)
        .map(|l| {
            let num: f64 = untreated.iter().zip(treated).map(|(u, t)| (t[l] - u[l]).abs()).sum();
            let den: f64 = untreated.iter().map(|u| u[l].abs()).sum();
            (den > TFR_DENOMINATOR_GUARD).then(|| num / den)
        })
        .collect();
    let mut defined: Vec<f64> = scores.iter().flatten().copied().collect();
    defined.sort_by(|a, b| b.total_cmp(a));
    let (mean, top1_mean) = if defined.is_empty() {
        (0.0, 0.0)
    } else {
        let top = defined.len().div_ceil(100);
        (
            defined.iter().sum::<f64>() / defined.len() as f64,
            defined[..top].iter().sum::<f64>() / top as f64,
        )
    };
    Ok(TfrReport { layer, scores, pairs: untreated.len(), mean, top1_mean })
}

/// Channel-wise spatial means of encoder stage `layer` for each sample.
pub fn layer_features(model: &TltModel, samples: &[Sample], layer: usize) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(128) {
        let a = model.encode_prefix(&model.input_tensor(chunk)?, layer)?;
        let pooled = if a.rank() == 4 { ops::pool(&a)? } else { a };
        rows.extend(ops::to_f64_rows(&pooled)?);
    }
    Ok(rows)
}

/// TFR of encoder stage `layer` over `(untreated, treated)` scene pairs.
pub fn tfr_score(model: &TltModel, pairs: &[(Sample, Sample)], layer: usize) -> Result<TfrReport> {
    if pairs.is_empty() {
        return Err(TltError::Precondition("no matched pairs".into()));
    }
    let untreated: Vec<Sample> = pairs.iter().map(|p| p.0.clone()).collect();
    let treated: Vec<Sample> = pairs.iter().map(|p| p.1.clone()).collect();
    tfr_from_features(layer, &layer_features(model, &untreated, layer)?, &layer_features(model, &treated, layer)?)
}
