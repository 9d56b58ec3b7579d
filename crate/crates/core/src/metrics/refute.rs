//! Stability checks for the observational effect estimate.

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::ate::{observational_from_correctness, AteReport, Predictor, DEFAULT_BOOTSTRAP};
use crate::data::DatasetManifest;
use crate::error::{Result, TltError};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefutationKind {
    /// Adjust for an appended independent random covariate.
    CommonCause,
    /// Replace every treatment with an independent fair coin.
    Placebo,
    /// Re-estimate on a uniformly random subset.
    Subset,
}

impl RefutationKind {
    pub const ALL: [RefutationKind; 3] = [Self::CommonCause, Self::Placebo, Self::Subset];

    pub fn name(self) -> &'static str {
        match self {
            Self::CommonCause => "common_cause",
            Self::Placebo => "placebo",
            Self::Subset => "subset",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| TltError::Config(format!("unknown refutation {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefuteOptions {
    pub trials: usize,
    pub seed: u64,
    pub subset_fraction: f64,
    /// Quantile strata used to adjust for the random common cause.
    pub strata: usize,
    pub resamples: usize,
    /// Lower bound for the common-cause and subset tolerances.
    pub min_tolerance: f64,
    pub placebo_tolerance: f64,
}

impl Default for RefuteOptions {
    fn default() -> Self {
        Self {
            trials: 20,
            seed: 0,
            subset_fraction: 0.8,
            strata: 5,
            resamples: DEFAULT_BOOTSTRAP,
            min_tolerance: 0.02,
            placebo_tolerance: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefutationEntry {
    pub kind: RefutationKind,
    /// Mean over trials of the absolute effect.
    pub estimate: f64,
    /// Mean over trials of the signed effect.
    pub signed_mean: f64,
    pub trials: usize,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefutationReport {
    pub original: AteReport,
    pub common_cause: RefutationEntry,
    pub placebo: RefutationEntry,
    pub subset: RefutationEntry,
}

impl RefutationReport {
    pub fn entries(&self) -> [&RefutationEntry; 3] {
        [&self.common_cause, &self.placebo, &self.subset]
    }
}

/// `(tol_c, tol_s, tol_p)` for an original estimate.
pub fn tolerances(original: &AteReport, opts: &RefuteOptions) -> (f64, f64, f64) {
    let t = opts.min_tolerance.max(original.ci_half_width());
    (t, t, opts.placebo_tolerance)
}

/// Predictions and correctness computed once; every refutation reuses them.
struct Prepared {
    correct: Vec<bool>,
    t: Vec<u8>,
}

fn prepare(model: &dyn Predictor, data: &DatasetManifest) -> Result<Prepared> {
    let pred = model.predict_labels(&data.records)?;
    if pred.len() != data.len() {
        return Err(TltError::Precondition("one prediction per record is required".into()));
    }
    Ok(Prepared {
        correct: pred.iter().zip(&data.records).map(|(p, s)| *p == s.y).collect(),
        t: data.records.iter().map(|s| s.t).collect(),
    })
}

/// Effect adjusted for covariate `w` by stratifying on its quantiles; strata
/// missing an arm are dropped and the remaining weights renormalized.
pub fn stratified_effect(correct: &[bool], t: &[u8], w: &[f64], strata: usize) -> Result<f64> {
    let n = correct.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| w[*a].total_cmp(&w[*b]).then(a.cmp(b)));
    let (mut acc, mut weight) = (0.0, 0usize);
    for s in 0..strata {
        let cell = &order[s * n / strata..(s + 1) * n / strata];
        let (mut c1, mut n1, mut c0, mut n0) = (0u64, 0u64, 0u64, 0u64);
        for &i in cell {
            let hit = u64::from(correct[i]);
            if t[i] == 1 {
                c1 += hit;
                n1 += 1;
            } else {
                c0 += hit;
                n0 += 1;
            }
        }
        if n1 > 0 && n0 > 0 {
            acc += cell.len() as f64 * (c1 as f64 / n1 as f64 - c0 as f64 / n0 as f64);
            weight += cell.len();
        }
    }
    if weight == 0 {
        return Err(TltError::EstimandUndefined("no stratum contains both treatment arms".into()));
    }
    Ok(acc / weight as f64)
}

fn run_trials(
    model: &dyn Predictor,
    prepared: &Prepared,
    data: &DatasetManifest,
    kind: RefutationKind,
    opts: &RefuteOptions,
) -> Result<(f64, f64)> {
    if opts.trials < 1 {
        return Err(TltError::Domain("refutation needs at least one trial".into()));
    }
    if !(opts.subset_fraction > 0.0 && opts.subset_fraction <= 1.0) {
        return Err(TltError::Domain(format!("subset fraction {} outside (0, 1]", opts.subset_fraction)));
    }
    if opts.strata == 0 {
        return Err(TltError::Domain("at least one stratum is required".into()));
    }
    let n = prepared.t.len();
    let (mut abs_mean, mut signed_mean) = (0.0, 0.0);
    for trial in 0..opts.trials {
        let mut rng = seed::rng(seed::derive(opts.seed, &["refute".into(), kind.name().into(), trial.into()]));
        let signed = match kind {
            RefutationKind::CommonCause => {
                let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
                let augmented: Vec<_> =
                    data.records.iter().zip(&w).map(|(s, v)| s.with_appended_feature(*v)).collect();
                let pred = model.predict_labels(&augmented)?;
                let correct: Vec<bool> = pred.iter().zip(&data.records).map(|(p, s)| *p == s.y).collect();
                stratified_effect(&correct, &prepared.t, &w, opts.strata)?
            }
            RefutationKind::Placebo => {
                let t: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.5))).collect();
                observational_from_correctness(&prepared.correct, &t, 0, opts.seed)?.signed_ate
            }
            RefutationKind::Subset => {
                let m = ((opts.subset_fraction * n as f64).round() as usize).max(1);
                let mut idx = sample_indices(&mut rng, n, m).into_vec();
                idx.sort_unstable();
                let correct: Vec<bool> = idx.iter().map(|i| prepared.correct[*i]).collect();
                let t: Vec<u8> = idx.iter().map(|i| prepared.t[*i]).collect();
                observational_from_correctness(&correct, &t, 0, opts.seed)?.signed_ate
            }
        };
        // Running means stay bit-exact when every trial agrees.
        let k = (trial + 1) as f64;
        abs_mean += (signed.abs() - abs_mean) / k;
        signed_mean += (signed - signed_mean) / k;
    }
    Ok((abs_mean, signed_mean))
}

/// One refutation of the observational estimate, averaged over trials.
pub fn refute(
    model: &dyn Predictor,
    data: &DatasetManifest,
    kind: RefutationKind,
    opts: &RefuteOptions,
) -> Result<RefutationEntry> {
    let prepared = prepare(model, data)?;
    let original = observational_from_correctness(&prepared.correct, &prepared.t, opts.resamples, opts.seed)?;
    entry(model, &prepared, data, &original, kind, opts)
}

fn entry(
    model: &dyn Predictor,
    prepared: &Prepared,
    data: &DatasetManifest,
    original: &AteReport,
    kind: RefutationKind,
    opts: &RefuteOptions,
) -> Result<RefutationEntry> {
    let (estimate, signed_mean) = run_trials(model, prepared, data, kind, opts)?;
    let (tol_c, tol_s, tol_p) = tolerances(original, opts);
    let (tolerance, pass) = match kind {
        RefutationKind::CommonCause => (tol_c, (estimate - original.ate).abs() <= tol_c),
        RefutationKind::Subset => (tol_s, (estimate - original.ate).abs() <= tol_s),
        RefutationKind::Placebo => (tol_p, estimate.abs() <= tol_p),
    };
    Ok(RefutationEntry { kind, estimate, signed_mean, trials: opts.trials, tolerance, pass })
}

/// Original estimate plus all three refutations.
pub fn refutation_report(model: &dyn Predictor, data: &DatasetManifest, opts: &RefuteOptions) -> Result<RefutationReport> {
    let prepared = prepare(model, data)?;
    let original = observational_from_correctness(&prepared.correct, &prepared.t, opts.resamples, opts.seed)?;
    Ok(RefutationReport {
        common_cause: entry(model, &prepared, data, &original, RefutationKind::CommonCause, opts)?,
        placebo: entry(model, &prepared, data, &original, RefutationKind::Placebo, opts)?,
        subset: entry(model, &prepared, data, &original, RefutationKind::Subset, opts)?,
        original,
    })
}
