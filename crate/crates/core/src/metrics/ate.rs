//! Average treatment effect estimators with bootstrap intervals.

use candle_core::{Device, Tensor};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, Sample};
use crate::error::{Result, TltError};
use crate::model::{ops, Observed, TltModel};
use crate::seed;

/// Anything that maps samples to class labels.
pub trait Predictor {
    fn predict_labels(&self, samples: &[Sample]) -> Result<Vec<usize>>;
}

impl Predictor for TltModel {
    fn predict_labels(&self, samples: &[Sample]) -> Result<Vec<usize>> {
        self.predict(samples)
    }
}

impl<F> Predictor for F
where
    F: Fn(&Sample) -> usize,
{
    fn predict_labels(&self, samples: &[Sample]) -> Result<Vec<usize>> {
        Ok(samples.iter().map(self).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimand {
    Observational,
    Interventional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteReport {
    pub estimand: Estimand,
    /// Absolute effect.
    pub ate: f64,
    /// `arm_means.0 - arm_means.1`.
    pub signed_ate: f64,
    /// `(E[. | t = 1], E[. | t = 0])`.
    pub arm_means: (f64, f64),
    pub n: usize,
    pub mc_samples: Option<usize>,
    /// 95% percentile interval for `ate`, widened to contain the point
    /// estimate.
    pub bootstrap_ci: (f64, f64),
    pub seed: u64,
}

impl AteReport {
    pub fn ci_half_width(&self) -> f64 {
        0.5 * (self.bootstrap_ci.1 - self.bootstrap_ci.0)
    }
}

pub const DEFAULT_BOOTSTRAP: usize = 1000;

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Maps a percentile interval of a signed statistic onto its absolute
/// value and stretches it to cover `point`.
fn absolute_interval(signed: &mut [f64], point: f64) -> (f64, f64) {
    signed.sort_by(f64::total_cmp);
    let (lo, hi) = (percentile(signed, 0.025), percentile(signed, 0.975));
    let (lo, hi) = if lo >= 0.0 {
        (lo, hi)
    } else if hi <= 0.0 {
        (-hi, -lo)
    } else {
        (0.0, hi.max(-lo))
    };
    (lo.min(point), hi.max(point))
}

/// `a/b - c/d` from integer counts with a single rounding.
fn rate_difference(a: u64, b: u64, c: u64, d: u64) -> f64 {
    let num = i128::from(a) * i128::from(d) - i128::from(c) * i128::from(b);
    num as f64 / (i128::from(b) * i128::from(d)) as f64
}

/// Observational effect on prediction correctness from precomputed labels.
///
/// `correct[i]` says whether unit `i` was classified correctly and `t[i]` is
/// its observed treatment.
pub fn observational_from_correctness(correct: &[bool], t: &[u8], resamples: usize, seed_value: u64) -> Result<AteReport> {
    if correct.len() != t.len() {
        return Err(TltError::Precondition("correctness and treatment vectors differ in length".into()));
    }
    let treated: Vec<bool> = (0..t.len()).filter(|i| t[*i] == 1).map(|i| correct[i]).collect();
    let control: Vec<bool> = (0..t.len()).filter(|i| t[*i] == 0).map(|i| correct[i]).collect();
    if treated.is_empty() || control.is_empty() {
        return Err(TltError::EstimandUndefined(format!(
            "{} treated and {} untreated units; both arms must be non-empty",
            treated.len(),
            control.len()
        )));
    }
    let count = |v: &[bool]| v.iter().filter(|c| **c).count() as u64;
    let (n1, n0) = (treated.len() as u64, control.len() as u64);
    let (c1, c0) = (count(&treated), count(&control));
    let signed = rate_difference(c1, n1, c0, n0);
    let ate = signed.abs();

    let mut rng = seed::rng(seed::derive(seed_value, &["bootstrap".into()]));
    let mut draws = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let b1 = (0..n1).filter(|_| treated[rng.random_range(0..treated.len())]).count() as u64;
        let b0 = (0..n0).filter(|_| control[rng.random_range(0..control.len())]).count() as u64;
        draws.push(rate_difference(b1, n1, b0, n0));
    }
    let bootstrap_ci = if draws.is_empty() { (ate, ate) } else { absolute_interval(&mut draws, ate) };
    Ok(AteReport {
        estimand: Estimand::Observational,
        ate,
        signed_ate: signed,
        arm_means: (c1 as f64 / n1 as f64, c0 as f64 / n0 as f64),
        n: t.len(),
        mc_samples: None,
        bootstrap_ci,
        seed: seed_value,
    })
}

/// Accuracy disparity between observed treatment groups:
/// `|P(y_hat = y | t = 1) - P(y_hat = y | t = 0)|`.
pub fn estimate_ate_observational(
    model: &dyn Predictor,
    data: &DatasetManifest,
    resamples: usize,
    seed_value: u64,
) -> Result<AteReport> {
    let pred = model.predict_labels(&data.records)?;
    observational_from_predictions(&pred, &data.records, resamples, seed_value)
}

pub fn observational_from_predictions(
    pred: &[usize],
    records: &[Sample],
    resamples: usize,
    seed_value: u64,
) -> Result<AteReport> {
    if pred.len() != records.len() {
        return Err(TltError::Precondition("one prediction per record is required".into()));
    }
    let correct: Vec<bool> = pred.iter().zip(records).map(|(p, s)| *p == s.y).collect();
    let t: Vec<u8> = records.iter().map(|s| s.t).collect();
    observational_from_correctness(&correct, &t, resamples, seed_value)
}

/// Scalar read off the decoder's class distribution for each unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeFunctional {
    /// Probability of the unit's true class.
    #[default]
    TrueClassProb,
    /// Probability of a fixed class.
    ClassProb(usize),
    /// Whether the most probable class is the true class.
    ArgmaxIndicator,
}

impl OutcomeFunctional {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "true_class_prob" => Ok(Self::TrueClassProb),
            "argmax_indicator" => Ok(Self::ArgmaxIndicator),
            other => match other.strip_prefix("class_prob:").map(str::parse) {
                Some(Ok(c)) => Ok(Self::ClassProb(c)),
                _ => Err(TltError::Config(format!("unknown outcome functional {other:?}"))),
            },
        }
    }

    pub fn name(self) -> String {
        match self {
            Self::TrueClassProb => "true_class_prob".into(),
            Self::ClassProb(c) => format!("class_prob:{c}"),
            Self::ArgmaxIndicator => "argmax_indicator".into(),
        }
    }

    fn apply(self, probs: &[f64], y: usize) -> Result<f64> {
        Ok(match self {
            Self::TrueClassProb => probs[y],
            Self::ClassProb(c) => *probs
                .get(c)
                .ok_or_else(|| TltError::Domain(format!("class {c} outside [0, {})", probs.len())))?,
            Self::ArgmaxIndicator => f64::from(u8::from(ops::argmax_rows(&[probs.to_vec()])[0] == y)),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterventionalOptions {
    pub mc_samples: usize,
    pub functional: OutcomeFunctional,
    pub resamples: usize,
    pub seed: u64,
}

impl Default for InterventionalOptions {
    fn default() -> Self {
        Self { mc_samples: 128, functional: OutcomeFunctional::TrueClassProb, resamples: DEFAULT_BOOTSTRAP, seed: 0 }
    }
}

/// Per-unit outcome under `do(t = 1)` and `do(t = 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitOutcomes {
    pub treated: Vec<f64>,
    pub control: Vec<f64>,
}

const UNIT_CHUNK: usize = 64;

/// Back-door adjusted outcomes: `z` is drawn from `q(z | x, y_hat, t_hat)`
/// and pushed through both decoder arms.
pub fn interventional_outcomes(model: &TltModel, data: &DatasetManifest, opts: &InterventionalOptions) -> Result<UnitOutcomes> {
    if opts.mc_samples == 0 {
        return Err(TltError::Domain("mc_samples must be >= 1".into()));
    }
    if !model.is_trained() {
        return Err(TltError::Refused("interventional effects need a trained model; the untrained flag is set".into()));
    }
    let m = opts.mc_samples;
    let latent = model.config().latent_dim;
    let mut rng = seed::rng(seed::derive(opts.seed, &["interventional".into()]));
    let mut out = UnitOutcomes { treated: Vec::with_capacity(data.len()), control: Vec::with_capacity(data.len()) };
    for chunk in data.records.chunks(UNIT_CHUNK) {
        let b = chunk.len();
        let x = model.input_tensor(chunk)?;
        let zeros = Tensor::zeros((b, latent), model.dtype(), &Device::Cpu)?;
        let pass = model.forward_with_noise(&x, None::<Observed<'_>>, &zeros)?;
        // (b, L) -> (b * m, L), unit-major.
        let expand = |t: &Tensor| -> Result<Tensor> { Ok(t.unsqueeze(1)?.repeat((1, m, 1))?.reshape((b * m, latent))?) };
        let mu = expand(&pass.posterior.mu)?;
        let var = expand(&pass.posterior.var)?;
        let xi = model.draw_noise(b * m, &mut rng)?;
        let z = (mu + var.sqrt()?.mul(&xi)?)?;
        let (arm0, arm1) = model.decode_outcome_arms(&z)?;
        let p0 = ops::to_f64_rows(&ops::softmax_last(&arm0)?)?;
        let p1 = ops::to_f64_rows(&ops::softmax_last(&arm1)?)?;
        let k = model.config().num_classes;
        for (u, s) in chunk.iter().enumerate() {
            let mut avg1 = vec![0.0; k];
            let mut avg0 = vec![0.0; k];
            for r in u * m..(u + 1) * m {
                for c in 0..k {
                    avg1[c] += p1[r][c];
                    avg0[c] += p0[r][c];
                }
            }
            avg1.iter_mut().chain(avg0.iter_mut()).for_each(|v| *v /= m as f64);
            out.treated.push(opts.functional.apply(&avg1, s.y)?);
            out.control.push(opts.functional.apply(&avg0, s.y)?);
        }
    }
    Ok(out)
}

pub fn report_from_units(units: &UnitOutcomes, opts: &InterventionalOptions) -> Result<AteReport> {
    let n = units.treated.len();
    if n == 0 || units.control.len() != n {
        return Err(TltError::EstimandUndefined("no units to average over".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (m1, m0) = (mean(&units.treated), mean(&units.control));
    let diffs: Vec<f64> = units.treated.iter().zip(&units.control).map(|(a, b)| a - b).collect();
    let signed = m1 - m0;
    let mut rng = seed::rng(seed::derive(opts.seed, &["bootstrap".into()]));
    let mut draws: Vec<f64> = (0..opts.resamples)
        .map(|_| (0..n).map(|_| diffs[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    let ate = signed.abs();
    let bootstrap_ci = if draws.is_empty() { (ate, ate) } else { absolute_interval(&mut draws, ate) };
    Ok(AteReport {
        estimand: Estimand::Interventional,
        ate,
        signed_ate: signed,
        arm_means: (m1, m0),
        n,
        mc_samples: Some(opts.mc_samples),
        bootstrap_ci,
        seed: opts.seed,
    })
}

/// Back-door adjusted effect `E[f(p(y | z, do(t=1)))] - E[f(p(y | z, do(t=0)))]`.
pub fn estimate_ate_interventional(model: &TltModel, data: &DatasetManifest, opts: &InterventionalOptions) -> Result<AteReport> {
    let units = interventional_outcomes(model, data, opts)?;
    report_from_units(&units, opts)
}
