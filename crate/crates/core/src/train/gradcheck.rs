//! Central finite-difference verification of analytic gradients.

use candle_core::{DType, Tensor};
use rand::Rng as _;

use super::loss::{loss_terms, ClampCounter, Likelihood, LossWeights};
use crate::data::Sample;
use crate::error::{Result, TltError};
use crate::model::{ops, Observed, ParameterStore, TltModel};
use crate::seed;

/// Largest parameter count accepted by [`gradient_check`].
pub const GRADCHECK_MAX_PARAMS: usize = 50_000;

/// Central difference stencil.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, truncation error `O(h^2)`.
    ThreePoint,
    /// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`, truncation error `O(h^4)`.
    FivePoint,
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Step `h`.
    pub eps: f64,
    pub stencil: Stencil,
    pub coordinates: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub likelihood: Likelihood,
    /// Multiplies the analytic gradient of every parameter whose name starts
    /// with the prefix; used to confirm the check can fail.
    pub corrupt: Option<(String, f64)>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 2e-3,
            stencil: Stencil::FivePoint,
            coordinates: 50,
            seed: 0,
            weights: LossWeights::default(),
            likelihood: Likelihood::Gaussian,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checks: Vec<CoordinateCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.checks.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Picks `count` coordinates so that every tensor contributes at least one.
fn pick_coordinates(store: &ParameterStore, count: usize, rng: &mut seed::Rng) -> Vec<(String, usize)> {
    let entries: Vec<(String, usize)> = store.iter().map(|(k, v)| (k.clone(), v.elem_count())).collect();
    let total: usize = entries.iter().map(|e| e.1).sum();
    let mut picks = Vec::new();
    for (name, n) in &entries {
        picks.push((name.clone(), rng.random_range(0..*n)));
    }
    while picks.len() < count && total > 0 {
        let mut r = rng.random_range(0..total);
        for (name, n) in &entries {
            if r < *n {
                picks.push((name.clone(), r));
                break;
            }
            r -= n;
        }
    }
    picks
}

/// Compares the gradient of `loss` with respect to `store` against central
/// differences on a stratified random subset of coordinates.
pub fn check_gradients<F>(store: &ParameterStore, loss: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    if opts.eps.is_nan() || opts.eps <= 0.0 {
        return Err(TltError::Domain(format!("finite-difference step {} must be > 0", opts.eps)));
    }
    if store.dtype() != DType::F64 {
        return Err(TltError::Precondition("gradient checks need double precision".into()));
    }
    let value = || -> Result<f64> { Ok(loss()?.to_scalar::<f64>()?) };
    let grads = loss()?.backward()?;
    let mut rng = seed::rng(seed::derive(opts.seed, &["gradcheck".into()]));
    let mut checks = Vec::new();
    for (name, index) in pick_coordinates(store, opts.coordinates, &mut rng) {
        let var = store.get(&name).expect("picked from the store");
        let mut analytic = match grads.get(var.as_tensor()) {
            Some(g) => ops::to_f64_vec(g)?[index],
            None => 0.0,
        };
        if let Some((prefix, factor)) = &opts.corrupt {
            if name.starts_with(prefix.as_str()) {
                analytic *= factor;
            }
        }
        let mut values = store.values(&name)?;
        let original = values[index];
        let mut at = |offset: f64| -> Result<f64> {
            values[index] = original + offset;
            store.set_values(&name, &values)?;
            let v = value();
            values[index] = original;
            store.set_values(&name, &values)?;
            v
        };
        let h = opts.eps;
        let numeric = match opts.stencil {
            Stencil::ThreePoint => (at(h)? - at(-h)?) / (2.0 * h),
            Stencil::FivePoint => {
                (-at(2.0 * h)? + 8.0 * at(h)? - 8.0 * at(-h)? + at(-2.0 * h)?) / (12.0 * h)
            }
        };
        checks.push(CoordinateCheck { name, index, analytic, numeric, rel_error: relative_error(analytic, numeric) });
    }
    let max_rel_error = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, checks })
}

/// Gradient check of the full training objective on `batch`, with the
/// latent noise frozen.
pub fn gradient_check(model: &TltModel, batch: &[Sample], opts: &GradCheckOptions) -> Result<GradCheckReport> {
    if model.parameter_count() > GRADCHECK_MAX_PARAMS {
        return Err(TltError::Precondition(format!(
            "model has {} parameters, gradient checks accept at most {GRADCHECK_MAX_PARAMS}",
            model.parameter_count()
        )));
    }
    if batch.is_empty() {
        return Err(TltError::Precondition("gradient check needs a non-empty batch".into()));
    }
    let x = model.input_tensor(batch)?;
    let y: Vec<usize> = batch.iter().map(|s| s.y).collect();
    let t: Vec<u8> = batch.iter().map(|s| s.t).collect();
    let xi = model.draw_noise(batch.len(), &mut seed::rng(seed::derive(opts.seed, &["xi".into()])))?;
    let loss = || -> Result<Tensor> {
        let out = model.forward_with_noise(&x, Some(Observed { y: &y, t: &t }), &xi)?;
        let mut counter = ClampCounter::default();
        loss_terms(std::slice::from_ref(&out), &x, &t, &y, opts.likelihood, &mut counter)?.total(opts.weights)
    };
    check_gradients(model.params(), loss, opts)
}
