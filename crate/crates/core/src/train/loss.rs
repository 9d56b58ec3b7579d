//! Auxiliary objective and evidence lower bound.
//!
//! Every term is a per-datum batch mean and carries its maximization sign:
//! the four log-likelihoods are `<= 0` up to dropped constants and `kl >= 0`.
//! The minimized objective is
//! `total = -(recon_x + recon_t + recon_y - kl_weight * kl) - aux_weight * (aux_t + aux_y)`.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TltError};
use crate::model::ops::{log_sigmoid, log_softmax_last};
use crate::model::{ForwardOutputs, PosteriorParams};

/// Probabilities are clamped from below at this value inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Observation model for `p(x|z)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Likelihood {
    /// Unit-variance Gaussian per value, additive constant dropped.
    #[default]
    Gaussian,
    /// Bernoulli per pixel; inputs must lie in `[0, 1]`.
    Bernoulli,
}

impl Likelihood {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "bernoulli" => Ok(Self::Bernoulli),
            other => Err(TltError::Config(format!("unknown likelihood {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Gaussian => "gaussian",
            Self::Bernoulli => "bernoulli",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub kl: f64,
    pub aux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { kl: 1.0, aux: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon_x: f64,
    pub recon_t: f64,
    pub recon_y: f64,
    pub kl: f64,
    pub aux_t: f64,
    pub aux_y: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Builds a breakdown whose `total` follows the unit-weight convention.
    pub fn from_terms(recon_x: f64, recon_t: f64, recon_y: f64, kl: f64, aux_t: f64, aux_y: f64) -> Self {
        let mut b = Self { recon_x, recon_t, recon_y, kl, aux_t, aux_y, total: 0.0 };
        b.total = total_loss(&b);
        b
    }
}

/// Signed total at unit weights.
pub fn total_loss(b: &LossBreakdown) -> f64 {
    weighted_total(b, LossWeights::default())
}

pub fn weighted_total(b: &LossBreakdown, w: LossWeights) -> f64 {
    -(b.recon_x + b.recon_t + b.recon_y - w.kl * b.kl) - w.aux * (b.aux_t + b.aux_y)
}

/// Scalar loss terms still attached to the autograd graph.
#[derive(Debug, Clone)]
pub struct LossTensors {
    pub recon_x: Tensor,
    pub recon_t: Tensor,
    pub recon_y: Tensor,
    pub kl: Tensor,
    pub aux_t: Tensor,
    pub aux_y: Tensor,
}

impl LossTensors {
    pub fn total(&self, w: LossWeights) -> Result<Tensor> {
        let elbo = ((&self.recon_x + &self.recon_t)? + &self.recon_y)?;
        let elbo = (elbo - self.kl.affine(w.kl, 0.0)?)?;
        let aux = (&self.aux_t + &self.aux_y)?.affine(w.aux, 0.0)?;
        Ok((elbo + aux)?.neg()?)
    }

    /// Reads the terms out; names the first non-finite one.
    pub fn breakdown(&self, w: LossWeights) -> Result<LossBreakdown> {
        let read = |name: &str, t: &Tensor| -> Result<f64> {
            let v = t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(TltError::Numeric(format!("loss term {name} is {v}")))
            }
        };
        let mut b = LossBreakdown {
            recon_x: read("recon_x", &self.recon_x)?,
            recon_t: read("recon_t", &self.recon_t)?,
            recon_y: read("recon_y", &self.recon_y)?,
            kl: read("kl", &self.kl)?,
            aux_t: read("aux_t", &self.aux_t)?,
            aux_y: read("aux_y", &self.aux_y)?,
            total: 0.0,
        };
        b.total = weighted_total(&b, w);
        Ok(b)
    }
}

/// Counts probabilities that hit [`PROB_FLOOR`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClampCounter {
    pub clamped: usize,
}

/// Row-wise `log Bern(t; sigmoid(logit))`, clamped at `log PROB_FLOOR`.
pub fn bernoulli_log_prob(logit: &Tensor, t: &[u8], counter: &mut ClampCounter) -> Result<Tensor> {
    let sign: Vec<f64> = t.iter().map(|v| if *v == 1 { 1.0 } else { -1.0 }).collect();
    let sign = Tensor::from_vec(sign, t.len(), &Device::Cpu)?.to_dtype(logit.dtype())?;
    let lp = log_sigmoid(&logit.mul(&sign)?)?;
    let floor = PROB_FLOOR.ln();
    counter.clamped += lp.to_dtype(DType::F64)?.to_vec1::<f64>()?.iter().filter(|v| **v < floor).count();
    Ok(lp.maximum(floor)?)
}

/// Row-wise log-probability of class `y[i]` under softmax logits.
pub fn categorical_log_prob(logits: &Tensor, y: &[usize], counter: &mut ClampCounter) -> Result<Tensor> {
    let k = logits.dim(1)?;
    if let Some(c) = y.iter().find(|c| **c >= k) {
        return Err(TltError::Domain(format!("label {c} outside [0, {k})")));
    }
    let idx = Tensor::from_vec(y.iter().map(|c| *c as u32).collect::<Vec<_>>(), (y.len(), 1), &Device::Cpu)?;
    let lp = log_softmax_last(logits)?.gather(&idx, 1)?.squeeze(1)?;
    let floor = PROB_FLOOR.ln();
    counter.clamped += lp.to_dtype(DType::F64)?.to_vec1::<f64>()?.iter().filter(|v| **v < floor).count();
    Ok(lp.maximum(floor)?)
}

/// Closed-form `KL(N(mu, var) || N(0, I))` per row.
pub fn kl_rows(p: &PosteriorParams) -> Result<Tensor> {
    let inner = (((&p.var + p.mu.sqr()?)? - 1.0)? - p.var.log()?)?;
    Ok((inner.sum(1)? * 0.5)?)
}

/// `(aux_t, aux_y)`: `log q(t_obs|x)` and `log q(y_obs|x, t_obs)` batch means.
pub fn aux_loss(out: &ForwardOutputs, t_obs: &[u8], y_obs: &[usize], counter: &mut ClampCounter) -> Result<(Tensor, Tensor)> {
    check_rows(out, t_obs, y_obs)?;
    if out.t_used != t_obs {
        return Err(TltError::Precondition("outputs were not produced in training mode with these labels".into()));
    }
    let aux_t = bernoulli_log_prob(&out.t_logit, t_obs, counter)?.mean(0)?;
    let aux_y = categorical_log_prob(&out.outcome.selected, y_obs, counter)?.mean(0)?;
    Ok((aux_t, aux_y))
}

fn check_rows(out: &ForwardOutputs, t: &[u8], y: &[usize]) -> Result<()> {
    let b = out.t_logit.dim(0)?;
    if t.len() != b || y.len() != b {
        return Err(TltError::Precondition(format!("labels cover {} / {} rows, batch has {b}", y.len(), t.len())));
    }
    Ok(())
}

/// `(recon_x, recon_t, recon_y)` batch means for one latent draw.
pub fn reconstruction_terms(
    out: &ForwardOutputs,
    x: &Tensor,
    t_obs: &[u8],
    y_obs: &[usize],
    likelihood: Likelihood,
    counter: &mut ClampCounter,
) -> Result<(Tensor, Tensor, Tensor)> {
    check_rows(out, t_obs, y_obs)?;
    let b = x.dim(0)?;
    let x_flat = x.reshape((b, ()))?;
    let r_flat = out.decoder.x_recon.reshape((b, ()))?;
    let recon_x = match likelihood {
        Likelihood::Gaussian => (x_flat - r_flat)?.sqr()?.sum(1)?.affine(-0.5, 0.0)?,
        Likelihood::Bernoulli => {
            let r = r_flat.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)?;
            let one_minus_x = x_flat.affine(-1.0, 1.0)?;
            let one_minus_r = r.affine(-1.0, 1.0)?;
            (x_flat.mul(&r.log()?)? + one_minus_x.mul(&one_minus_r.log()?)?)?.sum(1)?
        }
    };
    let recon_t = bernoulli_log_prob(&out.decoder.t_logit, t_obs, counter)?;
    let recon_y = categorical_log_prob(&out.decoder.y_logits, y_obs, counter)?;
    Ok((recon_x.mean(0)?, recon_t.mean(0)?, recon_y.mean(0)?))
}

/// ELBO terms averaged over the supplied latent draws (all from the same
/// posterior); `kl` is closed form. The auxiliary terms come from the first
/// draw since they do not depend on `z`.
pub fn loss_terms(
    draws: &[ForwardOutputs],
    x: &Tensor,
    t_obs: &[u8],
    y_obs: &[usize],
    likelihood: Likelihood,
    counter: &mut ClampCounter,
) -> Result<LossTensors> {
    let first = draws.first().ok_or_else(|| TltError::Domain("at least one latent draw is needed".into()))?;
    let (aux_t, aux_y) = aux_loss(first, t_obs, y_obs, counter)?;
    let mut sums: Option<(Tensor, Tensor, Tensor)> = None;
    for out in draws {
        let (a, b, c) = reconstruction_terms(out, x, t_obs, y_obs, likelihood, counter)?;
        sums = Some(match sums {
            None => (a, b, c),
            Some((sa, sb, sc)) => ((sa + a)?, (sb + b)?, (sc + c)?),
        });
    }
    let (sa, sb, sc) = sums.expect("non-empty");
    let m = 1.0 / draws.len() as f64;
    Ok(LossTensors {
        recon_x: sa.affine(m, 0.0)?,
        recon_t: sb.affine(m, 0.0)?,
        recon_y: sc.affine(m, 0.0)?,
        kl: kl_rows(&first.posterior)?.mean(0)?,
        aux_t,
        aux_y,
    })
}

/// ELBO part of the breakdown for a single forward pass; aux terms are 0.
pub fn elbo_terms(
    out: &ForwardOutputs,
    x: &Tensor,
    t_obs: &[u8],
    y_obs: &[usize],
    likelihood: Likelihood,
    counter: &mut ClampCounter,
) -> Result<LossBreakdown> {
    let (rx, rt, ry) = reconstruction_terms(out, x, t_obs, y_obs, likelihood, counter)?;
    let zero = Tensor::zeros((), rx.dtype(), &Device::Cpu)?;
    let terms = LossTensors {
        recon_x: rx,
        recon_t: rt,
        recon_y: ry,
        kl: kl_rows(&out.posterior)?.mean(0)?,
        aux_t: zero.clone(),
        aux_y: zero,
    };
    terms.breakdown(LossWeights::default())
}
