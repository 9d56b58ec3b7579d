//! Visual treatments: pixel scrambling, object masking, background refilling,
//! additive Gaussian noise and FGSM perturbation.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::sample::{DataMode, Sample};
use crate::error::{domain, Result, TltError};
use crate::seed;

/// Scramble key that selects the identity permutation.
pub const IDENTITY_KEY: u64 = 0;

/// Fill value written over masked object pixels.
pub const OBJECT_MASK_FILL: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreatmentKind {
    Scramble,
    ObjectMask,
    BackgroundRefill,
    Gaussian,
    Fgsm,
}

impl TreatmentKind {
    pub fn name(self) -> &'static str {
        match self {
            TreatmentKind::Scramble => "scramble",
            TreatmentKind::ObjectMask => "object_mask",
            TreatmentKind::BackgroundRefill => "background_refill",
            TreatmentKind::Gaussian => "gaussian",
            TreatmentKind::Fgsm => "fgsm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "scramble" => TreatmentKind::Scramble,
            "object_mask" => TreatmentKind::ObjectMask,
            "background_refill" => TreatmentKind::BackgroundRefill,
            "gaussian" => TreatmentKind::Gaussian,
            "fgsm" => TreatmentKind::Fgsm,
            other => return domain(format!("unknown treatment kind '{other}'")),
        })
    }

    fn needs_mask(self) -> bool {
        matches!(self, TreatmentKind::ObjectMask | TreatmentKind::BackgroundRefill)
    }
}

/// One treatment configuration. Only the parameter belonging to `kind` is read.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreatmentSpec {
    pub kind: TreatmentKind,
    /// Fraction of object pixels altered by the mask kinds.
    pub ratio: f64,
    pub sigma: f64,
    /// l-infinity budget for FGSM.
    pub eps: f64,
    /// Permutation seed for scrambling; [`IDENTITY_KEY`] is the identity.
    pub key: u64,
}

impl TreatmentSpec {
    fn base(kind: TreatmentKind) -> Self {
        Self { kind, ratio: 1.0, sigma: 0.0, eps: 0.0, key: IDENTITY_KEY }
    }

    pub fn scramble(key: u64) -> Self {
        Self { key, ..Self::base(TreatmentKind::Scramble) }
    }

    pub fn object_mask(ratio: f64) -> Self {
        Self { ratio, ..Self::base(TreatmentKind::ObjectMask) }
    }

    pub fn background_refill(ratio: f64) -> Self {
        Self { ratio, ..Self::base(TreatmentKind::BackgroundRefill) }
    }

    pub fn gaussian(sigma: f64) -> Self {
        Self { sigma, ..Self::base(TreatmentKind::Gaussian) }
    }

    /// FGSM with the default budget of 0.3.
    pub fn fgsm(eps: f64) -> Self {
        Self { eps, ..Self::base(TreatmentKind::Fgsm) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return domain(format!("treatment ratio {} outside [0, 1]", self.ratio));
        }
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return domain(format!("gaussian sigma {} must be finite and >= 0", self.sigma));
        }
        if !self.eps.is_finite() || self.eps < 0.0 {
            return domain(format!("fgsm eps {} must be finite and >= 0", self.eps));
        }
        Ok(())
    }

    /// Short human-readable label, e.g. `object_mask@0.5`.
    pub fn label(&self) -> String {
        match self.kind {
            TreatmentKind::Scramble => "scramble".into(),
            TreatmentKind::ObjectMask | TreatmentKind::BackgroundRefill => {
                format!("{}@{}", self.kind.name(), self.ratio)
            }
            TreatmentKind::Gaussian => format!("gaussian@{}", self.sigma),
            TreatmentKind::Fgsm => format!("fgsm@{}", self.eps),
        }
    }
}

/// Keyed pixel permutation over `positions` cells. `perm[p]` is the source
/// position written to output position `p`.
pub fn scramble_permutation(key: u64, positions: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..positions).collect();
    if key != IDENTITY_KEY {
        let mut rng = seed::rng(seed::derive(key, &["scramble".into(), positions.into()]));
        perm.shuffle(&mut rng);
    }
    perm
}

fn require_image(s: &Sample, what: &str) -> Result<()> {
    if s.mode() != DataMode::Image {
        return Err(TltError::Precondition(format!("{what} requires an image sample")));
    }
    Ok(())
}

/// Object pixels ordered by distance to the mask centroid (ties by index),
/// truncated to the `ratio` fraction nearest the centroid.
pub fn central_object_pixels(mask: &[u8], width: usize, ratio: f64) -> Vec<usize> {
    let object: Vec<usize> = (0..mask.len()).filter(|p| mask[*p] == 1).collect();
    if object.is_empty() {
        return object;
    }
    let n = object.len() as f64;
    let cy = object.iter().map(|p| (p / width) as f64).sum::<f64>() / n;
    let cx = object.iter().map(|p| (p % width) as f64).sum::<f64>() / n;
    let mut keyed: Vec<(f64, usize)> = object
        .iter()
        .map(|p| {
            let dy = (p / width) as f64 - cy;
            let dx = (p % width) as f64 - cx;
            (dy * dy + dx * dx, *p)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let take = (ratio * n).round() as usize;
    keyed.into_iter().take(take).map(|(_, p)| p).collect()
}

/// Applies a non-adversarial treatment, returning a treated copy (`t = 1`).
pub fn apply_treatment(s: &Sample, spec: &TreatmentSpec, rng: &mut seed::Rng) -> Result<Sample> {
    spec.validate()?;
    if spec.kind == TreatmentKind::Fgsm {
        return domain("fgsm needs a model; use apply_fgsm");
    }
    if spec.kind.needs_mask() && s.mask.is_none() {
        return Err(TltError::Precondition(format!(
            "{} requires an object mask on sample {}",
            spec.kind.name(),
            s.id
        )));
    }
    let mut out = s.clone();
    out.t = 1;
    let c = s.channels();
    match spec.kind {
        TreatmentKind::Scramble => {
            require_image(s, "scramble")?;
            let perm = scramble_permutation(spec.key, s.num_positions());
            for (dst, src) in perm.iter().enumerate() {
                out.x[dst * c..(dst + 1) * c].copy_from_slice(&s.x[src * c..(src + 1) * c]);
            }
            if let (Some(mask), Some(out_mask)) = (&s.mask, out.mask.as_mut()) {
                for (dst, src) in perm.iter().enumerate() {
                    out_mask[dst] = mask[*src];
                }
            }
        }
        TreatmentKind::ObjectMask => {
            require_image(s, "object masking")?;
            let mask = s.mask.as_ref().expect("checked above");
            for p in central_object_pixels(mask, s.width(), spec.ratio) {
                out.x[p * c..(p + 1) * c].fill(OBJECT_MASK_FILL);
            }
        }
        TreatmentKind::BackgroundRefill => {
            require_image(s, "background refilling")?;
            let mask = s.mask.as_ref().expect("checked above");
            let targets = central_object_pixels(mask, s.width(), spec.ratio);
            if !targets.is_empty() {
                let background: Vec<usize> = (0..mask.len()).filter(|p| mask[*p] == 0).collect();
                if background.is_empty() {
                    return Err(TltError::Precondition(format!(
                        "sample {} has no background pixels to refill from",
                        s.id
                    )));
                }
                for p in targets {
                    let src = background[rng.random_range(0..background.len())];
                    out.x[p * c..(p + 1) * c].copy_from_slice(&s.x[src * c..(src + 1) * c]);
                }
            }
        }
        TreatmentKind::Gaussian => {
            if spec.sigma > 0.0 {
                let noise = Normal::new(0.0, spec.sigma).expect("validated sigma");
                let clip = s.mode() == DataMode::Image;
                for v in out.x.iter_mut() {
                    *v += noise.sample(rng);
                    if clip {
                        *v = v.clamp(0.0, 1.0);
                    }
                }
            }
        }
        TreatmentKind::Fgsm => unreachable!(),
    }
    Ok(out)
}

/// Undoes a scramble produced with the same key. A wrong key silently yields
/// a different image.
pub fn invert_scramble(s: &Sample, key: u64) -> Result<Sample> {
    require_image(s, "scramble inversion")?;
    let c = s.channels();
    let perm = scramble_permutation(key, s.num_positions());
    let mut out = s.clone();
    for (dst, src) in perm.iter().enumerate() {
        out.x[src * c..(src + 1) * c].copy_from_slice(&s.x[dst * c..(dst + 1) * c]);
    }
    if let (Some(mask), Some(out_mask)) = (&s.mask, out.mask.as_mut()) {
        for (dst, src) in perm.iter().enumerate() {
            out_mask[*src] = mask[dst];
        }
    }
    Ok(out)
}

/// A model that can report the gradient of its training loss with respect
/// to the input pixels.
pub trait InputGradient {
    /// Gradient of the classification loss `J(x, y)` with respect to `x`,
    /// laid out like `sample.x`.
    fn input_gradient(&self, sample: &Sample) -> Result<Vec<f64>> {
        let _ = sample;
        Err(TltError::Capability("model does not expose input gradients".into()))
    }
}

/// One-step FGSM: `clip(x + eps * sign(grad_x J), 0, 1)`, with `t = 1`.
/// Every output satisfies `|out - x| <= eps` exactly in floating point.
pub fn apply_fgsm(s: &Sample, model: &dyn InputGradient, eps: f64) -> Result<Sample> {
    TreatmentSpec::fgsm(eps).validate()?;
    require_image(s, "fgsm")?;
    let grad = model.input_gradient(s)?;
    if grad.len() != s.x.len() {
        return domain(format!(
            "input gradient has {} entries, sample has {}",
            grad.len(),
            s.x.len()
        ));
    }
    let mut out = s.clone();
    out.t = 1;
    for (v, g) in out.x.iter_mut().zip(&grad) {
        let step = if *g > 0.0 {
            eps
        } else if *g < 0.0 {
            -eps
        } else {
            0.0
        };
        let x = *v;
        *v = (x + step).clamp(0.0, 1.0);
        // `x + eps` can round one ulp past the budget; pull it back.
        while (*v - x).abs() > eps {
            *v = if *v > x { v.next_down() } else { v.next_up() };
        }
    }
    Ok(out)
}
