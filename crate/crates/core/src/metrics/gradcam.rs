//! Gradient-weighted class activation maps.

use std::io::Write;
use std::path::Path;

use candle_core::Var;
use serde::{Deserialize, Serialize};

use crate::data::{write_f64_sidecar, DataMode, Sample};
use crate::error::{Result, TltError};
use crate::model::{ops, TltModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    /// Row-major `height x width`, every cell `>= 0`.
    pub map: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub class: usize,
    pub layer: usize,
    /// Spatial mean of the class-score gradient per channel.
    pub alpha: Vec<f64>,
}

/// `ReLU(sum_k alpha_k A^k)` from `(C, H, W)` activations and gradients.
pub fn combine(activations: &[f64], gradients: &[f64], channels: usize, height: usize, width: usize) -> (Vec<f64>, Vec<f64>) {
    let hw = height * width;
    let alpha: Vec<f64> = (0..channels).map(|k| gradients[k * hw..(k + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
    let map = (0..hw)
        .map(|p| (0..channels).map(|k| alpha[k] * activations[k * hw + p]).sum::<f64>().max(0.0))
        .collect();
    (map, alpha)
}

/// Grad-CAM of class `class` at encoder stage `layer` for one sample.
pub fn grad_cam(model: &TltModel, sample: &Sample, class: usize, layer: usize) -> Result<SaliencyMap> {
    if model.config().mode != DataMode::Image {
        return Err(TltError::Domain("grad-cam needs a spatial feature layer; tabular models have none".into()));
    }
    let x = model.input_tensor(std::slice::from_ref(sample))?;
    let a = Var::from_tensor(&model.encode_prefix(&x, layer)?.detach())?;
    let (_, c, h, w) = a.dims4()?;
    let logit = model.class_logit_from_layer(a.as_tensor(), layer, class)?.sum_all()?;
    let grads = logit.backward()?;
    let g = match grads.get(a.as_tensor()) {
        Some(g) => ops::to_f64_vec(g)?,
        None => vec![0.0; c * h * w],
    };
    let (map, alpha) = combine(&ops::to_f64_vec(a.as_tensor())?, &g, c, h, w);
    Ok(SaliencyMap { map, height: h, width: w, class, layer, alpha })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    /// Share of saliency mass inside the object mask, in `[0, 1]`.
    pub score: f64,
    /// The map was all zero and the score is 0 by convention.
    pub degenerate: bool,
}

/// Area-averages a `height x width` binary mask onto an `h x w` grid.
pub fn resample_mask(mask: &[u8], height: usize, width: usize, h: usize, w: usize) -> Result<Vec<f64>> {
    if mask.len() != height * width {
        return Err(TltError::Domain(format!("mask has {} cells, expected {height}x{width}", mask.len())));
    }
    if h == 0 || w == 0 || !height.is_multiple_of(h) || !width.is_multiple_of(w) {
        return Err(TltError::Domain(format!("cannot resample a {height}x{width} mask onto {h}x{w}")));
    }
    let (fy, fx) = (height / h, width / w);
    Ok((0..h * w)
        .map(|cell| {
            let (r, c) = (cell / w, cell % w);
            let mut on = 0usize;
            for y in r * fy..(r + 1) * fy {
                for x in c * fx..(c + 1) * fx {
                    on += usize::from(mask[y * width + x] != 0);
                }
            }
            on as f64 / (fy * fx) as f64
        })
        .collect())
}

/// Saliency mass inside the mask over total mass.
pub fn saliency_alignment(map: &SaliencyMap, mask: &[u8], mask_height: usize, mask_width: usize) -> Result<Alignment> {
    let m = resample_mask(mask, mask_height, mask_width, map.height, map.width)?;
    if m.len() != map.map.len() {
        return Err(TltError::Domain("resampled mask does not match the map".into()));
    }
    let total: f64 = map.map.iter().sum();
    if total <= 0.0 {
        return Ok(Alignment { score: 0.0, degenerate: true });
    }
    let inside: f64 = map.map.iter().zip(&m).map(|(v, w)| v * w).sum();
    Ok(Alignment { score: (inside / total).clamp(0.0, 1.0), degenerate: false })
}

/// Binary 8-bit greyscale image scaled so the maximum is white, plus a raw
/// little-endian `f64` sidecar holding the exact values.
pub fn write_saliency(map: &SaliencyMap, pgm: &Path, raw: &Path) -> Result<()> {
    let max = map.map.iter().copied().fold(0.0, f64::max);
    let mut f = std::fs::File::create(pgm)?;
    write!(f, "P5\n{} {}\n255\n", map.width, map.height)?;
    let pixels: Vec<u8> = map
        .map
        .iter()
        .map(|v| if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 })
        .collect();
    f.write_all(&pixels)?;
    write_f64_sidecar(raw, &map.map)
}

impl SaliencyMap {
    pub fn cell(&self, row: usize, col: usize) -> f64 {
        self.map[row * self.width + col]
    }
}

/// The sample's mask, required for alignment.
pub fn sample_mask(sample: &Sample) -> Result<&[u8]> {
    sample
        .mask
        .as_deref()
        .ok_or_else(|| TltError::Precondition(format!("sample {} carries no object mask", sample.id)))
}
