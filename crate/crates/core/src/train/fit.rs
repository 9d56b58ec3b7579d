//! Mini-batch training with an adaptive-moment optimizer.

use std::collections::BTreeMap;
use std::io::Write;

use candle_core::{Device, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{loss_terms, ClampCounter, Likelihood, LossBreakdown, LossWeights};
use crate::data::DatasetManifest;
use crate::error::{Result, TltError};
use crate::model::{ops, Observed, Precision, TltModel};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub kl_weight: f64,
    pub aux_weight: f64,
    pub mc_samples: usize,
    pub likelihood: Likelihood,
    /// Must match the model precision when set.
    pub precision: Option<Precision>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 128,
            epochs: 10,
            seed: 0,
            kl_weight: 1.0,
            aux_weight: 1.0,
            mc_samples: 1,
            likelihood: Likelihood::Gaussian,
            precision: None,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights { kl: self.kl_weight, aux: self.aux_weight }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TltError::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be finite and >= 0", self.learning_rate));
        }
        if self.batch_size == 0 || self.mc_samples == 0 {
            return bad("batch size and mc samples must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("optimizer moments must lie in [0, 1) and eps must be > 0".into());
        }
        if !self.kl_weight.is_finite() || !self.aux_weight.is_finite() {
            return bad("loss weights must be finite".into());
        }
        Ok(())
    }
}

/// One history row per epoch; loss terms are epoch means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub loss: LossBreakdown,
    /// Training-mode accuracy of the observed-treatment arm.
    pub acc: f64,
    /// Accuracy of `1[q(t|x) >= 0.5]` against the observed treatment.
    pub t_acc: f64,
}

pub const HISTORY_COLUMNS: [&str; 10] =
    ["epoch", "total", "recon_x", "recon_t", "recon_y", "kl", "aux_t", "aux_y", "acc", "t_acc"];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
    /// Probabilities clamped inside logarithms over the whole run.
    pub clamp_warnings: usize,
}

impl TrainHistory {
    /// CSV text; values use shortest round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut s = HISTORY_COLUMNS.join(",");
        s.push('\n');
        for r in &self.rows {
            let l = &r.loss;
            let vals = [l.total, l.recon_x, l.recon_t, l.recon_y, l.kl, l.aux_t, l.aux_y, r.acc, r.t_acc];
            s.push_str(&r.epoch.to_string());
            for v in vals {
                s.push(',');
                s.push_str(&v.to_string());
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, step: 0, moments: BTreeMap::new() }
    }

    /// Applies one update; parameters without a gradient are left alone.
    pub fn step(&mut self, vars: &[(String, Var)], grads: &candle_core::backprop::GradStore) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, var) in vars {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = g.detach();
            let (m, v) = match self.moments.remove(name) {
                Some(mv) => mv,
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let denom = ((&v / c2)?.sqrt()? + self.eps)?;
            let delta = ((&m / c1)? / denom)?;
            var.set(&(var.as_tensor().detach() - (delta * self.lr)?)?)?;
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(())
    }
}

/// Trains `model` in place. On a non-finite loss the parameters from the end
/// of the last completed epoch are restored and [`TltError::Diverged`] is
/// returned.
pub fn fit(model: &mut TltModel, data: &DatasetManifest, cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    if let Some(p) = cfg.precision {
        if p != model.config().precision {
            return Err(TltError::Config(format!(
                "training precision {p:?} differs from model precision {:?}",
                model.config().precision
            )));
        }
    }
    if data.is_empty() {
        return Err(TltError::Precondition("training set is empty".into()));
    }
    if data.num_classes != model.config().num_classes {
        return Err(TltError::Precondition(format!(
            "dataset has {} classes, model {}",
            data.num_classes,
            model.config().num_classes
        )));
    }
    let inputs = model.input_tensor(&data.records)?;
    let ys: Vec<usize> = data.records.iter().map(|s| s.y).collect();
    let ts: Vec<u8> = data.records.iter().map(|s| s.t).collect();
    let vars = model.vars();
    let mut adam = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut history = TrainHistory::default();
    let mut counter = ClampCounter::default();
    let mut last_good = model.params().snapshot()?;
    let weights = cfg.weights();
    let n = data.len();

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng(seed::derive(cfg.seed, &["shuffle".into(), epoch.into()])));
        let mut sums = [0.0f64; 7];
        let (mut correct, mut t_correct) = (0usize, 0usize);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let idx = Tensor::from_vec(batch.iter().map(|i| *i as u32).collect::<Vec<_>>(), batch.len(), &Device::Cpu)?;
            let x = inputs.index_select(&idx, 0)?;
            let y: Vec<usize> = batch.iter().map(|i| ys[*i]).collect();
            let t: Vec<u8> = batch.iter().map(|i| ts[*i]).collect();
            let mut rng = seed::rng(seed::derive(cfg.seed, &["noise".into(), epoch.into(), step.into()]));
            let mut draws = Vec::with_capacity(cfg.mc_samples);
            for _ in 0..cfg.mc_samples {
                match model.forward(&x, Some(Observed { y: &y, t: &t }), &mut rng) {
                    Ok(out) => draws.push(out),
                    Err(TltError::Numeric(_)) => {
                        model.params().restore(&last_good)?;
                        return Err(TltError::Diverged { epoch, step });
                    }
                    Err(e) => return Err(e),
                }
            }
            let terms = loss_terms(&draws, &x, &t, &y, cfg.likelihood, &mut counter)?;
            let total = terms.total(weights)?;
            let b = match terms.breakdown(weights) {
                Ok(b) if b.total.is_finite() => b,
                _ => {
                    model.params().restore(&last_good)?;
                    return Err(TltError::Diverged { epoch, step });
                }
            };
            let grads = total.backward()?;
            adam.step(&vars, &grads)?;

            let w = batch.len() as f64;
            for (s, v) in sums.iter_mut().zip([b.total, b.recon_x, b.recon_t, b.recon_y, b.kl, b.aux_t, b.aux_y]) {
                *s += v * w;
            }
            let pred = ops::argmax_rows(&ops::to_f64_rows(&draws[0].outcome.selected)?);
            correct += pred.iter().zip(&y).filter(|(a, b)| a == b).count();
            let tp = ops::to_f64_vec(&draws[0].t_prob)?;
            t_correct += tp.iter().zip(&t).filter(|(p, t)| u8::from(**p >= 0.5) == **t).count();
        }
        if !model.params().all_finite()? {
            model.params().restore(&last_good)?;
            return Err(TltError::Diverged { epoch, step: n.div_ceil(cfg.batch_size) });
        }
        last_good = model.params().snapshot()?;
        let nf = n as f64;
        let m = sums.map(|s| s / nf);
        history.rows.push(HistoryRow {
            epoch,
            loss: LossBreakdown {
                total: m[0],
                recon_x: m[1],
                recon_t: m[2],
                recon_y: m[3],
                kl: m[4],
                aux_t: m[5],
                aux_y: m[6],
            },
            acc: correct as f64 / nf,
            t_acc: t_correct as f64 / nf,
        });
    }
    history.clamp_warnings = counter.clamped;
    model.set_trained(true);
    Ok(history)
}
