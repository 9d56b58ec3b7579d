//! Tabular structural causal model with a planted treatment effect.
//!
//! ```text
//! z ~ N(0, I_d)
//! t ~ Bernoulli(sigmoid(w . z))
//! x = A z + noise_x * N(0, I)
//! y = 1[b . z + tau * t + e > 0],  e ~ N(0, 1)
//! ```
//!
//! Since `b . z + e ~ N(0, 1 + |b|^2)` the interventional effect on
//! `P(y = 1)` has the closed form `Phi(tau / sqrt(1 + |b|^2)) - 1/2`.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::manifest::DatasetManifest;
use super::sample::{DataMode, Sample};
use crate::error::{domain, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmConfig {
    pub num_samples: usize,
    pub latent_dim: usize,
    pub x_dim: usize,
    pub x_noise: f64,
    /// Scale of the confounding path `z -> t`.
    pub treatment_strength: f64,
    /// Scale of the confounding path `z -> y`.
    pub outcome_strength: f64,
    pub tau: f64,
    pub coef_seed: u64,
    pub seed: u64,
}

impl Default for ScmConfig {
    fn default() -> Self {
        Self {
            num_samples: 5000,
            latent_dim: 2,
            x_dim: 8,
            x_noise: 0.1,
            treatment_strength: 1.0,
            outcome_strength: 1.0,
            tau: 1.0,
            coef_seed: 1,
            seed: 2,
        }
    }
}

/// Generating coefficients of the SCM.
#[derive(Debug, Clone, PartialEq)]
pub struct ScmCoefficients {
    /// `x_dim` rows of `latent_dim` loadings.
    pub loadings: Vec<Vec<f64>>,
    pub treatment_weights: Vec<f64>,
    pub outcome_weights: Vec<f64>,
    pub tau: f64,
}

impl ScmCoefficients {
    pub fn from_config(cfg: &ScmConfig) -> Result<Self> {
        if cfg.latent_dim == 0 {
            return domain("latent dimension must be positive");
        }
        if cfg.x_dim == 0 {
            return domain("proxy dimension must be positive");
        }
        if cfg.x_noise.is_nan() || cfg.x_noise < 0.0 || !cfg.tau.is_finite() {
            return domain("noise scale must be >= 0 and tau finite");
        }
        let mut rng = seed::rng(seed::derive(cfg.coef_seed, &["scm-coefficients".into()]));
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        let scale = 1.0 / (cfg.latent_dim as f64).sqrt();
        let loadings = (0..cfg.x_dim)
            .map(|_| (0..cfg.latent_dim).map(|_| normal()).collect())
            .collect();
        let treatment_weights =
            (0..cfg.latent_dim).map(|_| normal() * scale * cfg.treatment_strength).collect();
        let outcome_weights =
            (0..cfg.latent_dim).map(|_| normal() * scale * cfg.outcome_strength).collect();
        Ok(Self { loadings, treatment_weights, outcome_weights, tau: cfg.tau })
    }

    /// `P(y=1 | do(t=1)) - P(y=1 | do(t=0))` in closed form.
    pub fn planted_ate(&self) -> f64 {
        if self.tau == 0.0 {
            return 0.0;
        }
        let b2: f64 = self.outcome_weights.iter().map(|b| b * b).sum();
        let n = Normal::new(0.0, 1.0).expect("standard normal");
        n.cdf(self.tau / (1.0 + b2).sqrt()) - 0.5
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

/// Samples the SCM into a tabular manifest with `planted_ate` recorded.
pub fn generate_tabular_scm(cfg: &ScmConfig) -> Result<DatasetManifest> {
    let coef = ScmCoefficients::from_config(cfg)?;
    let mut rng = seed::rng(seed::derive(cfg.seed, &["scm-samples".into()]));
    let mut records = Vec::with_capacity(cfg.num_samples);
    for i in 0..cfg.num_samples {
        let z: Vec<f64> = (0..cfg.latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let p_t = 1.0 / (1.0 + (-dot(&coef.treatment_weights, &z)).exp());
        let t = u8::from(rng.random::<f64>() < p_t);
        let x: Vec<f64> = coef
            .loadings
            .iter()
            .map(|row| {
                let e: f64 = StandardNormal.sample(&mut rng);
                dot(row, &z) + cfg.x_noise * e
            })
            .collect();
        let e: f64 = StandardNormal.sample(&mut rng);
        let y = usize::from(dot(&coef.outcome_weights, &z) + coef.tau * f64::from(t) + e > 0.0);
        records.push(Sample {
            id: format!("scm-{i:06}"),
            shape: vec![cfg.x_dim],
            x,
            y,
            t,
            mask: None,
        });
    }
    let mut manifest = DatasetManifest::new(2, DataMode::Tabular, cfg.seed, None, records);
    manifest.planted_ate = Some(coef.planted_ate());
    Ok(manifest)
}
