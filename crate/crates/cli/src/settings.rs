//! Typed views of the flat configuration. Every parse failure is a
//! validation error so it surfaces before any output is created.

use std::path::PathBuf;

use tlt_core::data::{CausalPairConfig, DataMode, SceneConfig, ScmConfig, TreatmentKind, TreatmentSpec, IDENTITY_KEY};
use tlt_core::metrics::{InterventionalOptions, OutcomeFunctional, RefuteOptions};
use tlt_core::model::{ModelConfig, PosteriorInput, Precision, Variant};
use tlt_core::seed;
use tlt_core::train::{Likelihood, TrainConfig};

use crate::config::Config;
use crate::CliError;

fn invalid(e: tlt_core::TltError) -> CliError {
    CliError::Validation(e.to_string())
}

/// A named evaluation condition. `none` is the identity scramble: treated
/// units get `t = 1` with unchanged pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub label: String,
    pub spec: TreatmentSpec,
}

impl Condition {
    pub fn is_fgsm(&self) -> bool {
        self.spec.kind == TreatmentKind::Fgsm
    }
}

/// Resolves a treatment name against the `data.*` parameters.
pub fn condition(cfg: &Config, name: &str) -> Result<Condition, CliError> {
    let ratio: f64 = cfg.get("data.ratio")?;
    let spec = match name {
        "none" => TreatmentSpec::scramble(IDENTITY_KEY),
        "scramble" => {
            let key: u64 = cfg.get("data.key")?;
            if key == IDENTITY_KEY {
                return Err(CliError::Validation(format!("data.key {IDENTITY_KEY} is the identity; use treatment none")));
            }
            TreatmentSpec::scramble(key)
        }
        "object_mask" => TreatmentSpec::object_mask(ratio),
        "background_refill" => TreatmentSpec::background_refill(ratio),
        "gaussian" => TreatmentSpec::gaussian(cfg.get("data.sigma")?),
        "fgsm" => TreatmentSpec::fgsm(cfg.get("data.fgsm_eps")?),
        other => return Err(CliError::Validation(format!("unknown treatment {other:?}"))),
    };
    spec.validate().map_err(invalid)?;
    let label = match name {
        "none" | "scramble" => name.to_string(),
        _ => spec.label(),
    };
    Ok(Condition { label, spec })
}

#[derive(Debug, Clone)]
pub struct DataSettings {
    pub mode: DataMode,
    pub scene: SceneConfig,
    pub num_train: usize,
    pub num_test: usize,
    pub treated_fraction: f64,
    pub flip_rate: f64,
    pub train_condition: Condition,
    pub test_condition: Condition,
    pub scm: ScmConfig,
}

impl DataSettings {
    pub fn parse(cfg: &Config) -> Result<Self, CliError> {
        let mode = match cfg.raw("data.mode") {
            "image" => DataMode::Image,
            "tabular" => DataMode::Tabular,
            other => return Err(CliError::Validation(format!("data.mode {other:?} must be image or tabular"))),
        };
        let scene = SceneConfig {
            num_classes: cfg.get("data.num_classes")?,
            ..SceneConfig::with_size(cfg.get("data.height")?, cfg.get("data.width")?, cfg.get("data.channels")?)
        };
        scene.validate().map_err(invalid)?;
        let treated_fraction: f64 = cfg.get("data.treated_fraction")?;
        let flip_rate: f64 = cfg.get("data.flip_rate")?;
        for (k, v) in [("data.treated_fraction", treated_fraction), ("data.flip_rate", flip_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CliError::Validation(format!("{k} = {v} outside [0, 1]")));
            }
        }
        let train_condition = condition(cfg, cfg.raw("data.treatment"))?;
        let test_name = match cfg.raw("data.test_treatment") {
            "same" => cfg.raw("data.treatment"),
            other => other,
        };
        let test_condition = condition(cfg, test_name)?;
        let scm = ScmConfig {
            num_samples: 0,
            latent_dim: cfg.get("scm.latent_dim")?,
            x_dim: cfg.get("scm.x_dim")?,
            x_noise: cfg.get("scm.x_noise")?,
            treatment_strength: cfg.get("scm.treatment_strength")?,
            outcome_strength: cfg.get("scm.outcome_strength")?,
            tau: cfg.get("scm.tau")?,
            coef_seed: 0,
            seed: 0,
        };
        if scm.latent_dim == 0 || scm.x_dim == 0 {
            return Err(CliError::Validation("scm.latent_dim and scm.x_dim must be positive".into()));
        }
        let num_train: usize = cfg.get("data.num_train")?;
        let num_test: usize = cfg.get("data.num_test")?;
        if num_train == 0 || num_test == 0 {
            return Err(CliError::Validation("data.num_train and data.num_test must be positive".into()));
        }
        Ok(Self { mode, scene, num_train, num_test, treated_fraction, flip_rate, train_condition, test_condition, scm })
    }

    pub fn pairs(&self, num_samples: usize, condition: &Condition, seed_value: u64, prefix: &str) -> CausalPairConfig {
        CausalPairConfig {
            scene: self.scene.clone(),
            num_samples,
            treatment: Some(condition.spec),
            treated_fraction: self.treated_fraction,
            seed: seed_value,
            id_prefix: prefix.into(),
        }
    }
}

/// Architecture settings; the preset comes from the data shape.
#[derive(Debug, Clone)]
pub struct ModelSettings {
    pub variant: Variant,
    pub latent_dim: Option<usize>,
    pub channels: Option<Vec<usize>>,
    pub decoder_channels: Option<Vec<usize>>,
    pub head_hidden: Option<usize>,
    pub key_dim: Option<usize>,
    pub attention_heads: Option<usize>,
    pub posterior_input: PosteriorInput,
    pub soft_treatment: bool,
    pub precision: Precision,
}

fn auto_list(cfg: &Config, key: &str) -> Result<Option<Vec<usize>>, CliError> {
    if cfg.raw(key) == "auto" {
        Ok(None)
    } else {
        cfg.get_list(key).map(Some)
    }
}

impl ModelSettings {
    pub fn parse(cfg: &Config) -> Result<Self, CliError> {
        Ok(Self {
            variant: Variant::parse(cfg.raw("model.variant")).map_err(invalid)?,
            latent_dim: cfg.get_auto("model.latent_dim")?,
            channels: auto_list(cfg, "model.channels")?,
            decoder_channels: auto_list(cfg, "model.decoder_channels")?,
            head_hidden: cfg.get_auto("model.head_hidden")?,
            key_dim: cfg.get_auto("model.key_dim")?,
            attention_heads: cfg.get_auto("model.attention_heads")?,
            posterior_input: match cfg.raw("model.posterior_input") {
                "attention" => PosteriorInput::Attention,
                "attention_and_fused" => PosteriorInput::AttentionAndFused,
                other => return Err(CliError::Validation(format!("model.posterior_input {other:?} is not recognised"))),
            },
            soft_treatment: cfg.get_bool("model.soft_treatment")?,
            precision: match cfg.raw("model.precision") {
                "f32" => Precision::F32,
                "f64" => Precision::F64,
                other => return Err(CliError::Validation(format!("model.precision {other:?} must be f32 or f64"))),
            },
        })
    }

    /// Full model configuration for data of the given shape.
    pub fn build(&self, mode: DataMode, shape: &[usize], num_classes: usize, variant: Variant, seed_value: u64) -> ModelConfig {
        let mut c = match mode {
            DataMode::Image => ModelConfig::image(shape[0], shape[1], shape[2]),
            DataMode::Tabular => ModelConfig::tabular(shape[0]),
        };
        c.variant = variant;
        c.num_classes = num_classes;
        c.seed = seed_value;
        c.posterior_input = self.posterior_input;
        c.soft_treatment = self.soft_treatment;
        c.precision = self.precision;
        if let Some(v) = self.latent_dim {
            c.latent_dim = v;
        }
        if let Some(v) = &self.channels {
            c.channels = v.clone();
        }
        if let Some(v) = &self.decoder_channels {
            c.decoder_channels = v.clone();
        }
        if let Some(v) = self.head_hidden {
            c.head_hidden = v;
        }
        if let Some(v) = self.key_dim {
            c.key_dim = v;
        }
        if let Some(v) = self.attention_heads {
            c.attention_heads = v;
        }
        c
    }

    /// Checks the architecture against the configured data shape.
    pub fn check(&self, data: &DataSettings) -> Result<(), CliError> {
        let (shape, k) = match data.mode {
            DataMode::Image => (vec![data.scene.height, data.scene.width, data.scene.channels], data.scene.num_classes),
            DataMode::Tabular => (vec![data.scm.x_dim], 2),
        };
        self.build(data.mode, &shape, k, self.variant, 0).validate().map_err(invalid)
    }
}

pub fn train_config(cfg: &Config, precision: Precision) -> Result<TrainConfig, CliError> {
    let t = TrainConfig {
        learning_rate: cfg.get("train.learning_rate")?,
        batch_size: cfg.get("train.batch_size")?,
        epochs: cfg.get("train.epochs")?,
        seed: seed::derive(cfg.get("seed")?, &["train".into()]),
        kl_weight: cfg.get("train.kl_weight")?,
        aux_weight: cfg.get("train.aux_weight")?,
        mc_samples: cfg.get("train.mc_samples")?,
        likelihood: Likelihood::parse(cfg.raw("train.likelihood")).map_err(invalid)?,
        precision: Some(precision),
        ..TrainConfig::default()
    };
    t.validate().map_err(invalid)?;
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimandChoice {
    Observational,
    Interventional,
    Both,
}

#[derive(Debug, Clone)]
pub struct AteSettings {
    pub estimand: EstimandChoice,
    pub interventional: InterventionalOptions,
    pub resamples: usize,
}

impl AteSettings {
    pub fn parse(cfg: &Config) -> Result<Self, CliError> {
        let estimand = match cfg.raw("ate.estimand") {
            "observational" => EstimandChoice::Observational,
            "interventional" => EstimandChoice::Interventional,
            "both" => EstimandChoice::Both,
            other => return Err(CliError::Validation(format!("ate.estimand {other:?} is not recognised"))),
        };
        let resamples: usize = cfg.get("ate.resamples")?;
        let mc_samples: usize = cfg.get("ate.mc_samples")?;
        if mc_samples == 0 {
            return Err(CliError::Validation("ate.mc_samples must be >= 1".into()));
        }
        Ok(Self {
            estimand,
            interventional: InterventionalOptions {
                mc_samples,
                functional: OutcomeFunctional::parse(cfg.raw("ate.functional")).map_err(invalid)?,
                resamples,
                seed: seed::derive(cfg.get("seed")?, &["ate".into()]),
            },
            resamples,
        })
    }
}

pub fn refute_options(cfg: &Config) -> Result<RefuteOptions, CliError> {
    let o = RefuteOptions {
        trials: cfg.get("refute.trials")?,
        seed: seed::derive(cfg.get("seed")?, &["refute".into()]),
        subset_fraction: cfg.get("refute.subset_fraction")?,
        strata: cfg.get("refute.strata")?,
        resamples: cfg.get("refute.resamples")?,
        min_tolerance: cfg.get("refute.min_tolerance")?,
        placebo_tolerance: cfg.get("refute.placebo_tolerance")?,
    };
    if o.trials < 1 {
        return Err(CliError::Validation("refute.trials must be >= 1".into()));
    }
    if !(o.subset_fraction > 0.0 && o.subset_fraction <= 1.0) {
        return Err(CliError::Validation("refute.subset_fraction must lie in (0, 1]".into()));
    }
    if o.strata < 1 {
        return Err(CliError::Validation("refute.strata must be >= 1".into()));
    }
    Ok(o)
}

/// Input files a command reads; each must exist at validation time.
pub fn require_file(cfg: &Config, key: &str) -> Result<PathBuf, CliError> {
    let p = cfg.path(key).ok_or_else(|| CliError::Validation(format!("{key} must be set")))?;
    if !p.is_file() {
        return Err(CliError::Validation(format!("{key}: {} does not exist", p.display())));
    }
    Ok(p)
}
