//! Flat `key = value` run configuration.
//!
//! Every accepted key has a default, so the effective configuration is a
//! complete sorted map. Unknown keys are rejected. The digest covers every
//! key except `paths.*` and `suite.checkpoint.*`, so moving files around does
//! not change the identity of a run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::CliError;

/// Accepted keys and their defaults. `same` and `auto` defer to another key
/// or to the architecture preset.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("verbosity", "1"),
    ("paths.out", ""),
    ("paths.train_data", ""),
    ("paths.test_data", ""),
    ("paths.checkpoint", ""),
    ("data.mode", "image"),
    ("data.height", "32"),
    ("data.width", "32"),
    ("data.channels", "1"),
    ("data.num_classes", "2"),
    ("data.num_train", "2000"),
    ("data.num_test", "500"),
    ("data.treated_fraction", "0.5"),
    ("data.flip_rate", "0"),
    ("data.treatment", "scramble"),
    ("data.test_treatment", "same"),
    ("data.ratio", "1"),
    ("data.sigma", "0.1"),
    ("data.key", "1"),
    ("data.fgsm_eps", "0.3"),
    ("scm.latent_dim", "2"),
    ("scm.x_dim", "8"),
    ("scm.x_noise", "0.1"),
    ("scm.treatment_strength", "1"),
    ("scm.outcome_strength", "1"),
    ("scm.tau", "1"),
    ("model.variant", "tlt"),
    ("model.latent_dim", "auto"),
    ("model.channels", "auto"),
    ("model.decoder_channels", "auto"),
    ("model.head_hidden", "auto"),
    ("model.key_dim", "auto"),
    ("model.attention_heads", "auto"),
    ("model.posterior_input", "attention"),
    ("model.soft_treatment", "false"),
    ("model.precision", "f32"),
    ("train.learning_rate", "0.001"),
    ("train.batch_size", "128"),
    ("train.epochs", "10"),
    ("train.kl_weight", "1"),
    ("train.aux_weight", "1"),
    ("train.mc_samples", "1"),
    ("train.likelihood", "gaussian"),
    ("ate.estimand", "both"),
    ("ate.mc_samples", "128"),
    ("ate.functional", "true_class_prob"),
    ("ate.resamples", "1000"),
    ("refute.trials", "20"),
    ("refute.subset_fraction", "0.8"),
    ("refute.strata", "5"),
    ("refute.resamples", "1000"),
    ("refute.min_tolerance", "0.02"),
    ("refute.placebo_tolerance", "0.05"),
    ("tfr.layer", "all"),
    ("tfr.pairs", "200"),
    ("saliency.layer", "3"),
    ("saliency.count", "16"),
    ("saliency.class", "predicted"),
    ("latents.permutations", "1000"),
    ("suite.variants", "tlt"),
    ("suite.treatments", "none,scramble,object_mask,background_refill,gaussian,fgsm"),
    ("suite.mask_ratios", ""),
    ("suite.train_inline", "true"),
    ("suite.folds", "0"),
];

const CHECKPOINT_PREFIX: &str = "suite.checkpoint.";

fn is_known(key: &str) -> bool {
    DEFAULTS.iter().any(|(k, _)| *k == key)
        || key.strip_prefix(CHECKPOINT_PREFIX).is_some_and(|v| tlt_core::model::Variant::parse(v).is_ok())
}

/// Parses `key = value` lines; `#` starts a comment line.
pub fn parse_text(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("config line {}: expected key = value, got {line:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses one `--override key=value` argument.
pub fn parse_override(arg: &str) -> Result<(String, String), CliError> {
    arg.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| CliError::Validation(format!("override {arg:?} is not key=value")))
}

/// Effective configuration after defaults, file values and overrides.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    /// Later layers win. A key repeated inside the file is an error.
    pub fn layered(file: &[(String, String)], overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut values: BTreeMap<String, String> =
            DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let mut seen = std::collections::HashSet::new();
        for (k, _) in file {
            if !seen.insert(k.as_str()) {
                return Err(CliError::Validation(format!("config key {k} is set twice")));
            }
        }
        for (k, v) in file.iter().chain(overrides) {
            if !is_known(k) {
                return Err(CliError::Validation(format!("unknown config key {k}")));
            }
            values.insert(k.clone(), v.clone());
        }
        Ok(Self { values })
    }

    pub fn defaults() -> Self {
        Self::layered(&[], &[]).expect("defaults are known keys")
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<(), CliError> {
        if !is_known(key) {
            return Err(CliError::Validation(format!("unknown config key {key}")));
        }
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| CliError::Validation(format!("{key} = {raw:?} is not a valid {}", std::any::type_name::<T>())))
    }

    /// `None` for the `auto` sentinel.
    pub fn get_auto<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        if self.raw(key) == "auto" {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    pub fn get_bool(&self, key: &str) -> Result<bool, CliError> {
        match self.raw(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(CliError::Validation(format!("{key} = {other:?} is not a boolean"))),
        }
    }

    /// Comma-separated list; empty string is the empty list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError> {
        let raw = self.raw(key);
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|item| {
                let item = item.trim();
                item.parse().map_err(|_| CliError::Validation(format!("{key}: cannot parse list item {item:?}")))
            })
            .collect()
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let raw = self.raw(key);
        (!raw.is_empty()).then(|| PathBuf::from(raw))
    }

    /// `(variant name, path)` for every `suite.checkpoint.*` key.
    pub fn suite_checkpoints(&self) -> Vec<(String, PathBuf)> {
        self.values
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(CHECKPOINT_PREFIX).map(|name| (name.to_string(), PathBuf::from(v))))
            .collect()
    }

    /// Sorted `key=value` lines that define the run, with `command` first.
    pub fn canonical(&self, command: &str) -> String {
        let mut s = format!("command={command}\n");
        for (k, v) in &self.values {
            if k.starts_with("paths.") || k.starts_with(CHECKPOINT_PREFIX) {
                continue;
            }
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Hex SHA-256 of [`Config::canonical`].
    pub fn digest(&self, command: &str) -> String {
        Sha256::digest(self.canonical(command).as_bytes()).iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(items: &[(&str, &str)]) -> Vec<(String, String)> {
        items.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn parses_comments_and_whitespace() {
        let got = parse_text("# note\n\n seed = 4 \ndata.mode=tabular\n").unwrap();
        assert_eq!(got, pairs(&[("seed", "4"), ("data.mode", "tabular")]));
        assert!(parse_text("seed 4").is_err());
    }

    #[test]
    fn overrides_win_over_file_values() {
        let c = Config::layered(&pairs(&[("seed", "4")]), &pairs(&[("seed", "9")])).unwrap();
        assert_eq!(c.get::<u64>("seed").unwrap(), 9);
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected() {
        assert!(Config::layered(&pairs(&[("sed", "4")]), &[]).is_err());
        assert!(Config::layered(&pairs(&[("seed", "4"), ("seed", "5")]), &[]).is_err());
        assert!(Config::layered(&pairs(&[("suite.checkpoint.tlt", "a")]), &[]).is_ok());
        assert!(Config::layered(&pairs(&[("suite.checkpoint.resnet", "a")]), &[]).is_err());
    }

    #[test]
    fn digest_ignores_paths_but_not_settings() {
        let a = Config::layered(&pairs(&[("paths.out", "x")]), &[]).unwrap();
        let b = Config::layered(&pairs(&[("paths.out", "y"), ("suite.checkpoint.tlt", "m")]), &[]).unwrap();
        let c = Config::layered(&pairs(&[("seed", "1")]), &[]).unwrap();
        assert_eq!(a.digest("train"), b.digest("train"));
        assert_ne!(a.digest("train"), c.digest("train"));
        assert_ne!(a.digest("train"), a.digest("eval"));
        assert_eq!(a.digest("train").len(), 64);
    }

    #[test]
    fn typed_getters() {
        let c = Config::layered(&pairs(&[("suite.mask_ratios", "0, 0.5,1")]), &[]).unwrap();
        assert_eq!(c.get_list::<f64>("suite.mask_ratios").unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(c.get_auto::<usize>("model.latent_dim").unwrap(), None);
        assert!(c.get_bool("suite.train_inline").unwrap());
        assert!(c.get::<usize>("data.mode").is_err());
    }
}
