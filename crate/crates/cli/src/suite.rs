//! Treatment-by-variant accuracy and effect table.
//!
//! Every row shares the clean scenes and the treated assignment of the test
//! set; only the treatment applied to the treated units changes. FGSM rows
//! attack each variant with its own input gradient, so their test sets differ
//! per column.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::Rng as _;
use tlt_core::data::{
    apply_fgsm, build_causal_pairs, flip_treatments, stratified_folds, DataMode, DatasetManifest, Sample, TreatmentSpec,
    IDENTITY_KEY,
};
use tlt_core::metrics::{observational_from_correctness, AteReport};
use tlt_core::model::{load_checkpoint, TltModel, Variant};
use tlt_core::seed;
use tlt_core::train::TrainConfig;

use crate::commands::{runtime, train_model, Log};
use crate::config::Config;
use crate::output::{fmt6, Metrics, RunDir};
use crate::settings::{self, Condition, DataSettings, ModelSettings};
use crate::CliError;

pub struct SuitePlan {
    pub data: DataSettings,
    pub model: ModelSettings,
    pub train: TrainConfig,
    /// Each variant with its checkpoint, or `None` to train inline.
    pub variants: Vec<(Variant, Option<PathBuf>)>,
    pub rows: Vec<Condition>,
    pub folds: usize,
    pub resamples: usize,
    pub seed: u64,
}

pub fn plan(cfg: &Config) -> Result<SuitePlan, CliError> {
    let data = DataSettings::parse(cfg)?;
    if data.mode != DataMode::Image {
        return Err(CliError::Validation("the suite applies visual treatments and needs data.mode = image".into()));
    }
    if data.train_condition.is_fgsm() {
        return Err(CliError::Validation("data.treatment = fgsm cannot build a training set".into()));
    }
    let model = ModelSettings::parse(cfg)?;
    model.check(&data)?;
    let train = settings::train_config(cfg, model.precision)?;

    let mut rows = Vec::new();
    for name in cfg.get_list::<String>("suite.treatments")? {
        rows.push(settings::condition(cfg, &name)?);
    }
    for r in cfg.get_list::<f64>("suite.mask_ratios")? {
        let spec = TreatmentSpec::object_mask(r);
        spec.validate().map_err(|e| CliError::Validation(format!("suite.mask_ratios: {e}")))?;
        rows.push(Condition { label: spec.label(), spec });
    }
    if rows.is_empty() {
        return Err(CliError::Validation("suite has no treatment rows".into()));
    }

    let folds: usize = cfg.get("suite.folds")?;
    if folds == 1 || folds > data.num_train {
        return Err(CliError::Validation(format!("suite.folds = {folds} must be 0 or in [2, data.num_train]")));
    }
    let inline = cfg.get_bool("suite.train_inline")?;
    if folds >= 2 && !inline {
        return Err(CliError::Validation("suite.folds trains one model per fold and needs suite.train_inline".into()));
    }
    let checkpoints = cfg.suite_checkpoints();
    let mut variants = Vec::new();
    for name in cfg.get_list::<String>("suite.variants")? {
        let v = Variant::parse(&name).map_err(|e| CliError::Validation(e.to_string()))?;
        if variants.iter().any(|(w, _)| *w == v) {
            return Err(CliError::Validation(format!("suite.variants lists {name} twice")));
        }
        let ckpt = checkpoints.iter().find(|(n, _)| *n == v.name()).map(|(_, p)| p.clone());
        match (&ckpt, inline) {
            (Some(p), _) if folds == 0 => {
                if !p.is_file() {
                    return Err(CliError::Validation(format!("suite.checkpoint.{name}: {} does not exist", p.display())));
                }
            }
            (_, true) => {}
            (_, false) => {
                return Err(CliError::Validation(format!(
                    "no checkpoint for variant {name}; set suite.checkpoint.{name} or suite.train_inline"
                )))
            }
        }
        variants.push((v, if folds == 0 { ckpt } else { None }));
    }
    if variants.is_empty() {
        return Err(CliError::Validation("suite.variants is empty".into()));
    }
    Ok(SuitePlan { data, model, train, variants, rows, folds, resamples: cfg.get("ate.resamples")?, seed: cfg.get("seed")? })
}

fn stream(seed_value: u64, name: &str) -> u64 {
    seed::derive(seed_value, &["suite".into(), name.into()])
}

/// Accuracy with a percentile bootstrap 95% half-width.
fn accuracy(correct: &[bool], resamples: usize, seed_value: u64) -> (f64, f64) {
    let n = correct.len();
    let acc = correct.iter().filter(|c| **c).count() as f64 / n as f64;
    if resamples == 0 {
        return (acc, 0.0);
    }
    let mut rng = seed::rng(seed_value);
    let mut draws: Vec<f64> = (0..resamples)
        .map(|_| (0..n).filter(|_| correct[rng.random_range(0..n)]).count() as f64 / n as f64)
        .collect();
    draws.sort_by(f64::total_cmp);
    let at = |q: f64| draws[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    (acc, 0.5 * (at(0.975) - at(0.025)))
}

struct Cell {
    acc: (f64, f64),
    ate: AteReport,
}

fn score(pred: &[usize], records: &[Sample], resamples: usize, seed_value: u64) -> Result<Cell, CliError> {
    let correct: Vec<bool> = pred.iter().zip(records).map(|(p, s)| *p == s.y).collect();
    let t: Vec<u8> = records.iter().map(|s| s.t).collect();
    let ate = observational_from_correctness(&correct, &t, resamples, seed::derive(seed_value, &["ate".into()]))
        .map_err(runtime)?;
    Ok(Cell { acc: accuracy(&correct, resamples, seed::derive(seed_value, &["acc".into()])), ate })
}

/// Test records for `cond`; FGSM attacks the treated units with `model`.
fn treated_records(base: &[Sample], cond: &Condition, model: &TltModel) -> Result<Vec<Sample>, CliError> {
    if !cond.is_fgsm() {
        return Ok(base.to_vec());
    }
    base.iter()
        .map(|s| if s.t == 1 { apply_fgsm(s, model, cond.spec.eps).map_err(runtime) } else { Ok(s.clone()) })
        .collect()
}

/// The pool rendered under `cond`, or under the identity for FGSM rows.
fn pool(p: &SuitePlan, n: usize, cond: &Condition, seed_value: u64, prefix: &str) -> Result<DatasetManifest, CliError> {
    let base = if cond.is_fgsm() {
        Condition { label: "none".into(), spec: TreatmentSpec::scramble(IDENTITY_KEY) }
    } else {
        cond.clone()
    };
    build_causal_pairs(&p.data.pairs(n, &base, seed_value, prefix)).map_err(runtime)
}

pub fn run(p: &SuitePlan, dir: &RunDir, m: &mut Metrics, log: &Log) -> Result<Vec<String>, CliError> {
    let train_seed = stream(p.seed, "train");
    let train_clean = build_causal_pairs(&p.data.pairs(p.data.num_train, &p.data.train_condition, train_seed, "train"))
        .map_err(runtime)?;
    let train = flip_treatments(&train_clean, p.data.flip_rate, &mut seed::rng(stream(p.seed, "flip"))).map_err(runtime)?;
    let model_seed = |v: Variant, fold: Option<usize>| {
        let mut tags = vec!["model".into(), v.name().into()];
        if let Some(f) = fold {
            tags.push(f.into());
        }
        seed::derive(p.seed, &tags)
    };
    let fit_one = |data: &DatasetManifest, v: Variant, fold: Option<usize>| -> Result<TltModel, CliError> {
        log.info(format!("suite: training {} on {} records{}", v.name(), data.len(), fold.map_or(String::new(), |f| format!(" (fold {f})"))));
        Ok(train_model(data, &p.model, v, &p.train, model_seed(v, fold))?.0)
    };

    let mut header = String::from("treatment");
    for (v, _) in &p.variants {
        let n = v.name();
        let _ = write!(header, ",{n}_acc,{n}_acc_err,{n}_ate,{n}_ate_err");
    }
    let mut csv = header + "\n";

    // cells[row][variant]
    let mut cells: Vec<Vec<Cell>> = Vec::new();
    if p.folds == 0 {
        let mut models = Vec::new();
        for (v, ckpt) in &p.variants {
            models.push(match ckpt {
                Some(path) => load_checkpoint(path).map_err(runtime)?,
                None => fit_one(&train, *v, None)?,
            });
        }
        let test_seed = stream(p.seed, "test");
        for cond in &p.rows {
            let base = pool(p, p.data.num_test, cond, test_seed, "test")?;
            let mut row = Vec::new();
            for (model, (v, _)) in models.iter().zip(&p.variants) {
                let records = treated_records(&base.records, cond, model)?;
                let pred = model.predict(&records).map_err(runtime)?;
                row.push(score(&pred, &records, p.resamples, seed::derive(p.seed, &["suite".into(), cond.label.as_str().into(), v.name().into()]))?);
            }
            cells.push(row);
        }
    } else {
        let folds = stratified_folds(&train, p.folds, stream(p.seed, "folds")).map_err(runtime)?;
        let mut fold_models: Vec<Vec<TltModel>> = Vec::new();
        for (f, held) in folds.iter().enumerate() {
            let keep: Vec<usize> = (0..train.len()).filter(|i| held.binary_search(i).is_err()).collect();
            let part = train.subset(&keep);
            let mut ms = Vec::new();
            for (v, _) in &p.variants {
                ms.push(fit_one(&part, *v, Some(f))?);
            }
            fold_models.push(ms);
        }
        for cond in &p.rows {
            // Same scenes and assignment as the training pool, with true treatments.
            let base = pool(p, p.data.num_train, cond, train_seed, "train")?;
            let mut row = Vec::new();
            for (j, (v, _)) in p.variants.iter().enumerate() {
                let (mut pred, mut records) = (Vec::new(), Vec::new());
                for (f, held) in folds.iter().enumerate() {
                    let model = &fold_models[f][j];
                    let part: Vec<Sample> = held.iter().map(|i| base.records[*i].clone()).collect();
                    let part = treated_records(&part, cond, model)?;
                    pred.extend(model.predict(&part).map_err(runtime)?);
                    records.extend(part);
                }
                row.push(score(&pred, &records, p.resamples, seed::derive(p.seed, &["suite".into(), cond.label.as_str().into(), v.name().into()]))?);
            }
            cells.push(row);
        }
    }

    for (cond, row) in p.rows.iter().zip(&cells) {
        csv.push_str(&cond.label);
        for (cell, (v, _)) in row.iter().zip(&p.variants) {
            let _ = write!(csv, ",{},{},{},{}", fmt6(cell.acc.0), fmt6(cell.acc.1), fmt6(cell.ate.ate), fmt6(cell.ate.ci_half_width()));
            let k = format!("{}.{}", cond.label, v.name());
            m.num(format!("{k}.acc"), cell.acc.0);
            m.num(format!("{k}.acc_err"), cell.acc.1);
            m.num(format!("{k}.ate"), cell.ate.ate);
            m.num(format!("{k}.ate_err"), cell.ate.ci_half_width());
        }
        csv.push('\n');
    }
    m.int("rows", p.rows.len());
    m.int("variants", p.variants.len());
    m.int("folds", p.folds);
    dir.write("suite.csv", csv)?;
    Ok(vec!["suite.csv".into()])
}
