//! Command planning (validation) and execution.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use tlt_core::data::{
    apply_fgsm, build_causal_pairs, build_matched_pairs, flip_treatments, generate_tabular_scm, DataMode, DatasetManifest,
    Sample, ScmConfig, IDENTITY_KEY,
};
use tlt_core::metrics::{
    centroid_permutation_test, estimate_ate_interventional, estimate_ate_observational, export_latents, grad_cam,
    refutation_report, saliency_alignment, sample_mask, tfr_score, write_saliency, AteReport, RefuteOptions,
};
use tlt_core::model::{load_checkpoint, save_checkpoint, TltModel};
use tlt_core::seed;
use tlt_core::train::{fit, TrainConfig};

use crate::config::Config;
use crate::output::{fmt6, run_id, Metrics, RunDir};
use crate::settings::{self, AteSettings, Condition, DataSettings, EstimandChoice, ModelSettings};
use crate::suite::{self, SuitePlan};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenData,
    Train,
    Eval,
    Ate,
    Refute,
    Tfr,
    Saliency,
    ExportLatents,
    Suite,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Ate => "ate",
            Command::Refute => "refute",
            Command::Tfr => "tfr",
            Command::Saliency => "saliency",
            Command::ExportLatents => "export-latents",
            Command::Suite => "suite",
        }
    }
}

pub(crate) fn runtime(e: tlt_core::TltError) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Everything a command needs, checked before any output exists.
pub enum Plan {
    GenData { data: DataSettings, seed: u64 },
    Train { data: PathBuf, model: ModelSettings, train: TrainConfig, seed: u64 },
    Eval { data: PathBuf, checkpoint: PathBuf },
    Ate { data: PathBuf, checkpoint: PathBuf, ate: AteSettings, seed: u64 },
    Refute { data: PathBuf, checkpoint: PathBuf, opts: RefuteOptions },
    Tfr { checkpoint: PathBuf, data: DataSettings, layer: Option<usize>, pairs: usize, seed: u64 },
    Saliency { data: PathBuf, checkpoint: PathBuf, layer: usize, count: usize, true_class: bool },
    ExportLatents { data: PathBuf, checkpoint: PathBuf, permutations: usize, seed: u64 },
    Suite(Box<SuitePlan>),
}

pub fn plan(cmd: Command, cfg: &Config) -> Result<Plan, CliError> {
    let seed_value: u64 = cfg.get("seed")?;
    let _: u8 = cfg.get("verbosity")?;
    Ok(match cmd {
        Command::GenData => {
            let data = DataSettings::parse(cfg)?;
            for c in [&data.train_condition, &data.test_condition] {
                if c.is_fgsm() {
                    return Err(CliError::Validation("fgsm needs a trained model; use it in the suite".into()));
                }
            }
            Plan::GenData { data, seed: seed_value }
        }
        Command::Train => {
            let model = ModelSettings::parse(cfg)?;
            Plan::Train {
                data: settings::require_file(cfg, "paths.train_data")?,
                train: settings::train_config(cfg, model.precision)?,
                model,
                seed: seed_value,
            }
        }
        Command::Eval => Plan::Eval {
            data: settings::require_file(cfg, "paths.test_data")?,
            checkpoint: settings::require_file(cfg, "paths.checkpoint")?,
        },
        Command::Ate => Plan::Ate {
            data: settings::require_file(cfg, "paths.test_data")?,
            checkpoint: settings::require_file(cfg, "paths.checkpoint")?,
            ate: AteSettings::parse(cfg)?,
            seed: seed_value,
        },
        Command::Refute => Plan::Refute {
            data: settings::require_file(cfg, "paths.test_data")?,
            checkpoint: settings::require_file(cfg, "paths.checkpoint")?,
            opts: settings::refute_options(cfg)?,
        },
        Command::Tfr => {
            let layer = match cfg.raw("tfr.layer") {
                "all" => None,
                _ => Some(cfg.get::<usize>("tfr.layer")?),
            };
            let pairs: usize = cfg.get("tfr.pairs")?;
            if pairs == 0 {
                return Err(CliError::Validation("tfr.pairs must be >= 1".into()));
            }
            Plan::Tfr {
                checkpoint: settings::require_file(cfg, "paths.checkpoint")?,
                data: DataSettings::parse(cfg)?,
                layer,
                pairs,
                seed: seed_value,
            }
        }
        Command::Saliency => Plan::Saliency {
            data: settings::require_file(cfg, "paths.test_data")?,
            checkpoint: settings::require_file(cfg, "paths.checkpoint")?,
            layer: cfg.get("saliency.layer")?,
            count: cfg.get("saliency.count")?,
            true_class: match cfg.raw("saliency.class") {
                "predicted" => false,
                "true" => true,
                other => return Err(CliError::Validation(format!("saliency.class {other:?} must be predicted or true"))),
            },
        },
        Command::ExportLatents => Plan::ExportLatents {
            data: settings::require_file(cfg, "paths.test_data")?,
            checkpoint: settings::require_file(cfg, "paths.checkpoint")?,
            permutations: cfg.get("latents.permutations")?,
            seed: seed_value,
        },
        Command::Suite => Plan::Suite(Box::new(suite::plan(cfg)?)),
    })
}

/// Output directory: `paths.out`, else `$TLT_OUT_ROOT/<run id>`.
pub fn output_root(cfg: &Config, cmd: Command) -> PathBuf {
    cfg.path("paths.out").unwrap_or_else(|| {
        let root = std::env::var_os("TLT_OUT_ROOT").map_or_else(|| PathBuf::from("tlt-runs"), PathBuf::from);
        root.join(run_id(cmd.name(), &cfg.digest(cmd.name())))
    })
}

/// Progress lines on stderr at verbosity >= 1.
pub struct Log(pub u8);

impl Log {
    pub fn info(&self, msg: impl AsRef<str>) {
        if self.0 >= 1 {
            eprintln!("{}", msg.as_ref());
        }
    }
}

/// Validates, then executes `cmd` into its output directory.
pub fn execute(cmd: Command, cfg: &Config) -> Result<PathBuf, CliError> {
    let plan = plan(cmd, cfg)?;
    let log = Log(cfg.get("verbosity")?);
    let root = output_root(cfg, cmd);
    let dir = RunDir::create(&root)?;
    let mut metrics = Metrics::default();
    let artifacts = match plan {
        Plan::GenData { data, seed } => gen_data(&data, seed, &dir, &mut metrics, &log)?,
        Plan::Train { data, model, train, seed } => train_cmd(&data, &model, &train, seed, &dir, &mut metrics, &log)?,
        Plan::Eval { data, checkpoint } => eval(&data, &checkpoint, &dir, &mut metrics)?,
        Plan::Ate { data, checkpoint, ate, seed } => ate_cmd(&data, &checkpoint, &ate, seed, &mut metrics)?,
        Plan::Refute { data, checkpoint, opts } => refute_cmd(&data, &checkpoint, &opts, &mut metrics)?,
        Plan::Tfr { checkpoint, data, layer, pairs, seed } => tfr(&checkpoint, &data, layer, pairs, seed, &dir, &mut metrics)?,
        Plan::Saliency { data, checkpoint, layer, count, true_class } => {
            saliency(&data, &checkpoint, layer, count, true_class, &dir, &mut metrics)?
        }
        Plan::ExportLatents { data, checkpoint, permutations, seed } => {
            latents(&data, &checkpoint, permutations, seed, &dir, &mut metrics)?
        }
        Plan::Suite(p) => suite::run(&p, &dir, &mut metrics, &log)?,
    };
    let artifacts: Vec<&str> = artifacts.iter().map(String::as_str).collect();
    dir.finish(cmd.name(), &cfg.digest(cmd.name()), &metrics, &artifacts)?;
    Ok(root)
}

fn read_manifest(path: &Path) -> Result<DatasetManifest, CliError> {
    let d = DatasetManifest::read(path).map_err(runtime)?;
    if d.is_empty() {
        return Err(CliError::Runtime(format!("{} holds no records", path.display())));
    }
    Ok(d)
}

fn load_model(path: &Path) -> Result<TltModel, CliError> {
    load_checkpoint(path).map_err(runtime)
}

fn gen_data(data: &DataSettings, seed_value: u64, dir: &RunDir, m: &mut Metrics, log: &Log) -> Result<Vec<String>, CliError> {
    let stream = |name: &str| seed::derive(seed_value, &["gen-data".into(), name.into()]);
    let (train, test) = match data.mode {
        DataMode::Image => {
            log.info(format!("rendering {} train and {} test scenes", data.num_train, data.num_test));
            let train = build_causal_pairs(&data.pairs(data.num_train, &data.train_condition, stream("train"), "train"))
                .map_err(runtime)?;
            let test = build_causal_pairs(&data.pairs(data.num_test, &data.test_condition, stream("test"), "test"))
                .map_err(runtime)?;
            (train, test)
        }
        DataMode::Tabular => {
            let scm = |n: usize, s: u64| ScmConfig { num_samples: n, coef_seed: stream("scm"), seed: s, ..data.scm.clone() };
            (
                generate_tabular_scm(&scm(data.num_train, stream("train"))).map_err(runtime)?,
                generate_tabular_scm(&scm(data.num_test, stream("test"))).map_err(runtime)?,
            )
        }
    };
    let train = flip_treatments(&train, data.flip_rate, &mut seed::rng(stream("flip"))).map_err(runtime)?;
    train.write(&dir.path("train.jsonl")).map_err(runtime)?;
    test.write(&dir.path("test.jsonl")).map_err(runtime)?;
    m.int("train.records", train.len());
    m.int("test.records", test.len());
    m.num("train.treated_fraction", train.treated_fraction);
    m.num("test.treated_fraction", test.treated_fraction);
    m.num("train.flip_rate", train.flip_rate);
    m.int("train.flip_count", train.flip_count);
    if let Some(a) = train.planted_ate {
        m.num("planted_ate", a);
    }
    Ok(vec!["train.jsonl".into(), "test.jsonl".into()])
}

/// Trains a fresh model on `data`.
pub(crate) fn train_model(
    data: &DatasetManifest,
    model: &ModelSettings,
    variant: tlt_core::model::Variant,
    train: &TrainConfig,
    model_seed: u64,
) -> Result<(TltModel, tlt_core::train::TrainHistory), CliError> {
    let shape = data.records[0].shape.clone();
    let config = model.build(data.mode, &shape, data.num_classes, variant, model_seed);
    let mut net = TltModel::new(config).map_err(runtime)?;
    let history = fit(&mut net, data, train).map_err(runtime)?;
    Ok((net, history))
}

fn train_cmd(
    path: &Path,
    model: &ModelSettings,
    cfg: &TrainConfig,
    seed_value: u64,
    dir: &RunDir,
    m: &mut Metrics,
    log: &Log,
) -> Result<Vec<String>, CliError> {
    let data = read_manifest(path)?;
    log.info(format!("training {} on {} records for {} epochs", model.variant.name(), data.len(), cfg.epochs));
    let (net, history) = train_model(&data, model, model.variant, cfg, seed::derive(seed_value, &["model".into()]))?;
    save_checkpoint(&net, dir.path("model.ckpt")).map_err(runtime)?;
    history.write_csv(&dir.path("history.csv")).map_err(runtime)?;
    m.int("parameters", net.parameter_count());
    m.int("epochs", history.rows.len());
    if let Some(last) = history.rows.last() {
        let l = &last.loss;
        for (k, v) in [
            ("final.total", l.total),
            ("final.recon_x", l.recon_x),
            ("final.recon_t", l.recon_t),
            ("final.recon_y", l.recon_y),
            ("final.kl", l.kl),
            ("final.aux_t", l.aux_t),
            ("final.aux_y", l.aux_y),
            ("final.acc", last.acc),
            ("final.t_acc", last.t_acc),
        ] {
            m.num(k, v);
        }
    }
    m.int("clamp_warnings", history.clamp_warnings);
    Ok(vec!["model.ckpt".into(), "history.csv".into()])
}

fn eval(path: &Path, checkpoint: &Path, dir: &RunDir, m: &mut Metrics) -> Result<Vec<String>, CliError> {
    let data = read_manifest(path)?;
    let model = load_model(checkpoint)?;
    let pred = model.predict_samples(&data.records).map_err(runtime)?;
    let mut csv = String::from("id,y,y_hat,t,t_hat,t_prob\n");
    let (mut hits, mut t_hits) = (0usize, 0usize);
    let mut arm = [(0usize, 0usize); 2];
    for (i, s) in data.records.iter().enumerate() {
        let ok = pred.y_hat[i] == s.y;
        hits += usize::from(ok);
        t_hits += usize::from(pred.t_hat[i] == s.t);
        let a = &mut arm[usize::from(s.t)];
        a.0 += usize::from(ok);
        a.1 += 1;
        let _ = writeln!(csv, "{},{},{},{},{},{}", s.id, s.y, pred.y_hat[i], s.t, pred.t_hat[i], fmt6(pred.t_prob[i]));
    }
    dir.write("predictions.csv", csv)?;
    let n = data.len() as f64;
    m.int("n", data.len());
    m.num("accuracy", hits as f64 / n);
    m.num("t_accuracy", t_hits as f64 / n);
    for (name, (h, c)) in [("accuracy.control", arm[0]), ("accuracy.treated", arm[1])] {
        if c > 0 {
            m.num(name, h as f64 / c as f64);
        }
    }
    Ok(vec!["predictions.csv".into()])
}

pub(crate) fn report_metrics(m: &mut Metrics, prefix: &str, r: &AteReport) {
    m.num(format!("{prefix}.ate"), r.ate);
    m.num(format!("{prefix}.signed_ate"), r.signed_ate);
    m.num(format!("{prefix}.arm1_mean"), r.arm_means.0);
    m.num(format!("{prefix}.arm0_mean"), r.arm_means.1);
    m.num(format!("{prefix}.ci_low"), r.bootstrap_ci.0);
    m.num(format!("{prefix}.ci_high"), r.bootstrap_ci.1);
}

fn ate_cmd(path: &Path, checkpoint: &Path, ate: &AteSettings, seed_value: u64, m: &mut Metrics) -> Result<Vec<String>, CliError> {
    let data = read_manifest(path)?;
    let model = load_model(checkpoint)?;
    m.int("n", data.len());
    if ate.estimand != EstimandChoice::Interventional {
        let s = seed::derive(seed_value, &["ate".into(), "observational".into()]);
        let r = estimate_ate_observational(&model, &data, ate.resamples, s).map_err(runtime)?;
        report_metrics(m, "observational", &r);
    }
    if ate.estimand != EstimandChoice::Observational {
        let r = estimate_ate_interventional(&model, &data, &ate.interventional).map_err(runtime)?;
        report_metrics(m, "interventional", &r);
        m.int("interventional.mc_samples", ate.interventional.mc_samples);
        m.text("interventional.functional", ate.interventional.functional.name());
        if let Some(p) = data.planted_ate {
            m.num("planted_ate", p);
            m.num("interventional.planted_error", (r.signed_ate - p).abs());
        }
    }
    Ok(Vec::new())
}

fn refute_cmd(path: &Path, checkpoint: &Path, opts: &RefuteOptions, m: &mut Metrics) -> Result<Vec<String>, CliError> {
    let data = read_manifest(path)?;
    let model = load_model(checkpoint)?;
    let r = refutation_report(&model, &data, opts).map_err(runtime)?;
    m.int("n", data.len());
    m.int("trials", opts.trials);
    report_metrics(m, "original", &r.original);
    for e in r.entries() {
        let k = e.kind.name();
        m.num(format!("{k}.estimate"), e.estimate);
        m.num(format!("{k}.signed_mean"), e.signed_mean);
        m.num(format!("{k}.tolerance"), e.tolerance);
        m.flag(format!("{k}.pass"), e.pass);
    }
    Ok(Vec::new())
}

/// Matched clean/treated scene pairs shaped for `model`. FGSM pairs perturb
/// the clean view with the model's own input gradient.
pub(crate) fn matched_pairs(
    model: &TltModel,
    data: &DataSettings,
    condition: &Condition,
    count: usize,
    seed_value: u64,
) -> Result<Vec<(Sample, Sample)>, CliError> {
    let c = model.config();
    if c.mode != DataMode::Image {
        return Err(CliError::Runtime("matched scene pairs need an image model".into()));
    }
    let mut cfg = data.pairs(count, condition, seed_value, "pair");
    cfg.scene.height = c.height;
    cfg.scene.width = c.width;
    cfg.scene.channels = c.input_channels;
    cfg.scene.num_classes = c.num_classes;
    if condition.is_fgsm() {
        cfg.treatment = Some(tlt_core::data::TreatmentSpec::scramble(IDENTITY_KEY));
        let pairs = build_matched_pairs(&cfg).map_err(runtime)?;
        pairs
            .into_iter()
            .map(|(clean, _)| {
                let adv = apply_fgsm(&clean, model, condition.spec.eps).map_err(runtime)?;
                Ok((clean, adv))
            })
            .collect()
    } else {
        build_matched_pairs(&cfg).map_err(runtime)
    }
}

fn tfr(
    checkpoint: &Path,
    data: &DataSettings,
    layer: Option<usize>,
    count: usize,
    seed_value: u64,
    dir: &RunDir,
    m: &mut Metrics,
) -> Result<Vec<String>, CliError> {
    let model = load_model(checkpoint)?;
    let pairs = matched_pairs(&model, data, &data.test_condition, count, seed::derive(seed_value, &["tfr".into()]))?;
    let layers: Vec<usize> = match layer {
        Some(l) => vec![l],
        None => (1..=model.encoder_layers()).collect(),
    };
    let mut csv = String::from("layer,feature,score\n");
    m.text("treatment", data.test_condition.label.clone());
    m.int("pairs", pairs.len());
    for l in layers {
        let r = tfr_score(&model, &pairs, l).map_err(runtime)?;
        for (j, s) in r.scores.iter().enumerate() {
            let _ = writeln!(csv, "{l},{j},{}", s.map_or_else(|| "undefined".to_string(), fmt6));
        }
        m.num(format!("layer{l}.mean"), r.mean);
        m.num(format!("layer{l}.top1_mean"), r.top1_mean);
        m.int(format!("layer{l}.undefined"), r.undefined());
    }
    dir.write("tfr.csv", csv)?;
    Ok(vec!["tfr.csv".into()])
}

fn saliency(
    path: &Path,
    checkpoint: &Path,
    layer: usize,
    count: usize,
    true_class: bool,
    dir: &RunDir,
    m: &mut Metrics,
) -> Result<Vec<String>, CliError> {
    let data = read_manifest(path)?;
    let model = load_model(checkpoint)?;
    let chosen: Vec<&Sample> = data.records.iter().filter(|s| s.mask.is_some()).take(count).collect();
    if chosen.is_empty() {
        return Err(CliError::Runtime("no records carry object masks".into()));
    }
    let owned: Vec<Sample> = chosen.iter().map(|s| (*s).clone()).collect();
    let pred = model.predict(&owned).map_err(runtime)?;
    let mut csv = String::from("id,y,t,class,alignment,degenerate\n");
    let mut artifacts = vec!["saliency.csv".to_string()];
    let (mut sum, mut degenerate) = (0.0, 0usize);
    for (s, p) in owned.iter().zip(&pred) {
        let class = if true_class { s.y } else { *p };
        let map = grad_cam(&model, s, class, layer).map_err(runtime)?;
        let a = saliency_alignment(&map, sample_mask(s).map_err(runtime)?, s.height(), s.width()).map_err(runtime)?;
        sum += a.score;
        degenerate += usize::from(a.degenerate);
        let stem = format!("saliency/{}", s.id);
        std::fs::create_dir_all(dir.path("saliency")).map_err(|e| CliError::Runtime(e.to_string()))?;
        write_saliency(&map, &dir.path(&format!("{stem}.pgm")), &dir.path(&format!("{stem}.f64"))).map_err(runtime)?;
        artifacts.push(format!("{stem}.pgm"));
        artifacts.push(format!("{stem}.f64"));
        let _ = writeln!(csv, "{},{},{},{class},{},{}", s.id, s.y, s.t, fmt6(a.score), u8::from(a.degenerate));
    }
    dir.write("saliency.csv", csv)?;
    m.int("maps", owned.len());
    m.int("layer", layer);
    m.num("mean_alignment", sum / owned.len() as f64);
    m.int("degenerate", degenerate);
    Ok(artifacts)
}

fn latents(
    path: &Path,
    checkpoint: &Path,
    permutations: usize,
    seed_value: u64,
    dir: &RunDir,
    m: &mut Metrics,
) -> Result<Vec<String>, CliError> {
    let data = read_manifest(path)?;
    let model = load_model(checkpoint)?;
    let table = export_latents(&model, &data).map_err(runtime)?;
    dir.write("latents.csv", table.to_csv())?;
    m.int("rows", table.len());
    let arms = (table.t.contains(&0), table.t.contains(&1));
    if permutations > 0 && arms == (true, true) {
        let s = seed::derive(seed_value, &["latents".into()]);
        let p = centroid_permutation_test(&table.mu, &table.t, permutations, s).map_err(runtime)?;
        m.num("centroid_distance", p.observed);
        m.num("null_q95", p.null_q95);
        m.num("p_value", p.p_value);
    }
    Ok(vec!["latents.csv".into()])
}
