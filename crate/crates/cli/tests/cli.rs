use std::fs;
use std::path::{Path, PathBuf};

use tlt_cli::output::INCOMPLETE;
use tlt_cli::run;
use tlt_core::data::DatasetManifest;

const SMALL: &str = "\
data.height = 16
data.width = 16
data.num_train = 40
data.num_test = 24
train.epochs = 1
train.batch_size = 8
ate.resamples = 50
ate.mc_samples = 2
refute.trials = 2
refute.resamples = 20
verbosity = 0
";

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    // Keys in `extra` replace the ones in SMALL, so the file never repeats a key.
    let key = |l: &str| l.split('=').next().unwrap().trim().to_string();
    let replaced: Vec<String> = extra.lines().map(key).collect();
    let mut text: String = SMALL.lines().filter(|l| !replaced.contains(&key(l))).map(|l| format!("{l}\n")).collect();
    text.push_str(extra);
    let p = dir.join("run.cfg");
    fs::write(&p, text).unwrap();
    p
}

fn tlt(args: &[&str]) -> i32 {
    run(std::iter::once("tlt").chain(args.iter().copied()).map(String::from))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn metric(dir: &Path, key: &str) -> String {
    let text = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key},")).map(str::to_string))
        .unwrap_or_else(|| panic!("{key} missing from {text}"))
}

#[test]
fn gen_data_writes_the_declared_record_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("gd");
    assert_eq!(tlt(&["gen-data", "--config", s(&cfg), "--out", s(&out)]), 0);
    assert_eq!(DatasetManifest::read(&out.join("train.jsonl")).unwrap().len(), 40);
    assert_eq!(DatasetManifest::read(&out.join("test.jsonl")).unwrap().len(), 24);
    assert!(!out.join(INCOMPLETE).exists());
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["command"], "gen-data");
    assert_eq!(summary["config_digest"].as_str().unwrap().len(), 64);
    assert_eq!(metric(&out, "train.records"), "40");
}

#[test]
fn unknown_command_is_a_usage_error() {
    assert_eq!(tlt(&["frobnicate", "--config", "x"]), 2);
    assert_eq!(tlt(&[]), 2);
    assert_eq!(tlt(&["train"]), 2);
    assert_eq!(tlt(&["train", "--config", "x", "--seed", "minus-one"]), 2);
}

#[test]
fn missing_config_file_is_a_validation_error_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let missing = tmp.path().join("missing.cfg");
    assert_eq!(tlt(&["train", "--config", s(&missing), "--out", s(&out)]), 3);
    assert!(!out.exists());
}

#[test]
fn invalid_configurations_exit_3_before_creating_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cases: &[(&str, &[&str])] = &[
        ("train", &[]),                                         // paths.train_data unset
        ("train", &["paths.train_data=/no/such/file.jsonl"]),   // missing input
        ("gen-data", &["no.such.key=1"]),                       // unknown key
        ("gen-data", &["data.num_train=lots"]),                 // bad type
        ("gen-data", &["data.treatment=fgsm"]),                 // needs a model
        ("gen-data", &["data.key=0"]),                          // identity key as a treatment
        ("gen-data", &["data.flip_rate=1.5"]),                  // out of range
        ("suite", &["suite.train_inline=false"]),               // no checkpoint
        ("suite", &["suite.variants=tlt,resnet"]),              // unknown variant
        ("ate", &["paths.test_data=/nope", "ate.estimand=all"]),
    ];
    for (cmd, overrides) in cases {
        let cfg = write_config(tmp.path(), "");
        let mut args = vec![*cmd, "--config", s(&cfg), "--out", s(&out)];
        for o in *overrides {
            args.extend(["--override", o]);
        }
        assert_eq!(tlt(&args), 3, "{cmd} {overrides:?}");
        assert!(!out.exists(), "{cmd} {overrides:?} created output");
    }
    let cfg = write_config(tmp.path(), "seed = 1\nseed = 2\n");
    assert_eq!(tlt(&["gen-data", "--config", s(&cfg), "--out", s(&out)]), 3);
    assert!(!out.exists());
}

#[test]
fn runtime_failure_exits_1_and_leaves_the_incomplete_marker() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.jsonl");
    fs::write(&bad, "this is not a manifest\n").unwrap();
    let cfg = write_config(tmp.path(), &format!("paths.train_data = {}\n", s(&bad)));
    let out = tmp.path().join("out");
    assert_eq!(tlt(&["train", "--config", s(&cfg), "--out", s(&out)]), 1);
    assert!(out.join(INCOMPLETE).is_file());
    assert!(!out.join("metrics.csv").exists());
}

#[test]
fn flags_override_overrides_override_file_values() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = |extra: &str, args: &[&str], name: &str| -> PathBuf {
        let dir = tmp.path().join(name);
        fs::create_dir_all(&dir).unwrap();
        let cfg = write_config(&dir, extra);
        let out = dir.join("out");
        let mut argv = vec!["gen-data", "--config", s(&cfg)];
        argv.extend_from_slice(args);
        if !args.contains(&"--out") {
            argv.extend(["--out", s(&out)]);
        }
        assert_eq!(tlt(&argv), 0, "{name}");
        out
    };
    let train_bytes = |out: &Path| fs::read(out.join("train.jsonl")).unwrap();

    // seed: file < override < flag
    let reference = gen("seed = 3\n", &[], "ref3");
    assert_eq!(train_bytes(&gen("seed = 1\n", &["--seed", "3"], "flag")), train_bytes(&reference));
    assert_eq!(train_bytes(&gen("seed = 1\n", &["--override", "seed=2", "--seed", "3"], "both")), train_bytes(&reference));
    assert_eq!(train_bytes(&gen("seed = 1\n", &["--override", "seed=3"], "ovr")), train_bytes(&reference));
    assert_ne!(train_bytes(&gen("seed = 1\n", &[], "file")), train_bytes(&reference));

    // paths.out: file < flag
    let flag_out = tmp.path().join("flag_out");
    let file_out = tmp.path().join("file_out");
    gen(&format!("paths.out = {}\n", s(&file_out)), &["--out", s(&flag_out)], "outdir");
    assert!(flag_out.join("metrics.csv").is_file());
    assert!(!file_out.exists());

    // ordinary keys: default < file < override
    let out = gen("data.num_train = 30\n", &["--override", "data.num_train=12"], "count");
    assert_eq!(metric(&out, "train.records"), "12");
    let out = gen("data.num_train = 30\n", &[], "count_file");
    assert_eq!(metric(&out, "train.records"), "30");
}

#[test]
fn default_output_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let root = tmp.path().join("runs");
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_tlt"))
        .args(["gen-data", "--config", s(&cfg)])
        .env("TLT_OUT_ROOT", &root)
        .status()
        .unwrap();
    assert!(status.success());
    let runs: Vec<_> = fs::read_dir(&root).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(runs.len(), 1);
    assert!(runs[0].starts_with("gen-data-") && runs[0].len() == "gen-data-".len() + 12, "{runs:?}");

    let status = std::process::Command::new(env!("CARGO_BIN_EXE_tlt")).args(["nope"]).output().unwrap();
    assert_eq!(status.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&status.stderr).starts_with("error[usage]:"));
}

#[test]
fn analysis_commands_run_on_a_trained_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tfr.pairs = 4\nsaliency.count = 2\nlatents.permutations = 10\n");
    let gd = tmp.path().join("gd");
    let tr = tmp.path().join("tr");
    assert_eq!(tlt(&["gen-data", "--config", s(&cfg), "--out", s(&gd)]), 0);
    let train_data = format!("paths.train_data={}", s(&gd.join("train.jsonl")));
    assert_eq!(tlt(&["train", "--config", s(&cfg), "--out", s(&tr), "--override", &train_data]), 0);
    assert!(tr.join("model.ckpt").is_file());
    assert_eq!(fs::read_to_string(tr.join("history.csv")).unwrap().lines().count(), 2);

    let test_data = format!("paths.test_data={}", s(&gd.join("test.jsonl")));
    let ckpt = format!("paths.checkpoint={}", s(&tr.join("model.ckpt")));
    for (cmd, artifact, key) in [
        ("eval", Some("predictions.csv"), "accuracy"),
        ("ate", None, "interventional.ate"),
        ("refute", None, "placebo.pass"),
        ("tfr", Some("tfr.csv"), "layer1.mean"),
        ("saliency", Some("saliency.csv"), "mean_alignment"),
        ("export-latents", Some("latents.csv"), "p_value"),
    ] {
        let out = tmp.path().join(cmd);
        let code = tlt(&[cmd, "--config", s(&cfg), "--out", s(&out), "--override", &test_data, "--override", &ckpt]);
        assert_eq!(code, 0, "{cmd}");
        if let Some(a) = artifact {
            assert!(out.join(a).is_file(), "{cmd} lacks {a}");
        }
        metric(&out, key);
    }
    assert_eq!(fs::read_to_string(tmp.path().join("eval/predictions.csv")).unwrap().lines().count(), 25);
    assert!(tmp.path().join("saliency/saliency").read_dir().unwrap().count() == 4);

    // A tabular checkpoint cannot produce Grad-CAM maps.
    let tab = write_config(tmp.path(), "data.mode = tabular\n");
    let (tgd, ttr) = (tmp.path().join("tgd"), tmp.path().join("ttr"));
    assert_eq!(tlt(&["gen-data", "--config", s(&tab), "--out", s(&tgd)]), 0);
    let tdata = format!("paths.train_data={}", s(&tgd.join("train.jsonl")));
    assert_eq!(tlt(&["train", "--config", s(&tab), "--out", s(&ttr), "--override", &tdata]), 0);
    let tckpt = format!("paths.checkpoint={}", s(&ttr.join("model.ckpt")));
    let out = tmp.path().join("tsal");
    let code = tlt(&["saliency", "--config", s(&tab), "--out", s(&out), "--override", &test_data, "--override", &tckpt]);
    assert_eq!(code, 1);
    assert!(out.join(INCOMPLETE).exists());
}

#[test]
fn suite_emits_one_row_per_treatment_with_declared_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "suite.treatments = none,scramble,object_mask\n");
    let out = tmp.path().join("suite");
    assert_eq!(tlt(&["suite", "--config", s(&cfg), "--out", s(&out)]), 0);
    let csv = fs::read_to_string(out.join("suite.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "treatment,tlt_acc,tlt_acc_err,tlt_ate,tlt_ate_err");
    assert_eq!(lines.len(), 4);
    let labels: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["none", "scramble", "object_mask@1"]);
    for l in &lines[1..] {
        let cells: Vec<f64> = l.split(',').skip(1).map(|c| c.parse().unwrap()).collect();
        assert_eq!(cells.len(), 4);
        assert!((0.0..=1.0).contains(&cells[0]) && cells.iter().all(|c| *c >= 0.0), "{l}");
    }
}

#[test]
fn suite_uses_checkpoints_and_folds() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "suite.treatments = none,fgsm\n");
    let (gd, tr) = (tmp.path().join("gd"), tmp.path().join("tr"));
    assert_eq!(tlt(&["gen-data", "--config", s(&cfg), "--out", s(&gd)]), 0);
    let data = format!("paths.train_data={}", s(&gd.join("train.jsonl")));
    assert_eq!(tlt(&["train", "--config", s(&cfg), "--out", s(&tr), "--override", &data]), 0);

    let ckpt = format!("suite.checkpoint.tlt={}", s(&tr.join("model.ckpt")));
    let a = tmp.path().join("a");
    let args = ["suite", "--config", s(&cfg), "--out", s(&a), "--override", &ckpt, "--override", "suite.train_inline=false"];
    assert_eq!(tlt(&args), 0);
    assert_eq!(fs::read_to_string(a.join("suite.csv")).unwrap().lines().count(), 3);

    let b = tmp.path().join("b");
    assert_eq!(tlt(&["suite", "--config", s(&cfg), "--out", s(&b), "--override", "suite.folds=2"]), 0);
    assert_eq!(metric(&b, "folds"), "2");
    assert_eq!(fs::read_to_string(b.join("suite.csv")).unwrap().lines().count(), 3);
}

/// Masking more of the object never helps a trained model: accuracy is
/// nonincreasing over ratios {0, 0.5, 1} for most seeds.
#[test]
fn mask_ratio_sweep_is_nonincreasing_for_most_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "suite.treatments =\nsuite.mask_ratios = 0, 0.5, 1\ndata.num_train = 400\ndata.num_test = 200\n\
         train.epochs = 8\ntrain.batch_size = 32\ntrain.learning_rate = 0.003\n",
    );
    let mut monotone = 0;
    for seed in ["1", "2", "3"] {
        let out = tmp.path().join(seed);
        assert_eq!(tlt(&["suite", "--config", s(&cfg), "--out", s(&out), "--seed", seed]), 0);
        let acc: Vec<f64> = ["object_mask@0", "object_mask@0.5", "object_mask@1"]
            .iter()
            .map(|r| metric(&out, &format!("{r}.tlt.acc")).parse().unwrap())
            .collect();
        eprintln!("seed {seed}: {acc:?}");
        monotone += usize::from(acc[0] >= acc[1] && acc[1] >= acc[2]);
    }
    assert!(monotone >= 2, "only {monotone} of 3 seeds were nonincreasing");
}
