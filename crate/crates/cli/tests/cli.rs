//! Exit codes, run-directory contents and output formats of `dam`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dam_core::fixtures;

struct Env {
    tmp: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        fixtures::write_dataset(&tmp.path().join("data")).unwrap();
        fs::write(tmp.path().join("toy.txt"), fixtures::TOY_CONFIG).unwrap();
        Env { tmp }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.tmp.path().join(p)
    }

    /// Runs `dam` from inside a scratch working directory.
    fn dam(&self, args: &[&str]) -> Output {
        let cwd = self.path("cwd");
        fs::create_dir_all(&cwd).unwrap();
        Command::new(env!("CARGO_BIN_EXE_dam"))
            .args(args)
            .current_dir(&cwd)
            .env("DAM_DATA_DIR", self.path("data"))
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn train(&self, run: &str, extra: &[&str]) -> Output {
        let config = self.path("toy.txt");
        let run = self.path(run);
        let mut args = vec!["train", "--config", config.to_str().unwrap(), "--run-dir", run.to_str().unwrap(), "--epochs", "3"];
        args.extend_from_slice(extra);
        self.dam(&args)
    }
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn files(dir: &Path) -> BTreeSet<PathBuf> {
    let mut out = BTreeSet::new();
    if let Ok(entries) = fs::read_dir(dir) {
        for e in entries {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(files(&p));
            } else {
                out.insert(p);
            }
        }
    }
    out
}

#[test]
fn train_writes_run_directory_only() {
    let env = Env::new();
    let data_before: Vec<_> = files(&env.path("data")).into_iter().map(|p| fs::read(p).unwrap()).collect();
    let out = env.train("run", &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    let names: BTreeSet<String> = files(&env.path("run"))
        .iter()
        .map(|p| p.strip_prefix(env.path("run")).unwrap().to_string_lossy().into_owned())
        .collect();
    for f in ["manifest.json", "config.txt", "train_log.jsonl", "metrics.json", "metrics.txt", "predictions.txt", "checkpoint/model.safetensors", "checkpoint/config.txt", "checkpoint/relations.json", "checkpoint/vocab.txt"] {
        assert!(names.contains(f), "missing {f} in {names:?}");
    }
    assert!(!names.contains("run.lock"));
    assert!(files(&env.path("cwd")).is_empty());
    let data_after: Vec<_> = files(&env.path("data")).into_iter().map(|p| fs::read(p).unwrap()).collect();
    assert_eq!(data_before, data_after);
    let log = fs::read_to_string(env.path("run/train_log.jsonl")).unwrap();
    let step: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["epoch", "step", "loss", "loss_e", "loss_dp", "lr"] {
        assert!(step.get(key).is_some(), "step record lacks {key}: {step}");
    }
    let preds = fs::read_to_string(env.path("run/predictions.txt")).unwrap();
    let fields: Vec<&str> = preds.lines().next().unwrap().split(' ').collect();
    assert_eq!(fields.len(), 6);
    assert_eq!(fields[3].split('.').nth(1).unwrap().len(), 6);
}

#[test]
fn manifest_records_effective_overrides() {
    let env = Env::new();
    let out = env.train("run", &["--seed", "11", "--set", "gnn.iterations=1", "--variant", "DAM-arc"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(env.path("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 11);
    assert_eq!(manifest["status"], "ok");
    assert!(manifest["finished_unix"].is_u64());
    let config = manifest["config"].as_str().unwrap();
    for line in ["train.seed = 11", "gnn.iterations = 1", "variant = DAM-arc", "train.epochs = 3", "encoder.hidden_dim = 32"] {
        assert!(config.lines().any(|l| l == line), "manifest config lacks `{line}`");
    }
    let sums = manifest["checksums"].as_array().unwrap();
    assert_eq!(sums.len(), 7);
    assert!(sums.iter().all(|s| s[1].as_str().unwrap().len() == 64));
    assert_eq!(fs::read_to_string(env.path("run/config.txt")).unwrap(), config);
    // The recorded config reproduces the run.
    let rerun_config = env.path("run/config.txt");
    let rerun = env.path("rerun");
    let out = env.dam(&["train", "--config", rerun_config.to_str().unwrap(), "--run-dir", rerun.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(fs::read(env.path("run/metrics.json")).unwrap(), fs::read(env.path("rerun/metrics.json")).unwrap());
}

#[test]
fn eval_predict_and_parse_use_the_checkpoint() {
    let env = Env::new();
    assert!(env.train("run", &[]).status.success());
    let ckpt = env.path("run/checkpoint");
    let ckpt = ckpt.to_str().unwrap();
    let eval_dir = env.path("eval");
    let out = env.dam(&["eval", "--checkpoint", ckpt, "--split", "test", "--run-dir", eval_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(fs::read(env.path("run/metrics.json")).unwrap(), fs::read(env.path("eval/metrics.json")).unwrap());

    let pred_dir = env.path("predict");
    let out = env.dam(&["predict", "--checkpoint", ckpt, "--split", "validation", "--run-dir", pred_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(!env.path("predict/metrics.json").exists());
    assert_eq!(fs::read_to_string(env.path("predict/predictions.txt")).unwrap().lines().count(), 8);

    let parse_dir = env.path("parse");
    let out = env.dam(&["parse-discourse", "--checkpoint", ckpt, "--split", "train", "--run-dir", parse_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let parses = fs::read_to_string(env.path("parse/parses.txt")).unwrap();
    assert_eq!(parses.lines().count(), 13);
    for line in parses.lines() {
        let f: Vec<&str> = line.split(' ').collect();
        assert_eq!(f.len(), 5, "{line}");
        let (child, parent): (usize, usize) = (f[1].parse().unwrap(), f[2].parse().unwrap());
        assert!(parent < child);
        assert_eq!(parent == 0, f[3] == "none", "{line}");
        let p: f64 = f[4].parse().unwrap();
        assert!((0.0..=1.0).contains(&p));
    }
}

#[test]
fn ablate_reports_one_row_per_variant() {
    let env = Env::new();
    let config = env.path("toy.txt");
    let run = env.path("ablate");
    let out = env.dam(&["ablate", "--config", config.to_str().unwrap(), "--epochs", "2", "--variants", "DAM,DAM-arc", "--run-dir", run.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let records = fs::read_to_string(env.path("ablate/ablation.jsonl")).unwrap();
    let variants: Vec<String> = records
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["variant"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(variants, ["DAM", "DAM-arc"]);
    let table = fs::read_to_string(env.path("ablate/ablation.txt")).unwrap();
    assert!(table.lines().nth(1).unwrap().starts_with("DAM "));
    assert!(table.lines().nth(2).unwrap().starts_with("DAM-arc"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("MacroF1"));
}

#[test]
fn exit_codes_follow_the_contract() {
    let env = Env::new();
    let missing = env.path("missing");
    let run = env.path("e");
    let out = env.dam(&["eval", "--checkpoint", missing.to_str().unwrap(), "--run-dir", run.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).lines().any(|l| l.starts_with("error[data]: ")), "{}", stderr(&out));
    let manifest = fs::read_to_string(env.path("e/manifest.json")).unwrap();
    assert!(manifest.contains("failed: data"));

    let out = env.dam(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("Usage"));

    let out = env.train("bad-variant", &["--variant", "BERT"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("error[config]: unknown variant `BERT`"), "{}", stderr(&out));

    let out = env.train("bad-key", &["--set", "gnn.layers=3"]);
    assert_eq!(out.status.code(), Some(2));

    fs::write(env.path("data/ecec/train.jsonl"), "{not json\n").unwrap();
    let out = env.train("bad-data", &[]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn divergence_exits_with_4() {
    let env = Env::new();
    let out = env.train("diverge", &["--set", "train.learning_rate=1e300", "--set", "train.grad_clip=1e300"]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    assert!(stderr(&out).contains("error[divergence]: "));
}

#[test]
fn locked_run_directory_is_refused() {
    let env = Env::new();
    fs::create_dir_all(env.path("busy")).unwrap();
    fs::write(env.path("busy/run.lock"), "1\n").unwrap();
    let out = env.train("busy", &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("in use"), "{}", stderr(&out));
    assert!(!env.path("busy/manifest.json").exists());
}
