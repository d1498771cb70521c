use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use dam_core::checkpoint;
use dam_core::config::{RawConfig, Settings};
use dam_core::evaluator::{render_table, MetricsReport};
use dam_core::ingestion::{discourse_split_path, load_discourse_corpus, Split};
use dam_core::model::Variant;
use dam_core::parallel::Execution;
use dam_core::pipeline::{self, Corpus};
use dam_core::trainer::LogRecord;
use dam_core::{DamError, Result};
use serde::Serialize;

use crate::run::RunDir;
use crate::{AblateArgs, EvalArgs, ParseArgs, SettingsArgs, TrainArgs};

pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_TEXT: &str = "metrics.txt";
pub const PREDICTIONS: &str = "predictions.txt";
pub const ABLATION_JSON: &str = "ablation.jsonl";
pub const ABLATION_TEXT: &str = "ablation.txt";
pub const ABLATION_LOG: &str = "ablation_log.jsonl";
pub const PARSES: &str = "parses.txt";

#[derive(Serialize)]
struct MetricsRecord<'a> {
    variant: &'a str,
    split: &'a str,
    instances: usize,
    #[serde(flatten)]
    metrics: &'a MetricsReport,
}

#[derive(Serialize)]
struct VariantLog<'a> {
    variant: &'a str,
    #[serde(flatten)]
    record: &'a LogRecord,
}

fn execution(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn settings(args: &SettingsArgs, variant: Option<&str>) -> Result<Settings> {
    let mut raw = match &args.config {
        Some(p) => RawConfig::parse(&fs::read_to_string(p).map_err(|e| DamError::io(p, e))?)?,
        None => RawConfig::default(),
    };
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| DamError::config("--set", format!("expected KEY=VALUE, got `{o}`")))?;
        raw.set(k.trim(), v.trim());
    }
    if let Some(seed) = args.seed {
        raw.set("train.seed", seed.to_string());
    }
    if let Some(e) = args.epochs {
        raw.set("train.epochs", e.to_string());
    }
    if let Some(v) = variant {
        raw.set("variant", v);
    }
    Settings::from_raw(&raw)
}

fn metrics_text(rows: &[(String, MetricsReport)]) -> String {
    let mut out = render_table(rows);
    for (name, r) in rows {
        if r.buckets.is_empty() {
            continue;
        }
        let _ = writeln!(out, "\n{name}: positive F1 by distance t - i");
        for (bucket, b) in &r.buckets {
            let _ = writeln!(out, "  {bucket:>4}  {:>7.2}  n={}", 100.0 * b.pos_f1, b.count);
        }
    }
    out
}

fn log_record(r: &LogRecord) {
    match r {
        LogRecord::Epoch {
            epoch,
            train_loss,
            train_accuracy,
            validation_macro_f1,
            best,
        } => log::info!(
            "epoch {epoch}: loss {train_loss:.4}, train accuracy {train_accuracy:.4}, validation MacroF1 {}{}",
            validation_macro_f1.map_or("-".into(), |v| format!("{v:.4}")),
            if *best { " (best)" } else { "" }
        ),
        LogRecord::Pretrain { epoch, loss_dp } => log::info!("standalone parser epoch {epoch}: L_dp {loss_dp:.4}"),
        LogRecord::Step { .. } => {}
    }
}

/// Runs `body` inside an opened run directory and records the outcome in
/// its manifest.
fn in_run(dir: &Path, command: &str, body: impl FnOnce(&mut RunDir) -> Result<()>) -> Result<()> {
    let mut run = RunDir::open(dir, command)?;
    match body(&mut run) {
        Ok(()) => run.finish("ok"),
        Err(e) => {
            let _ = run.finish(&format!("failed: {}", e.category().as_str()));
            Err(e)
        }
    }
}

fn write_metrics(run: &RunDir, variant: Variant, split: &str, instances: usize, report: &MetricsReport) -> Result<()> {
    let record = MetricsRecord {
        variant: variant.name(),
        split,
        instances,
        metrics: report,
    };
    let json = serde_json::to_string_pretty(&record).map_err(|e| DamError::Internal(e.to_string()))?;
    run.write(METRICS_JSON, &(json + "\n"))?;
    run.write(METRICS_TEXT, &metrics_text(&[(variant.name().to_string(), report.clone())]))
}

pub fn train(args: &TrainArgs) -> Result<()> {
    in_run(&args.run_dir, "train", |run| {
        let settings = settings(&args.settings, args.variant.as_deref())?;
        let exec = execution(args.settings.sequential);
        run.manifest.seed = Some(settings.train.seed);
        run.manifest.config = Some(settings.to_text());
        run.record_data(&args.settings.data_dir)?;
        run.write(CONFIG_FILE, &settings.to_text())?;
        let corpus = Corpus::load(&args.settings.data_dir, settings.self_cause)?;
        let mut log = run.create(TRAIN_LOG)?;
        let (model, outcome) = pipeline::train_model(&settings, &corpus, exec, &mut |r| {
            log_record(r);
            log.json(r)
        })?;
        log.finish()?;
        if let Some(e) = outcome.best_epoch {
            log::info!("keeping epoch {e}");
        }
        checkpoint::save(&run.path(CHECKPOINT_DIR), &settings, &model)?;
        let split = corpus.eval_split();
        let (report, preds) = pipeline::evaluate_split(&model, split, &settings, exec)?;
        write_metrics(run, settings.variant, split.split.as_str(), preds.len(), &report)?;
        let mut out = run.create(PREDICTIONS)?;
        for p in &preds {
            out.line(&p.line())?;
        }
        out.finish()?;
        log::info!(
            "{} on {}: MacroF1 {:.2}",
            settings.variant,
            split.split,
            100.0 * report.macro_f1
        );
        Ok(())
    })
}

/// `eval` (metrics and predictions) or `predict` (predictions only).
pub fn eval(args: &EvalArgs, with_metrics: bool) -> Result<()> {
    let command = if with_metrics { "eval" } else { "predict" };
    let run_dir = args.run_dir.clone().unwrap_or_else(|| Path::new("runs").join(command));
    in_run(&run_dir, command, |run| {
        let split: Split = args.split.parse()?;
        let (settings, model) = checkpoint::load(&args.checkpoint)?;
        run.manifest.seed = Some(settings.train.seed);
        run.manifest.config = Some(settings.to_text());
        run.record_data(&args.data_dir)?;
        let data = pipeline::load_split(&args.data_dir, split, settings.self_cause)?;
        let (report, preds) = pipeline::evaluate_split(&model, &data, &settings, execution(args.sequential))?;
        if with_metrics {
            write_metrics(run, settings.variant, split.as_str(), preds.len(), &report)?;
        }
        let mut out = run.create(PREDICTIONS)?;
        for p in &preds {
            out.line(&p.line())?;
        }
        out.finish()
    })
}

pub fn ablate(args: &AblateArgs) -> Result<()> {
    in_run(&args.run_dir, "ablate", |run| {
        let base = settings(&args.settings, None)?;
        let variants = match &args.variants {
            Some(list) => pipeline::parse_variants(list)?,
            None => Variant::ALL.to_vec(),
        };
        if variants.is_empty() {
            return Err(DamError::config("--variants", "no variant given"));
        }
        run.manifest.seed = Some(base.train.seed);
        run.manifest.config = Some(base.to_text());
        run.record_data(&args.settings.data_dir)?;
        run.write(CONFIG_FILE, &base.to_text())?;
        let corpus = Corpus::load(&args.settings.data_dir, base.self_cause)?;
        let split = corpus.eval_split().split;
        let mut log = run.create(ABLATION_LOG)?;
        let rows = pipeline::run_matrix(&base, &variants, &corpus, execution(args.settings.sequential), &mut |v, r| {
            log_record(r);
            log.json(&VariantLog {
                variant: v.name(),
                record: r,
            })
        })?;
        log.finish()?;
        let mut out = run.create(ABLATION_JSON)?;
        for (v, r) in &rows {
            out.json(&MetricsRecord {
                variant: v.name(),
                split: split.as_str(),
                instances: r.confusion.total(),
                metrics: r,
            })?;
        }
        out.finish()?;
        let named: Vec<(String, MetricsReport)> = rows.into_iter().map(|(v, r)| (v.name().to_string(), r)).collect();
        let table = metrics_text(&named);
        print!("{}", render_table(&named));
        run.write(ABLATION_TEXT, &table)
    })
}

pub fn parse_discourse(args: &ParseArgs) -> Result<()> {
    in_run(&args.run_dir, "parse-discourse", |run| {
        let input = match (&args.input, &args.data_dir) {
            (Some(p), _) => p.clone(),
            (None, Some(d)) => discourse_split_path(d, args.split.parse()?),
            (None, None) => return Err(DamError::config("--input", "give --input or --data-dir")),
        };
        let (settings, model) = checkpoint::load(&args.checkpoint)?;
        run.manifest.seed = Some(settings.train.seed);
        run.manifest.config = Some(settings.to_text());
        let dialogues = load_discourse_corpus(&input)?;
        let mut out = run.create(PARSES)?;
        for d in &dialogues {
            let parse = model.parse(d)?;
            for (&child, &parent) in &parse.parents {
                let relation = parse
                    .relations
                    .get(&(parent, child))
                    .map_or("none", |&r| model.relations.name(r));
                let prob = parse.link_probs[&child][parent];
                out.line(&format!("{} {child} {parent} {relation} {prob:.6}", d.id))?;
            }
        }
        out.finish()
    })
}
