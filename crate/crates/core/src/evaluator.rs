//! F1 metrics, distance-bucketed analysis and the variant matrix.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::data::Label;
use crate::error::{DamError, Result};
use crate::ingestion::DatasetSplit;
use crate::model::DamModel;
use crate::parallel::{self, Execution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn of(predicted: &[Label], gold: &[Label]) -> Self {
        let mut c = Confusion::default();
        for (p, g) in predicted.iter().zip(gold) {
            match (p.is_cause(), g.is_cause()) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// F1 from counts; 0 when precision or recall is undefined.
pub fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if tp == 0 || denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Mean of the two class F1 scores.
pub fn macro_from_class_f1(pos_f1: f64, neg_f1: f64) -> f64 {
    (pos_f1 + neg_f1) / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketReport {
    pub pos_f1: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub pos_f1: f64,
    pub neg_f1: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub confusion: Confusion,
    /// Bucket label (`"0"`, `"1"`, ..., `">=4"`) to positive-class F1.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub buckets: BTreeMap<String, BucketReport>,
}

pub fn compute_f1(predicted: &[Label], gold: &[Label]) -> Result<MetricsReport> {
    if predicted.len() != gold.len() {
        return Err(DamError::Metrics(format!(
            "{} predictions for {} gold labels",
            predicted.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(DamError::Metrics("no predictions to score".into()));
    }
    let c = Confusion::of(predicted, gold);
    let pos_f1 = f1(c.tp, c.fp, c.fn_);
    let neg_f1 = f1(c.tn, c.fn_, c.fp);
    Ok(MetricsReport {
        pos_f1,
        neg_f1,
        macro_f1: macro_from_class_f1(pos_f1, neg_f1),
        accuracy: (c.tp + c.tn) as f64 / c.total() as f64,
        confusion: c,
        buckets: BTreeMap::new(),
    })
}

/// Bucket label of a distance given ascending bucket starts; the last
/// bucket is open-ended.
pub fn bucket_label(distance: usize, starts: &[usize]) -> Option<String> {
    let k = starts.iter().rposition(|&s| distance >= s)?;
    Some(if k + 1 == starts.len() {
        format!(">={}", starts[k])
    } else if starts[k + 1] == starts[k] + 1 {
        starts[k].to_string()
    } else {
        format!("{}-{}", starts[k], starts[k + 1] - 1)
    })
}

/// Positive-class F1 per distance bucket. Buckets without instances are
/// absent from the result.
pub fn distance_report(
    predicted: &[Label],
    gold: &[Label],
    distances: &[usize],
    starts: &[usize],
) -> BTreeMap<String, BucketReport> {
    let mut groups: BTreeMap<String, (Vec<Label>, Vec<Label>)> = BTreeMap::new();
    for ((p, g), d) in predicted.iter().zip(gold).zip(distances) {
        if let Some(label) = bucket_label(*d, starts) {
            let e = groups.entry(label).or_default();
            e.0.push(*p);
            e.1.push(*g);
        }
    }
    groups
        .into_iter()
        .map(|(k, (p, g))| {
            let c = Confusion::of(&p, &g);
            (
                k,
                BucketReport {
                    pos_f1: f1(c.tp, c.fp, c.fn_),
                    count: p.len(),
                },
            )
        })
        .collect()
}

pub const DEFAULT_BUCKETS: [usize; 5] = [0, 1, 2, 3, 4];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub conversation_id: String,
    pub target: usize,
    pub candidate: usize,
    pub p_positive: f64,
    pub predicted: Label,
    pub gold: Label,
}

impl Prediction {
    pub fn distance(&self) -> usize {
        self.target.saturating_sub(self.candidate)
    }

    /// `conversation_id t i p_positive label_pred label_gold`.
    pub fn line(&self) -> String {
        format!(
            "{} {} {} {:.6} {} {}",
            self.conversation_id,
            self.target,
            self.candidate,
            self.p_positive,
            self.predicted.class(),
            self.gold.class()
        )
    }
}

pub fn predict_split(model: &DamModel, split: &DatasetSplit, exec: Execution) -> Result<Vec<Prediction>> {
    let ctx = model.edge_context(split.conversations.values(), exec)?;
    let results = parallel::map(exec, &split.instances, |inst| -> Result<Prediction> {
        let conv = split.conversation(inst);
        let prepared = model.prepare(inst, conv)?;
        let (p, label) = model.predict(&prepared, conv, &ctx)?;
        Ok(Prediction {
            conversation_id: inst.conversation_id.clone(),
            target: inst.target_index,
            candidate: inst.candidate_index,
            p_positive: p[1],
            predicted: label,
            gold: inst.gold_label,
        })
    });
    results.into_iter().collect()
}

/// Overall metrics plus distance buckets for a set of predictions.
pub fn report(predictions: &[Prediction], starts: &[usize]) -> Result<MetricsReport> {
    let predicted: Vec<Label> = predictions.iter().map(|p| p.predicted).collect();
    let gold: Vec<Label> = predictions.iter().map(|p| p.gold).collect();
    let distances: Vec<usize> = predictions.iter().map(Prediction::distance).collect();
    let mut r = compute_f1(&predicted, &gold)?;
    r.buckets = distance_report(&predicted, &gold, &distances, starts);
    Ok(r)
}

/// Human-readable table of per-variant reports, scores x 100.
pub fn render_table(rows: &[(String, MetricsReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(7);
    let mut out = format!("{:<width$}  {:>7}  {:>7}  {:>7}\n", "variant", "Pos.F1", "Neg.F1", "MacroF1");
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{name:<width$}  {:>7.2}  {:>7.2}  {:>7.2}",
            100.0 * r.pos_f1,
            100.0 * r.neg_f1,
            100.0 * r.macro_f1
        );
    }
    out
}
