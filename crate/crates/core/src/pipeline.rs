//! End-to-end helpers: load a data directory, build a model for some
//! settings, train it and score it.

use std::collections::BTreeSet;
use std::path::Path;

use crate::config::Settings;
use crate::data::{AnnotatedDialogue, RelationTypeSet};
use crate::encoder::Backend;
use crate::error::{DamError, Result};
use crate::evaluator::{predict_split, report, MetricsReport, Prediction};
use crate::ingestion::{discourse_split_path, load_discourse_corpus, load_ecec_dataset, DatasetSplit, Split};
use crate::model::{DamModel, EncoderInit, Variant};
use crate::parallel::Execution;
use crate::parser::edu_text;
use crate::tensor::Tape;
use crate::tokenizer::{Tokenizer, WordVocab};
use crate::trainer::{LogRecord, TrainOutcome, Trainer};

#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: DatasetSplit,
    pub validation: Option<DatasetSplit>,
    pub test: Option<DatasetSplit>,
    /// Training dialogues of the discourse corpus (may be empty).
    pub discourse: Vec<AnnotatedDialogue>,
}

fn optional_split(dir: &Path, split: Split, self_cause: bool) -> Result<Option<DatasetSplit>> {
    match load_ecec_dataset(dir, split) {
        Ok(s) => Ok(Some(filter_self_cause(s, self_cause))),
        Err(DamError::MissingFile { path }) if path.ends_with(format!("{split}.jsonl")) => {
            log::warn!("no {split} split in {}", dir.display());
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// One ECEC split, without self-cause triples unless `self_cause`.
pub fn load_split(dir: &Path, split: Split, self_cause: bool) -> Result<DatasetSplit> {
    Ok(filter_self_cause(load_ecec_dataset(dir, split)?, self_cause))
}

fn filter_self_cause(mut split: DatasetSplit, keep: bool) -> DatasetSplit {
    if !keep {
        split.instances.retain(|i| i.candidate_index != i.target_index);
    }
    split
}

impl Corpus {
    pub fn load(dir: &Path, self_cause: bool) -> Result<Self> {
        let train = load_split(dir, Split::Train, self_cause)?;
        let validation = optional_split(dir, Split::Validation, self_cause)?;
        let test = optional_split(dir, Split::Test, self_cause)?;
        let path = discourse_split_path(dir, Split::Train);
        let discourse = if path.exists() {
            load_discourse_corpus(&path)?
        } else {
            log::warn!("no discourse corpus at {}", path.display());
            Vec::new()
        };
        Ok(Corpus {
            train,
            validation,
            test,
            discourse,
        })
    }

    /// Emotion labels of every split and conversation.
    pub fn emotions(&self) -> BTreeSet<String> {
        let splits = [Some(&self.train), self.validation.as_ref(), self.test.as_ref()];
        let mut out = BTreeSet::new();
        for s in splits.into_iter().flatten() {
            out.extend(s.instances.iter().map(|i| i.target_emotion.to_lowercase()));
            for c in s.conversations.values() {
                out.extend(c.utterances.iter().filter_map(|u| u.emotion.as_ref().map(|e| e.to_lowercase())));
            }
        }
        out
    }

    pub fn relations(&self) -> RelationTypeSet {
        RelationTypeSet::from_dialogues(&self.discourse)
    }

    /// Held-out split for reports: test, else validation, else train.
    pub fn eval_split(&self) -> &DatasetSplit {
        self.test.as_ref().or(self.validation.as_ref()).unwrap_or(&self.train)
    }
}

/// Word vocabulary over the training conversations and discourse EDUs,
/// with speaker names when they prefix the text.
pub fn build_vocab(corpus: &Corpus, settings: &Settings) -> WordVocab {
    let prefix = settings.model.speaker_prefix;
    let mut texts: Vec<String> = Vec::new();
    for c in corpus.train.conversations.values() {
        for u in &c.utterances {
            texts.push(if prefix { format!("{}: {}", u.speaker, u.text) } else { u.text.clone() });
        }
    }
    for d in &corpus.discourse {
        texts.extend(d.edus.iter().filter(|e| !e.is_root()).map(|e| edu_text(e, prefix)));
    }
    let emotions = corpus.emotions();
    WordVocab::build(
        texts.iter().map(String::as_str),
        emotions.iter().map(String::as_str),
        settings.model.encoder.vocab_min_count,
    )
}

pub fn build_model(settings: &Settings, corpus: &Corpus) -> Result<DamModel> {
    let init = match settings.model.encoder.backend {
        Backend::Toy => EncoderInit::Fresh(Tokenizer::Word(build_vocab(corpus, settings))),
        Backend::Pretrained(_) => EncoderInit::Pretrained {
            emotions: corpus.emotions().into_iter().collect(),
        },
    };
    let f = settings.model.features;
    if (f.multitask || f.needs_standalone()) && corpus.discourse.is_empty() {
        log::warn!("variant {} uses a discourse parser but the discourse corpus is empty", settings.variant);
    }
    DamModel::new(settings.model.clone(), &init, corpus.relations(), settings.train.seed)
}

/// Builds and trains a model; the returned model holds the best epoch.
pub fn train_model(
    settings: &Settings,
    corpus: &Corpus,
    exec: Execution,
    log: &mut dyn FnMut(&LogRecord) -> Result<()>,
) -> Result<(DamModel, TrainOutcome)> {
    let model = build_model(settings, corpus)?;
    let mut trainer = Trainer::new(model, settings.train.clone(), exec)?;
    let outcome = trainer.train(&corpus.train, corpus.validation.as_ref(), &corpus.discourse, log)?;
    Ok((trainer.model, outcome))
}

pub fn evaluate_split(
    model: &DamModel,
    split: &DatasetSplit,
    settings: &Settings,
    exec: Execution,
) -> Result<(MetricsReport, Vec<Prediction>)> {
    let preds = predict_split(model, split, exec)?;
    Ok((report(&preds, &settings.distance_buckets)?, preds))
}

/// Trains each variant from the same base settings and scores it on the
/// held-out split; one row per variant, in the order given.
pub fn run_matrix(
    base: &Settings,
    variants: &[Variant],
    corpus: &Corpus,
    exec: Execution,
    log: &mut dyn FnMut(Variant, &LogRecord) -> Result<()>,
) -> Result<Vec<(Variant, MetricsReport)>> {
    let mut rows = Vec::new();
    for &v in variants {
        let settings = base.with_variant(v)?;
        let (model, _) = train_model(&settings, corpus, exec, &mut |r| log(v, r))?;
        let (metrics, _) = evaluate_split(&model, corpus.eval_split(), &settings, exec)?;
        rows.push((v, metrics));
    }
    Ok(rows)
}

/// Parses variant names separated by commas.
pub fn parse_variants(list: &str) -> Result<Vec<Variant>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

/// Joint-parser loss `L_link + L_rel` over `dialogues`, divided by the
/// number of link decisions. `None` when the variant has no joint parser
/// or the dialogues hold no decisions.
pub fn discourse_loss_per_decision(model: &DamModel, dialogues: &[AnnotatedDialogue]) -> Result<Option<f64>> {
    if model.parser.is_none() {
        return Ok(None);
    }
    let (mut total, mut decisions) = (0.0, 0);
    for d in dialogues {
        let mut tape = Tape::inference();
        let (link, rel, n) = model.discourse_loss(&mut tape, d)?;
        total += tape.scalar(link) + tape.scalar(rel);
        decisions += n;
    }
    Ok((decisions > 0).then(|| total / decisions as f64))
}
