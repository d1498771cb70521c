//! Joint training of the classifier and the discourse parser head.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{AnnotatedDialogue, Conversation, Label};
use crate::error::{DamError, Result};
use crate::evaluator::{compute_f1, MetricsReport};
use crate::ingestion::DatasetSplit;
use crate::model::{DamModel, EdgeContext, Prepared, StandaloneParser};
use crate::optim::{clip_grad_norm, AdamW, Schedule};
use crate::parallel::{self, Execution};
use crate::tensor::{GradBuffer, ParamGrad, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interleave {
    /// Every step sums the weighted losses of one batch of each task.
    Summed,
    /// Steps alternate between a classification batch and a discourse batch.
    Alternating,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub discourse_batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub schedule: ScheduleKind,
    pub warmup_steps: usize,
    pub interleave: Interleave,
    /// Loss weight of positive (cause) instances; 1 means unweighted.
    pub positive_weight: f64,
    /// Epochs of discourse-only training for a standalone parser.
    pub parser_pretrain_epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    Linear,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            beta: 0.25,
            learning_rate: 1e-5,
            batch_size: 8,
            discourse_batch_size: 2,
            epochs: 10,
            seed: 42,
            weight_decay: 0.01,
            grad_clip: 1.0,
            schedule: ScheduleKind::Constant,
            warmup_steps: 0,
            interleave: Interleave::Summed,
            positive_weight: 1.0,
            parser_pretrain_epochs: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("train.alpha", self.alpha >= 0.0 && self.alpha.is_finite()),
            ("train.beta", self.beta >= 0.0 && self.beta.is_finite()),
            ("train.learning_rate", self.learning_rate > 0.0),
            ("train.batch_size", self.batch_size > 0),
            ("train.weight_decay", self.weight_decay >= 0.0),
            ("train.positive_weight", self.positive_weight > 0.0),
        ];
        for (key, ok) in checks {
            if !ok {
                return Err(DamError::config(key, "out of range"));
            }
        }
        Ok(())
    }
}

/// `L = alpha * L_e + beta * L_dp`.
pub fn compose_loss(alpha: f64, beta: f64, loss_e: f64, loss_dp: f64) -> f64 {
    alpha * loss_e + beta * loss_dp
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLosses {
    pub loss: f64,
    pub loss_e: f64,
    pub loss_dp: f64,
    /// Link decisions behind `loss_dp`.
    pub decisions: usize,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        epoch: usize,
        step: usize,
        loss: f64,
        loss_e: f64,
        loss_dp: f64,
        lr: f64,
    },
    Epoch {
        epoch: usize,
        train_loss: f64,
        train_accuracy: f64,
        validation_macro_f1: Option<f64>,
        best: bool,
    },
    Pretrain {
        epoch: usize,
        loss_dp: f64,
    },
}

#[derive(Debug, Clone)]
pub struct EpochSummary {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub validation: Option<MetricsReport>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// 1-based epoch of the retained checkpoint; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub best_macro_f1: Option<f64>,
    pub epochs: Vec<EpochSummary>,
    pub steps: Vec<StepLosses>,
}

/// 1-based index of the largest score; earlier epochs win ties.
pub fn best_epoch(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (k, s) in scores.iter().enumerate() {
        if best.is_none_or(|b| *s > scores[b]) {
            best = Some(k);
        }
    }
    best.map(|b| b + 1)
}

type ParamGrads = BTreeMap<ParamId, ParamGrad>;

fn ecec_grads(model: &DamModel, p: &Prepared, conv: &Conversation, ctx: &EdgeContext, weight: f64) -> Result<(f64, f64, ParamGrads)> {
    let mut tape = Tape::new();
    let logits = model.logits(&mut tape, p, conv, ctx)?;
    let lp = tape.log_softmax(logits);
    let nll = tape.nll(lp, &[p.instance.gold_label.class()]);
    let nll = tape.scale(nll, weight);
    let l = tape.value(logits);
    let correct = if crate::classifier::classify([l[[0, 0]], l[[0, 1]]]).1 == p.instance.gold_label { 1.0 } else { 0.0 };
    let value = tape.scalar(nll);
    Ok((value, correct, tape.backward(nll).into_params()))
}

fn discourse_grads<'p>(
    loss: impl FnOnce(&mut Tape<'p>) -> Result<(Var, Var, usize)>,
) -> Result<(f64, usize, ParamGrads)> {
    let mut tape = Tape::new();
    let (link, rel, n) = loss(&mut tape)?;
    let total = tape.add(link, rel);
    Ok((tape.scalar(total), n, tape.backward(total).into_params()))
}

/// Cycles through a shuffled order of discourse dialogues, reshuffling
/// after each pass.
#[derive(Debug, Clone)]
pub struct DiscourseCycle {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    len: usize,
}

impl DiscourseCycle {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut c = DiscourseCycle {
            order: (0..len).collect(),
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            len,
        };
        c.order.shuffle(&mut c.rng);
        c
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        if self.len == 0 {
            return Vec::new();
        }
        (0..size.min(self.len))
            .map(|_| {
                if self.cursor == self.len {
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

pub struct Trainer {
    pub model: DamModel,
    pub config: TrainConfig,
    pub exec: Execution,
    optimizer: AdamW,
    step: usize,
    total_steps: usize,
}

impl Trainer {
    pub fn new(model: DamModel, config: TrainConfig, exec: Execution) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(&model.store, config.learning_rate, config.weight_decay);
        Ok(Trainer {
            model,
            config,
            exec,
            optimizer,
            step: 0,
            total_steps: 0,
        })
    }

    /// Weight of the discourse loss actually applied by this model.
    pub fn effective_beta(&self) -> f64 {
        if self.model.parser.is_some() {
            self.config.beta
        } else {
            0.0
        }
    }

    fn lr_factor(&self) -> f64 {
        match self.config.schedule {
            ScheduleKind::Constant => Schedule::Constant,
            ScheduleKind::Linear => Schedule::LinearWarmupDecay {
                warmup: self.config.warmup_steps,
                total: self.total_steps.max(1),
            },
        }
        .factor(self.step)
    }

    /// Computes the losses of both batches, takes one optimizer step on
    /// `alpha * L_e + beta * L_dp` and returns the three loss values.
    pub fn train_step(
        &mut self,
        batch: &[(&Prepared, &Conversation)],
        discourse: &[&AnnotatedDialogue],
        ctx: &EdgeContext,
        epoch: usize,
    ) -> Result<StepLosses> {
        let (alpha, beta) = (self.config.alpha, self.effective_beta());
        let model = &self.model;
        let pw = self.config.positive_weight;
        let e_results = parallel::map(self.exec, batch, |(p, conv)| {
            let w = if p.instance.gold_label == Label::Cause { pw } else { 1.0 };
            ecec_grads(model, p, conv, ctx, w)
        });
        let d_items: Vec<&AnnotatedDialogue> = if beta > 0.0 { discourse.to_vec() } else { Vec::new() };
        let d_results = parallel::map(self.exec, &d_items, |d| {
            discourse_grads(|tape| model.discourse_loss(tape, d))
        });

        let mut grads = GradBuffer::new(&model.store);
        let mut loss_e = 0.0;
        for r in e_results {
            let (l, _, g) = r?;
            loss_e += l;
            grads.accumulate(&model.store, &g, alpha);
        }
        let mut loss_dp = 0.0;
        let mut decisions = 0;
        for r in d_results {
            let (l, n, g) = r?;
            loss_dp += l;
            decisions += n;
            grads.accumulate(&model.store, &g, beta);
        }
        let loss = compose_loss(alpha, beta, loss_e, loss_dp);
        if !loss.is_finite() {
            return Err(DamError::Divergence {
                epoch,
                step: self.step,
                loss,
                loss_e,
                loss_dp,
            });
        }
        clip_grad_norm(&mut grads, self.config.grad_clip);
        let factor = self.lr_factor();
        self.optimizer.step(&mut self.model.store, &grads, factor);
        self.step += 1;
        Ok(StepLosses {
            loss,
            loss_e,
            loss_dp,
            decisions,
        })
    }

    pub fn current_lr(&self) -> f64 {
        self.config.learning_rate * self.lr_factor()
    }

    /// Trains for the configured epochs, keeping the parameters of the epoch
    /// with the best validation MacroF1 (training MacroF1 when there is no
    /// validation split). Each log record is passed to `log`.
    pub fn train(
        &mut self,
        train: &DatasetSplit,
        validation: Option<&DatasetSplit>,
        discourse: &[AnnotatedDialogue],
        log: &mut dyn FnMut(&LogRecord) -> Result<()>,
    ) -> Result<TrainOutcome> {
        let prepared: Vec<Prepared> = train
            .instances
            .iter()
            .map(|i| self.model.prepare(i, train.conversation(i)))
            .collect::<Result<_>>()?;
        let epochs = self.config.epochs;
        let bs = self.config.batch_size;
        let batches_per_epoch = prepared.len().div_ceil(bs);
        self.total_steps = match self.config.interleave {
            Interleave::Summed => batches_per_epoch * epochs,
            Interleave::Alternating => 2 * batches_per_epoch * epochs,
        };
        let mut outcome = TrainOutcome {
            best_epoch: None,
            best_macro_f1: None,
            epochs: Vec::new(),
            steps: Vec::new(),
        };
        if epochs == 0 {
            log::warn!("epochs = 0: returning the initial parameters");
            return Ok(outcome);
        }
        if let Some(s) = self.model.standalone.as_mut() {
            pretrain_standalone(s, discourse, &self.config, self.exec, log)?;
        }
        let mut cycle = DiscourseCycle::new(discourse.len(), self.config.seed ^ 0xd15c);
        let mut best_store: Option<ParamStore> = None;
        let mut scores = Vec::new();
        for epoch in 1..=epochs {
            let mut order: Vec<usize> = (0..prepared.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(epoch as u64)));
            let ctx = self.model.edge_context(train.conversations.values(), self.exec)?;
            let mut epoch_loss = 0.0;
            for chunk in order.chunks(bs) {
                let batch: Vec<(&Prepared, &Conversation)> = chunk
                    .iter()
                    .map(|&k| (&prepared[k], train.conversation(&prepared[k].instance)))
                    .collect();
                let d_batch: Vec<&AnnotatedDialogue> = if self.effective_beta() > 0.0 {
                    cycle
                        .next_batch(self.config.discourse_batch_size)
                        .into_iter()
                        .map(|k| &discourse[k])
                        .collect()
                } else {
                    Vec::new()
                };
                let steps: Vec<StepLosses> = match self.config.interleave {
                    Interleave::Summed => vec![self.train_step(&batch, &d_batch, &ctx, epoch)?],
                    Interleave::Alternating => {
                        let mut v = vec![self.train_step(&batch, &[], &ctx, epoch)?];
                        if !d_batch.is_empty() {
                            v.push(self.train_step(&[], &d_batch, &ctx, epoch)?);
                        }
                        v
                    }
                };
                for s in steps {
                    epoch_loss += s.loss;
                    log(&LogRecord::Step {
                        epoch,
                        step: self.step,
                        loss: s.loss,
                        loss_e: s.loss_e,
                        loss_dp: s.loss_dp,
                        lr: self.current_lr(),
                    })?;
                    outcome.steps.push(s);
                }
            }
            let train_report = evaluate(&self.model, train, self.exec)?;
            let validation_report = match validation {
                Some(v) => Some(evaluate(&self.model, v, self.exec)?),
                None => None,
            };
            let score = validation_report
                .as_ref()
                .map_or(train_report.macro_f1, |r| r.macro_f1);
            scores.push(score);
            let is_best = best_epoch(&scores) == Some(epoch);
            if is_best {
                best_store = Some(self.model.store.clone());
                outcome.best_epoch = Some(epoch);
                outcome.best_macro_f1 = Some(score);
            }
            log(&LogRecord::Epoch {
                epoch,
                train_loss: epoch_loss,
                train_accuracy: train_report.accuracy,
                validation_macro_f1: validation_report.as_ref().map(|r| r.macro_f1),
                best: is_best,
            })?;
            outcome.epochs.push(EpochSummary {
                epoch,
                train_loss: epoch_loss,
                train_accuracy: train_report.accuracy,
                validation: validation_report,
            });
        }
        if let Some(store) = best_store {
            self.model.store = store;
        }
        Ok(outcome)
    }
}

/// Discourse-only training of a standalone parser; its parameters are
/// not touched afterwards.
pub fn pretrain_standalone(
    parser: &mut StandaloneParser,
    dialogues: &[AnnotatedDialogue],
    config: &TrainConfig,
    exec: Execution,
    log: &mut dyn FnMut(&LogRecord) -> Result<()>,
) -> Result<()> {
    if dialogues.is_empty() || config.parser_pretrain_epochs == 0 {
        log::warn!("standalone parser left untrained");
        return Ok(());
    }
    let mut opt = AdamW::new(&parser.store, config.learning_rate, config.weight_decay);
    let rels = parser.relations.clone();
    let mut cycle = DiscourseCycle::new(dialogues.len(), config.seed ^ 0x9a75e);
    let per_epoch = dialogues.len().div_ceil(config.discourse_batch_size.max(1));
    for epoch in 1..=config.parser_pretrain_epochs {
        let mut total = 0.0;
        for _ in 0..per_epoch {
            let batch: Vec<&AnnotatedDialogue> = cycle
                .next_batch(config.discourse_batch_size.max(1))
                .into_iter()
                .map(|k| &dialogues[k])
                .collect();
            let p = &*parser;
            let results = parallel::map(exec, &batch, |d| {
                discourse_grads(|tape| {
                    let h = p.parser.encode_edus(tape, &p.store, &p.encoder, d)?;
                    p.parser.loss_on_tape(tape, &p.store, h, d, &rels)
                })
            });
            let mut grads = GradBuffer::new(&parser.store);
            let mut loss = 0.0;
            for r in results {
                let (l, _, g) = r?;
                loss += l;
                grads.accumulate(&parser.store, &g, 1.0);
            }
            if !loss.is_finite() {
                return Err(DamError::Divergence {
                    epoch,
                    step: 0,
                    loss,
                    loss_e: 0.0,
                    loss_dp: loss,
                });
            }
            clip_grad_norm(&mut grads, config.grad_clip);
            opt.step(&mut parser.store, &grads, 1.0);
            total += loss;
        }
        log(&LogRecord::Pretrain { epoch, loss_dp: total })?;
    }
    Ok(())
}

/// Predictions and metrics of `model` on a split.
pub fn evaluate(model: &DamModel, split: &DatasetSplit, exec: Execution) -> Result<MetricsReport> {
    let preds = crate::evaluator::predict_split(model, split, exec)?;
    let predicted: Vec<Label> = preds.iter().map(|p| p.predicted).collect();
    let gold: Vec<Label> = preds.iter().map(|p| p.gold).collect();
    compute_f1(&predicted, &gold)
}
