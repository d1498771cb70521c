//! Flat `key = value` configuration with dotted keys.
//!
//! ```text
//! # comment
//! variant = DAM
//! gnn.iterations = 2
//! train.learning_rate = 1e-5
//! ```
//!
//! Unknown keys are errors. Later lines and explicit overrides win.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::encoder::{Backend, Pooling};
use crate::error::{DamError, Result};
use crate::evaluator::DEFAULT_BUCKETS;
use crate::model::{EdgeSource, ModelConfig, Variant};
use crate::trainer::{Interleave, ScheduleKind, TrainConfig};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RawConfig {
    entries: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                DamError::config(format!("line {}", n + 1), format!("expected `key = value`, got `{line}`"))
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(DamError::config(format!("line {}", n + 1), "empty key"));
            }
            entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(RawConfig { entries })
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Sorted `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// Everything a run needs besides data paths.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub variant: Variant,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub distance_buckets: Vec<usize>,
    /// Keep triples whose candidate is the target itself.
    pub self_cause: bool,
}

impl Default for Settings {
    fn default() -> Self {
        Settings::for_variant(Variant::Dam)
    }
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| DamError::config(key, format!("cannot parse `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(DamError::config(key, format!("expected true or false, got `{v}`"))),
    }
}

impl Settings {
    pub fn for_variant(variant: Variant) -> Self {
        let model = ModelConfig {
            features: variant.features(),
            ..ModelConfig::default()
        };
        Settings {
            variant,
            model,
            train: TrainConfig::default(),
            distance_buckets: DEFAULT_BUCKETS.to_vec(),
            self_cause: true,
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Settings::from_raw(&RawConfig::parse(text)?)
    }

    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let variant = match raw.get("variant") {
            Some(v) => v.parse()?,
            None => Variant::Dam,
        };
        let mut s = Settings::for_variant(variant);
        let mut pretrained_dir: Option<PathBuf> = None;
        let mut backend = "toy".to_string();
        for (key, v) in raw.iter() {
            let m = &mut s.model;
            let t = &mut s.train;
            match key {
                "variant" => {}
                "encoder.backend" => backend = v.to_string(),
                "encoder.pretrained_dir" => pretrained_dir = Some(PathBuf::from(v)),
                "encoder.hidden_dim" => m.encoder.hidden_dim = value(key, v)?,
                "encoder.layers" => m.encoder.layers = value(key, v)?,
                "encoder.heads" => m.encoder.heads = value(key, v)?,
                "encoder.ffn_dim" => m.encoder.ffn_dim = value(key, v)?,
                "encoder.max_length" => m.encoder.max_length = value(key, v)?,
                "encoder.max_positions" => m.encoder.max_positions = value(key, v)?,
                "encoder.position_offset" => m.encoder.position_offset = value(key, v)?,
                "encoder.type_vocab" => m.encoder.type_vocab = value(key, v)?,
                "encoder.layer_norm_eps" => m.encoder.layer_norm_eps = value(key, v)?,
                "encoder.vocab_min_count" => m.encoder.vocab_min_count = value(key, v)?,
                "encoder.pooling" => {
                    m.encoder.pooling = match v {
                        "sum" => Pooling::Sum,
                        "mean" => Pooling::Mean,
                        _ => return Err(DamError::config(key, "expected sum or mean")),
                    }
                }
                "input.speaker_prefix" => m.speaker_prefix = flag(key, v)?,
                "data.self_cause" => s.self_cause = flag(key, v)?,
                "parser.gru_hidden" => m.parser.gru_hidden = value(key, v)?,
                "parser.link_dim" => m.parser.link_dim = value(key, v)?,
                "parser.rel_dim" => m.parser.rel_dim = value(key, v)?,
                "parser.pretrain_epochs" => t.parser_pretrain_epochs = value(key, v)?,
                "graph.speaker_dim" => m.edge_dims.speaker = value(key, v)?,
                "graph.distance_dim" => m.edge_dims.distance = value(key, v)?,
                "graph.relation_dim" => m.edge_dims.relation = value(key, v)?,
                "graph.distance_clip" => m.distance_clip = value(key, v)?,
                "gnn.iterations" => m.gnn_iterations = value(key, v)?,
                "gnn.heads" => m.gnn_heads = value(key, v)?,
                "ablation.no_speaker" => m.features.no_speaker |= flag(key, v)?,
                "ablation.no_distance" => m.features.no_distance |= flag(key, v)?,
                "ablation.no_gate" => {
                    if flag(key, v)? {
                        m.features.gate = false;
                    }
                }
                "train.alpha" => t.alpha = value(key, v)?,
                "train.beta" => t.beta = value(key, v)?,
                "train.learning_rate" => t.learning_rate = value(key, v)?,
                "train.batch_size" => t.batch_size = value(key, v)?,
                "train.discourse_batch_size" => t.discourse_batch_size = value(key, v)?,
                "train.epochs" => t.epochs = value(key, v)?,
                "train.seed" => t.seed = value(key, v)?,
                "train.weight_decay" => t.weight_decay = value(key, v)?,
                "train.grad_clip" => t.grad_clip = value(key, v)?,
                "train.warmup_steps" => t.warmup_steps = value(key, v)?,
                "train.positive_weight" => t.positive_weight = value(key, v)?,
                "train.schedule" => {
                    t.schedule = match v {
                        "constant" => ScheduleKind::Constant,
                        "linear" => ScheduleKind::Linear,
                        _ => return Err(DamError::config(key, "expected constant or linear")),
                    }
                }
                "train.interleave" => {
                    t.interleave = match v {
                        "summed" => Interleave::Summed,
                        "alternating" => Interleave::Alternating,
                        _ => return Err(DamError::config(key, "expected summed or alternating")),
                    }
                }
                "eval.distance_buckets" => {
                    let mut b: Vec<usize> = v
                        .split(',')
                        .map(|x| value(key, x.trim()))
                        .collect::<Result<_>>()?;
                    b.sort_unstable();
                    b.dedup();
                    if b.is_empty() {
                        return Err(DamError::config(key, "needs at least one bucket"));
                    }
                    s.distance_buckets = b;
                }
                _ => return Err(DamError::config(key, "unknown key")),
            }
        }
        s.model.encoder.backend = match (backend.as_str(), pretrained_dir) {
            ("toy", _) => Backend::Toy,
            ("pretrained", Some(dir)) => Backend::Pretrained(dir),
            ("pretrained", None) => {
                return Err(DamError::config("encoder.pretrained_dir", "required by the pretrained backend"))
            }
            _ => return Err(DamError::config("encoder.backend", "expected toy or pretrained")),
        };
        // beta = 0 turns off the auxiliary task: graph edges then come
        // from a standalone parser.
        if s.train.beta == 0.0 && s.model.features.multitask {
            s.model.features.multitask = false;
            s.model.features.edge_source = EdgeSource::Standalone;
        }
        s.train.validate()?;
        s.model.encoder.validate()?;
        Ok(s)
    }

    /// Effective values, one line per key.
    pub fn to_raw(&self) -> RawConfig {
        let mut r = RawConfig::default();
        let m = &self.model;
        let t = &self.train;
        let e = &m.encoder;
        r.set("variant", self.variant.name());
        match &e.backend {
            Backend::Toy => r.set("encoder.backend", "toy"),
            Backend::Pretrained(dir) => {
                r.set("encoder.backend", "pretrained");
                r.set("encoder.pretrained_dir", dir.display().to_string());
            }
        }
        let nums: [(&str, String); 37] = [
            ("encoder.hidden_dim", e.hidden_dim.to_string()),
            ("encoder.layers", e.layers.to_string()),
            ("encoder.heads", e.heads.to_string()),
            ("encoder.ffn_dim", e.ffn_dim.to_string()),
            ("encoder.max_length", e.max_length.to_string()),
            ("encoder.max_positions", e.max_positions.to_string()),
            ("encoder.position_offset", e.position_offset.to_string()),
            ("encoder.type_vocab", e.type_vocab.to_string()),
            ("encoder.layer_norm_eps", e.layer_norm_eps.to_string()),
            ("encoder.vocab_min_count", e.vocab_min_count.to_string()),
            ("encoder.pooling", if e.pooling == Pooling::Sum { "sum" } else { "mean" }.into()),
            ("input.speaker_prefix", m.speaker_prefix.to_string()),
            ("data.self_cause", self.self_cause.to_string()),
            ("parser.gru_hidden", m.parser.gru_hidden.to_string()),
            ("parser.link_dim", m.parser.link_dim.to_string()),
            ("parser.rel_dim", m.parser.rel_dim.to_string()),
            ("parser.pretrain_epochs", t.parser_pretrain_epochs.to_string()),
            ("graph.speaker_dim", m.edge_dims.speaker.to_string()),
            ("graph.distance_dim", m.edge_dims.distance.to_string()),
            ("graph.relation_dim", m.edge_dims.relation.to_string()),
            ("graph.distance_clip", m.distance_clip.to_string()),
            ("gnn.iterations", m.gnn_iterations.to_string()),
            ("gnn.heads", m.gnn_heads.to_string()),
            ("ablation.no_speaker", m.features.no_speaker.to_string()),
            ("ablation.no_distance", m.features.no_distance.to_string()),
            ("ablation.no_gate", (m.features.gnn && !m.features.gate).to_string()),
            ("train.alpha", t.alpha.to_string()),
            ("train.beta", t.beta.to_string()),
            ("train.learning_rate", t.learning_rate.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.discourse_batch_size", t.discourse_batch_size.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.grad_clip", t.grad_clip.to_string()),
            ("train.warmup_steps", t.warmup_steps.to_string()),
            ("train.positive_weight", t.positive_weight.to_string()),
        ];
        for (k, v) in nums {
            r.set(k, v);
        }
        r.set("train.schedule", if t.schedule == ScheduleKind::Constant { "constant" } else { "linear" });
        r.set("train.interleave", if t.interleave == Interleave::Summed { "summed" } else { "alternating" });
        r.set(
            "eval.distance_buckets",
            self.distance_buckets.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
        );
        r
    }

    pub fn to_text(&self) -> String {
        self.to_raw().to_text()
    }

    /// Same settings with another variant; ablation keys are reset to the
    /// variant's own definition.
    pub fn with_variant(&self, variant: Variant) -> Result<Self> {
        let mut raw = self.to_raw();
        raw.set("variant", variant.name());
        for k in ["ablation.no_speaker", "ablation.no_distance", "ablation.no_gate"] {
            raw.set(k, "false");
        }
        Settings::from_raw(&raw)
    }
}
