//! Shared context encoder: a post-norm transformer (the architecture of
//! BERT/RoBERTa) that turns a serialized triple into token states, the
//! classification-marker vector and summed utterance vectors.

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, Axis};
use safetensors::{Dtype, SafeTensors};
use serde_json::Value;

use crate::error::{DamError, Result};
use crate::ingestion::{Role, SerializedInput};
use crate::nn::{LayerNorm, Linear};
use crate::tensor::{Init, Matrix, ParamId, ParamStore, Tape, Var};
use crate::tokenizer::{HfTokenizer, Tokenizer};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Backend {
    /// Small randomly initialised transformer with a word-level vocabulary.
    Toy,
    /// Weights and tokenizer imported from a checkpoint directory holding
    /// `config.json`, `model.safetensors` and `tokenizer.json`.
    Pretrained(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub backend: Backend,
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_length: usize,
    pub max_positions: usize,
    pub type_vocab: usize,
    pub position_offset: usize,
    pub layer_norm_eps: f64,
    pub vocab_min_count: usize,
    pub pooling: Pooling,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            backend: Backend::Toy,
            hidden_dim: 768,
            layers: 2,
            heads: 4,
            ffn_dim: 3072,
            max_length: 512,
            max_positions: 514,
            type_vocab: 1,
            position_offset: 0,
            layer_norm_eps: 1e-5,
            vocab_min_count: 1,
            pooling: Pooling::Sum,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(DamError::config("encoder.hidden_dim", "must be positive"));
        }
        if self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(DamError::config(
                "encoder.heads",
                format!("must divide hidden_dim {}", self.hidden_dim),
            ));
        }
        if self.max_length + self.position_offset > self.max_positions {
            return Err(DamError::config(
                "encoder.max_length",
                format!(
                    "{} exceeds position table {} (offset {})",
                    self.max_length, self.max_positions, self.position_offset
                ),
            ));
        }
        Ok(())
    }
}

/// Token ids of one serialized triple plus the token span of every
/// retained history utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedInput {
    pub instance_id: String,
    pub ids: Vec<u32>,
    pub spans: BTreeMap<usize, Range<usize>>,
    /// History indices removed to fit `max_length`, oldest first.
    pub dropped: Vec<usize>,
}

/// Tokenizes a serialized triple, dropping the oldest history utterances
/// (never the target or the candidate) until it fits in `max_length`.
pub fn tokenize_input(
    input: &SerializedInput,
    tokenizer: &Tokenizer,
    max_length: usize,
) -> Result<TokenizedInput> {
    let pieces: Vec<Vec<u32>> = input
        .segments
        .iter()
        .map(|seg| match seg.role {
            Role::Classification => vec![tokenizer.cls_id()],
            Role::Separator => vec![tokenizer.sep_id()],
            Role::Emotion => vec![tokenizer.emotion_id(&seg.text)],
            Role::Target | Role::Candidate | Role::History(_) => tokenizer.encode_text(&seg.text),
        })
        .collect();
    let mut keep = vec![true; pieces.len()];
    let mut total: usize = pieces.iter().map(Vec::len).sum();
    let mut dropped = Vec::new();
    for (&h, &pos) in &input.history_segments {
        if total <= max_length {
            break;
        }
        if h == input.target_index || h == input.candidate_index {
            continue;
        }
        keep[pos] = false;
        total -= pieces[pos].len();
        dropped.push(h);
    }
    if total > max_length {
        return Err(DamError::Encoding {
            instance: input.instance_id.clone(),
            reason: format!("{total} tokens after truncation exceed max_length {max_length}"),
        });
    }
    let mut ids = Vec::with_capacity(total);
    let mut spans = BTreeMap::new();
    for (k, (seg, piece)) in input.segments.iter().zip(&pieces).enumerate() {
        if !keep[k] {
            continue;
        }
        if let Role::History(h) = seg.role {
            if piece.is_empty() {
                return Err(DamError::Encoding {
                    instance: input.instance_id.clone(),
                    reason: format!("history utterance {h} produced no tokens"),
                });
            }
            spans.insert(h, ids.len()..ids.len() + piece.len());
        }
        ids.extend_from_slice(piece);
    }
    Ok(TokenizedInput {
        instance_id: input.instance_id.clone(),
        ids,
        spans,
        dropped,
    })
}

/// Sums (or averages) token states over each utterance span.
pub fn pool_utterances(
    token_states: &Matrix,
    spans: &BTreeMap<usize, Range<usize>>,
    pooling: Pooling,
) -> Result<BTreeMap<usize, Array1<f64>>> {
    let mut out = BTreeMap::new();
    let mut last_end = 0;
    for (&h, span) in spans {
        if span.is_empty() {
            return Err(DamError::Shape(format!("utterance {h} has an empty span")));
        }
        if span.end > token_states.nrows() {
            return Err(DamError::Shape(format!(
                "utterance {h} span {span:?} exceeds {} tokens",
                token_states.nrows()
            )));
        }
        if span.start < last_end {
            return Err(DamError::Shape(format!("utterance {h} span {span:?} overlaps")));
        }
        last_end = span.end;
        let mut v = token_states.slice(s![span.clone(), ..]).sum_axis(Axis(0));
        if pooling == Pooling::Mean {
            v /= span.len() as f64;
        }
        out.insert(h, v);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSequence {
    pub token_states: Matrix,
    pub cls_state: Array1<f64>,
    pub utterance_states: BTreeMap<usize, Array1<f64>>,
}

/// Tape handles for one encoded sequence.
#[derive(Debug, Clone)]
pub struct EncodedVars {
    pub tokens: Var,
    pub cls: Var,
    pub utterances: BTreeMap<usize, Var>,
}

#[derive(Debug, Clone)]
struct TransformerLayer {
    query: Linear,
    key: Linear,
    value: Linear,
    attn_out: Linear,
    attn_norm: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
    ffn_norm: LayerNorm,
}

/// Parameter handles of the encoder; values live in the model's store.
#[derive(Debug, Clone)]
pub struct ContextEncoder {
    pub config: EncoderConfig,
    pub tokenizer: Tokenizer,
    word: ParamId,
    position: ParamId,
    token_type: ParamId,
    embed_norm: LayerNorm,
    layers: Vec<TransformerLayer>,
}

const PREFIX: &str = "encoder";

impl ContextEncoder {
    /// Registers freshly initialised encoder parameters in `store`.
    pub fn new(store: &mut ParamStore, config: EncoderConfig, tokenizer: Tokenizer) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let eps = config.layer_norm_eps;
        let word = store.add(
            &format!("{PREFIX}.embeddings.word"),
            tokenizer.vocab_size(),
            d,
            Init::Normal(0.02),
        );
        let position = store.add(
            &format!("{PREFIX}.embeddings.position"),
            config.max_positions,
            d,
            Init::Normal(0.02),
        );
        let token_type = store.add(
            &format!("{PREFIX}.embeddings.token_type"),
            config.type_vocab.max(1),
            d,
            Init::Normal(0.02),
        );
        let embed_norm = LayerNorm::new(store, &format!("{PREFIX}.embeddings.norm"), d, eps);
        let layers = (0..config.layers)
            .map(|i| {
                let p = format!("{PREFIX}.layer.{i}");
                TransformerLayer {
                    query: Linear::new(store, &format!("{p}.attention.query"), d, d, true),
                    key: Linear::new(store, &format!("{p}.attention.key"), d, d, true),
                    value: Linear::new(store, &format!("{p}.attention.value"), d, d, true),
                    attn_out: Linear::new(store, &format!("{p}.attention.output"), d, d, true),
                    attn_norm: LayerNorm::new(store, &format!("{p}.attention.norm"), d, eps),
                    ffn_in: Linear::new(store, &format!("{p}.ffn.input"), d, config.ffn_dim, true),
                    ffn_out: Linear::new(store, &format!("{p}.ffn.output"), config.ffn_dim, d, true),
                    ffn_norm: LayerNorm::new(store, &format!("{p}.ffn.norm"), d, eps),
                }
            })
            .collect();
        Ok(ContextEncoder {
            config,
            tokenizer,
            word,
            position,
            token_type,
            embed_norm,
            layers,
        })
    }

    /// Builds the encoder from a pretrained checkpoint directory and copies
    /// its weights into `store`. Emotion tokens get fresh embedding rows.
    pub fn from_pretrained<'a>(
        store: &mut ParamStore,
        dir: &Path,
        max_length: usize,
        pooling: Pooling,
        emotions: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self> {
        let config_path = dir.join("config.json");
        let raw = fs::read_to_string(&config_path).map_err(|e| DamError::io(&config_path, e))?;
        let hf: Value = serde_json::from_str(&raw).map_err(|e| DamError::Checkpoint {
            path: config_path.clone(),
            reason: e.to_string(),
        })?;
        let get = |key: &str| -> Result<usize> {
            hf.get(key)
                .and_then(Value::as_u64)
                .map(|v| v as usize)
                .ok_or_else(|| DamError::Checkpoint {
                    path: config_path.clone(),
                    reason: format!("missing integer `{key}`"),
                })
        };
        let model_type = hf.get("model_type").and_then(Value::as_str).unwrap_or("bert");
        let position_offset = if model_type == "roberta" {
            hf.get("pad_token_id").and_then(Value::as_u64).unwrap_or(1) as usize + 1
        } else {
            0
        };
        let max_positions = get("max_position_embeddings")?;
        let config = EncoderConfig {
            backend: Backend::Pretrained(dir.to_path_buf()),
            hidden_dim: get("hidden_size")?,
            layers: get("num_hidden_layers")?,
            heads: get("num_attention_heads")?,
            ffn_dim: get("intermediate_size")?,
            max_length: max_length.min(max_positions - position_offset),
            max_positions,
            type_vocab: get("type_vocab_size").unwrap_or(1),
            position_offset,
            layer_norm_eps: hf
                .get("layer_norm_eps")
                .and_then(Value::as_f64)
                .unwrap_or(1e-12),
            vocab_min_count: 1,
            pooling,
        };
        let tokenizer = Tokenizer::Pretrained(HfTokenizer::load(&dir.join("tokenizer.json"), emotions)?);
        let encoder = ContextEncoder::new(store, config, tokenizer)?;
        encoder.import_safetensors(store, &dir.join("model.safetensors"))?;
        Ok(encoder)
    }

    fn import_safetensors(&self, store: &mut ParamStore, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| DamError::io(path, e))?;
        let tensors = SafeTensors::deserialize(&bytes).map_err(|e| DamError::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let names: BTreeMap<String, String> = tensors
            .names()
            .into_iter()
            .map(|n| {
                let short = n
                    .trim_start_matches("roberta.")
                    .trim_start_matches("bert.")
                    .to_string();
                (short, n.clone())
            })
            .collect();
        let load = |short: &str| -> Result<Matrix> {
            let full = names.get(short).ok_or_else(|| DamError::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("tensor `{short}` not found"),
            })?;
            let view = tensors.tensor(full).map_err(|e| DamError::Checkpoint {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
            tensor_to_matrix(&view).map_err(|reason| DamError::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("{short}: {reason}"),
            })
        };
        let mut set = |id: ParamId, value: Matrix, store: &mut ParamStore| -> Result<()> {
            let target = store.get_mut(id);
            let rows = value.nrows().min(target.nrows());
            if value.ncols() != target.ncols() || (value.nrows() != target.nrows() && rows != value.nrows()) {
                return Err(DamError::Checkpoint {
                    path: path.to_path_buf(),
                    reason: format!("shape {:?} does not fit {:?}", value.dim(), target.dim()),
                });
            }
            target.slice_mut(s![..rows, ..]).assign(&value.slice(s![..rows, ..]));
            Ok(())
        };
        let linear = |prefix: &str, lin: &Linear, store: &mut ParamStore, set: &mut dyn FnMut(ParamId, Matrix, &mut ParamStore) -> Result<()>| -> Result<()> {
            set(lin.weight, load(&format!("{prefix}.weight"))?.reversed_axes(), store)?;
            if let Some(b) = lin.bias {
                set(b, load(&format!("{prefix}.bias"))?, store)?;
            }
            Ok(())
        };
        let norm = |prefix: &str, ln: &LayerNorm, store: &mut ParamStore, set: &mut dyn FnMut(ParamId, Matrix, &mut ParamStore) -> Result<()>| -> Result<()> {
            let (g, b) = match (load(&format!("{prefix}.weight")), load(&format!("{prefix}.gamma"))) {
                (Ok(g), _) => (g, load(&format!("{prefix}.bias"))?),
                (Err(_), Ok(g)) => (g, load(&format!("{prefix}.beta"))?),
                (Err(e), Err(_)) => return Err(e),
            };
            set(ln.gamma, g, store)?;
            set(ln.beta, b, store)
        };
        set(self.word, load("embeddings.word_embeddings.weight")?, store)?;
        set(self.position, load("embeddings.position_embeddings.weight")?, store)?;
        if let Ok(tt) = load("embeddings.token_type_embeddings.weight") {
            set(self.token_type, tt, store)?;
        }
        norm("embeddings.LayerNorm", &self.embed_norm, store, &mut set)?;
        for (i, layer) in self.layers.iter().enumerate() {
            let p = format!("encoder.layer.{i}");
            linear(&format!("{p}.attention.self.query"), &layer.query, store, &mut set)?;
            linear(&format!("{p}.attention.self.key"), &layer.key, store, &mut set)?;
            linear(&format!("{p}.attention.self.value"), &layer.value, store, &mut set)?;
            linear(&format!("{p}.attention.output.dense"), &layer.attn_out, store, &mut set)?;
            norm(&format!("{p}.attention.output.LayerNorm"), &layer.attn_norm, store, &mut set)?;
            linear(&format!("{p}.intermediate.dense"), &layer.ffn_in, store, &mut set)?;
            linear(&format!("{p}.output.dense"), &layer.ffn_out, store, &mut set)?;
            norm(&format!("{p}.output.LayerNorm"), &layer.ffn_norm, store, &mut set)?;
        }
        Ok(())
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn word_embeddings(&self) -> ParamId {
        self.word
    }

    /// All encoder parameter ids.
    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.word, self.position, self.token_type];
        p.extend(self.embed_norm.params());
        for l in &self.layers {
            for lin in [&l.query, &l.key, &l.value, &l.attn_out, &l.ffn_in, &l.ffn_out] {
                p.extend(lin.params());
            }
            p.extend(l.attn_norm.params());
            p.extend(l.ffn_norm.params());
        }
        p
    }

    /// Token states `L x d` for a token id sequence.
    pub fn forward<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, ids: &[u32]) -> Result<Var> {
        let len = ids.len();
        if len == 0 {
            return Err(DamError::Shape("empty token sequence".into()));
        }
        if len + self.config.position_offset > self.config.max_positions {
            return Err(DamError::Shape(format!(
                "{len} tokens exceed the position table ({})",
                self.config.max_positions
            )));
        }
        let vocab = store.get(self.word).nrows();
        let rows: Vec<usize> = ids
            .iter()
            .map(|&id| if (id as usize) < vocab { id as usize } else { self.tokenizer.unk_id() as usize })
            .collect();
        let word = tape.param(store, self.word);
        let pos = tape.param(store, self.position);
        let tt = tape.param(store, self.token_type);
        let w = tape.gather_rows(word, &rows);
        let offset = self.config.position_offset;
        let positions: Vec<usize> = (offset..offset + len).collect();
        let p = tape.gather_rows(pos, &positions);
        let t = tape.gather_rows(tt, &vec![0; len]);
        let x = tape.add(w, p);
        let x = tape.add(x, t);
        let mut x = self.embed_norm.forward(tape, store, x);
        let heads = self.config.heads;
        for layer in &self.layers {
            let q = layer.query.forward(tape, store, x);
            let k = layer.key.forward(tape, store, x);
            let v = layer.value.forward(tape, store, x);
            let a = tape.attention(q, k, v, None, None, heads);
            let a = layer.attn_out.forward(tape, store, a);
            let r = tape.add(x, a);
            x = layer.attn_norm.forward(tape, store, r);
            let f = layer.ffn_in.forward(tape, store, x);
            let f = tape.gelu(f);
            let f = layer.ffn_out.forward(tape, store, f);
            let r = tape.add(x, f);
            x = layer.ffn_norm.forward(tape, store, r);
        }
        Ok(x)
    }

    /// Classification-marker state of a bare text: `[CLS] text [SEP]`.
    pub fn encode_text_cls<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, text: &str) -> Result<Var> {
        let mut ids = vec![self.tokenizer.cls_id()];
        let mut body = self.tokenizer.encode_text(text);
        body.truncate(self.config.max_length.saturating_sub(2));
        ids.extend(body);
        ids.push(self.tokenizer.sep_id());
        let states = self.forward(tape, store, &ids)?;
        Ok(tape.row(states, 0))
    }

    /// Encodes a tokenized triple on a tape.
    pub fn encode_vars<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        input: &TokenizedInput,
    ) -> Result<EncodedVars> {
        if input.ids.len() > self.config.max_length {
            return Err(DamError::Encoding {
                instance: input.instance_id.clone(),
                reason: format!(
                    "{} tokens exceed max_length {}",
                    input.ids.len(),
                    self.config.max_length
                ),
            });
        }
        let tokens = self.forward(tape, store, &input.ids)?;
        let cls = tape.row(tokens, 0);
        let mut utterances = BTreeMap::new();
        for (&h, span) in &input.spans {
            if span.is_empty() {
                return Err(DamError::Shape(format!("utterance {h} has an empty span")));
            }
            let mut v = tape.sum_rows(tokens, span.start, span.end);
            if self.config.pooling == Pooling::Mean {
                v = tape.scale(v, 1.0 / span.len() as f64);
            }
            utterances.insert(h, v);
        }
        Ok(EncodedVars {
            tokens,
            cls,
            utterances,
        })
    }

    /// Inference-mode encoding of a serialized triple.
    pub fn encode(&self, store: &ParamStore, input: &SerializedInput) -> Result<EncodedSequence> {
        let tokenized = tokenize_input(input, &self.tokenizer, self.config.max_length)?;
        let mut tape = Tape::inference();
        let vars = self.encode_vars(&mut tape, store, &tokenized)?;
        let token_states = tape.value(vars.tokens).clone();
        let utterance_states = pool_utterances(&token_states, &tokenized.spans, self.config.pooling)?;
        Ok(EncodedSequence {
            cls_state: token_states.row(0).to_owned(),
            token_states,
            utterance_states,
        })
    }
}

fn tensor_to_matrix(view: &safetensors::tensor::TensorView<'_>) -> std::result::Result<Matrix, String> {
    let shape = view.shape();
    let (rows, cols) = match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        other => return Err(format!("unsupported rank {}", other.len())),
    };
    let data = view.data();
    let values: Vec<f64> = match view.dtype() {
        Dtype::F32 => data
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect(),
        Dtype::F64 => data
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect(),
        other => return Err(format!("unsupported dtype {other:?}")),
    };
    Array2::from_shape_vec((rows, cols), values).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Conversation, EcecInstance, Label, Utterance};
    use crate::ingestion::{serialize_instance, SerializeOptions};
    use crate::tensor::testing::{numeric_grad, random, relative_error};
    use crate::tokenizer::WordVocab;

    fn small_config(hidden: usize) -> EncoderConfig {
        EncoderConfig {
            hidden_dim: hidden,
            heads: 2,
            ffn_dim: 2 * hidden,
            max_length: 64,
            max_positions: 64,
            ..EncoderConfig::default()
        }
    }

    fn conv() -> Conversation {
        Conversation {
            id: "c".into(),
            utterances: vec![
                Utterance { index: 1, speaker: "A".into(), text: "we are going to a party".into(), emotion: None },
                Utterance { index: 2, speaker: "B".into(), text: "that sounds wonderful".into(), emotion: Some("happiness".into()) },
            ],
        }
    }

    fn instance() -> EcecInstance {
        EcecInstance {
            id: "r".into(),
            conversation_id: "c".into(),
            target_index: 2,
            candidate_index: 1,
            target_emotion: "happiness".into(),
            history_indices: vec![1, 2],
            gold_label: Label::Cause,
        }
    }

    fn tokenizer() -> Tokenizer {
        let c = conv();
        Tokenizer::Word(WordVocab::build(
            c.utterances.iter().map(|u| u.text.as_str()),
            ["happiness"],
            1,
        ))
    }

    #[test]
    fn toy_backend_shape_is_768() {
        let mut store = ParamStore::new(7);
        let enc = ContextEncoder::new(&mut store, EncoderConfig::default(), tokenizer()).unwrap();
        let input = serialize_instance(&instance(), &conv(), SerializeOptions::default());
        let out = enc.encode(&store, &input).unwrap();
        assert_eq!(out.token_states.ncols(), 768);
        assert_eq!(out.cls_state.len(), 768);
        assert_eq!(out.utterance_states.len(), 2);
    }

    #[test]
    fn utterance_states_are_span_sums_and_deterministic() {
        let mut store = ParamStore::new(3);
        let enc = ContextEncoder::new(&mut store, small_config(16), tokenizer()).unwrap();
        let input = serialize_instance(&instance(), &conv(), SerializeOptions::default());
        let a = enc.encode(&store, &input).unwrap();
        let b = enc.encode(&store, &input).unwrap();
        assert_eq!(a.cls_state, b.cls_state);
        let tokenized = tokenize_input(&input, &enc.tokenizer, 64).unwrap();
        for (h, span) in &tokenized.spans {
            let mut manual = Array1::zeros(16);
            for r in span.clone() {
                manual += &a.token_states.row(r);
            }
            let got = &a.utterance_states[h];
            let err = (&manual - got).mapv(f64::abs).sum() / manual.mapv(f64::abs).sum();
            assert!(err < 1e-6);
        }
    }

    #[test]
    fn pooling_edge_cases() {
        let states = random(6, 3, 1);
        let single: BTreeMap<usize, Range<usize>> = [(1, 2..3)].into_iter().collect();
        let out = pool_utterances(&states, &single, Pooling::Sum).unwrap();
        assert_eq!(out[&1], states.row(2).to_owned());

        let zeros = Matrix::zeros((4, 3));
        let out = pool_utterances(&zeros, &[(1, 0..4)].into_iter().collect(), Pooling::Sum).unwrap();
        assert!(out[&1].iter().all(|v| *v == 0.0));

        let three: BTreeMap<usize, Range<usize>> = [(2, 1..4)].into_iter().collect();
        let out = pool_utterances(&states, &three, Pooling::Sum).unwrap();
        let manual = &states.row(1) + &states.row(2) + states.row(3);
        assert!((&out[&2] - &manual).iter().all(|v| v.abs() < 1e-12));

        let scaled = pool_utterances(&(&states * 2.5), &three, Pooling::Sum).unwrap();
        assert!((&scaled[&2] - &(&out[&2] * 2.5)).iter().all(|v| v.abs() < 1e-12));

        let empty: BTreeMap<usize, Range<usize>> = [(1, 2..2)].into_iter().collect();
        assert!(pool_utterances(&states, &empty, Pooling::Sum).is_err());
    }

    #[test]
    fn truncation_drops_oldest_history_first() {
        let conv = Conversation {
            id: "c".into(),
            utterances: (1..=4)
                .map(|i| Utterance {
                    index: i,
                    speaker: "A".into(),
                    text: format!("word{i} word{i} word{i}"),
                    emotion: None,
                })
                .collect(),
        };
        let inst = EcecInstance {
            id: "r".into(),
            conversation_id: "c".into(),
            target_index: 4,
            candidate_index: 2,
            target_emotion: "joy".into(),
            history_indices: vec![1, 2, 3, 4],
            gold_label: Label::NonCause,
        };
        let tok = Tokenizer::Word(WordVocab::build(conv.utterances.iter().map(|u| u.text.as_str()), ["joy"], 1));
        let input = serialize_instance(&inst, &conv, SerializeOptions { speaker_prefix: false });
        let full = tokenize_input(&input, &tok, 100).unwrap();
        assert_eq!(full.ids.len(), 2 + 3 + 1 + 3 + 1 + 12 + 1);
        let cut = tokenize_input(&input, &tok, full.ids.len() - 3).unwrap();
        assert_eq!(cut.dropped, vec![1]);
        assert_eq!(cut.spans.keys().copied().collect::<Vec<_>>(), vec![2, 3, 4]);
        let cut = tokenize_input(&input, &tok, full.ids.len() - 4).unwrap();
        assert_eq!(cut.dropped, vec![1, 3]);
        let err = tokenize_input(&input, &tok, full.ids.len() - 7).unwrap_err();
        assert!(matches!(err, DamError::Encoding { .. }));
    }

    #[test]
    fn token_embedding_gradient_matches_finite_differences() {
        let mut store = ParamStore::new(11);
        let enc = ContextEncoder::new(&mut store, small_config(8), tokenizer()).unwrap();
        let ids = vec![2u32, 5, 6, 7, 3];
        let weights = random(ids.len(), 8, 4);
        let loss = |store: &ParamStore| {
            let mut tape = Tape::new();
            let x = enc.forward(&mut tape, store, &ids).unwrap();
            let w = tape.constant(weights.clone());
            let y = tape.mul(x, w);
            let y = tape.tanh(y);
            let l = tape.sum(y);
            (tape.scalar(l), tape.backward(l))
        };
        let (_, grads) = loss(&store);
        let id = enc.word_embeddings();
        let table = store.get(id).clone();
        let analytic = grads.param(id).unwrap().to_dense(table.dim());
        let numeric = numeric_grad(&table, |t| {
            let mut s = store.clone();
            *s.get_mut(id) = t.clone();
            loss(&s).0
        });
        for &r in &ids {
            let a = analytic.row(r as usize).to_owned().insert_axis(Axis(0));
            let n = numeric.row(r as usize).to_owned().insert_axis(Axis(0));
            assert!(relative_error(&a, &n) < 1e-4, "row {r}");
        }
    }
}
