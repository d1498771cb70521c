//! The full model: shared encoder, discourse parser head, conversation
//! graph with gated GNN, and the cause classifier, plus the fusion
//! variants compared in the experiment matrix.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::classifier::{classify, final_representation, ClassifierHead};
use crate::data::{AnnotatedDialogue, Conversation, EcecInstance, Label, RelationTypeSet};
use crate::encoder::{tokenize_input, Backend, ContextEncoder, EncoderConfig, TokenizedInput};
use crate::error::{DamError, Result};
use crate::gnn::{readout, GatedGnn, GnnConfig, GnnState};
use crate::graph::{build_graph, EdgeDims, EdgeEmbeddings, RelationMode};
use crate::ingestion::{serialize_instance, SerializeOptions};
use crate::parallel::{self, Execution};
use crate::parser::{DiscourseParser, ParseResult, ParserConfig};
use crate::tensor::{Matrix, ParamId, ParamStore, Tape, Var};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    Dam,
    WoMultiTask,
    WoGatedGnn,
    WoSpeaker,
    WoDistance,
    WoGate,
    DamMtl,
    DamCat,
    DamGnn,
    DamMtlGnn,
    DamArc,
}

impl Variant {
    pub const ALL: [Variant; 11] = [
        Variant::Dam,
        Variant::WoMultiTask,
        Variant::WoGatedGnn,
        Variant::WoSpeaker,
        Variant::WoDistance,
        Variant::WoGate,
        Variant::DamMtl,
        Variant::DamCat,
        Variant::DamGnn,
        Variant::DamMtlGnn,
        Variant::DamArc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Dam => "DAM",
            Variant::WoMultiTask => "W/O-multi-task",
            Variant::WoGatedGnn => "W/O-gated-gnn",
            Variant::WoSpeaker => "W/O-speaker",
            Variant::WoDistance => "W/O-distance",
            Variant::WoGate => "W/O-gate",
            Variant::DamMtl => "DAM-mtl",
            Variant::DamCat => "DAM-cat",
            Variant::DamGnn => "DAM-gnn",
            Variant::DamMtlGnn => "DAM-mtl-gnn",
            Variant::DamArc => "DAM-arc",
        }
    }

    pub fn valid_names() -> String {
        Variant::ALL.iter().map(|v| v.name()).collect::<Vec<_>>().join(", ")
    }

    pub fn features(self) -> Features {
        let dam = Features {
            multitask: true,
            gnn: true,
            gate: true,
            relation_mode: RelationMode::Typed,
            edge_source: EdgeSource::Joint,
            parser_fusion: false,
            no_speaker: false,
            no_distance: false,
        };
        let no_graph = Features {
            gnn: false,
            gate: false,
            ..dam
        };
        match self {
            Variant::Dam => dam,
            Variant::WoMultiTask => Features {
                multitask: false,
                edge_source: EdgeSource::Standalone,
                ..dam
            },
            Variant::WoGatedGnn | Variant::DamMtl => no_graph,
            Variant::WoSpeaker => Features { no_speaker: true, ..dam },
            Variant::WoDistance => Features { no_distance: true, ..dam },
            Variant::WoGate | Variant::DamMtlGnn => Features { gate: false, ..dam },
            Variant::DamCat => Features {
                multitask: false,
                edge_source: EdgeSource::Standalone,
                parser_fusion: true,
                ..no_graph
            },
            Variant::DamGnn => Features {
                multitask: false,
                gate: false,
                edge_source: EdgeSource::Standalone,
                ..dam
            },
            Variant::DamArc => Features {
                relation_mode: RelationMode::Binary,
                ..dam
            },
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = DamError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['_', ' '], "-");
        Variant::ALL
            .into_iter()
            .find(|v| v.name().to_ascii_lowercase() == key || v.name().to_ascii_lowercase().replace('/', "") == key)
            .ok_or_else(|| DamError::UnknownVariant {
                name: s.to_string(),
                valid: Variant::valid_names(),
            })
    }
}

/// Which parser supplies the relation edges of the conversation graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeSource {
    /// The parser head trained jointly on the shared encoder.
    Joint,
    /// A separately trained parser with its own encoder, frozen afterwards.
    Standalone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Features {
    /// Train the parser head alongside the classifier.
    pub multitask: bool,
    pub gnn: bool,
    pub gate: bool,
    pub relation_mode: RelationMode,
    pub edge_source: EdgeSource,
    /// Append the standalone parser's relation hidden state to `h`.
    pub parser_fusion: bool,
    pub no_speaker: bool,
    pub no_distance: bool,
}

impl Features {
    pub fn needs_standalone(&self) -> bool {
        self.parser_fusion || (self.gnn && self.edge_source == EdgeSource::Standalone)
    }

    /// Whether a parse is needed for building graphs.
    pub fn needs_parse(&self) -> bool {
        self.gnn
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub parser: ParserConfig,
    pub edge_dims: EdgeDims,
    pub distance_clip: usize,
    pub gnn_iterations: usize,
    pub gnn_heads: usize,
    pub speaker_prefix: bool,
    pub features: Features,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            parser: ParserConfig::default(),
            edge_dims: EdgeDims::default(),
            distance_clip: 10,
            gnn_iterations: 2,
            gnn_heads: 8,
            speaker_prefix: true,
            features: Variant::Dam.features(),
        }
    }
}

impl ModelConfig {
    pub fn gnn_config(&self, node_dim: usize) -> GnnConfig {
        GnnConfig {
            iterations: self.gnn_iterations,
            heads: self.gnn_heads,
            node_dim,
            edge_dim: self.edge_dims.total(),
        }
    }

    fn parser_config(&self) -> ParserConfig {
        ParserConfig {
            speaker_prefix: self.speaker_prefix,
            ..self.parser
        }
    }
}

/// How to obtain encoder weights and tokenizer.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum EncoderInit {
    /// Fresh parameters for the given tokenizer (also used to rebuild an
    /// encoder before loading checkpoint weights).
    Fresh(Tokenizer),
    /// Import from the directory named in `EncoderConfig::backend`.
    Pretrained { emotions: Vec<String> },
}

fn build_encoder(store: &mut ParamStore, config: &EncoderConfig, init: &EncoderInit) -> Result<ContextEncoder> {
    match (init, &config.backend) {
        (EncoderInit::Fresh(tok), _) => ContextEncoder::new(store, config.clone(), tok.clone()),
        (EncoderInit::Pretrained { emotions }, Backend::Pretrained(dir)) => {
            ContextEncoder::from_pretrained(store, dir, config.max_length, config.pooling, emotions.iter().map(String::as_str))
        }
        (EncoderInit::Pretrained { .. }, Backend::Toy) => Err(DamError::config(
            "encoder.pretrained_dir",
            "pretrained initialisation needs a pretrained backend",
        )),
    }
}

/// Encoder plus parser head in their own parameter store.
#[derive(Debug, Clone)]
pub struct StandaloneParser {
    pub store: ParamStore,
    pub relations: RelationTypeSet,
    pub encoder: ContextEncoder,
    pub parser: DiscourseParser,
}

/// Seed offset of the standalone parser's store.
const STANDALONE_SEED: u64 = 0x5e_ed0f_d15c;

impl StandaloneParser {
    pub fn new(config: &ModelConfig, init: &EncoderInit, relations: &RelationTypeSet, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(seed ^ STANDALONE_SEED);
        let encoder = build_encoder(&mut store, &config.encoder, init)?;
        let parser = DiscourseParser::new(&mut store, config.parser_config(), encoder.hidden_dim(), relations.size());
        Ok(StandaloneParser {
            store,
            relations: relations.clone(),
            encoder,
            parser,
        })
    }

    pub fn decode(&self, dialogue: &AnnotatedDialogue) -> Result<ParseResult> {
        self.parser.decode(&self.store, &self.encoder, dialogue)
    }

    /// EDU hidden states `(n + 1) x 2g` in inference mode.
    pub fn edu_states(&self, dialogue: &AnnotatedDialogue) -> Result<Matrix> {
        let mut tape = Tape::inference();
        let h = self.parser.encode_edus(&mut tape, &self.store, &self.encoder, dialogue)?;
        Ok(tape.value(h).clone())
    }
}

/// A triple ready for the encoder. `instance.history_indices` holds only
/// the utterances that survived truncation.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub instance: EcecInstance,
    pub tokens: TokenizedInput,
}

/// Per-conversation parser outputs consumed by graph building and fusion.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EdgeContext {
    pub parses: BTreeMap<String, ParseResult>,
    pub parser_states: BTreeMap<String, Matrix>,
}

#[derive(Debug, Clone)]
pub struct DamModel {
    pub config: ModelConfig,
    pub relations: RelationTypeSet,
    pub store: ParamStore,
    pub encoder: ContextEncoder,
    pub parser: Option<DiscourseParser>,
    pub edges: Option<EdgeEmbeddings>,
    pub gnn: Option<GatedGnn>,
    pub classifier: ClassifierHead,
    pub standalone: Option<StandaloneParser>,
}

impl DamModel {
    pub fn new(config: ModelConfig, init: &EncoderInit, relations: RelationTypeSet, seed: u64) -> Result<Self> {
        let f = config.features;
        let mut store = ParamStore::new(seed);
        let encoder = build_encoder(&mut store, &config.encoder, init)?;
        let config = ModelConfig {
            encoder: encoder.config.clone(),
            ..config
        };
        let d = encoder.hidden_dim();
        let parser = f
            .multitask
            .then(|| DiscourseParser::new(&mut store, config.parser_config(), d, relations.size()));
        let (edges, gnn) = if f.gnn {
            let edges = EdgeEmbeddings::new(
                &mut store,
                config.edge_dims,
                config.distance_clip,
                f.relation_mode,
                relations.clone(),
                f.gate,
            );
            let gnn = GatedGnn::new(&mut store, config.gnn_config(d))?;
            (Some(edges), Some(gnn))
        } else {
            (None, None)
        };
        if let Some(e) = &edges {
            for (off, table) in [(f.no_speaker, e.speaker), (f.no_distance, e.distance)] {
                if off {
                    store.get_mut(table).fill(0.0);
                    store.set_frozen(table, true);
                }
            }
        }
        let mut final_dim = d;
        if f.gnn {
            final_dim += 2 * config.edge_dims.total();
        }
        if f.parser_fusion {
            final_dim += config.parser.rel_dim;
        }
        let classifier = ClassifierHead::new(&mut store, final_dim);
        let standalone = if f.needs_standalone() {
            Some(StandaloneParser::new(&config, init, &relations, seed)?)
        } else {
            None
        };
        Ok(DamModel {
            config,
            relations,
            store,
            encoder,
            parser,
            edges,
            gnn,
            classifier,
            standalone,
        })
    }

    pub fn features(&self) -> Features {
        self.config.features
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.encoder.tokenizer
    }

    /// Learnable, non-frozen parameters of the main store.
    pub fn trainable(&self) -> Vec<ParamId> {
        self.store.ids().filter(|&id| !self.store.is_frozen(id)).collect()
    }

    pub fn prepare(&self, inst: &EcecInstance, conv: &Conversation) -> Result<Prepared> {
        let options = SerializeOptions {
            speaker_prefix: self.config.speaker_prefix,
        };
        let input = serialize_instance(inst, conv, options);
        let tokens = tokenize_input(&input, &self.encoder.tokenizer, self.config.encoder.max_length)?;
        let mut instance = inst.clone();
        instance.history_indices.retain(|h| tokens.spans.contains_key(h));
        Ok(Prepared { instance, tokens })
    }

    /// Parses of the given conversations with whichever parser feeds the
    /// graph, plus standalone parser states when fusion is on.
    pub fn edge_context<'a>(&self, conversations: impl IntoIterator<Item = &'a Conversation>, exec: Execution) -> Result<EdgeContext> {
        let f = self.features();
        if !f.needs_parse() && !f.parser_fusion {
            return Ok(EdgeContext::default());
        }
        let dialogues: Vec<AnnotatedDialogue> = conversations.into_iter().map(AnnotatedDialogue::from_conversation).collect();
        let results = parallel::map(exec, &dialogues, |d| -> Result<(Option<ParseResult>, Option<Matrix>)> {
            let parse = if f.needs_parse() { Some(self.parse_for_edges(d)?) } else { None };
            let states = match (&self.standalone, f.parser_fusion) {
                (Some(s), true) => Some(s.edu_states(d)?),
                _ => None,
            };
            Ok((parse, states))
        });
        let mut ctx = EdgeContext::default();
        for (d, r) in dialogues.iter().zip(results) {
            let (parse, states) = r?;
            if let Some(p) = parse {
                ctx.parses.insert(d.id.clone(), p);
            }
            if let Some(s) = states {
                ctx.parser_states.insert(d.id.clone(), s);
            }
        }
        Ok(ctx)
    }

    fn parse_for_edges(&self, dialogue: &AnnotatedDialogue) -> Result<ParseResult> {
        match (self.features().edge_source, &self.parser, &self.standalone) {
            (EdgeSource::Joint, Some(p), _) => p.decode(&self.store, &self.encoder, dialogue),
            (EdgeSource::Standalone, _, Some(s)) => s.decode(dialogue),
            _ => Err(DamError::Parser("no parser available for graph edges".into())),
        }
    }

    /// Decodes a dialogue with the jointly trained parser, or the
    /// standalone one when there is no joint parser.
    pub fn parse(&self, dialogue: &AnnotatedDialogue) -> Result<ParseResult> {
        match (&self.parser, &self.standalone) {
            (Some(p), _) => p.decode(&self.store, &self.encoder, dialogue),
            (None, Some(s)) => s.decode(dialogue),
            (None, None) => Err(DamError::Parser("this variant has no discourse parser".into())),
        }
    }

    /// Final representation `h_i` (`1 x final_dim`).
    pub fn representation<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        prepared: &Prepared,
        conv: &Conversation,
        ctx: &EdgeContext,
    ) -> Result<Var> {
        let store = &self.store;
        let inst = &prepared.instance;
        let vars = self.encoder.encode_vars(tape, store, &prepared.tokens)?;
        let mut extra = Vec::new();
        if let (Some(edges), Some(gnn)) = (&self.edges, &self.gnn) {
            let parse = ctx.parses.get(&conv.id).ok_or_else(|| {
                DamError::Graph(format!("no parse for conversation `{}`", conv.id))
            })?;
            let graph = build_graph(inst, conv, Some(parse))?;
            let rows: Vec<Var> = graph
                .nodes
                .iter()
                .map(|h| {
                    vars.utterances.get(h).copied().ok_or_else(|| {
                        DamError::Graph(format!("instance `{}`: utterance {h} was not encoded", inst.id))
                    })
                })
                .collect::<Result<_>>()?;
            let nodes = tape.concat_rows(&rows);
            let e0 = edges.init_edge_vectors(tape, store, &graph)?;
            let e = edges.gate_edges(tape, store, e0);
            let state = gnn.run(tape, store, GnnState { nodes, edges: e });
            let pos = |idx: usize| {
                graph.position(idx).ok_or_else(|| {
                    DamError::Graph(format!("instance `{}`: utterance {idx} is not a graph node", inst.id))
                })
            };
            let (i, t) = (pos(inst.candidate_index)?, pos(inst.target_index)?);
            extra.push(readout(tape, state.edges, graph.num_nodes(), i, t));
        }
        if self.features().parser_fusion {
            let s = self
                .standalone
                .as_ref()
                .ok_or_else(|| DamError::Parser("fusion needs the standalone parser".into()))?;
            let h = ctx.parser_states.get(&conv.id).ok_or_else(|| {
                DamError::Parser(format!("no parser states for conversation `{}`", conv.id))
            })?;
            let pair = s.parser.pair_hidden(&s.store, h, inst.candidate_index, inst.target_index);
            extra.push(tape.constant(pair));
        }
        Ok(final_representation(tape, vars.cls, &extra))
    }

    /// Class logits `1 x 2` on a tape.
    pub fn logits<'p>(&'p self, tape: &mut Tape<'p>, prepared: &Prepared, conv: &Conversation, ctx: &EdgeContext) -> Result<Var> {
        let h = self.representation(tape, prepared, conv, ctx)?;
        Ok(self.classifier.forward(tape, &self.store, h))
    }

    /// Class probabilities and predicted label.
    pub fn predict(&self, prepared: &Prepared, conv: &Conversation, ctx: &EdgeContext) -> Result<([f64; 2], Label)> {
        let mut tape = Tape::inference();
        let logits = self.logits(&mut tape, prepared, conv, ctx)?;
        let l = tape.value(logits);
        Ok(classify([l[[0, 0]], l[[0, 1]]]))
    }

    /// Link and relation losses of the joint parser on a tape.
    pub fn discourse_loss<'p>(&'p self, tape: &mut Tape<'p>, dialogue: &AnnotatedDialogue) -> Result<(Var, Var, usize)> {
        let parser = self
            .parser
            .as_ref()
            .ok_or_else(|| DamError::Parser("this variant trains no joint parser".into()))?;
        let h = parser.encode_edus(tape, &self.store, &self.encoder, dialogue)?;
        parser.loss_on_tape(tape, &self.store, h, dialogue, &self.relations)
    }
}
