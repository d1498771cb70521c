//! Fully connected typed graph over the history of a target utterance, and
//! the gated edge vectors built from speaker, distance and relation tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::{Conversation, EcecInstance, RelationTypeSet};
use crate::error::{DamError, Result};
use crate::nn::Linear;
use crate::parser::ParseResult;
use crate::tensor::{Init, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SpeakerType {
    /// `a` and `b` are consecutive turns of the same speaker.
    SameAdjacent,
    Other,
}

impl SpeakerType {
    pub const COUNT: usize = 2;

    pub fn id(self) -> usize {
        match self {
            SpeakerType::SameAdjacent => 0,
            SpeakerType::Other => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SpeakerType::SameAdjacent => "same-adjacent",
            SpeakerType::Other => "other",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeFeature {
    pub speaker: SpeakerType,
    /// Signed offset `j - i` for the edge `(i, j)`.
    pub distance: i64,
    /// Relation id from the parse, `None` when there is no link.
    pub relation: Option<usize>,
}

/// Table row for a signed distance: offsets beyond `clip` share one row
/// on each side, and 0 (self-loops) has its own row.
pub fn distance_bucket(distance: i64, clip: usize) -> usize {
    let c = clip as i64 + 1;
    (distance.clamp(-c, c) + c) as usize
}

pub fn num_distance_buckets(clip: usize) -> usize {
    2 * clip + 3
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelationMode {
    /// One row per relation type plus `none`.
    Typed,
    /// Two rows: has-arc and `none`.
    Binary,
}

impl RelationMode {
    pub fn rows(self, relations: &RelationTypeSet) -> usize {
        match self {
            RelationMode::Typed => relations.size() + 1,
            RelationMode::Binary => 2,
        }
    }

    pub fn row(self, relation: Option<usize>, relations: &RelationTypeSet) -> usize {
        match (self, relation) {
            (RelationMode::Typed, Some(r)) => r,
            (RelationMode::Typed, None) => relations.none_id(),
            (RelationMode::Binary, Some(_)) => 0,
            (RelationMode::Binary, None) => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConversationGraph {
    /// Utterance indices of the nodes, in conversation order.
    pub nodes: Vec<usize>,
    /// Feature of every ordered pair of node indices, self-loops included.
    pub edges: BTreeMap<(usize, usize), EdgeFeature>,
}

impl ConversationGraph {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Position of an utterance index among the nodes.
    pub fn position(&self, index: usize) -> Option<usize> {
        self.nodes.iter().position(|&n| n == index)
    }

    /// Edge features in row-major node-position order: row `a * m + b`
    /// belongs to the edge from node `a` to node `b`.
    pub fn ordered_edges(&self) -> Vec<EdgeFeature> {
        let mut out = Vec::with_capacity(self.nodes.len().pow(2));
        for &a in &self.nodes {
            for &b in &self.nodes {
                out.push(self.edges[&(a, b)]);
            }
        }
        out
    }

    /// Line records `i j speaker_type distance relation`.
    pub fn dump(&self, relations: &RelationTypeSet) -> String {
        let mut out = String::new();
        for (&(i, j), e) in &self.edges {
            let rel = e.relation.map_or(crate::data::NONE_RELATION, |r| relations.name(r));
            let _ = writeln!(out, "{i} {j} {} {} {rel}", e.speaker.as_str(), e.distance);
        }
        out
    }
}

/// Pairs `(a, b)` with `a < b` that are consecutive turns of one speaker.
pub fn same_speaker_pairs(conv: &Conversation) -> Vec<(usize, usize)> {
    let mut last: BTreeMap<&str, usize> = BTreeMap::new();
    let mut out = Vec::new();
    for u in &conv.utterances {
        if let Some(prev) = last.insert(u.speaker.as_str(), u.index) {
            out.push((prev, u.index));
        }
    }
    out
}

/// Builds the graph over the history of `inst`. Relations come from the
/// parse links `(parent, child)` and only label that direction.
pub fn build_graph(inst: &EcecInstance, conv: &Conversation, parse: Option<&ParseResult>) -> Result<ConversationGraph> {
    let n = conv.len();
    let nodes = inst.history_indices.clone();
    if let Some(&bad) = nodes.iter().find(|&&i| i == 0 || i > n) {
        return Err(DamError::Graph(format!(
            "instance `{}`: history index {bad} outside conversation `{}` of {n} utterances",
            inst.id, conv.id
        )));
    }
    let mut relations = BTreeMap::new();
    if let Some(parse) = parse {
        for (p, c, r) in parse.links() {
            if p > n || c > n {
                return Err(DamError::Graph(format!(
                    "parse link {p} -> {c} outside conversation `{}` of {n} utterances",
                    conv.id
                )));
            }
            relations.insert((p, c), r);
        }
    }
    let adjacent: std::collections::BTreeSet<(usize, usize)> = same_speaker_pairs(conv)
        .into_iter()
        .flat_map(|(a, b)| [(a, b), (b, a)])
        .collect();
    let mut edges = BTreeMap::new();
    for &i in &nodes {
        for &j in &nodes {
            let speaker = if adjacent.contains(&(i, j)) {
                SpeakerType::SameAdjacent
            } else {
                SpeakerType::Other
            };
            let relation = if i == j { None } else { relations.get(&(i, j)).copied() };
            edges.insert(
                (i, j),
                EdgeFeature {
                    speaker,
                    distance: j as i64 - i as i64,
                    relation,
                },
            );
        }
    }
    Ok(ConversationGraph { nodes, edges })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeDims {
    pub speaker: usize,
    pub distance: usize,
    pub relation: usize,
}

impl EdgeDims {
    pub fn total(&self) -> usize {
        self.speaker + self.distance + self.relation
    }
}

impl Default for EdgeDims {
    fn default() -> Self {
        EdgeDims {
            speaker: 192,
            distance: 192,
            relation: 384,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EdgeEmbeddings {
    pub speaker: ParamId,
    pub distance: ParamId,
    pub relation: ParamId,
    pub gate: Option<Linear>,
    pub dims: EdgeDims,
    pub distance_clip: usize,
    pub mode: RelationMode,
    pub relations: RelationTypeSet,
}

impl EdgeEmbeddings {
    pub fn new(
        store: &mut ParamStore,
        dims: EdgeDims,
        distance_clip: usize,
        mode: RelationMode,
        relations: RelationTypeSet,
        gated: bool,
    ) -> Self {
        let init = Init::Normal(0.02);
        EdgeEmbeddings {
            speaker: store.add("graph.speaker", SpeakerType::COUNT, dims.speaker, init),
            distance: store.add("graph.distance", num_distance_buckets(distance_clip), dims.distance, init),
            relation: store.add("graph.relation", mode.rows(&relations), dims.relation, init),
            gate: gated.then(|| Linear::new(store, "graph.gate", dims.total(), dims.total(), true)),
            dims,
            distance_clip,
            mode,
            relations,
        }
    }

    pub fn edge_dim(&self) -> usize {
        self.dims.total()
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.speaker, self.distance, self.relation];
        if let Some(g) = &self.gate {
            p.extend(g.params());
        }
        p
    }

    /// Ungated edge vectors `e'`, one row per edge in [`ConversationGraph::ordered_edges`] order.
    pub fn init_edge_vectors<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, graph: &ConversationGraph) -> Result<Var> {
        let edges = graph.ordered_edges();
        let speaker_rows: Vec<usize> = edges.iter().map(|e| e.speaker.id()).collect();
        let distance_rows: Vec<usize> = edges
            .iter()
            .map(|e| distance_bucket(e.distance, self.distance_clip))
            .collect();
        let relation_rows: Vec<usize> = edges
            .iter()
            .map(|e| self.mode.row(e.relation, &self.relations))
            .collect();
        let lookups = [
            ("speaker", self.speaker, speaker_rows),
            ("distance", self.distance, distance_rows),
            ("relation", self.relation, relation_rows),
        ];
        let mut parts = Vec::with_capacity(3);
        for (what, table, rows) in lookups {
            let size = store.get(table).nrows();
            if let Some(bad) = rows.iter().find(|&&r| r >= size) {
                return Err(DamError::Graph(format!("{what} bucket {bad} not in a table of {size} rows")));
            }
            let t = tape.param(store, table);
            parts.push(tape.gather_rows(t, &rows));
        }
        Ok(tape.concat_cols(&parts))
    }

    /// Gated edge vectors; without a gate the input is returned unchanged.
    pub fn gate_edges<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, edges: Var) -> Var {
        match &self.gate {
            Some(g) => gate(tape, store, g, edges),
            None => edges,
        }
    }
}

/// `e = e' * sigmoid(e' W_f + b_f)`, row-wise.
pub fn gate<'p>(tape: &mut Tape<'p>, store: &'p ParamStore, gate: &Linear, edges: Var) -> Var {
    let logits = gate.forward(tape, store, edges);
    let g = tape.sigmoid(logits);
    tape.mul(edges, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Label, Utterance};
    use crate::tensor::testing::{numeric_grad, random, relative_error};
    use crate::tensor::{sigmoid, Matrix};

    fn conv(speakers: &[&str]) -> Conversation {
        Conversation {
            id: "c".into(),
            utterances: speakers
                .iter()
                .enumerate()
                .map(|(k, s)| Utterance { index: k + 1, speaker: s.to_string(), text: format!("u{k}"), emotion: None })
                .collect(),
        }
    }

    fn inst(t: usize) -> EcecInstance {
        EcecInstance {
            id: "x".into(),
            conversation_id: "c".into(),
            target_index: t,
            candidate_index: 1,
            target_emotion: "joy".into(),
            history_indices: (1..=t).collect(),
            gold_label: Label::Cause,
        }
    }

    #[test]
    fn speaker_chain_example() {
        let c = conv(&["A", "B", "A", "A"]);
        assert_eq!(same_speaker_pairs(&c), vec![(1, 3), (3, 4)]);
        let g = build_graph(&inst(4), &c, None).unwrap();
        let same: Vec<_> = g.edges.iter().filter(|(_, e)| e.speaker == SpeakerType::SameAdjacent).map(|(k, _)| *k).collect();
        assert_eq!(same, vec![(1, 3), (3, 1), (3, 4), (4, 3)]);
        assert_eq!(g.edges.len(), 16);
        assert!(g.edges.values().all(|e| e.relation.is_none()));
        for i in 1..=4 {
            assert_eq!(g.edges[&(i, i)].distance, 0);
        }
    }

    #[test]
    fn relations_are_directional() {
        let c = conv(&["A", "B", "A"]);
        let parse = ParseResult {
            parents: [(1, 0), (2, 1), (3, 1)].into_iter().collect(),
            relations: [((0, 1), 0), ((1, 2), 3), ((1, 3), 2)].into_iter().collect(),
            link_probs: BTreeMap::new(),
            rel_probs: BTreeMap::new(),
        };
        let g = build_graph(&inst(3), &c, Some(&parse)).unwrap();
        assert_eq!(g.edges[&(1, 2)].relation, Some(3));
        assert_eq!(g.edges[&(2, 1)].relation, None);
        assert_eq!(g.edges[&(1, 3)].relation, Some(2));
        let mut bad = parse.clone();
        bad.relations.insert((2, 9), 0);
        assert!(build_graph(&inst(3), &c, Some(&bad)).is_err());
    }

    #[test]
    fn distance_buckets_cover_clip_range() {
        assert_eq!(num_distance_buckets(10), 23);
        assert_eq!(distance_bucket(-50, 10), 0);
        assert_eq!(distance_bucket(-11, 10), 0);
        assert_eq!(distance_bucket(-10, 10), 1);
        assert_eq!(distance_bucket(0, 10), 11);
        assert_eq!(distance_bucket(10, 10), 21);
        assert_eq!(distance_bucket(99, 10), 22);
    }

    fn embeddings(store: &mut ParamStore, gated: bool) -> EdgeEmbeddings {
        EdgeEmbeddings::new(store, EdgeDims::default(), 10, RelationMode::Typed, RelationTypeSet::default(), gated)
    }

    #[test]
    fn edge_vectors_have_table_dims() {
        let mut store = ParamStore::new(1);
        let emb = embeddings(&mut store, true);
        let g = build_graph(&inst(3), &conv(&["A", "B", "A"]), None).unwrap();
        let mut tape = Tape::inference();
        let e = emb.init_edge_vectors(&mut tape, &store, &g).unwrap();
        assert_eq!(tape.shape(e), (9, 768));
        // (1,1) and (2,2) share speaker type, distance and relation.
        let v = tape.value(e);
        assert_eq!(v.row(0), v.row(4));
        assert_eq!(store.get(emb.relation).nrows(), 6);
    }

    #[test]
    fn zero_tables_give_zero_vectors() {
        let mut store = ParamStore::new(1);
        let emb = embeddings(&mut store, false);
        for id in emb.params() {
            store.get_mut(id).fill(0.0);
        }
        let g = build_graph(&inst(2), &conv(&["A", "B"]), None).unwrap();
        let mut tape = Tape::inference();
        let e = emb.init_edge_vectors(&mut tape, &store, &g).unwrap();
        assert!(tape.value(e).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn short_table_is_an_error() {
        let mut store = ParamStore::new(1);
        let emb = embeddings(&mut store, false);
        *store.get_mut(emb.distance) = Matrix::zeros((3, 192));
        let g = build_graph(&inst(3), &conv(&["A", "B", "A"]), None).unwrap();
        let mut tape = Tape::inference();
        assert!(emb.init_edge_vectors(&mut tape, &store, &g).is_err());
    }

    fn run_gate(store: &ParamStore, g: &Linear, e: &Matrix) -> Matrix {
        let mut tape = Tape::inference();
        let ev = tape.constant(e.clone());
        let out = gate(&mut tape, store, g, ev);
        tape.value(out).clone()
    }

    #[test]
    fn gate_special_cases() {
        let mut store = ParamStore::new(2);
        let g = Linear::new(&mut store, "g", 4, 4, true);
        let e = random(3, 4, 9);
        store.get_mut(g.weight).fill(0.0);
        let half = run_gate(&store, &g, &e);
        assert!(relative_error(&half, &(&e * 0.5)) < 1e-15);
        store.get_mut(g.bias.unwrap()).fill(20.0);
        let open = run_gate(&store, &g, &e);
        assert!((&open - &e).iter().all(|d| d.abs() < 1e-6));
    }

    #[test]
    fn gate_matches_elementwise_oracle() {
        let mut store = ParamStore::new(3);
        let g = Linear::new(&mut store, "g", 4, 4, true);
        *store.get_mut(g.bias.unwrap()) = random(1, 4, 4);
        let e = random(1, 4, 5);
        let w = store.get(g.weight);
        let b = store.get(g.bias.unwrap());
        let got = run_gate(&store, &g, &e);
        for c in 0..4 {
            let z: f64 = (0..4).map(|r| e[[0, r]] * w[[r, c]]).sum::<f64>() + b[[0, c]];
            let want = e[[0, c]] * sigmoid(z);
            assert!((got[[0, c]] - want).abs() < 1e-12);
            assert!(got[[0, c]].abs() <= e[[0, c]].abs());
        }
        let norm = |m: &Matrix| m.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm(&got) < norm(&e));
    }

    #[test]
    fn gate_gradient_check() {
        let mut store = ParamStore::new(4);
        let g = Linear::new(&mut store, "g", 5, 5, true);
        let e0 = random(3, 5, 6);
        let loss = |store: &ParamStore, e: &Matrix| {
            let mut tape = Tape::new();
            let ev = tape.variable(e.clone());
            let out = gate(&mut tape, store, &g, ev);
            let sq = tape.mul(out, out);
            let l = tape.sum(sq);
            (tape.scalar(l), tape.backward(l), ev)
        };
        let (_, grads, ev) = loss(&store, &e0);
        let num = numeric_grad(&e0, |e| loss(&store, e).0);
        assert!(relative_error(grads.wrt(ev).unwrap(), &num) < 1e-4);
        let w0 = store.get(g.weight).clone();
        let num_w = numeric_grad(&w0, |w| {
            let mut s = store.clone();
            *s.get_mut(g.weight) = w.clone();
            loss(&s, &e0).0
        });
        assert!(relative_error(&grads.param(g.weight).unwrap().to_dense(w0.dim()), &num_w) < 1e-4);
    }

    #[test]
    fn dump_lists_every_edge() {
        let g = build_graph(&inst(2), &conv(&["A", "A"]), None).unwrap();
        let text = g.dump(&RelationTypeSet::default());
        assert_eq!(text.lines().count(), 4);
        assert!(text.contains("1 2 same-adjacent 1 none"));
    }
}
