//! Discourse dependency parser head: a BiGRU over per-EDU
//! classification-marker vectors, a link predictor that picks each EDU's
//! parent among the earlier EDUs (or the root), and a relation classifier
//! for the chosen pair.

use std::collections::BTreeMap;

use crate::data::{AnnotatedDialogue, Edu, RelationTypeSet};
use crate::encoder::ContextEncoder;
use crate::error::{DamError, Result};
use crate::nn::{BiGru, Linear};
use crate::tensor::{log_softmax_rows, Init, Matrix, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParserConfig {
    /// Hidden size of each GRU direction.
    pub gru_hidden: usize,
    pub link_dim: usize,
    pub rel_dim: usize,
    pub speaker_prefix: bool,
}

impl Default for ParserConfig {
    fn default() -> Self {
        ParserConfig {
            gru_hidden: 384,
            link_dim: 256,
            rel_dim: 256,
            speaker_prefix: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiscourseParser {
    pub config: ParserConfig,
    pub root: ParamId,
    pub gru: BiGru,
    pub link_hidden: Linear,
    pub link_out: Linear,
    pub rel_hidden: Linear,
    pub rel_out: Linear,
    pub num_relations: usize,
}

/// Greedy parse of one dialogue.
#[derive(Debug, Clone, PartialEq)]
pub struct ParseResult {
    /// Child EDU index to predicted parent (0 is the root).
    pub parents: BTreeMap<usize, usize>,
    /// `(parent, child)` to relation id.
    pub relations: BTreeMap<(usize, usize), usize>,
    /// Child index to probabilities over parents `0..child`.
    pub link_probs: BTreeMap<usize, Vec<f64>>,
    /// Child index to relation probabilities at the chosen parent.
    pub rel_probs: BTreeMap<usize, Vec<f64>>,
}

impl ParseResult {
    /// Links as `(parent, child, relation id)`.
    pub fn links(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.relations.iter().map(|(&(p, c), &r)| (p, c, r))
    }
}

/// Raw scores of every decision the parser can make on one dialogue.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    /// `link_logits[i - 1]` scores the parents `0..i` of EDU `i`.
    pub link_logits: Vec<Vec<f64>>,
    /// Relation logits for every pair `(parent, child)` with parent < child.
    pub rel_logits: BTreeMap<(usize, usize), Vec<f64>>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let row = Matrix::from_shape_vec((1, logits.len()), logits.to_vec()).expect("row");
    log_softmax_rows(&row).mapv(f64::exp).row(0).to_vec()
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = k;
        }
    }
    best
}

impl ScoreTable {
    pub fn num_edus(&self) -> usize {
        self.link_logits.len()
    }

    /// Greedy decoding: argmax parent per EDU, then argmax relation for it.
    /// Attachments to the root carry no relation.
    pub fn decode(&self) -> ParseResult {
        let mut result = ParseResult {
            parents: BTreeMap::new(),
            relations: BTreeMap::new(),
            link_probs: BTreeMap::new(),
            rel_probs: BTreeMap::new(),
        };
        for (k, logits) in self.link_logits.iter().enumerate() {
            let child = k + 1;
            let probs = softmax(logits);
            let parent = argmax(&probs);
            result.parents.insert(child, parent);
            if let Some(rel) = self.rel_logits.get(&(parent, child)).filter(|_| parent > 0) {
                let rp = softmax(rel);
                result.relations.insert((parent, child), argmax(&rp));
                result.rel_probs.insert(child, rp);
            }
            result.link_probs.insert(child, probs);
        }
        result
    }

    /// Link and relation negative log-likelihoods against gold heads.
    pub fn loss(&self, gold: &AnnotatedDialogue, relations: &RelationTypeSet) -> Result<ParserLoss> {
        let targets = gold_targets(gold, relations)?;
        let mut link = 0.0;
        let mut rel = 0.0;
        for t in &targets {
            let logits = self
                .link_logits
                .get(t.child - 1)
                .ok_or_else(|| DamError::Parser(format!("no scores for EDU {}", t.child)))?;
            link -= softmax(logits)[t.parent].ln();
            if let Some(r) = t.relation {
                let logits = self
                    .rel_logits
                    .get(&(t.parent, t.child))
                    .ok_or_else(|| DamError::Parser(format!("no relation scores for {} -> {}", t.parent, t.child)))?;
                rel -= softmax(logits)[r].ln();
            }
        }
        Ok(ParserLoss::new(link, rel, targets.len()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParserLoss {
    pub link: f64,
    pub rel: f64,
    pub total: f64,
    /// Number of link decisions (one per non-root EDU).
    pub decisions: usize,
}

impl ParserLoss {
    pub fn new(link: f64, rel: f64, decisions: usize) -> Self {
        ParserLoss {
            link,
            rel,
            total: link + rel,
            decisions,
        }
    }
}

/// Gold decision for one EDU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GoldTarget {
    pub child: usize,
    pub parent: usize,
    /// `None` when the EDU attaches to the root without a relation.
    pub relation: Option<usize>,
}

pub fn gold_targets(gold: &AnnotatedDialogue, relations: &RelationTypeSet) -> Result<Vec<GoldTarget>> {
    for link in &gold.links {
        if link.parent >= link.child {
            return Err(DamError::Parser(format!(
                "dialogue `{}`: gold parent {} is not before child {}",
                gold.id, link.parent, link.child
            )));
        }
    }
    gold.gold_heads()
        .into_iter()
        .enumerate()
        .map(|(k, (parent, rel))| {
            let relation = rel
                .map(|name| {
                    relations.id(name).ok_or_else(|| {
                        DamError::Parser(format!("dialogue `{}`: unknown relation `{name}`", gold.id))
                    })
                })
                .transpose()?;
            Ok(GoldTarget {
                child: k + 1,
                parent,
                relation,
            })
        })
        .collect()
}

/// Text fed to the encoder for one EDU.
pub fn edu_text(edu: &Edu, speaker_prefix: bool) -> String {
    if speaker_prefix && !edu.speaker.is_empty() {
        format!("{}: {}", edu.speaker, edu.text)
    } else {
        edu.text.clone()
    }
}

impl DiscourseParser {
    pub fn new(store: &mut ParamStore, config: ParserConfig, input_dim: usize, num_relations: usize) -> Self {
        let gru = BiGru::new(store, "parser.gru", input_dim, config.gru_hidden);
        let pair = 2 * gru.output_dim();
        DiscourseParser {
            root: store.add("parser.root", 1, input_dim, Init::Normal(0.02)),
            link_hidden: Linear::new(store, "parser.link.hidden", pair, config.link_dim, true),
            link_out: Linear::new(store, "parser.link.out", config.link_dim, 1, true),
            rel_hidden: Linear::new(store, "parser.rel.hidden", pair, config.rel_dim, true),
            rel_out: Linear::new(store, "parser.rel.out", config.rel_dim, num_relations, true),
            gru,
            config,
            num_relations,
        }
    }

    /// Parameters of the parser head (the encoder is not included).
    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.root];
        p.extend(self.gru.params());
        for lin in [&self.link_hidden, &self.link_out, &self.rel_hidden, &self.rel_out] {
            p.extend(lin.params());
        }
        p
    }

    /// Hidden states `(n + 1) x 2g` for the root and every EDU.
    pub fn encode_edus<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        encoder: &ContextEncoder,
        dialogue: &AnnotatedDialogue,
    ) -> Result<Var> {
        let mut rows = vec![tape.param(store, self.root)];
        for edu in dialogue.edus.iter().filter(|e| !e.is_root()) {
            rows.push(encoder.encode_text_cls(tape, store, &edu_text(edu, self.config.speaker_prefix))?);
        }
        let x = tape.concat_rows(&rows);
        Ok(self.encode_vectors(tape, store, x))
    }

    /// BiGRU over precomputed EDU vectors (root first).
    pub fn encode_vectors<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, x: Var) -> Var {
        self.gru.forward(tape, store, x)
    }

    fn pairs<'p>(&self, tape: &mut Tape<'p>, h: Var, parents: &[usize], child: usize) -> Var {
        let hp = tape.gather_rows(h, parents);
        let hc = tape.gather_rows(h, &vec![child; parents.len()]);
        tape.concat_cols(&[hp, hc])
    }

    /// Link logits `1 x child` over the candidate parents `0..child`.
    pub fn link_logits<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, h: Var, child: usize) -> Result<Var> {
        if child == 0 {
            return Err(DamError::Parser("the root has no parent".into()));
        }
        let parents: Vec<usize> = (0..child).collect();
        let pairs = self.pairs(tape, h, &parents, child);
        let hidden = self.link_hidden.forward(tape, store, pairs);
        let hidden = tape.tanh(hidden);
        let scores = self.link_out.forward(tape, store, hidden);
        Ok(tape.transpose(scores))
    }

    /// Relation hidden representation `1 x d_r` for the pair.
    pub fn rel_hidden<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, h: Var, parent: usize, child: usize) -> Var {
        let pair = self.pairs(tape, h, &[parent], child);
        let hidden = self.rel_hidden.forward(tape, store, pair);
        tape.tanh(hidden)
    }

    /// Relation logits `1 x K` for the pair.
    pub fn rel_logits<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, h: Var, parent: usize, child: usize) -> Var {
        let hidden = self.rel_hidden(tape, store, h, parent, child);
        self.rel_out.forward(tape, store, hidden)
    }

    /// Probability over parents `0..child`.
    pub fn score_links(&self, store: &ParamStore, h: &Matrix, child: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::inference();
        let hv = tape.constant(h.clone());
        let logits = self.link_logits(&mut tape, store, hv, child)?;
        Ok(softmax(tape.value(logits).row(0).as_slice().expect("row")))
    }

    /// Probability over the K relation types for `parent -> child`.
    pub fn classify_relation(&self, store: &ParamStore, h: &Matrix, parent: usize, child: usize) -> Result<Vec<f64>> {
        if parent >= child {
            return Err(DamError::Parser(format!("parent {parent} must precede child {child}")));
        }
        let mut tape = Tape::inference();
        let hv = tape.constant(h.clone());
        let logits = self.rel_logits(&mut tape, store, hv, parent, child);
        Ok(softmax(tape.value(logits).row(0).as_slice().expect("row")))
    }

    /// Every link and relation score for hidden states `h` of `n + 1` rows.
    pub fn score_table(&self, store: &ParamStore, h: &Matrix) -> Result<ScoreTable> {
        let n = h.nrows().saturating_sub(1);
        let mut tape = Tape::inference();
        let hv = tape.constant(h.clone());
        let mut link_logits = Vec::with_capacity(n);
        let mut rel_logits = BTreeMap::new();
        for child in 1..=n {
            let l = self.link_logits(&mut tape, store, hv, child)?;
            link_logits.push(tape.value(l).row(0).to_vec());
            let parents: Vec<usize> = (0..child).collect();
            let pairs = self.pairs(&mut tape, hv, &parents, child);
            let hidden = self.rel_hidden.forward(&mut tape, store, pairs);
            let hidden = tape.tanh(hidden);
            let logits = self.rel_out.forward(&mut tape, store, hidden);
            for (k, row) in tape.value(logits).rows().into_iter().enumerate() {
                rel_logits.insert((k, child), row.to_vec());
            }
        }
        Ok(ScoreTable {
            link_logits,
            rel_logits,
        })
    }

    /// Encodes the dialogue in inference mode and decodes greedily.
    pub fn decode(&self, store: &ParamStore, encoder: &ContextEncoder, dialogue: &AnnotatedDialogue) -> Result<ParseResult> {
        let mut tape = Tape::inference();
        let h = self.encode_edus(&mut tape, store, encoder, dialogue)?;
        let h = tape.value(h).clone();
        Ok(self.score_table(store, &h)?.decode())
    }

    /// Relation hidden state of the pair in inference mode, for fusion.
    pub fn pair_hidden(&self, store: &ParamStore, h: &Matrix, parent: usize, child: usize) -> Matrix {
        let mut tape = Tape::inference();
        let hv = tape.constant(h.clone());
        let out = self.rel_hidden(&mut tape, store, hv, parent, child);
        tape.value(out).clone()
    }

    /// Link and relation losses on a tape, for training.
    pub fn loss_on_tape<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        h: Var,
        gold: &AnnotatedDialogue,
        relations: &RelationTypeSet,
    ) -> Result<(Var, Var, usize)> {
        let targets = gold_targets(gold, relations)?;
        let mut link_terms = Vec::new();
        let mut rel_terms = Vec::new();
        for t in &targets {
            let logits = self.link_logits(tape, store, h, t.child)?;
            let lp = tape.log_softmax(logits);
            link_terms.push(tape.nll(lp, &[t.parent]));
            if let Some(r) = t.relation {
                let logits = self.rel_logits(tape, store, h, t.parent, t.child);
                let lp = tape.log_softmax(logits);
                rel_terms.push(tape.nll(lp, &[r]));
            }
        }
        let zero = tape.constant(Matrix::zeros((1, 1)));
        link_terms.push(zero);
        rel_terms.push(zero);
        let link = tape.add_scalars(&link_terms);
        let rel = tape.add_scalars(&rel_terms);
        Ok((link, rel, targets.len()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DiscourseLink;
    use crate::encoder::EncoderConfig;
    use crate::tensor::testing::random;
    use crate::tokenizer::{Tokenizer, WordVocab};

    fn dialogue(texts: &[&str], links: &[(usize, usize, &str)]) -> AnnotatedDialogue {
        AnnotatedDialogue::with_root(
            "d",
            texts
                .iter()
                .enumerate()
                .map(|(k, t)| Edu { index: k + 1, speaker: if k % 2 == 0 { "A" } else { "B" }.into(), text: t.to_string() })
                .collect(),
            links
                .iter()
                .map(|&(p, c, r)| DiscourseLink { parent: p, child: c, relation: r.into() })
                .collect(),
        )
    }

    fn setup(hidden: usize) -> (ParamStore, ContextEncoder, DiscourseParser) {
        let mut store = ParamStore::new(5);
        let tok = Tokenizer::Word(WordVocab::build(["hi there how are you fine thanks ok"], ["joy"], 1));
        let cfg = EncoderConfig { hidden_dim: hidden, heads: 2, ffn_dim: 2 * hidden, max_length: 32, max_positions: 32, ..EncoderConfig::default() };
        let enc = ContextEncoder::new(&mut store, cfg, tok).unwrap();
        let parser = DiscourseParser::new(
            &mut store,
            ParserConfig { gru_hidden: 4, link_dim: 5, rel_dim: 6, speaker_prefix: true },
            hidden,
            RelationTypeSet::default().size(),
        );
        (store, enc, parser)
    }

    #[test]
    fn one_edu_dialogue_gives_root_and_edu() {
        let (store, enc, parser) = setup(8);
        let d = dialogue(&["hi there"], &[]);
        let mut tape = Tape::inference();
        let h = parser.encode_edus(&mut tape, &store, &enc, &d).unwrap();
        assert_eq!(tape.shape(h), (2, 8));
        let probs = parser.score_links(&store, tape.value(h), 1).unwrap();
        assert_eq!(probs, vec![1.0]);
        assert!(parser.score_links(&store, tape.value(h), 0).is_err());
    }

    #[test]
    fn reversing_edus_changes_states() {
        let (store, enc, parser) = setup(8);
        let a = dialogue(&["hi there", "how are you", "fine thanks"], &[]);
        let b = dialogue(&["fine thanks", "how are you", "hi there"], &[]);
        let mut tape = Tape::inference();
        let ha = parser.encode_edus(&mut tape, &store, &enc, &a).unwrap();
        let hb = parser.encode_edus(&mut tape, &store, &enc, &b).unwrap();
        assert_ne!(tape.value(ha), tape.value(hb));
    }

    #[test]
    fn zero_gru_gives_zero_states() {
        let (mut store, enc, parser) = setup(8);
        for id in parser.gru.params() {
            store.get_mut(id).fill(0.0);
        }
        let d = dialogue(&["hi there", "ok"], &[]);
        let mut tape = Tape::inference();
        let h = parser.encode_edus(&mut tape, &store, &enc, &d).unwrap();
        assert!(tape.value(h).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn equal_pair_features_give_uniform_links() {
        let (store, _, parser) = setup(8);
        let row = random(1, 8, 3);
        let mut h = Matrix::zeros((4, 8));
        for mut r in h.rows_mut() {
            r.assign(&row.row(0));
        }
        let probs = parser.score_links(&store, &h, 3).unwrap();
        for p in probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_relation_weights_give_uniform() {
        let (mut store, _, parser) = setup(8);
        for id in parser.rel_out.params() {
            store.get_mut(id).fill(0.0);
        }
        let probs = parser.classify_relation(&store, &random(3, 8, 2), 0, 2).unwrap();
        let k = probs.len() as f64;
        assert!(probs.iter().all(|p| (p - 1.0 / k).abs() < 1e-12));
        assert!(parser.classify_relation(&store, &random(3, 8, 2), 2, 1).is_err());
    }

    #[test]
    fn two_candidate_softmax_oracle() {
        // softmax(2, 0) = (e^2 / (e^2 + 1), 1 / (e^2 + 1))
        let table = ScoreTable { link_logits: vec![vec![0.0], vec![2.0, 0.0]], rel_logits: BTreeMap::new() };
        let parse = table.decode();
        let p = &parse.link_probs[&2];
        assert!((p[0] - 0.880_797).abs() < 1e-3 && (p[1] - 0.119_203).abs() < 1e-3);
    }

    #[test]
    fn decode_follows_forced_logits_and_ties() {
        let table = ScoreTable {
            link_logits: vec![vec![0.0], vec![-1.0, 3.0]],
            rel_logits: [((0, 1), vec![0.0, 1.0]), ((1, 2), vec![2.0, 0.0]), ((0, 2), vec![0.0, 0.0])].into_iter().collect(),
        };
        let parse = table.decode();
        assert_eq!(parse.parents, [(1, 0), (2, 1)].into_iter().collect());
        assert_eq!(parse.relations, [((1, 2), 0)].into_iter().collect());
        assert_eq!(parse.links().count(), 1);

        let uniform = ScoreTable { link_logits: vec![vec![0.5], vec![0.5, 0.5], vec![0.5, 0.5, 0.5]], rel_logits: BTreeMap::new() };
        assert!(uniform.decode().parents.values().all(|&p| p == 0));
    }

    #[test]
    fn argmax_is_shift_invariant() {
        let logits = vec![0.3, 1.7, 1.7, -2.0];
        let shifted: Vec<f64> = logits.iter().map(|x| x + 12.5).collect();
        assert_eq!(argmax(&softmax(&logits)), argmax(&softmax(&shifted)));
        assert_eq!(argmax(&logits), 1);
    }

    #[test]
    fn loss_edge_cases() {
        let rels = RelationTypeSet::default();
        let c = rels.id("Comment").unwrap();
        let gold = dialogue(&["a", "b"], &[(1, 2, "Comment")]);
        let mut rel_logits = BTreeMap::new();
        let mut sure = vec![-1e9; rels.size()];
        sure[c] = 0.0;
        rel_logits.insert((1, 2), sure);
        let perfect = ScoreTable { link_logits: vec![vec![0.0], vec![-1e9, 0.0]], rel_logits };
        let loss = perfect.loss(&gold, &rels).unwrap();
        assert!(loss.total.abs() < 1e-12);

        let gold = dialogue(&["a", "b", "c"], &[]);
        let uniform = ScoreTable { link_logits: vec![vec![0.0], vec![0.0, 0.0], vec![0.0, 0.0, 0.0]], rel_logits: BTreeMap::new() };
        let loss = uniform.loss(&gold, &rels).unwrap();
        let expected = 1f64.ln() + 2f64.ln() + 3f64.ln();
        assert!((loss.link - expected).abs() < 1e-12);
        assert_eq!(loss.rel, 0.0);

        let mut bad = gold.clone();
        bad.links.push(DiscourseLink { parent: 3, child: 2, relation: "Comment".into() });
        assert!(uniform.loss(&bad, &rels).is_err());
    }

    #[test]
    fn tape_loss_matches_table_loss() {
        let (store, enc, parser) = setup(8);
        let rels = RelationTypeSet::default();
        let d = dialogue(&["hi there", "how are you", "fine thanks"], &[(1, 2, "Clarification_question"), (2, 3, "Comment")]);
        let mut tape = Tape::new();
        let h = parser.encode_edus(&mut tape, &store, &enc, &d).unwrap();
        let (link, rel, n) = parser.loss_on_tape(&mut tape, &store, h, &d, &rels).unwrap();
        let table = parser.score_table(&store, tape.value(h)).unwrap();
        let expected = table.loss(&d, &rels).unwrap();
        assert_eq!(n, 3);
        assert!((tape.scalar(link) - expected.link).abs() < 1e-9);
        assert!((tape.scalar(rel) - expected.rel).abs() < 1e-9);
    }
}
