//! Property tests over random inputs.

use std::collections::BTreeMap;

use dam_core::classifier::{classify, ecec_loss};
use dam_core::config::Settings;
use dam_core::data::{
    validate_conversation, AnnotatedDialogue, Conversation, DiscourseLink, EcecInstance, Edu, Label, RelationTypeSet,
    Utterance,
};
use dam_core::evaluator::compute_f1;
use dam_core::graph::{build_graph, gate};
use dam_core::ingestion::{
    ecec_split_path, load_conversations, load_discourse_corpus, load_ecec_dataset, write_conversations,
    write_discourse_corpus, write_ecec_records, Split, CONVERSATIONS_FILE,
};
use dam_core::model::Variant;
use dam_core::nn::Linear;
use dam_core::parser::{argmax, ParseResult, ScoreTable};
use dam_core::tensor::{Matrix, ParamStore, Tape};
use proptest::prelude::*;

fn text() -> impl Strategy<Value = String> {
    "[a-z][a-z ,.!?']{0,15}[a-z]"
}

fn conversation() -> impl Strategy<Value = Conversation> {
    (
        "[a-z0-9]{1,6}",
        prop::collection::vec(
            (prop::sample::select(vec!["A", "B", "C"]), text(), prop::option::of(prop::sample::select(vec!["joy", "anger", "neutral"]))),
            1..7,
        ),
    )
        .prop_map(|(id, turns)| Conversation {
            id,
            utterances: turns
                .into_iter()
                .enumerate()
                .map(|(k, (s, t, e))| Utterance {
                    index: k + 1,
                    speaker: s.into(),
                    text: t,
                    emotion: e.map(Into::into),
                })
                .collect(),
        })
}

fn dialogue() -> impl Strategy<Value = AnnotatedDialogue> {
    (1usize..6)
        .prop_flat_map(|n| {
            (
                "[a-z0-9]{1,6}",
                prop::collection::vec((prop::sample::select(vec!["A", "B"]), text()), n),
                prop::collection::vec((0usize..100, prop::sample::select(RelationTypeSet::default().names().to_vec())), n),
            )
        })
        .prop_map(|(id, edus, heads)| {
            let links = heads
                .iter()
                .enumerate()
                .filter_map(|(k, (p, r))| {
                    let child = k + 1;
                    let parent = p % child;
                    (parent > 0).then(|| DiscourseLink {
                        parent,
                        child,
                        relation: r.clone(),
                    })
                })
                .collect();
            let edus = edus
                .into_iter()
                .enumerate()
                .map(|(k, (s, t))| Edu {
                    index: k + 1,
                    speaker: s.into(),
                    text: t,
                })
                .collect();
            AnnotatedDialogue::with_root(id, edus, links)
        })
}

fn labels(n: usize) -> impl Strategy<Value = Vec<Label>> {
    prop::collection::vec(any::<bool>().prop_map(|b| if b { Label::Cause } else { Label::NonCause }), n)
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Matrix::from_shape_vec((rows, cols), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conversations_roundtrip(convs in prop::collection::vec(conversation(), 1..5)) {
        let mut convs = convs;
        for (k, c) in convs.iter_mut().enumerate() {
            c.id = format!("{}-{k}", c.id);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(CONVERSATIONS_FILE);
        write_conversations(&path, &convs).unwrap();
        let loaded = load_conversations(&path).unwrap();
        let again = load_conversations(&path).unwrap();
        prop_assert_eq!(&loaded, &again);
        prop_assert_eq!(loaded.len(), convs.len());
        for c in &convs {
            prop_assert_eq!(&loaded[&c.id], c);
        }
    }

    #[test]
    fn dialogues_roundtrip(ds in prop::collection::vec(dialogue(), 1..4)) {
        let mut ds = ds;
        for (k, d) in ds.iter_mut().enumerate() {
            d.id = format!("{}-{k}", d.id);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_discourse_corpus(&path, &ds).unwrap();
        prop_assert_eq!(load_discourse_corpus(&path).unwrap(), ds);
    }

    #[test]
    fn validation_is_total(
        utts in prop::collection::vec((0usize..8, "[ a-z]{0,4}", "[A-C]?"), 0..8),
    ) {
        let conv = Conversation {
            id: "x".into(),
            utterances: utts
                .into_iter()
                .map(|(index, text, speaker)| Utterance { index, speaker, text, emotion: None })
                .collect(),
        };
        let _ = validate_conversation(&conv);
    }

    #[test]
    fn loader_reports_label_balance(conv in conversation(), seed in 0u64..1000) {
        let n = conv.len();
        let instances: Vec<EcecInstance> = (1..=n)
            .map(|i| EcecInstance {
                id: format!("{}-{n}-{i}", conv.id),
                conversation_id: conv.id.clone(),
                target_index: n,
                candidate_index: i,
                target_emotion: "joy".into(),
                history_indices: (1..=n).collect(),
                gold_label: Label::from_class(((seed >> i) & 1) as usize),
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        write_conversations(&dir.path().join(CONVERSATIONS_FILE), [&conv]).unwrap();
        write_ecec_records(&ecec_split_path(dir.path(), Split::Train), &instances).unwrap();
        let split = load_ecec_dataset(dir.path(), Split::Train).unwrap();
        let positives = instances.iter().filter(|i| i.gold_label == Label::Cause).count();
        prop_assert_eq!(split.report.positives, positives);
        prop_assert_eq!(split.report.negatives, n - positives);
        prop_assert_eq!(&split.instances, &instances);
        prop_assert_eq!(split, load_ecec_dataset(dir.path(), Split::Train).unwrap());
    }

    #[test]
    fn graph_has_square_edge_count(conv in conversation(), pick in prop::collection::vec(any::<bool>(), 6)) {
        let t = conv.len();
        let history: Vec<usize> = (1..=t).filter(|&k| k == t || pick[k - 1]).collect();
        let inst = EcecInstance {
            id: "i".into(),
            conversation_id: conv.id.clone(),
            target_index: t,
            candidate_index: 1,
            target_emotion: "joy".into(),
            history_indices: history.clone(),
            gold_label: Label::NonCause,
        };
        let g = build_graph(&inst, &conv, None).unwrap();
        prop_assert_eq!(g.edges.len(), history.len().pow(2));
    }

    #[test]
    fn relation_features_swap_with_direction(n in 2usize..6, a in 0usize..100, b in 0usize..100) {
        let conv = Conversation {
            id: "c".into(),
            utterances: (1..=n)
                .map(|i| Utterance { index: i, speaker: "A".into(), text: "x".into(), emotion: None })
                .collect(),
        };
        let child = 2 + b % (n - 1);
        let parent = 1 + a % (child - 1);
        let parse = ParseResult {
            parents: [(child, parent)].into_iter().collect(),
            relations: [((parent, child), 3)].into_iter().collect(),
            link_probs: BTreeMap::new(),
            rel_probs: BTreeMap::new(),
        };
        let inst = EcecInstance {
            id: "i".into(),
            conversation_id: "c".into(),
            target_index: n,
            candidate_index: 1,
            target_emotion: "joy".into(),
            history_indices: (1..=n).collect(),
            gold_label: Label::NonCause,
        };
        let g = build_graph(&inst, &conv, Some(&parse)).unwrap();
        prop_assert_eq!(g.edges[&(parent, child)].relation, Some(3));
        prop_assert_eq!(g.edges[&(child, parent)].relation, None);
        for (&(i, j), e) in &g.edges {
            if (i, j) != (parent, child) {
                prop_assert_eq!(e.relation, None);
            }
        }
    }

    #[test]
    fn gate_shrinks_nonzero_edges(e in matrix(3, 4), seed in 0u64..100) {
        prop_assume!(e.rows().into_iter().all(|r| r.iter().any(|v| v.abs() > 1e-3)));
        let mut store = ParamStore::new(seed);
        let lin = Linear::new(&mut store, "graph.gate", 4, 4, true);
        let mut tape = Tape::inference();
        let ev = tape.constant(e.clone());
        let out = gate(&mut tape, &store, &lin, ev);
        let out = tape.value(out);
        for (r, row) in e.rows().into_iter().enumerate() {
            let before: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            let after: f64 = out.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!(after < before, "row {r}: {after} >= {before}");
        }
    }

    #[test]
    fn decode_probabilities_sum_to_one(n in 1usize..6, logits in prop::collection::vec(-5.0f64..5.0, 200)) {
        let mut it = logits.into_iter().cycle();
        let k = 4;
        let link_logits: Vec<Vec<f64>> = (1..=n).map(|c| (0..c).map(|_| it.next().unwrap()).collect()).collect();
        let mut rel_logits = BTreeMap::new();
        for c in 1..=n {
            for p in 0..c {
                rel_logits.insert((p, c), (0..k).map(|_| it.next().unwrap()).collect::<Vec<_>>());
            }
        }
        let parse = ScoreTable { link_logits, rel_logits }.decode();
        for probs in parse.link_probs.values().chain(parse.rel_probs.values()) {
            prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        prop_assert_eq!(parse.link_probs.len(), n);
    }

    #[test]
    fn argmax_ignores_shared_shift(v in prop::collection::vec(-5.0f64..5.0, 1..8), shift in -100.0f64..100.0) {
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        prop_assume!(v.iter().enumerate().all(|(i, a)| v.iter().skip(i + 1).all(|b| (a - b).abs() > 1e-9)));
        prop_assert_eq!(argmax(&v), argmax(&shifted));
    }

    #[test]
    fn classify_is_shift_invariant(a in -20.0f64..20.0, b in -20.0f64..20.0, shift in -50.0f64..50.0) {
        prop_assume!((a - b).abs() > 1e-9);
        let (p, l) = classify([a, b]);
        let (q, m) = classify([a + shift, b + shift]);
        prop_assert_eq!(l, m);
        prop_assert!((p[1] - q[1]).abs() < 1e-9);
        prop_assert_eq!(classify([a, b]), (p, l));
    }

    #[test]
    fn ecec_loss_matches_cross_entropy(logits in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..20), gold in labels(20)) {
        let probs: Vec<[f64; 2]> = logits.iter().map(|&(a, b)| classify([a, b]).0).collect();
        let gold = &gold[..probs.len()];
        let oracle: f64 = logits
            .iter()
            .zip(gold)
            .map(|(&(a, b), g)| {
                let z = (a.exp() + b.exp()).ln();
                z - if g.is_cause() { b } else { a }
            })
            .sum();
        prop_assert!((ecec_loss(&probs, gold) - oracle).abs() < 1e-6);
    }

    #[test]
    fn settings_text_roundtrip(
        variant in prop::sample::select(Variant::ALL.to_vec()),
        iterations in 0usize..5,
        beta in 0.01f64..2.0,
        seed in any::<u64>(),
        buckets in prop::collection::btree_set(0usize..10, 1..5),
    ) {
        let mut s = Settings::for_variant(variant);
        s.model.gnn_iterations = iterations;
        s.train.beta = beta;
        s.train.seed = seed;
        s.distance_buckets = buckets.into_iter().collect();
        let back = Settings::from_text(&s.to_text()).unwrap();
        prop_assert_eq!(back.to_text(), s.to_text());
        prop_assert_eq!(back, s);
    }
}

/// Confusion counts by enumeration, F1 straight from its definition.
fn brute_force(pred: &[Label], gold: &[Label]) -> (f64, f64) {
    let f1 = |class: Label| {
        let tp = pred.iter().zip(gold).filter(|(p, g)| **p == class && **g == class).count() as f64;
        let predicted = pred.iter().filter(|p| **p == class).count() as f64;
        let actual = gold.iter().filter(|g| **g == class).count() as f64;
        if tp == 0.0 {
            0.0
        } else {
            let (p, r) = (tp / predicted, tp / actual);
            2.0 * p * r / (p + r)
        }
    };
    (f1(Label::Cause), f1(Label::NonCause))
}

#[test]
fn compute_f1_matches_brute_force_on_1000_label_sets() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1000);
    for _ in 0..1000 {
        let n = rng.gen_range(1..60);
        let bias = rng.gen_range(0.0..1.0);
        let gold: Vec<Label> = (0..n).map(|_| if rng.gen_bool(bias) { Label::Cause } else { Label::NonCause }).collect();
        let pred: Vec<Label> = (0..n).map(|_| if rng.gen_bool(0.5) { Label::Cause } else { Label::NonCause }).collect();
        let r = compute_f1(&pred, &gold).unwrap();
        let (pos, neg) = brute_force(&pred, &gold);
        assert!((r.pos_f1 - pos).abs() < 1e-12 && (r.neg_f1 - neg).abs() < 1e-12);
        assert!((r.macro_f1 - (pos + neg) / 2.0).abs() < 1e-12);
        let correct = pred.iter().zip(&gold).filter(|(p, g)| p == g).count();
        assert!((r.accuracy - correct as f64 / n as f64).abs() < 1e-12);
    }
}
