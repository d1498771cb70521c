//! Small built-in datasets for smoke runs, tests and benchmarks.
//!
//! The classification fixture has 8 four-turn conversations. In each the
//! last turn carries an emotion and every turn is a candidate cause. Cause
//! turns draw their words from one vocabulary and the other turns from a
//! disjoint one, so the labels are separable from the candidate text.

use std::path::Path;

use crate::data::{AnnotatedDialogue, Conversation, DiscourseLink, EcecInstance, Edu, Label, Utterance};
use crate::error::Result;
use crate::ingestion::{
    discourse_split_path, ecec_split_path, write_conversations, write_discourse_corpus, write_ecec_records, Split,
    CONVERSATIONS_FILE,
};

const CAUSES: [&str; 16] = [
    "i failed the exam today",
    "my dog ran away",
    "we won the lottery",
    "she gave me a gift",
    "the flight got cancelled",
    "my boss praised my work",
    "someone stole my bike",
    "our team lost the final",
    "i finally got the job",
    "the house burned down",
    "he forgot my birthday",
    "we are getting married",
    "the doctor said i am healthy",
    "my phone broke again",
    "they cancelled the party",
    "i passed my driving test",
];

const OTHERS: [&str; 16] = [
    "hello there",
    "okay see you soon",
    "what time is it",
    "nice weather outside",
    "let us grab lunch",
    "did you watch tv",
    "good morning everyone",
    "where is the station",
    "how was your weekend",
    "pass me the salt",
    "see you at noon",
    "is this seat free",
    "thanks for calling",
    "which bus goes north",
    "can you hear me",
    "turn left at the corner",
];

const EMOTIONS: [&str; 4] = ["happiness", "sadness", "anger", "surprise"];

/// Which of the four turns are causes, per conversation.
const PATTERNS: [[bool; 4]; 8] = [
    [true, false, true, false],
    [false, true, false, true],
    [true, true, false, false],
    [false, false, true, true],
    [true, false, false, true],
    [false, true, true, false],
    [true, false, true, false],
    [false, true, false, true],
];

fn speakers(k: usize) -> [&'static str; 4] {
    if k.is_multiple_of(2) {
        ["A", "B", "A", "B"]
    } else {
        ["A", "B", "B", "A"]
    }
}

/// Conversations and instances of one fixture fold. `offset` rotates the
/// sentence pools so that folds differ in wording.
pub fn ecec_fold(prefix: &str, conversations: usize, offset: usize) -> (Vec<Conversation>, Vec<EcecInstance>) {
    let mut convs = Vec::new();
    let mut insts = Vec::new();
    let (mut c, mut o) = (offset, offset * 3);
    for k in 0..conversations {
        let pattern = PATTERNS[(k + offset) % PATTERNS.len()];
        let sp = speakers(k);
        let id = format!("{prefix}{}", k + 1);
        let emotion = EMOTIONS[(k + offset) % EMOTIONS.len()];
        let utterances: Vec<Utterance> = (0..4)
            .map(|t| {
                let text = if pattern[t] {
                    c += 1;
                    CAUSES[(c - 1) % CAUSES.len()]
                } else {
                    o += 1;
                    OTHERS[(o - 1) % OTHERS.len()]
                };
                Utterance {
                    index: t + 1,
                    speaker: sp[t].into(),
                    text: text.into(),
                    emotion: Some(if t == 3 { emotion } else { "neutral" }.into()),
                }
            })
            .collect();
        for (t, is_cause) in pattern.iter().enumerate() {
            insts.push(EcecInstance {
                id: format!("{id}-4-{}", t + 1),
                conversation_id: id.clone(),
                target_index: 4,
                candidate_index: t + 1,
                target_emotion: emotion.into(),
                history_indices: (1..=4).collect(),
                gold_label: if *is_cause { Label::Cause } else { Label::NonCause },
            });
        }
        convs.push(Conversation { id, utterances });
    }
    (convs, insts)
}

/// The 32-instance training fixture (16 causes, 16 non-causes).
pub fn ecec_train() -> (Vec<Conversation>, Vec<EcecInstance>) {
    ecec_fold("train-", 8, 0)
}

fn dialogue(id: &str, edus: &[(&str, &str)], links: &[(usize, usize, &str)]) -> AnnotatedDialogue {
    AnnotatedDialogue::with_root(
        id,
        edus.iter()
            .enumerate()
            .map(|(k, (s, t))| Edu {
                index: k + 1,
                speaker: s.to_string(),
                text: t.to_string(),
            })
            .collect(),
        links
            .iter()
            .map(|&(p, c, r)| DiscourseLink {
                parent: p,
                child: c,
                relation: r.into(),
            })
            .collect(),
    )
}

/// Three annotated dialogues for the parser head.
pub fn discourse_dialogues() -> Vec<AnnotatedDialogue> {
    vec![
        dialogue(
            "d1",
            &[("A", "anyone have wood"), ("B", "which kind"), ("A", "any wood"), ("B", "ok i have some")],
            &[(1, 2, "Clarification_question"), (2, 3, "Elaboration"), (3, 4, "Acknowledgement")],
        ),
        dialogue(
            "d2",
            &[("C", "i need sheep"), ("D", "sorry none"), ("C", "too bad"), ("E", "i can trade ore"), ("C", "deal")],
            &[(1, 2, "Comment"), (2, 3, "Comment"), (1, 4, "Result"), (4, 5, "Acknowledgement")],
        ),
        dialogue(
            "d3",
            &[("A", "my turn"), ("B", "go ahead"), ("A", "rolling now"), ("A", "got a seven")],
            &[(1, 2, "Acknowledgement"), (1, 3, "Elaboration"), (3, 4, "Result")],
        ),
    ]
}

/// Text of a small configuration suited to the fixtures.
pub const TOY_CONFIG: &str = "\
encoder.backend = toy
encoder.hidden_dim = 32
encoder.layers = 1
encoder.heads = 2
encoder.ffn_dim = 64
encoder.max_length = 64
encoder.max_positions = 64
parser.gru_hidden = 16
parser.link_dim = 16
parser.rel_dim = 16
parser.pretrain_epochs = 20
graph.speaker_dim = 8
graph.distance_dim = 8
graph.relation_dim = 16
gnn.iterations = 2
gnn.heads = 2
train.learning_rate = 0.001
train.batch_size = 8
train.discourse_batch_size = 3
train.epochs = 200
train.seed = 7
";

/// Writes the fixture as a data directory: the training fold, two
/// held-out folds of 2 conversations each and the discourse dialogues as
/// every discourse split.
pub fn write_dataset(dir: &Path) -> Result<()> {
    let (mut convs, train) = ecec_train();
    let (vc, validation) = ecec_fold("val-", 2, 1);
    let (tc, test) = ecec_fold("test-", 2, 2);
    convs.extend(vc);
    convs.extend(tc);
    write_conversations(&dir.join(CONVERSATIONS_FILE), &convs)?;
    for (split, insts) in [(Split::Train, &train), (Split::Validation, &validation), (Split::Test, &test)] {
        write_ecec_records(&ecec_split_path(dir, split), insts)?;
        write_discourse_corpus(&discourse_split_path(dir, split), &discourse_dialogues())?;
    }
    Ok(())
}
