//! Domain types shared by ingestion, the model and the evaluator.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

/// One speaker-attributed turn. `index` is 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub index: usize,
    pub speaker: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emotion: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Conversation {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Looks up an utterance by its 1-based index.
    pub fn utterance(&self, index: usize) -> Option<&Utterance> {
        self.utterances
            .get(index.wrapping_sub(1))
            .filter(|u| u.index == index)
            .or_else(|| self.utterances.iter().find(|u| u.index == index))
    }

    pub fn speakers(&self) -> Vec<&str> {
        self.utterances.iter().map(|u| u.speaker.as_str()).collect()
    }
}

/// A single violated invariant found by [`validate_conversation`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Empty,
    IndexZero { position: usize },
    Duplicate { index: usize },
    Gap { index: usize },
    EmptyText { index: usize },
    OutOfOrder { position: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => write!(f, "conversation has no utterances"),
            Violation::IndexZero { position } => {
                write!(f, "index 0 at position {position} (indices are 1-based)")
            }
            Violation::Duplicate { index } => write!(f, "duplicate index {index}"),
            Violation::Gap { index } => write!(f, "gap at index {index}"),
            Violation::EmptyText { index } => write!(f, "empty text at index {index}"),
            Violation::OutOfOrder { position } => {
                write!(f, "utterance at position {position} is out of order")
            }
        }
    }
}

/// Checks the conversation invariants and returns every violation found.
/// An empty report means the conversation is valid. Never panics.
pub fn validate_conversation(conv: &Conversation) -> Vec<Violation> {
    let mut report = Vec::new();
    if conv.utterances.is_empty() {
        report.push(Violation::Empty);
        return report;
    }
    let mut seen = BTreeSet::new();
    for (position, u) in conv.utterances.iter().enumerate() {
        if u.index == 0 {
            report.push(Violation::IndexZero { position });
        } else if !seen.insert(u.index) {
            report.push(Violation::Duplicate { index: u.index });
        }
        if u.text.trim().is_empty() {
            report.push(Violation::EmptyText { index: u.index });
        }
    }
    let max = seen.iter().next_back().copied().unwrap_or(0);
    for index in 1..=max {
        if !seen.contains(&index) {
            report.push(Violation::Gap { index });
        }
    }
    if let Some(position) = conv
        .utterances
        .windows(2)
        .position(|w| w[0].index > w[1].index)
    {
        report.push(Violation::OutOfOrder {
            position: position + 1,
        });
    }
    report
}

/// Binary gold label of an ECEC triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    NonCause = 0,
    Cause = 1,
}

impl Label {
    pub fn from_class(class: usize) -> Self {
        if class == 1 {
            Label::Cause
        } else {
            Label::NonCause
        }
    }

    pub fn class(self) -> usize {
        self as usize
    }

    pub fn is_cause(self) -> bool {
        self == Label::Cause
    }
}

pub const NEUTRAL: &str = "neutral";

/// One (target, candidate, history) classification triple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EcecInstance {
    pub id: String,
    pub conversation_id: String,
    pub target_index: usize,
    pub candidate_index: usize,
    pub target_emotion: String,
    pub history_indices: Vec<usize>,
    pub gold_label: Label,
}

impl EcecInstance {
    /// Relative utterance distance t - i.
    pub fn distance(&self) -> usize {
        self.target_index.saturating_sub(self.candidate_index)
    }

    /// Returns `(field, reason)` for the first violated invariant.
    pub fn check(&self) -> Result<(), (&'static str, String)> {
        if self.history_indices.is_empty() {
            return Err(("history_indices", "history is empty".into()));
        }
        if self.candidate_index > self.target_index {
            return Err((
                "candidate_index",
                format!(
                    "candidate {} comes after target {}",
                    self.candidate_index, self.target_index
                ),
            ));
        }
        if !self.history_indices.contains(&self.candidate_index) {
            return Err((
                "candidate_index",
                format!("candidate {} not in history", self.candidate_index),
            ));
        }
        if let Some(h) = self
            .history_indices
            .iter()
            .find(|&&h| h > self.target_index || h == 0)
        {
            return Err((
                "history_indices",
                format!("history index {h} outside 1..={}", self.target_index),
            ));
        }
        if !self.history_indices.windows(2).all(|w| w[0] < w[1]) {
            return Err((
                "history_indices",
                "history must be strictly increasing".into(),
            ));
        }
        if self.target_emotion.trim().is_empty()
            || self.target_emotion.eq_ignore_ascii_case(NEUTRAL)
        {
            return Err((
                "target_emotion",
                format!("target emotion must be non-neutral, got `{}`", self.target_emotion),
            ));
        }
        Ok(())
    }
}

/// Parent to child discourse link. Parent 0 is the synthetic root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscourseLink {
    pub parent: usize,
    pub child: usize,
    pub relation: String,
}

/// Elementary discourse unit. Index 0 is reserved for the synthetic root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edu {
    pub index: usize,
    #[serde(default)]
    pub speaker: String,
    pub text: String,
}

pub const ROOT_TEXT: &str = "<root>";

impl Edu {
    pub fn root() -> Self {
        Edu {
            index: 0,
            speaker: String::new(),
            text: ROOT_TEXT.to_string(),
        }
    }

    pub fn is_root(&self) -> bool {
        self.index == 0
    }
}

/// A dialogue with gold discourse links. After loading, `edus[0]` is the
/// synthetic root and `edus[k].index == k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedDialogue {
    pub id: String,
    pub edus: Vec<Edu>,
    pub links: Vec<DiscourseLink>,
}

impl AnnotatedDialogue {
    /// Builds a dialogue from real EDUs (1-based) and prepends the root.
    pub fn with_root(id: impl Into<String>, edus: Vec<Edu>, links: Vec<DiscourseLink>) -> Self {
        let mut all = Vec::with_capacity(edus.len() + 1);
        all.push(Edu::root());
        all.extend(edus.into_iter().filter(|e| !e.is_root()));
        AnnotatedDialogue {
            id: id.into(),
            edus: all,
            links,
        }
    }

    pub fn has_root(&self) -> bool {
        self.edus.first().is_some_and(Edu::is_root)
    }

    /// Number of real EDUs, excluding the root.
    pub fn num_edus(&self) -> usize {
        self.edus.iter().filter(|e| !e.is_root()).count()
    }

    /// Checks link invariants; returns the reason for the first violation.
    pub fn check(&self) -> Result<(), String> {
        let n = self.num_edus();
        let mut pairs = BTreeSet::new();
        for link in &self.links {
            if link.child == 0 || link.child > n {
                return Err(format!(
                    "link child {} out of range 1..={n}",
                    link.child
                ));
            }
            if link.parent > n {
                return Err(format!(
                    "link parent {} out of range 0..={n}",
                    link.parent
                ));
            }
            if link.parent >= link.child {
                return Err(format!(
                    "link {} -> {} must point from an earlier EDU",
                    link.parent, link.child
                ));
            }
            if !pairs.insert((link.parent, link.child)) {
                return Err(format!(
                    "duplicate link {} -> {}",
                    link.parent, link.child
                ));
            }
        }
        Ok(())
    }

    /// Gold parent and relation for every real EDU `1..=n`.
    ///
    /// When an EDU has several incoming links the nearest parent wins;
    /// an EDU with no incoming link attaches to the root with no relation.
    pub fn gold_heads(&self) -> Vec<(usize, Option<&str>)> {
        let n = self.num_edus();
        let mut heads: Vec<(usize, Option<&str>)> = vec![(0, None); n + 1];
        for link in &self.links {
            if link.child <= n && link.parent < link.child {
                let slot = &mut heads[link.child];
                if slot.1.is_none() || link.parent > slot.0 {
                    *slot = (link.parent, Some(link.relation.as_str()));
                }
            }
        }
        heads.remove(0);
        heads
    }

    /// Views a conversation as a dialogue of EDUs (one EDU per utterance).
    pub fn from_conversation(conv: &Conversation) -> Self {
        let edus = conv
            .utterances
            .iter()
            .map(|u| Edu {
                index: u.index,
                speaker: u.speaker.clone(),
                text: u.text.clone(),
            })
            .collect();
        AnnotatedDialogue::with_root(conv.id.clone(), edus, Vec::new())
    }
}

/// Relation labels seen in every discourse corpus release; always present.
pub const CORE_RELATIONS: [&str; 5] = [
    "Clarification_question",
    "Elaboration",
    "Result",
    "Acknowledgement",
    "Comment",
];

pub const NONE_RELATION: &str = "none";

/// Ordered inventory of the K discourse relation types. The reserved
/// `none` type is not one of the K; it gets id `K` in edge tables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationTypeSet {
    names: Vec<String>,
}

impl Default for RelationTypeSet {
    fn default() -> Self {
        Self::from_names(std::iter::empty::<&str>())
    }
}

impl RelationTypeSet {
    /// Core relations plus any extra names, deduplicated and sorted.
    pub fn from_names<S: AsRef<str>>(extra: impl IntoIterator<Item = S>) -> Self {
        let mut set: BTreeSet<String> = CORE_RELATIONS.iter().map(|s| s.to_string()).collect();
        for name in extra {
            let name = name.as_ref().trim();
            if !name.is_empty() && name != NONE_RELATION {
                set.insert(name.to_string());
            }
        }
        RelationTypeSet {
            names: set.into_iter().collect(),
        }
    }

    pub fn from_dialogues(dialogues: &[AnnotatedDialogue]) -> Self {
        Self::from_names(
            dialogues
                .iter()
                .flat_map(|d| d.links.iter().map(|l| l.relation.as_str())),
        )
    }

    /// Exact name list as stored in a checkpoint.
    pub fn from_stored(names: Vec<String>) -> Self {
        RelationTypeSet { names }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// K, the number of real relation types.
    pub fn size(&self) -> usize {
        self.names.len()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, id: usize) -> &str {
        self.names.get(id).map(String::as_str).unwrap_or(NONE_RELATION)
    }

    pub fn none_id(&self) -> usize {
        self.names.len()
    }
}

/// Conversations keyed by id.
pub type ConversationIndex = BTreeMap<String, Conversation>;
