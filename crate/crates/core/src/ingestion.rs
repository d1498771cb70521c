//! Reading and writing the line-record dataset files, and laying out the
//! encoder input for one classification triple.
//!
//! Every file is UTF-8 with one JSON object per line. Blank lines are
//! skipped. Layout of a data directory:
//!
//! ```text
//! <data-dir>/conversations.jsonl       {"id", "utterances": [{"index", "speaker", "text", "emotion"?}]}
//! <data-dir>/ecec/<split>.jsonl        {"id", "conversation_id", "target_index", "candidate_index",
//!                                       "target_emotion", "history_indices"?, "label": 0|1}
//! <data-dir>/discourse/<split>.jsonl   {"id", "edus": [{"index", "speaker"?, "text"}],
//!                                       "links": [{"parent", "child", "relation"}]}
//! ```
//!
//! `history_indices` defaults to `1..=target_index` when absent.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde_json::{json, Map, Value};

use crate::data::{
    validate_conversation, AnnotatedDialogue, Conversation, ConversationIndex, DiscourseLink,
    EcecInstance, Edu, Label, Utterance,
};
use crate::error::{DamError, Result};

pub const CONVERSATIONS_FILE: &str = "conversations.jsonl";
pub const ECEC_DIR: &str = "ecec";
pub const DISCOURSE_DIR: &str = "discourse";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    /// Split sizes of the benchmark's first fold.
    pub fn expected_ecec_size(self) -> usize {
        match self {
            Split::Train => 27915,
            Split::Validation => 1185,
            Split::Test => 7224,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = DamError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "validation" | "valid" | "dev" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(DamError::config(
                "split",
                format!("unknown split `{other}` (train, validation, test)"),
            )),
        }
    }
}

/// Counts and warnings gathered while loading a file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub records: usize,
    pub positives: usize,
    pub negatives: usize,
    pub warnings: Vec<String>,
}

impl LoadReport {
    fn warn(&mut self, message: String) {
        log::warn!("{message}");
        self.warnings.push(message);
    }
}

/// One split of the ECEC benchmark together with the conversations it refers to.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub split: Split,
    pub conversations: ConversationIndex,
    pub instances: Vec<EcecInstance>,
    pub report: LoadReport,
}

impl DatasetSplit {
    pub fn conversation(&self, inst: &EcecInstance) -> &Conversation {
        &self.conversations[&inst.conversation_id]
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// Totals reported when a discourse corpus is loaded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CorpusTotals {
    pub dialogues: usize,
    pub edus: usize,
    pub links: usize,
}

impl CorpusTotals {
    pub fn of(dialogues: &[AnnotatedDialogue]) -> Self {
        CorpusTotals {
            dialogues: dialogues.len(),
            edus: dialogues.iter().map(AnnotatedDialogue::num_edus).sum(),
            links: dialogues.iter().map(|d| d.links.len()).sum(),
        }
    }
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| DamError::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| (n + 1, l.to_string()))
        .collect())
}

/// Field access on one JSON record with errors that name the record and field.
struct Record<'a> {
    path: &'a Path,
    id: String,
    obj: Map<String, Value>,
}

impl<'a> Record<'a> {
    fn parse(path: &'a Path, line_no: usize, line: &str) -> Result<Self> {
        let fallback = format!("line {line_no}");
        let value: Value = serde_json::from_str(line).map_err(|e| DamError::Record {
            path: path.to_path_buf(),
            record: fallback.clone(),
            field: "<json>".into(),
            reason: e.to_string(),
        })?;
        let Value::Object(obj) = value else {
            return Err(DamError::Record {
                path: path.to_path_buf(),
                record: fallback,
                field: "<json>".into(),
                reason: "expected an object".into(),
            });
        };
        let id = match obj.get("id") {
            Some(Value::String(s)) if !s.is_empty() => s.clone(),
            _ => {
                return Err(DamError::Record {
                    path: path.to_path_buf(),
                    record: fallback,
                    field: "id".into(),
                    reason: "missing or empty string".into(),
                })
            }
        };
        Ok(Record { path, id, obj })
    }

    fn error(&self, field: &str, reason: impl Into<String>) -> DamError {
        DamError::Record {
            path: self.path.to_path_buf(),
            record: self.id.clone(),
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    fn string(&self, field: &str) -> Result<String> {
        match self.obj.get(field) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(self.error(field, "expected a string")),
            None => Err(self.error(field, "missing")),
        }
    }

    fn index(&self, field: &str) -> Result<usize> {
        match self.obj.get(field) {
            Some(v) => v
                .as_u64()
                .map(|n| n as usize)
                .ok_or_else(|| self.error(field, "expected a non-negative integer")),
            None => Err(self.error(field, "missing")),
        }
    }

    fn array(&self, field: &str) -> Result<Option<&Vec<Value>>> {
        match self.obj.get(field) {
            Some(Value::Array(a)) => Ok(Some(a)),
            Some(Value::Null) | None => Ok(None),
            Some(_) => Err(self.error(field, "expected an array")),
        }
    }
}

fn utterance_from(rec: &Record<'_>, field: &str, k: usize, v: &Value) -> Result<Utterance> {
    let f = |name: &str| format!("{field}[{k}].{name}");
    let obj = v.as_object().ok_or_else(|| rec.error(&format!("{field}[{k}]"), "expected an object"))?;
    let index = obj
        .get("index")
        .and_then(Value::as_u64)
        .ok_or_else(|| rec.error(&f("index"), "expected a non-negative integer"))? as usize;
    let speaker = match obj.get("speaker") {
        Some(Value::String(s)) => s.clone(),
        None | Some(Value::Null) => String::new(),
        Some(_) => return Err(rec.error(&f("speaker"), "expected a string")),
    };
    let text = obj
        .get("text")
        .and_then(Value::as_str)
        .ok_or_else(|| rec.error(&f("text"), "expected a string"))?
        .to_string();
    let emotion = match obj.get("emotion") {
        Some(Value::String(s)) => Some(s.clone()),
        None | Some(Value::Null) => None,
        Some(_) => return Err(rec.error(&f("emotion"), "expected a string")),
    };
    Ok(Utterance {
        index,
        speaker,
        text,
        emotion,
    })
}

/// Reads `conversations.jsonl`; every conversation must be valid.
pub fn load_conversations(path: &Path) -> Result<ConversationIndex> {
    let mut out = BTreeMap::new();
    for (line_no, line) in read_lines(path)? {
        let rec = Record::parse(path, line_no, &line)?;
        let items = rec
            .array("utterances")?
            .ok_or_else(|| rec.error("utterances", "missing"))?;
        let utterances = items
            .iter()
            .enumerate()
            .map(|(k, v)| utterance_from(&rec, "utterances", k, v))
            .collect::<Result<Vec<_>>>()?;
        let conv = Conversation {
            id: rec.id.clone(),
            utterances,
        };
        let violations = validate_conversation(&conv);
        if !violations.is_empty() {
            let reasons: Vec<String> = violations.iter().map(ToString::to_string).collect();
            return Err(rec.error("utterances", reasons.join("; ")));
        }
        if out.insert(rec.id.clone(), conv).is_some() {
            return Err(rec.error("id", "duplicate conversation id"));
        }
    }
    Ok(out)
}

/// Parses ECEC records against a conversation index.
pub fn load_ecec_records(
    path: &Path,
    conversations: &ConversationIndex,
) -> Result<(Vec<EcecInstance>, LoadReport)> {
    let mut report = LoadReport::default();
    let mut instances = Vec::new();
    for (line_no, line) in read_lines(path)? {
        let rec = Record::parse(path, line_no, &line)?;
        let conversation_id = rec.string("conversation_id")?;
        let conv = conversations
            .get(&conversation_id)
            .ok_or_else(|| rec.error("conversation_id", format!("unknown conversation `{conversation_id}`")))?;
        let target_index = rec.index("target_index")?;
        let candidate_index = rec.index("candidate_index")?;
        if target_index == 0 || target_index > conv.len() {
            return Err(rec.error(
                "target_index",
                format!("{target_index} outside 1..={}", conv.len()),
            ));
        }
        let history_indices = match rec.array("history_indices")? {
            Some(items) => items
                .iter()
                .map(|v| v.as_u64().map(|n| n as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| rec.error("history_indices", "expected integers"))?,
            None => (1..=target_index).collect(),
        };
        let label = match rec.obj.get("label") {
            Some(Value::Number(n)) if n.as_u64() == Some(0) => Label::NonCause,
            Some(Value::Number(n)) if n.as_u64() == Some(1) => Label::Cause,
            Some(Value::Bool(b)) => {
                if *b {
                    Label::Cause
                } else {
                    Label::NonCause
                }
            }
            Some(_) => return Err(rec.error("label", "expected 0 or 1")),
            None => return Err(rec.error("label", "missing")),
        };
        let target_emotion = match rec.obj.get("target_emotion") {
            Some(Value::String(s)) => s.clone(),
            Some(_) => return Err(rec.error("target_emotion", "expected a string")),
            None => conv
                .utterance(target_index)
                .and_then(|u| u.emotion.clone())
                .ok_or_else(|| rec.error("target_emotion", "missing"))?,
        };
        let inst = EcecInstance {
            id: rec.id.clone(),
            conversation_id,
            target_index,
            candidate_index,
            target_emotion,
            history_indices,
            gold_label: label,
        };
        if let Err((field, reason)) = inst.check() {
            return Err(rec.error(field, reason));
        }
        match label {
            Label::Cause => report.positives += 1,
            Label::NonCause => report.negatives += 1,
        }
        instances.push(inst);
    }
    report.records = instances.len();
    if instances.is_empty() {
        report.warn(format!("{}: no records", path.display()));
    }
    Ok((instances, report))
}

pub fn ecec_split_path(data_dir: &Path, split: Split) -> PathBuf {
    data_dir.join(ECEC_DIR).join(format!("{split}.jsonl"))
}

pub fn discourse_split_path(data_dir: &Path, split: Split) -> PathBuf {
    data_dir.join(DISCOURSE_DIR).join(format!("{split}.jsonl"))
}

/// Loads one ECEC split from a data directory.
///
/// Negative triples are read as stored; nothing is sampled here.
pub fn load_ecec_dataset(data_dir: &Path, split: Split) -> Result<DatasetSplit> {
    let conversations = load_conversations(&data_dir.join(CONVERSATIONS_FILE))?;
    let path = ecec_split_path(data_dir, split);
    let (instances, mut report) = load_ecec_records(&path, &conversations)?;
    let expected = split.expected_ecec_size();
    if instances.len() != expected {
        report.warn(format!(
            "{split} split has {} instances (benchmark fold has {expected})",
            instances.len()
        ));
    }
    log::info!(
        "loaded {split}: {} instances ({} cause / {} non-cause)",
        instances.len(),
        report.positives,
        report.negatives
    );
    Ok(DatasetSplit {
        split,
        conversations,
        instances,
        report,
    })
}

/// Loads a discourse corpus file and prepends the synthetic root to each dialogue.
pub fn load_discourse_corpus(path: &Path) -> Result<Vec<AnnotatedDialogue>> {
    let mut out = Vec::new();
    for (line_no, line) in read_lines(path)? {
        let rec = Record::parse(path, line_no, &line)?;
        let edus = rec
            .array("edus")?
            .ok_or_else(|| rec.error("edus", "missing"))?
            .iter()
            .enumerate()
            .map(|(k, v)| {
                utterance_from(&rec, "edus", k, v).map(|u| Edu {
                    index: u.index,
                    speaker: u.speaker,
                    text: u.text,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        for (k, edu) in edus.iter().enumerate() {
            if edu.index != k + 1 {
                return Err(DamError::Dialogue {
                    dialogue: rec.id.clone(),
                    reason: format!("EDU at position {k} has index {} (expected {})", edu.index, k + 1),
                });
            }
        }
        let links = match rec.array("links")? {
            Some(items) => items
                .iter()
                .enumerate()
                .map(|(k, v)| {
                    let parent = v.get("parent").and_then(Value::as_u64);
                    let child = v.get("child").and_then(Value::as_u64);
                    let relation = v.get("relation").and_then(Value::as_str);
                    match (parent, child, relation) {
                        (Some(p), Some(c), Some(r)) => Ok(DiscourseLink {
                            parent: p as usize,
                            child: c as usize,
                            relation: r.to_string(),
                        }),
                        _ => Err(rec.error(&format!("links[{k}]"), "expected parent, child, relation")),
                    }
                })
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        let dialogue = AnnotatedDialogue::with_root(rec.id.clone(), edus, links);
        dialogue.check().map_err(|reason| DamError::Dialogue {
            dialogue: rec.id.clone(),
            reason,
        })?;
        out.push(dialogue);
    }
    let totals = CorpusTotals::of(&out);
    log::info!(
        "{}: {} dialogues, {} EDUs, {} links",
        path.display(),
        totals.dialogues,
        totals.edus,
        totals.links
    );
    Ok(out)
}

fn write_lines(path: &Path, lines: impl Iterator<Item = Value>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| DamError::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| DamError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for v in lines {
        writeln!(w, "{v}").map_err(|e| DamError::io(path, e))?;
    }
    w.flush().map_err(|e| DamError::io(path, e))
}

pub fn write_conversations<'a>(
    path: &Path,
    conversations: impl IntoIterator<Item = &'a Conversation>,
) -> Result<()> {
    write_lines(
        path,
        conversations
            .into_iter()
            .map(|c| serde_json::to_value(c).expect("conversation serializes")),
    )
}

pub fn write_ecec_records<'a>(
    path: &Path,
    instances: impl IntoIterator<Item = &'a EcecInstance>,
) -> Result<()> {
    write_lines(
        path,
        instances.into_iter().map(|i| {
            json!({
                "id": i.id,
                "conversation_id": i.conversation_id,
                "target_index": i.target_index,
                "candidate_index": i.candidate_index,
                "target_emotion": i.target_emotion,
                "history_indices": i.history_indices,
                "label": i.gold_label.class(),
            })
        }),
    )
}

/// Writes dialogues without the synthetic root.
pub fn write_discourse_corpus<'a>(
    path: &Path,
    dialogues: impl IntoIterator<Item = &'a AnnotatedDialogue>,
) -> Result<()> {
    write_lines(
        path,
        dialogues.into_iter().map(|d| {
            let edus: Vec<&Edu> = d.edus.iter().filter(|e| !e.is_root()).collect();
            json!({ "id": d.id, "edus": edus, "links": d.links })
        }),
    )
}

/// Role of one segment of the serialized encoder input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Classification,
    Emotion,
    Target,
    Candidate,
    History(usize),
    Separator,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub role: Role,
    pub text: String,
}

/// Encoder input for one triple, before tokenization.
///
/// Layout: `[CLS] [E_t] target [SEP] candidate [SEP] h_1 .. h_k [SEP]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SerializedInput {
    pub instance_id: String,
    pub segments: Vec<Segment>,
    /// History index to position in `segments`.
    pub history_segments: BTreeMap<usize, usize>,
    pub target_index: usize,
    pub candidate_index: usize,
}

impl SerializedInput {
    /// History block texts in order.
    pub fn history_texts(&self) -> Vec<&str> {
        self.history_segments
            .values()
            .map(|&p| self.segments[p].text.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SerializeOptions {
    /// Prefix history utterances with `"<speaker>: "`.
    pub speaker_prefix: bool,
}

impl Default for SerializeOptions {
    fn default() -> Self {
        SerializeOptions {
            speaker_prefix: true,
        }
    }
}

pub fn serialize_instance(
    inst: &EcecInstance,
    conv: &Conversation,
    options: SerializeOptions,
) -> SerializedInput {
    let text = |i: usize| {
        conv.utterance(i)
            .map(|u| u.text.clone())
            .unwrap_or_default()
    };
    let seg = |role, text: String| Segment { role, text };
    let mut segments = vec![
        seg(Role::Classification, String::new()),
        seg(Role::Emotion, inst.target_emotion.clone()),
        seg(Role::Target, text(inst.target_index)),
        seg(Role::Separator, String::new()),
        seg(Role::Candidate, text(inst.candidate_index)),
        seg(Role::Separator, String::new()),
    ];
    let mut history_segments = BTreeMap::new();
    for &h in &inst.history_indices {
        let body = match (options.speaker_prefix, conv.utterance(h)) {
            (true, Some(u)) if !u.speaker.is_empty() => format!("{}: {}", u.speaker, u.text),
            _ => text(h),
        };
        history_segments.insert(h, segments.len());
        segments.push(seg(Role::History(h), body));
    }
    segments.push(seg(Role::Separator, String::new()));
    SerializedInput {
        instance_id: inst.id.clone(),
        segments,
        history_segments,
        target_index: inst.target_index,
        candidate_index: inst.candidate_index,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv3() -> Conversation {
        Conversation {
            id: "c1".into(),
            utterances: ["A", "B", "A"]
                .iter()
                .enumerate()
                .map(|(k, s)| Utterance {
                    index: k + 1,
                    speaker: s.to_string(),
                    text: format!("u{}", k + 1),
                    emotion: Some(if k == 2 { "happiness" } else { "neutral" }.into()),
                })
                .collect(),
        }
    }

    fn inst(t: usize, i: usize, history: Vec<usize>) -> EcecInstance {
        EcecInstance {
            id: format!("r-{t}-{i}"),
            conversation_id: "c1".into(),
            target_index: t,
            candidate_index: i,
            target_emotion: "happiness".into(),
            history_indices: history,
            gold_label: Label::Cause,
        }
    }

    #[test]
    fn layout_follows_rule() {
        let s = serialize_instance(&inst(3, 2, vec![1, 2, 3]), &conv3(), SerializeOptions { speaker_prefix: false });
        let got: Vec<(Role, &str)> = s.segments.iter().map(|s| (s.role, s.text.as_str())).collect();
        let expected = vec![
            (Role::Classification, ""),
            (Role::Emotion, "happiness"),
            (Role::Target, "u3"),
            (Role::Separator, ""),
            (Role::Candidate, "u2"),
            (Role::Separator, ""),
            (Role::History(1), "u1"),
            (Role::History(2), "u2"),
            (Role::History(3), "u3"),
            (Role::Separator, ""),
        ];
        assert_eq!(got, expected);
        assert_eq!(s.history_texts(), vec!["u1", "u2", "u3"]);
    }

    #[test]
    fn speaker_prefix_and_single_history() {
        let s = serialize_instance(&inst(1, 1, vec![1]), &conv3(), SerializeOptions::default());
        assert_eq!(s.history_texts(), vec!["A: u1"]);
        let s = serialize_instance(&inst(1, 1, vec![1]), &conv3(), SerializeOptions { speaker_prefix: false });
        assert_eq!(s.history_texts(), vec!["u1"]);
    }

    #[test]
    fn history_block_independent_of_candidate() {
        let a = serialize_instance(&inst(3, 1, vec![1, 2, 3]), &conv3(), SerializeOptions::default());
        let b = serialize_instance(&inst(3, 2, vec![1, 2, 3]), &conv3(), SerializeOptions::default());
        assert_eq!(a.segments[6..], b.segments[6..]);
        assert_ne!(a.segments[4], b.segments[4]);
    }

    fn write(dir: &Path, rel: &str, body: &str) {
        let path = dir.join(rel);
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        let mut f = fs::File::create(path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
    }

    #[test]
    fn rejects_candidate_after_target() {
        let dir = tempfile::tempdir().unwrap();
        write_conversations(&dir.path().join(CONVERSATIONS_FILE), [&conv3()]).unwrap();
        write(
            dir.path(),
            "ecec/train.jsonl",
            concat!(
                r#"{"id":"ok-1","conversation_id":"c1","target_index":3,"candidate_index":1,"target_emotion":"happiness","label":1}"#, "\n",
                r#"{"id":"ok-2","conversation_id":"c1","target_index":3,"candidate_index":3,"target_emotion":"happiness","label":0}"#, "\n",
                r#"{"id":"bad-3","conversation_id":"c1","target_index":2,"candidate_index":3,"target_emotion":"happiness","label":0}"#, "\n",
            ),
        );
        let err = load_ecec_dataset(dir.path(), Split::Train).unwrap_err();
        match err {
            DamError::Record { record, field, .. } => {
                assert_eq!(record, "bad-3");
                assert_eq!(field, "candidate_index");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn empty_file_warns() {
        let dir = tempfile::tempdir().unwrap();
        write_conversations(&dir.path().join(CONVERSATIONS_FILE), [&conv3()]).unwrap();
        write(dir.path(), "ecec/test.jsonl", "");
        let split = load_ecec_dataset(dir.path(), Split::Test).unwrap();
        assert!(split.is_empty());
        assert!(!split.report.warnings.is_empty());
    }

    #[test]
    fn missing_file_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_ecec_dataset(dir.path(), Split::Train).unwrap_err();
        assert!(matches!(err, DamError::MissingFile { .. }));
    }

    #[test]
    fn malformed_record_names_field() {
        let dir = tempfile::tempdir().unwrap();
        write_conversations(&dir.path().join(CONVERSATIONS_FILE), [&conv3()]).unwrap();
        write(
            dir.path(),
            "ecec/train.jsonl",
            r#"{"id":"r9","conversation_id":"c1","target_index":"three","candidate_index":1,"label":1}"#,
        );
        let err = load_ecec_dataset(dir.path(), Split::Train).unwrap_err();
        assert!(matches!(err, DamError::Record { ref record, ref field, .. } if record == "r9" && field == "target_index"));
    }

    #[test]
    fn minimal_discourse_dialogue() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            "d.jsonl",
            r#"{"id":"d1","edus":[{"index":1,"speaker":"A","text":"hi"},{"index":2,"speaker":"B","text":"hello"}],"links":[{"parent":1,"child":2,"relation":"Comment"}]}"#,
        );
        let corpus = load_discourse_corpus(&dir.path().join("d.jsonl")).unwrap();
        assert_eq!(corpus.len(), 1);
        assert_eq!(corpus[0].edus.len(), 3);
        assert!(corpus[0].has_root());
        assert_eq!(CorpusTotals::of(&corpus), CorpusTotals { dialogues: 1, edus: 2, links: 1 });
    }

    #[test]
    fn out_of_range_link_names_dialogue() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            "d.jsonl",
            r#"{"id":"d7","edus":[{"index":1,"text":"a"},{"index":2,"text":"b"},{"index":3,"text":"c"}],"links":[{"parent":1,"child":5,"relation":"Comment"}]}"#,
        );
        let err = load_discourse_corpus(&dir.path().join("d.jsonl")).unwrap_err();
        assert!(matches!(err, DamError::Dialogue { ref dialogue, .. } if dialogue == "d7"));
    }
}
