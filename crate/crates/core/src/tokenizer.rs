//! Tokenizers for the two encoder backends.
//!
//! The toy backend uses a word-level vocabulary built from the training
//! text. The pretrained backend wraps a `tokenizer.json` from a model
//! checkpoint. Both add one special token per emotion label so the emotion
//! marker never fragments into sub-words.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use tokenizers::AddedToken;

use crate::error::{DamError, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

pub const VOCAB_FILE: &str = "vocab.txt";
pub const HF_FILE: &str = "tokenizer.json";
pub const EMOTIONS_FILE: &str = "emotions.txt";

pub fn emotion_token(emotion: &str) -> String {
    format!("[E:{}]", emotion.trim().to_lowercase())
}

/// Lowercased words and single punctuation characters.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '\'' {
            current.extend(ch.to_lowercase());
        } else {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordVocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl WordVocab {
    /// Builds a vocabulary: specials, then emotion tokens, then words with
    /// at least `min_count` occurrences ordered by frequency and spelling.
    pub fn build<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        emotions: impl IntoIterator<Item = &'a str>,
        min_count: usize,
    ) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            for w in split_words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let emotions: BTreeSet<String> = emotions.into_iter().map(emotion_token).collect();
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count.max(1))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens: Vec<String> = [PAD, UNK, CLS, SEP]
            .iter()
            .map(|s| s.to_string())
            .chain(emotions)
            .chain(words.into_iter().map(|(w, _)| w))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        WordVocab { tokens, index }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(1)
    }
}

pub struct HfTokenizer {
    inner: tokenizers::Tokenizer,
    cls: u32,
    sep: u32,
    unk: u32,
    emotions: BTreeMap<String, u32>,
}

impl std::fmt::Debug for HfTokenizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HfTokenizer")
            .field("vocab_size", &self.inner.get_vocab_size(true))
            .field("emotions", &self.emotions)
            .finish()
    }
}

impl Clone for HfTokenizer {
    fn clone(&self) -> Self {
        HfTokenizer {
            inner: self.inner.clone(),
            cls: self.cls,
            sep: self.sep,
            unk: self.unk,
            emotions: self.emotions.clone(),
        }
    }
}

fn first_token(inner: &tokenizers::Tokenizer, candidates: &[&str]) -> Option<u32> {
    candidates.iter().find_map(|t| inner.token_to_id(t))
}

impl HfTokenizer {
    /// Loads `tokenizer.json` and registers one special token per emotion.
    pub fn load<'a>(path: &Path, emotions: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        if !path.exists() {
            return Err(DamError::MissingFile {
                path: path.to_path_buf(),
            });
        }
        let mut inner = tokenizers::Tokenizer::from_file(path)
            .map_err(|e| DamError::Tokenizer(format!("{}: {e}", path.display())))?;
        let cls = first_token(&inner, &["<s>", CLS])
            .ok_or_else(|| DamError::Tokenizer("no <s> or [CLS] token".into()))?;
        let sep = first_token(&inner, &["</s>", SEP])
            .ok_or_else(|| DamError::Tokenizer("no </s> or [SEP] token".into()))?;
        let unk = first_token(&inner, &["<unk>", UNK]).unwrap_or(0);
        let wanted: BTreeSet<String> = emotions.into_iter().map(emotion_token).collect();
        let added: Vec<AddedToken> = wanted
            .iter()
            .filter(|t| inner.token_to_id(t).is_none())
            .map(|t| AddedToken::from(t.clone(), true))
            .collect();
        inner.add_special_tokens(&added);
        let emotions = wanted
            .into_iter()
            .filter_map(|t| inner.token_to_id(&t).map(|id| (t, id)))
            .collect();
        Ok(HfTokenizer {
            inner,
            cls,
            sep,
            unk,
            emotions,
        })
    }
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Tokenizer {
    Word(WordVocab),
    Pretrained(HfTokenizer),
}

impl Tokenizer {
    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        match self {
            Tokenizer::Word(v) => split_words(text).iter().map(|w| v.id(w)).collect(),
            Tokenizer::Pretrained(t) => t
                .inner
                .encode(text, false)
                .map(|e| e.get_ids().to_vec())
                .unwrap_or_default(),
        }
    }

    pub fn cls_id(&self) -> u32 {
        match self {
            Tokenizer::Word(v) => v.id(CLS),
            Tokenizer::Pretrained(t) => t.cls,
        }
    }

    pub fn sep_id(&self) -> u32 {
        match self {
            Tokenizer::Word(v) => v.id(SEP),
            Tokenizer::Pretrained(t) => t.sep,
        }
    }

    pub fn unk_id(&self) -> u32 {
        match self {
            Tokenizer::Word(v) => v.id(UNK),
            Tokenizer::Pretrained(t) => t.unk,
        }
    }

    /// Id of the emotion special token; unseen emotions map to the unknown token.
    pub fn emotion_id(&self, emotion: &str) -> u32 {
        let token = emotion_token(emotion);
        match self {
            Tokenizer::Word(v) => v.id(&token),
            Tokenizer::Pretrained(t) => t.emotions.get(&token).copied().unwrap_or(t.unk),
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenizer::Word(v) => v.tokens.len(),
            Tokenizer::Pretrained(t) => t.inner.get_vocab_size(true),
        }
    }

    /// Writes tokenizer assets into a checkpoint directory.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| DamError::io(dir, e))?;
        match self {
            Tokenizer::Word(v) => {
                let path = dir.join(VOCAB_FILE);
                fs::write(&path, v.tokens.join("\n") + "\n").map_err(|e| DamError::io(&path, e))
            }
            Tokenizer::Pretrained(t) => {
                let path = dir.join(HF_FILE);
                t.inner
                    .save(&path, false)
                    .map_err(|e| DamError::Tokenizer(format!("{}: {e}", path.display())))?;
                let emotions: Vec<&str> = t
                    .emotions
                    .keys()
                    .map(|k| k.trim_start_matches("[E:").trim_end_matches(']'))
                    .collect();
                let path = dir.join(EMOTIONS_FILE);
                fs::write(&path, emotions.join("\n") + "\n").map_err(|e| DamError::io(&path, e))
            }
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let vocab = dir.join(VOCAB_FILE);
        if vocab.exists() {
            let text = fs::read_to_string(&vocab).map_err(|e| DamError::io(&vocab, e))?;
            return Ok(Tokenizer::Word(WordVocab::from_tokens(
                text.lines().map(str::to_string).collect(),
            )));
        }
        let emotions_path = dir.join(EMOTIONS_FILE);
        let emotions = fs::read_to_string(&emotions_path).unwrap_or_default();
        Ok(Tokenizer::Pretrained(HfTokenizer::load(
            &dir.join(HF_FILE),
            emotions.lines().filter(|l| !l.is_empty()),
        )?))
    }
}
