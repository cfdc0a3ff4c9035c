//! Text prompts describing a clip, and a closed word-level vocabulary.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{ClassMap, Clip};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Ordinal,
    Statistical,
    Semantic,
    Integrated,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptRecord {
    pub kind: PromptKind,
    /// 1-based action position for ordinal and semantic prompts.
    pub position: Option<usize>,
    pub text: String,
    pub tokens: Vec<usize>,
}

/// `1st`, `2nd`, `3rd`, `4th`, ..., `11th`, `12th`, `13th`, `21st`, ...
pub fn ordinal(n: usize) -> String {
    let suffix = match (n % 10, n % 100) {
        (_, 11..=13) => "th",
        (1, _) => "st",
        (2, _) => "nd",
        (3, _) => "rd",
        _ => "th",
    };
    format!("{n}{suffix}")
}

pub fn ordinal_prompt(position: usize) -> String {
    format!("this is the {} action in the video", ordinal(position))
}

pub fn statistical_prompt(count: usize) -> String {
    format!("this video clip contains {count} actions in total")
}

pub fn semantic_prompt(position: usize, action: &str) -> String {
    format!("{}, the person is performing the action step of {action}", ordinal(position))
}

pub fn integrated_prompt(semantic: &[String]) -> String {
    semantic.join(". ")
}

/// Lowercased words, with `,` and `.` split off as their own tokens.
pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let mut word = String::new();
        for ch in raw.chars() {
            if ch == ',' || ch == '.' {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            } else {
                word.extend(ch.to_lowercase());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

pub const UNK: &str = "<unk>";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Every word the templates can produce for these classes, with positions
    /// and counts up to `max_number`. Id 0 is the unknown token.
    pub fn build(classes: &ClassMap, max_number: usize) -> Self {
        let mut texts = vec![ordinal_prompt(1), statistical_prompt(0), semantic_prompt(1, "")];
        texts.extend((0..=max_number).map(|n| format!("{n} {}", ordinal(n))));
        texts.extend((0..classes.len()).map(|c| classes.display(c)));
        let mut vocab = Self {
            words: vec![UNK.to_string()],
            index: HashMap::from([(UNK.to_string(), 0)]),
        };
        for w in texts.iter().flat_map(|t| words(t)) {
            if !vocab.index.contains_key(&w) {
                vocab.index.insert(w.clone(), vocab.words.len());
                vocab.words.push(w);
            }
        }
        vocab
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        words(text).iter().map(|w| self.index.get(w).copied().unwrap_or(0)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.word(i)).collect::<Vec<_>>().join(" ")
    }
}

fn record(kind: PromptKind, position: Option<usize>, text: String, vocab: &Vocab) -> PromptRecord {
    PromptRecord {
        kind,
        position,
        tokens: vocab.encode(&text),
        text,
    }
}

/// Ordinal and semantic prompts per action, then the statistical and the
/// integrated prompt.
pub fn render_prompts(clip: &Clip, classes: &ClassMap, vocab: &Vocab) -> Vec<PromptRecord> {
    let mut out = Vec::new();
    let mut semantic = Vec::new();
    for (i, &c) in clip.actions.iter().enumerate() {
        out.push(record(PromptKind::Ordinal, Some(i + 1), ordinal_prompt(i + 1), vocab));
        semantic.push(semantic_prompt(i + 1, &classes.display(c)));
    }
    out.push(record(PromptKind::Statistical, None, statistical_prompt(clip.actions.len()), vocab));
    for (i, text) in semantic.iter().enumerate() {
        out.push(record(PromptKind::Semantic, Some(i + 1), text.clone(), vocab));
    }
    out.push(record(PromptKind::Integrated, None, integrated_prompt(&semantic), vocab));
    out
}
