//! Question records, tokenization and resolution against a [`KgStore`].

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::KgStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerType {
    Entity,
    Time,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    SimpleEntity,
    SimpleTime,
    BeforeAfter,
    FirstLast,
    TimeJoin,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::SimpleEntity,
        Category::SimpleTime,
        Category::BeforeAfter,
        Category::FirstLast,
        Category::TimeJoin,
    ];

    pub fn is_complex(self) -> bool {
        matches!(
            self,
            Category::BeforeAfter | Category::FirstLast | Category::TimeJoin
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::SimpleEntity => "simple_entity",
            Category::SimpleTime => "simple_time",
            Category::BeforeAfter => "before_after",
            Category::FirstLast => "first_last",
            Category::TimeJoin => "time_join",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One line of a question file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub text: String,
    pub entities: Vec<String>,
    pub timestamps: Vec<String>,
    pub answers: Vec<String>,
    pub answer_type: AnswerType,
    pub category: Category,
}

pub fn parse_questions(text: &str) -> Result<Vec<QuestionRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: QuestionRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_questions(path: impl AsRef<Path>) -> Result<Vec<QuestionRecord>> {
    parse_questions(&std::fs::read_to_string(path)?)
}

/// Serializes records as JSON lines with a trailing newline.
pub fn write_questions(records: &[QuestionRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Lowercased words; `_` and `-` stay inside words so entity names remain
/// single tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_' || c == '-'))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Word vocabulary. Id 0 is reserved for unknown words.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenVocab {
    words: Vec<String>,
}

pub const OOV: usize = 0;
const OOV_WORD: &str = "<oov>";

impl TokenVocab {
    /// Builds from question texts plus every surface form the store can
    /// emit in a verbalized fact.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, store: &KgStore) -> Self {
        let mut words = BTreeSet::new();
        for t in texts {
            words.extend(tokenize(t));
        }
        for name in store
            .entities()
            .names()
            .iter()
            .chain(store.relations().names())
            .chain(store.timestamps().names())
        {
            words.extend(tokenize(name));
        }
        words.extend(["from".to_string(), "to".to_string()]);
        words.remove(OOV_WORD);
        let mut all = vec![OOV_WORD.to_string()];
        all.extend(words);
        Self { words: all }
    }

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.first().map(String::as_str) != Some(OOV_WORD) {
            return Err(Error::Config("token vocabulary must start with <oov>".into()));
        }
        if words[1..].windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("token vocabulary must be sorted and unique".into()));
        }
        Ok(Self { words })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Words after the reserved slot are sorted, so lookup is a binary search.
    pub fn id(&self, word: &str) -> usize {
        self.words[1..]
            .binary_search_by(|w| w.as_str().cmp(word))
            .map_or(OOV, |i| i + 1)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|w| self.id(w)).collect()
    }
}

/// A question resolved to vocabulary ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuestionInstance {
    pub text: String,
    pub tokens: Vec<usize>,
    pub annotated_entities: Vec<usize>,
    pub annotated_timestamps: Vec<usize>,
    /// Entity ids or timestamp ids depending on `answer_type`.
    pub answers: Vec<usize>,
    pub answer_type: AnswerType,
    pub category: Category,
}

impl QuestionInstance {
    pub fn resolve(record: &QuestionRecord, store: &KgStore, vocab: &TokenVocab) -> Result<Self> {
        let mut annotated_entities = Vec::new();
        for name in &record.entities {
            match store.entities().id(name) {
                Some(id) => annotated_entities.push(id),
                None => warn!("question {:?}: entity {name:?} is not in the graph", record.text),
            }
        }
        if annotated_entities.is_empty() {
            return Err(Error::Unanswerable(format!(
                "no annotated entity of {:?} is in the graph",
                record.text
            )));
        }
        let mut annotated_timestamps = Vec::new();
        for lit in &record.timestamps {
            match store.timestamp_id(lit) {
                Some(id) => annotated_timestamps.push(id),
                None => warn!("question {:?}: timestamp {lit:?} is not in the graph", record.text),
            }
        }
        if record.answers.is_empty() {
            return Err(Error::Parse {
                line: 0,
                message: format!("question {:?} has no answers", record.text),
            });
        }
        let mut answers = Vec::new();
        for a in &record.answers {
            let id = match record.answer_type {
                AnswerType::Entity => store.entities().id(a),
                AnswerType::Time => store.timestamp_id(a),
            };
            match id {
                Some(id) => answers.push(id),
                None => warn!("question {:?}: answer {a:?} is not in the graph", record.text),
            }
        }
        answers.sort_unstable();
        answers.dedup();
        let mut tokens = vocab.encode(&record.text);
        if tokens.is_empty() {
            tokens.push(OOV);
        }
        Ok(Self {
            text: record.text.clone(),
            tokens,
            annotated_entities,
            annotated_timestamps,
            answers,
            answer_type: record.answer_type,
            category: record.category,
        })
    }
}
