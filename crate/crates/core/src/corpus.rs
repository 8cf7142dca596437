//! Typed records for pretraining text, task datasets and knowledge bases,
//! together with their on-disk formats.
//!
//! * documents: UTF-8 text, documents separated by one or more blank lines
//! * seq2seq, linking and NER datasets: one JSON object per line
//! * knowledge base: `concept_id<TAB>name` per line

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: usize,
    pub text: String,
}

impl Document {
    pub fn new(id: usize, text: impl Into<String>) -> Self {
        Self {
            id,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceTargetPair {
    pub source: String,
    pub target: String,
}

impl SourceTargetPair {
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            target: target.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkingExample {
    #[serde(default)]
    pub context_left: String,
    pub mention: String,
    #[serde(default)]
    pub context_right: String,
    pub gold_concept: String,
}

/// An entity given by the (sorted, deduplicated) word positions it covers.
/// Gaps make it discontinuous; overlap with another annotation makes it nested.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntityAnnotation {
    pub word_indices: Vec<usize>,
    #[serde(rename = "type")]
    pub entity_type: String,
}

impl EntityAnnotation {
    pub fn new(mut word_indices: Vec<usize>, entity_type: impl Into<String>) -> Self {
        word_indices.sort_unstable();
        word_indices.dedup();
        Self {
            word_indices,
            entity_type: entity_type.into(),
        }
    }

    pub fn first(&self) -> usize {
        self.word_indices[0]
    }

    pub fn last(&self) -> usize {
        *self.word_indices.last().expect("entity has at least one word")
    }

    pub fn is_discontinuous(&self) -> bool {
        self.word_indices.windows(2).any(|w| w[1] != w[0] + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NerExample {
    pub words: Vec<String>,
    pub entities: Vec<EntityAnnotation>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnowledgeBase {
    pub entries: Vec<(String, String)>,
    pub name_to_concepts: BTreeMap<String, BTreeSet<String>>,
}

impl KnowledgeBase {
    pub fn from_entries<I, A, B>(entries: I) -> Self
    where
        I: IntoIterator<Item = (A, B)>,
        A: Into<String>,
        B: Into<String>,
    {
        let mut kb = KnowledgeBase::default();
        for (id, name) in entries {
            kb.insert(id.into(), name.into());
        }
        kb
    }

    /// Adds a (concept, name) pair; duplicates are ignored.
    pub fn insert(&mut self, concept_id: String, name: String) -> bool {
        let ids = self.name_to_concepts.entry(name.clone()).or_default();
        if !ids.insert(concept_id.clone()) {
            return false;
        }
        self.entries.push((concept_id, name));
        true
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.name_to_concepts.keys().map(String::as_str)
    }

    pub fn concepts_for(&self, name: &str) -> Option<&BTreeSet<String>> {
        self.name_to_concepts.get(name)
    }

    pub fn has_concept(&self, concept_id: &str) -> bool {
        self.entries.iter().any(|(id, _)| id == concept_id)
    }

    /// All names carrying `concept_id`, sorted.
    pub fn names_of(&self, concept_id: &str) -> Vec<&str> {
        let mut names: Vec<&str> = self
            .entries
            .iter()
            .filter(|(id, _)| id == concept_id)
            .map(|(_, n)| n.as_str())
            .collect();
        names.sort_unstable();
        names.dedup();
        names
    }
}

fn read_utf8(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    String::from_utf8(bytes).map_err(|e| Error::Utf8 {
        path: path.to_path_buf(),
        offset: e.utf8_error().valid_up_to(),
    })
}

/// Splits text into blank-line separated, trimmed, non-empty documents.
pub fn parse_documents(text: &str) -> Vec<Document> {
    let mut docs = Vec::new();
    let mut block = String::new();
    let flush = |block: &mut String, docs: &mut Vec<Document>| {
        let trimmed = block.trim();
        if !trimmed.is_empty() {
            docs.push(Document::new(docs.len(), trimmed));
        }
        block.clear();
    };
    for line in text.lines() {
        if line.trim().is_empty() {
            flush(&mut block, &mut docs);
        } else {
            if !block.is_empty() {
                block.push('\n');
            }
            block.push_str(line);
        }
    }
    flush(&mut block, &mut docs);
    docs
}

pub fn load_documents(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    Ok(parse_documents(&read_utf8(path.as_ref())?))
}

pub fn write_documents(path: impl AsRef<Path>, docs: &[Document]) -> Result<()> {
    let path = path.as_ref();
    let text = docs
        .iter()
        .map(|d| d.text.trim())
        .collect::<Vec<_>>()
        .join("\n\n");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Splits after `.`, `!` or `?` when followed by whitespace or the end of text.
/// No abbreviation handling: "Dr. Smith" yields two sentences.
pub fn split_sentences(doc: &Document) -> Vec<String> {
    split_sentences_str(&doc.text)
}

pub fn split_sentences_str(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for word in text.split_whitespace() {
        current.push(word);
        if word.ends_with(['.', '!', '?']) {
            sentences.push(current.join(" "));
            current.clear();
        }
    }
    if !current.is_empty() {
        sentences.push(current.join(" "));
    }
    sentences
}

fn parse_jsonl<T, F>(path: &Path, text: &str, mut validate: F) -> Result<Vec<T>>
where
    T: for<'de> Deserialize<'de>,
    F: FnMut(&T) -> std::result::Result<(), String>,
{
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        validate(&record).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        })?;
        out.push(record);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("records serialize"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_seq2seq_dataset(path: impl AsRef<Path>) -> Result<Vec<SourceTargetPair>> {
    let path = path.as_ref();
    parse_jsonl(path, &read_utf8(path)?, |p: &SourceTargetPair| {
        if p.source.trim().is_empty() || p.target.trim().is_empty() {
            Err("empty source or target".into())
        } else {
            Ok(())
        }
    })
}

pub fn write_seq2seq_dataset(path: impl AsRef<Path>, pairs: &[SourceTargetPair]) -> Result<()> {
    write_jsonl(path.as_ref(), pairs)
}

pub fn load_linking_dataset(path: impl AsRef<Path>) -> Result<Vec<LinkingExample>> {
    let path = path.as_ref();
    parse_jsonl(path, &read_utf8(path)?, |ex: &LinkingExample| {
        if ex.mention.trim().is_empty() {
            Err("empty mention".into())
        } else if ex.gold_concept.is_empty() {
            Err("empty gold_concept".into())
        } else {
            Ok(())
        }
    })
}

pub fn write_linking_dataset(path: impl AsRef<Path>, examples: &[LinkingExample]) -> Result<()> {
    write_jsonl(path.as_ref(), examples)
}

pub fn load_ner_dataset(path: impl AsRef<Path>) -> Result<Vec<NerExample>> {
    let path = path.as_ref();
    let mut examples = parse_jsonl(path, &read_utf8(path)?, validate_ner)?;
    for ex in &mut examples {
        for ent in &mut ex.entities {
            ent.word_indices.sort_unstable();
            ent.word_indices.dedup();
        }
    }
    Ok(examples)
}

fn validate_ner(ex: &NerExample) -> std::result::Result<(), String> {
    for (k, ent) in ex.entities.iter().enumerate() {
        if ent.word_indices.is_empty() {
            return Err(format!("entity {k} has no word indices"));
        }
        if let Some(&bad) = ent.word_indices.iter().find(|&&i| i >= ex.words.len()) {
            return Err(format!(
                "entity {k} references word {bad} but the record has {} words",
                ex.words.len()
            ));
        }
    }
    Ok(())
}

pub fn write_ner_dataset(path: impl AsRef<Path>, examples: &[NerExample]) -> Result<()> {
    write_jsonl(path.as_ref(), examples)
}

pub fn parse_kb(path: &Path, text: &str) -> Result<KnowledgeBase> {
    let mut kb = KnowledgeBase::default();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(id), Some(name), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "expected exactly one tab (concept_id<TAB>name)".into(),
            });
        };
        if id.is_empty() || name.trim().is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "empty concept id or name".into(),
            });
        }
        kb.insert(id.to_string(), name.to_string());
    }
    Ok(kb)
}

pub fn load_kb(path: impl AsRef<Path>) -> Result<KnowledgeBase> {
    let path = path.as_ref();
    parse_kb(path, &read_utf8(path)?)
}

pub fn write_kb(path: impl AsRef<Path>, kb: &KnowledgeBase) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for (id, name) in &kb.entries {
        let _ = writeln!(text, "{id}\t{name}");
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
