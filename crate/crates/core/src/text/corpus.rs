use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{split_sentences, split_words, tokenize, TextError, Vocabulary};

/// One line of a corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub text: String,
}

/// A tokenized document: ordered sentences of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub sentences: Vec<Vec<u32>>,
    pub raw_text: String,
}

impl Document {
    pub fn from_text(
        doc_id: impl Into<String>,
        text: &str,
        vocab: &Vocabulary,
    ) -> Result<Self, TextError> {
        let doc_id = doc_id.into();
        let sentences: Vec<Vec<u32>> = split_sentences(text)
            .iter()
            .map(|s| tokenize(s, vocab))
            .collect();
        if sentences.is_empty() {
            return Err(TextError::EmptyDocument(doc_id));
        }
        Ok(Self {
            doc_id,
            sentences,
            raw_text: text.to_string(),
        })
    }

    /// All sentence tokens in order.
    pub fn tokens(&self) -> Vec<u32> {
        self.sentences.concat()
    }

    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }

    /// A document built from a subset of this one's sentences.
    pub fn subset(&self, indices: &[usize]) -> Document {
        let raw = split_sentences(&self.raw_text);
        let raw_text = if raw.len() == self.sentences.len() {
            indices
                .iter()
                .map(|&i| raw[i].as_str())
                .collect::<Vec<_>>()
                .join(" ")
        } else {
            String::new()
        };
        Document {
            doc_id: self.doc_id.clone(),
            sentences: indices.iter().map(|&i| self.sentences[i].clone()).collect(),
            raw_text,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub documents: Vec<Document>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(documents: Vec<Document>) -> Self {
        let index = documents
            .iter()
            .enumerate()
            .map(|(i, d)| (d.doc_id.clone(), i))
            .collect();
        Self { documents, index }
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        if self.index.len() == self.documents.len() {
            self.index.get(doc_id).map(|&i| &self.documents[i])
        } else {
            self.documents.iter().find(|d| d.doc_id == doc_id)
        }
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IngestOptions {
    pub min_count: usize,
    pub max_types: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            min_count: 2,
            max_types: 50_000,
        }
    }
}

pub fn parse_records(text: &str) -> Result<Vec<CorpusRecord>, TextError> {
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(line).map_err(|e| TextError::Malformed {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if !seen.insert(rec.id.clone()) {
            return Err(TextError::DuplicateId {
                line: i + 1,
                id: rec.id,
            });
        }
        records.push(rec);
    }
    Ok(records)
}

/// Builds a vocabulary from the corpus words, then sentence-splits and
/// tokenizes every document.
pub fn ingest_corpus_str(
    text: &str,
    opts: IngestOptions,
) -> Result<(Corpus, Vocabulary), TextError> {
    let records = parse_records(text)?;
    let mut counts: HashMap<String, usize> = HashMap::new();
    for r in &records {
        for w in split_words(&r.text) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    let vocab = Vocabulary::from_counts(&counts, opts.min_count, opts.max_types);
    let docs = records
        .iter()
        .map(|r| Document::from_text(r.id.clone(), &r.text, &vocab))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((Corpus::new(docs), vocab))
}

pub fn ingest_corpus(path: &Path, opts: IngestOptions) -> Result<(Corpus, Vocabulary), TextError> {
    ingest_corpus_str(&std::fs::read_to_string(path)?, opts)
}

/// Tokenizes a corpus file with an existing vocabulary.
pub fn load_corpus_with_vocab(path: &Path, vocab: &Vocabulary) -> Result<Corpus, TextError> {
    let records = parse_records(&std::fs::read_to_string(path)?)?;
    let docs = records
        .iter()
        .map(|r| Document::from_text(r.id.clone(), &r.text, vocab))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Corpus::new(docs))
}
