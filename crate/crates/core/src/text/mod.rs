//! Tokenization, sentence splitting and corpus ingestion.

mod corpus;
mod tokenize;
mod vocab;

pub use corpus::{
    ingest_corpus, ingest_corpus_str, load_corpus_with_vocab, parse_records, Corpus, CorpusRecord,
    Document, IngestOptions,
};
pub use tokenize::{detokenize, split_sentences, split_words, tokenize};
pub use vocab::{
    is_sentinel, sentinel, Vocabulary, EOS, FIRST_WORD_ID, NUM_SENTINELS, PAD, SENTINEL_BASE, UNK,
};

#[derive(Debug, thiserror::Error)]
pub enum TextError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: duplicate document id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("document {0:?} has no text")]
    EmptyDocument(String),
}
