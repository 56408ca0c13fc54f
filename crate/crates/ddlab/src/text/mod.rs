//! Corpus ingestion: tokenizers, train/validation split, token store cache,
//! and fixed-length sequence sampling.

mod bpe;
mod sample;
mod store;

pub use bpe::Gpt2Bpe;
pub use sample::{sample_batch, Batch, EpochSampler, SamplingMode};
pub use store::{build_store, TokenStore};

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("cannot decode id {0}")]
    UnknownId(u32),
    #[error("decoded bytes are not valid utf-8")]
    InvalidUtf8,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TextError>;

/// Which half of the 90/10 split to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

/// The two first-class tokenizers: raw bytes (|V| = 256) for desk-scale runs
/// and the GPT-2 byte-pair encoder (|V| = 50257).
#[derive(Debug)]
pub enum Tokenizer {
    Bytes,
    Gpt2(Gpt2Bpe),
}

impl Tokenizer {
    /// `"bytes"` or a directory holding GPT-2 assets (vocabulary json plus
    /// ranked merge list).
    pub fn load(spec: &str) -> Result<Tokenizer> {
        if spec == "bytes" {
            Ok(Tokenizer::Bytes)
        } else {
            Ok(Tokenizer::Gpt2(Gpt2Bpe::load(Path::new(spec))?))
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            Tokenizer::Bytes => "bytes",
            Tokenizer::Gpt2(_) => "gpt2",
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenizer::Bytes => 256,
            Tokenizer::Gpt2(bpe) => bpe.vocab_size(),
        }
    }

    /// The absorbing mask category sits one past the tokenizer range.
    pub fn mask_id(&self) -> u32 {
        self.vocab_size() as u32
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        match self {
            Tokenizer::Bytes => Ok(text.bytes().map(u32::from).collect()),
            Tokenizer::Gpt2(bpe) => bpe.encode(text),
        }
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        match self {
            Tokenizer::Bytes => {
                let bytes: std::result::Result<Vec<u8>, _> = ids
                    .iter()
                    .map(|&id| u8::try_from(id).map_err(|_| TextError::UnknownId(id)))
                    .collect();
                String::from_utf8(bytes?).map_err(|_| TextError::InvalidUtf8)
            }
            Tokenizer::Gpt2(bpe) => bpe.decode(ids),
        }
    }
}
