//! Tokenized corpus with a deterministic 90/10 character-level split and a
//! binary cache file.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Result, Split, TextError, Tokenizer};

const MAGIC: &[u8; 6] = b"DDTOK1";

/// Immutable tokenized corpus. The split happens on the raw text before
/// tokenization so it does not depend on the tokenizer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStore {
    pub train: Vec<u32>,
    pub validation: Vec<u32>,
    pub tokenizer_id: String,
    pub vocab_size: usize,
    pub corpus_sha256: String,
}

impl TokenStore {
    pub fn split(&self, which: Split) -> &[u32] {
        match which {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
        }
    }

    /// Serialize to the DDTOK1 container: magic, tokenizer id, vocab size,
    /// corpus checksum, then the two little-endian u32 id arrays with
    /// u64 lengths.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        write_str(&mut buf, &self.tokenizer_id);
        buf.extend_from_slice(&(self.vocab_size as u64).to_le_bytes());
        write_str(&mut buf, &self.corpus_sha256);
        write_ids(&mut buf, &self.train);
        write_ids(&mut buf, &self.validation);
        let mut f = std::fs::File::create(path).map_err(|source| TextError::Io {
            path: path.display().to_string(),
            source,
        })?;
        f.write_all(&buf).map_err(|source| TextError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<TokenStore> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| TextError::Io {
                path: path.display().to_string(),
                source,
            })?;
        let mut cur = 0usize;
        let take = |cur: &mut usize, n: usize| -> Result<&[u8]> {
            if *cur + n > bytes.len() {
                return Err(TextError::Parse {
                    file: path.display().to_string(),
                    line: 0,
                    msg: "truncated store file".into(),
                });
            }
            let s = &bytes[*cur..*cur + n];
            *cur += n;
            Ok(s)
        };
        if take(&mut cur, 6)? != MAGIC {
            return Err(TextError::Parse {
                file: path.display().to_string(),
                line: 0,
                msg: "bad magic, not a DDTOK1 file".into(),
            });
        }
        let tokenizer_id = read_str(&bytes, &mut cur, path)?;
        let vocab_size = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()) as usize;
        let corpus_sha256 = read_str(&bytes, &mut cur, path)?;
        let train = read_ids(&bytes, &mut cur, path)?;
        let validation = read_ids(&bytes, &mut cur, path)?;
        let store = TokenStore {
            train,
            validation,
            tokenizer_id,
            vocab_size,
            corpus_sha256,
        };
        if let Some(&bad) = store
            .train
            .iter()
            .chain(&store.validation)
            .find(|&&id| id as usize >= store.vocab_size)
        {
            return Err(TextError::Parse {
                file: path.display().to_string(),
                line: 0,
                msg: format!("token id {bad} exceeds vocab {}", store.vocab_size),
            });
        }
        Ok(store)
    }
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u64).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn write_ids(buf: &mut Vec<u8>, ids: &[u32]) {
    buf.extend_from_slice(&(ids.len() as u64).to_le_bytes());
    for &id in ids {
        buf.extend_from_slice(&id.to_le_bytes());
    }
}

fn read_str(bytes: &[u8], cur: &mut usize, path: &Path) -> Result<String> {
    let err = || TextError::Parse {
        file: path.display().to_string(),
        line: 0,
        msg: "truncated store file".into(),
    };
    if *cur + 8 > bytes.len() {
        return Err(err());
    }
    let len = u64::from_le_bytes(bytes[*cur..*cur + 8].try_into().unwrap()) as usize;
    *cur += 8;
    if *cur + len > bytes.len() {
        return Err(err());
    }
    let s = String::from_utf8(bytes[*cur..*cur + len].to_vec())
        .map_err(|_| TextError::InvalidUtf8)?;
    *cur += len;
    Ok(s)
}

fn read_ids(bytes: &[u8], cur: &mut usize, path: &Path) -> Result<Vec<u32>> {
    let err = || TextError::Parse {
        file: path.display().to_string(),
        line: 0,
        msg: "truncated store file".into(),
    };
    if *cur + 8 > bytes.len() {
        return Err(err());
    }
    let len = u64::from_le_bytes(bytes[*cur..*cur + 8].try_into().unwrap()) as usize;
    *cur += 8;
    if *cur + 4 * len > bytes.len() {
        return Err(err());
    }
    let mut ids = Vec::with_capacity(len);
    for i in 0..len {
        ids.push(u32::from_le_bytes(
            bytes[*cur + 4 * i..*cur + 4 * i + 4].try_into().unwrap(),
        ));
    }
    *cur += 4 * len;
    Ok(ids)
}

/// Split `corpus` at a character boundary, tokenize each side independently,
/// and package the result. Returns the store plus a warning flag set when
/// the validation side came out empty.
pub fn build_store(
    corpus: &str,
    tokenizer: &Tokenizer,
    split_fraction: f64,
) -> Result<(TokenStore, bool)> {
    if corpus.is_empty() {
        return Err(TextError::EmptyCorpus);
    }
    if !(0.0..=1.0).contains(&split_fraction) {
        return Err(TextError::Invalid(format!(
            "split fraction {split_fraction} outside [0, 1]"
        )));
    }
    let n_chars = corpus.chars().count();
    let split_chars = (n_chars as f64 * split_fraction).floor() as usize;
    let byte_idx = if split_chars >= n_chars {
        corpus.len()
    } else {
        corpus
            .char_indices()
            .nth(split_chars)
            .map(|(i, _)| i)
            .unwrap_or(corpus.len())
    };
    let train = tokenizer.encode(&corpus[..byte_idx])?;
    let validation = tokenizer.encode(&corpus[byte_idx..])?;
    let empty_validation = validation.is_empty();

    let mut hasher = Sha256::new();
    hasher.update(corpus.as_bytes());
    let corpus_sha256 = format!("{:x}", hasher.finalize());

    Ok((
        TokenStore {
            train,
            validation,
            tokenizer_id: tokenizer.id().to_string(),
            vocab_size: tokenizer.vocab_size(),
            corpus_sha256,
        },
        empty_validation,
    ))
}
