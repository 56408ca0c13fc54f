//! GPT-2 byte-pair encoder: byte-to-unicode mapping, the GPT-2
//! pre-tokenization split, and greedy lowest-rank merges.

use std::collections::HashMap;
use std::path::Path;

use regex::Regex;

use super::{Result, TextError};

/// The GPT-2 split pattern minus its trailing-whitespace lookahead
/// (`\s+(?!\S)`), which the scan loop below reproduces by hand: a whitespace
/// run followed by a non-space yields its last character back so it can
/// prefix the next word.
const PRETOKEN_PATTERN: &str = r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+";

#[derive(Debug)]
pub struct Gpt2Bpe {
    encoder: HashMap<String, u32>,
    decoder: HashMap<u32, String>,
    ranks: HashMap<(String, String), usize>,
    byte_to_char: [char; 256],
    char_to_byte: HashMap<char, u8>,
    pattern: Regex,
}

/// GPT-2's reversible byte-to-unicode table: printable latin bytes map to
/// themselves, everything else is shifted into 256+.
fn byte_unicode_table() -> ([char; 256], HashMap<char, u8>) {
    let mut direct: Vec<u16> = Vec::new();
    direct.extend(u16::from(b'!')..=u16::from(b'~'));
    direct.extend(0xA1..=0xAC_u16);
    direct.extend(0xAE..=0xFF_u16);
    let mut b2c = ['\0'; 256];
    let mut c2b = HashMap::new();
    let mut n = 0u16;
    for b in 0..=255u16 {
        let c = if direct.contains(&b) {
            char::from_u32(b as u32).unwrap()
        } else {
            let c = char::from_u32(256 + n as u32).unwrap();
            n += 1;
            c
        };
        b2c[b as usize] = c;
        c2b.insert(c, b as u8);
    }
    (b2c, c2b)
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| TextError::Io {
        path: path.display().to_string(),
        source,
    })
}

impl Gpt2Bpe {
    /// Loads the standard GPT-2 asset pair from `dir`: a vocabulary json
    /// (`encoder.json` or `vocab.json`) and a ranked merge list
    /// (`vocab.bpe` or `merges.txt`).
    pub fn load(dir: &Path) -> Result<Self> {
        let vocab_path = ["encoder.json", "vocab.json"]
            .iter()
            .map(|f| dir.join(f))
            .find(|p| p.exists())
            .ok_or_else(|| TextError::Invalid(format!(
                "no encoder.json or vocab.json under {}",
                dir.display()
            )))?;
        let merges_path = ["vocab.bpe", "merges.txt"]
            .iter()
            .map(|f| dir.join(f))
            .find(|p| p.exists())
            .ok_or_else(|| TextError::Invalid(format!(
                "no vocab.bpe or merges.txt under {}",
                dir.display()
            )))?;

        let vocab_file = vocab_path.display().to_string();
        let raw = read_file(&vocab_path)?;
        let json: serde_json::Value =
            serde_json::from_str(&raw).map_err(|e| TextError::Parse {
                file: vocab_file.clone(),
                line: e.line(),
                msg: e.to_string(),
            })?;
        let obj = json.as_object().ok_or_else(|| TextError::Parse {
            file: vocab_file.clone(),
            line: 1,
            msg: "vocabulary json is not an object".into(),
        })?;
        let mut encoder = HashMap::with_capacity(obj.len());
        let mut decoder = HashMap::with_capacity(obj.len());
        for (tok, id) in obj {
            let id = id.as_u64().ok_or_else(|| TextError::Parse {
                file: vocab_file.clone(),
                line: 1,
                msg: format!("non-integer id for token {tok:?}"),
            })? as u32;
            encoder.insert(tok.clone(), id);
            decoder.insert(id, tok.clone());
        }
        // ids must be dense in [0, |V|)
        for id in 0..encoder.len() as u32 {
            if !decoder.contains_key(&id) {
                return Err(TextError::Parse {
                    file: vocab_file.clone(),
                    line: 1,
                    msg: format!("vocabulary ids not dense: {id} missing"),
                });
            }
        }

        let merges_file = merges_path.display().to_string();
        let raw = read_file(&merges_path)?;
        let mut ranks = HashMap::new();
        let mut rank = 0usize;
        for (lineno, line) in raw.lines().enumerate() {
            if lineno == 0 && line.starts_with("#version") {
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let mut it = line.split(' ');
            let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
                return Err(TextError::Parse {
                    file: merges_file.clone(),
                    line: lineno + 1,
                    msg: format!("expected two space-separated symbols, got {line:?}"),
                });
            };
            ranks.insert((a.to_string(), b.to_string()), rank);
            rank += 1;
        }

        let (byte_to_char, char_to_byte) = byte_unicode_table();
        Ok(Gpt2Bpe {
            encoder,
            decoder,
            ranks,
            byte_to_char,
            char_to_byte,
            pattern: Regex::new(PRETOKEN_PATTERN).expect("static pattern"),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.encoder.len()
    }

    /// GPT-2 pre-tokenization. Equivalent to the reference pattern including
    /// its `\s+(?!\S)` alternative.
    fn pretokenize<'a>(&self, text: &'a str) -> Vec<&'a str> {
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < text.len() {
            let m = self
                .pattern
                .find_at(text, pos)
                .expect("pattern matches any char");
            debug_assert_eq!(m.start(), pos);
            let s = m.as_str();
            let all_ws = s.chars().all(char::is_whitespace);
            let followed_by_non_ws = text[m.end()..]
                .chars()
                .next()
                .map(|c| !c.is_whitespace())
                .unwrap_or(false);
            if all_ws && followed_by_non_ws && s.chars().count() >= 2 {
                // give the last whitespace char back to the next token
                let last = s.char_indices().last().unwrap().0;
                out.push(&text[pos..pos + last]);
                pos += last;
            } else {
                out.push(s);
                pos = m.end();
            }
        }
        out
    }

    /// Greedy lowest-rank merge loop on one pre-token (already mapped to the
    /// byte-unicode alphabet).
    fn merge(&self, symbols: Vec<String>) -> Vec<String> {
        let mut word = symbols;
        while word.len() > 1 {
            let mut best_rank = usize::MAX;
            let mut best: Option<(String, String)> = None;
            for i in 0..word.len() - 1 {
                if let Some(&r) = self
                    .ranks
                    .get(&(word[i].clone(), word[i + 1].clone()))
                {
                    if r < best_rank {
                        best_rank = r;
                        best = Some((word[i].clone(), word[i + 1].clone()));
                    }
                }
            }
            let Some((a, b)) = best else { break };
            let mut merged = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && word[i] == a && word[i + 1] == b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut word[i]));
                    i += 1;
                }
            }
            word = merged;
        }
        word
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let mut out = Vec::new();
        let mut cache: HashMap<String, Vec<u32>> = HashMap::new();
        for pre in self.pretokenize(text) {
            let mapped: String = pre
                .bytes()
                .map(|b| self.byte_to_char[b as usize])
                .collect();
            if let Some(ids) = cache.get(&mapped) {
                out.extend_from_slice(ids);
                continue;
            }
            let symbols: Vec<String> = mapped.chars().map(|c| c.to_string()).collect();
            let mut ids = Vec::new();
            for sym in self.merge(symbols) {
                match self.encoder.get(&sym) {
                    Some(&id) => ids.push(id),
                    None => {
                        return Err(TextError::Invalid(format!(
                            "symbol {sym:?} missing from vocabulary"
                        )))
                    }
                }
            }
            out.extend_from_slice(&ids);
            cache.insert(mapped, ids);
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self.decoder.get(&id).ok_or(TextError::UnknownId(id))?;
            for c in tok.chars() {
                bytes.push(*self.char_to_byte.get(&c).ok_or(TextError::InvalidUtf8)?);
            }
        }
        String::from_utf8(bytes).map_err(|_| TextError::InvalidUtf8)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::OnceLock;

    fn assets_dir() -> std::path::PathBuf {
        std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/gpt2")
    }

    fn bpe() -> &'static Gpt2Bpe {
        static BPE: OnceLock<Gpt2Bpe> = OnceLock::new();
        BPE.get_or_init(|| Gpt2Bpe::load(&assets_dir()).unwrap())
    }

    #[test]
    fn loads_full_vocabulary() {
        assert_eq!(bpe().vocab_size(), 50257);
    }

    #[test]
    fn empty_input_encodes_to_nothing() {
        assert!(bpe().encode("").unwrap().is_empty());
    }

    #[test]
    fn hello_world_is_two_tokens_and_round_trips() {
        let ids = bpe().encode("Hello world").unwrap();
        assert_eq!(ids.len(), 2);
        assert_eq!(bpe().decode(&ids).unwrap(), "Hello world");
    }

    #[test]
    fn matches_reference_tokenizer_fixture() {
        // committed fixture produced by a reference GPT-2 tokenizer
        let raw = std::fs::read_to_string(
            std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
                .join("tests/fixtures/gpt2_reference.json"),
        )
        .unwrap();
        let cases: serde_json::Value = serde_json::from_str(&raw).unwrap();
        for case in cases.as_array().unwrap() {
            let text = case["text"].as_str().unwrap();
            let want: Vec<u32> = case["ids"]
                .as_array()
                .unwrap()
                .iter()
                .map(|v| v.as_u64().unwrap() as u32)
                .collect();
            let got = bpe().encode(text).unwrap();
            assert_eq!(got, want, "encoding diverges on {text:?}");
            assert_eq!(bpe().decode(&got).unwrap(), text);
        }
    }

    #[test]
    fn pretokenize_splits_like_the_reference_pattern() {
        let toks = bpe().pretokenize("a  b");
        assert_eq!(toks, vec!["a", " ", " b"]);
        let toks = bpe().pretokenize("don't stop");
        assert_eq!(toks, vec!["don", "'t", " stop"]);
        let toks = bpe().pretokenize("x\n");
        assert_eq!(toks, vec!["x", "\n"]);
        let toks = bpe().pretokenize("\tz");
        assert_eq!(toks, vec!["\t", "z"]);
    }

    #[test]
    fn missing_assets_is_a_readable_error() {
        let err = Gpt2Bpe::load(Path::new("/nonexistent")).unwrap_err();
        assert!(err.to_string().contains("nonexistent"));
    }
}
