use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOT: u32 = 1;
pub const EOT: u32 = 2;
pub const UNK: u32 = 3;
pub const NUM_SPECIAL: u32 = 4;

const SPECIAL_LITERALS: [&str; 4] = ["<pad>", "<bot>", "<eot>", "<unk>"];

/// Lowercases, splits every punctuation character into its own token and
/// splits on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && !ch.is_ascii()) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_lowercase().collect());
            } else {
                cur.extend(ch.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Token/id bijection with four reserved specials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Orders tokens by descending frequency, then lexicographically.
    pub fn build<T: AsRef<str>>(corpus: &[T]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Input("vocabulary corpus is empty".into()));
        }
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for text in corpus {
            for tok in normalize(text.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t))
    }

    fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut all: Vec<String> = SPECIAL_LITERALS.iter().map(|s| s.to_string()).collect();
        let mut index = HashMap::new();
        for tok in tokens {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Input(format!("invalid vocabulary token {tok:?}")));
            }
            if SPECIAL_LITERALS.contains(&tok.as_str()) || index.contains_key(&tok) {
                return Err(Error::Input(format!("duplicate vocabulary token {tok:?}")));
            }
            index.insert(tok.clone(), all.len() as u32);
            all.push(tok);
        }
        Ok(Self { tokens: all, index })
    }

    /// Size including the specials.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == NUM_SPECIAL as usize
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// One token per line, the four special literals first.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        for (i, lit) in SPECIAL_LITERALS.iter().enumerate() {
            match lines.next() {
                Some(l) if l == *lit => {}
                other => {
                    return Err(Error::Input(format!(
                        "vocab line {i}: expected {lit}, found {other:?}"
                    )))
                }
            }
        }
        Self::from_tokens(lines.map(str::to_string))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path, e))?;
        Self::from_file_string(&text)
    }

    /// `BOT + tokens + EOT`, truncated to `max_len` while keeping EOT.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<TokenSequence> {
        if max_len < 3 {
            return Err(Error::Parameter(format!(
                "max_len must allow at least one token, got {max_len}"
            )));
        }
        let toks = normalize(text);
        if toks.is_empty() {
            return Err(Error::Input(format!("text {text:?} has no tokens")));
        }
        let mut ids = Vec::with_capacity(toks.len().min(max_len - 2) + 2);
        ids.push(BOT);
        ids.extend(toks.iter().take(max_len - 2).map(|t| self.id(t)));
        ids.push(EOT);
        Ok(TokenSequence { ids })
    }
}

/// `[BOT, .., EOT]`; padding is added only when sequences are packed.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn from_ids(ids: Vec<u32>) -> Result<Self> {
        let ok = ids.len() >= 2
            && ids[0] == BOT
            && *ids.last().unwrap() == EOT
            && ids[1..ids.len() - 1]
                .iter()
                .all(|&i| i != BOT && i != EOT && i != PAD);
        if !ok {
            return Err(Error::Input(format!("malformed token sequence {ids:?}")));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn eot_index(&self) -> usize {
        self.ids.len() - 1
    }

    /// Positions of the non-special tokens.
    pub fn content_range(&self) -> std::ops::Range<usize> {
        1..self.ids.len() - 1
    }
}
