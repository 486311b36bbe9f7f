use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::normalize_text;

pub const BLANK: usize = 0;
pub const UNK: usize = 1;
pub const SOS: usize = 2;
pub const EOS: usize = 3;
pub const NUM_RESERVED: usize = 4;

const RESERVED: [&str; NUM_RESERVED] = ["<blank>", "<unk>", "<sos>", "<eos>"];

/// Character tokenizer: reserved symbols, then the sorted corpus characters, then space.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Tokenizer {
    symbols: Vec<String>,
    index: HashMap<char, usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub unknown: usize,
}

impl Tokenizer {
    pub fn build<S: AsRef<str>>(transcripts: &[S]) -> Self {
        let mut chars: Vec<char> = transcripts
            .iter()
            .flat_map(|t| normalize_text(t.as_ref()).chars().collect::<Vec<_>>())
            .filter(|c| *c != ' ')
            .collect();
        chars.sort_unstable();
        chars.dedup();
        let mut symbols: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        symbols.extend(chars.iter().map(|c| c.to_string()));
        symbols.push(" ".to_string());
        Self::from_symbols(symbols)
    }

    pub fn from_symbols(symbols: Vec<String>) -> Self {
        let index = symbols
            .iter()
            .enumerate()
            .skip(NUM_RESERVED)
            .filter_map(|(i, s)| {
                let mut it = s.chars();
                match (it.next(), it.next()) {
                    (Some(c), None) => Some((c, i)),
                    _ => None,
                }
            })
            .collect();
        Tokenizer { symbols, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    /// Normalizes then maps characters to ids; unseen characters become `<unk>`.
    pub fn encode(&self, text: &str) -> Encoded {
        let mut unknown = 0;
        let ids = normalize_text(text)
            .chars()
            .map(|c| {
                self.id(c).unwrap_or_else(|| {
                    unknown += 1;
                    UNK
                })
            })
            .collect();
        Encoded { ids, unknown }
    }

    /// Inverse of [`encode`](Self::encode); reserved ids are skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= NUM_RESERVED)
            .filter_map(|&i| self.symbols.get(i))
            .map(String::as_str)
            .collect()
    }

    /// True when every symbol of `self` keeps its id in `other`.
    pub fn is_prefix_compatible(&self, other: &Tokenizer) -> bool {
        self.symbols.iter().zip(&other.symbols).all(|(a, b)| a == b) && self.symbols.len() <= other.symbols.len()
    }
}

impl From<Vec<String>> for Tokenizer {
    fn from(symbols: Vec<String>) -> Self {
        Self::from_symbols(symbols)
    }
}

impl From<Tokenizer> for Vec<String> {
    fn from(t: Tokenizer) -> Self {
        t.symbols
    }
}
