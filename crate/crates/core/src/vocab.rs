//! Word-level tokenizer and the shared symbol table.
//!
//! Ids 0..4 are PAD, BOS, EOS, UNK; the next `k` ids are the prompt tokens
//! `<token1>`..`<tokenk>`; corpus symbols follow by descending frequency,
//! ties broken lexicographically.

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::corpus::Example;
use crate::error::{Error, Result};
use crate::mr::{prompt_token, prompt_token_index};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
pub const FIRST_PROMPT_ID: u32 = RESERVED.len() as u32;

const SPLIT_CHARS: &[char] = &['(', ')', '[', ']', ',', '.', '?', '!', ';', ':'];

/// Lowercases and splits on whitespace, emitting MR punctuation and sentence
/// punctuation as separate tokens. `<...>` symbols stay atomic.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let chunk = chunk.to_lowercase().replace('\u{2019}', "'");
        if chunk.starts_with('<') && chunk.ends_with('>') && !chunk.contains(SPLIT_CHARS) {
            out.push(chunk);
            continue;
        }
        let mut word = String::new();
        for c in chunk.chars() {
            if SPLIT_CHARS.contains(&c) {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(c.to_string());
            } else {
                word.push(c);
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, u32>,
    prompt_k: usize,
}

impl Vocab {
    fn from_symbols(symbols: Vec<String>) -> Result<Self> {
        for (i, reserved) in RESERVED.iter().enumerate() {
            if symbols.get(i).map(String::as_str) != Some(*reserved) {
                return Err(Error::Config(format!(
                    "vocabulary line {} must be `{reserved}`",
                    i + 1
                )));
            }
        }
        let prompt_k = symbols[RESERVED.len()..]
            .iter()
            .enumerate()
            .take_while(|(i, s)| prompt_token_index(s) == Some(i + 1))
            .count();
        let mut index = HashMap::with_capacity(symbols.len());
        for (id, sym) in symbols.iter().enumerate() {
            if index.insert(sym.clone(), id as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary symbol `{sym}`")));
            }
        }
        Ok(Vocab {
            symbols,
            index,
            prompt_k,
        })
    }

    /// Builds the vocabulary over tokenized MR serializations and references.
    pub fn build(examples: &[Example], k: usize) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyInput("vocabulary needs at least one example".into()));
        }
        if k == 0 {
            return Err(Error::Config("prompt token count k must be at least 1".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for ex in examples {
            let texts = std::iter::once(ex.mr.serialize()).chain(ex.references.iter().cloned());
            for text in texts {
                for tok in tokenize(&text) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut symbols: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        symbols.extend((1..=k).map(prompt_token));
        let mut corpus: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(s, _)| !symbols.contains(s))
            .collect();
        corpus.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        symbols.extend(corpus.into_iter().map(|(s, _)| s));
        Self::from_symbols(symbols)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn prompt_k(&self) -> usize {
        self.prompt_k
    }

    pub fn id(&self, symbol: &str) -> Option<u32> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    /// Id of `<token{index}>`, 1-based.
    pub fn prompt_id(&self, index: usize) -> Option<u32> {
        (index >= 1 && index <= self.prompt_k).then(|| FIRST_PROMPT_ID + index as u32 - 1)
    }

    /// Zero-based prompt slot for an id, if it is a prompt token.
    pub fn prompt_slot(&self, id: u32) -> Option<usize> {
        let end = FIRST_PROMPT_ID + self.prompt_k as u32;
        (FIRST_PROMPT_ID..end)
            .contains(&id)
            .then(|| (id - FIRST_PROMPT_ID) as usize)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text)
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.symbol(id).unwrap_or(RESERVED[UNK as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    /// Newline-separated symbols; line number is the id.
    pub fn to_file_string(&self) -> String {
        let mut s = self.symbols.join("\n");
        s.push('\n');
        s
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_file_string().as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_symbols(text.lines().map(str::to_string).collect())
    }
}
