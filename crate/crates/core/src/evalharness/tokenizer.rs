use alloc::string::String;
use alloc::vec::Vec;

use crate::error::value_err;
use crate::{Error, Result};

/// Newline, space, colon, a-z, A-Z, 1-9: 64 symbols.
pub const ALPHABET: &str = "\n :abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ123456789";

/// Reversible character-to-id map over [`ALPHABET`], possibly relabeled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    symbols: Vec<char>,
    ids: [Option<u32>; 128],
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::standard()
    }
}

impl Tokenizer {
    /// Id `i` is the `i`-th character of [`ALPHABET`].
    pub fn standard() -> Self {
        Self::from_symbols(ALPHABET.chars().collect())
    }

    /// Relabeled vocabulary: character `ALPHABET[i]` gets id `perm[i]`.
    pub fn permuted(perm: &[usize]) -> Result<Self> {
        let base: Vec<char> = ALPHABET.chars().collect();
        if perm.len() != base.len() {
            return Err(value_err!("permutation of {} entries for {} symbols", perm.len(), base.len()));
        }
        let mut symbols = alloc::vec!['\0'; base.len()];
        let mut seen = alloc::vec![false; base.len()];
        for (i, &p) in perm.iter().enumerate() {
            if p >= base.len() || seen[p] {
                return Err(value_err!("not a permutation"));
            }
            seen[p] = true;
            symbols[p] = base[i];
        }
        Ok(Self::from_symbols(symbols))
    }

    fn from_symbols(symbols: Vec<char>) -> Self {
        let mut ids = [None; 128];
        for (i, c) in symbols.iter().enumerate() {
            ids[*c as usize] = Some(i as u32);
        }
        Self { symbols, ids }
    }

    pub fn vocab_size(&self) -> usize {
        self.symbols.len()
    }

    pub fn id(&self, c: char) -> Option<u32> {
        if c.is_ascii() {
            self.ids[c as usize]
        } else {
            None
        }
    }

    pub fn newline(&self) -> u32 {
        self.ids[b'\n' as usize].expect("newline is in the alphabet")
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.chars()
            .map(|c| self.id(c).ok_or_else(|| value_err!("character {c:?} is outside the alphabet")))
            .collect()
    }

    pub fn decode(&self, tokens: &[u32]) -> Result<String> {
        tokens
            .iter()
            .map(|&t| {
                self.symbols
                    .get(t as usize)
                    .copied()
                    .ok_or_else(|| Error::Value(alloc::format!("token {t} outside the alphabet")))
            })
            .collect()
    }
}
