//! Seeded synthetic training text.
//!
//! Half the sequences are Markov-chain "words" (each symbol has a few
//! preferred successors, words separated by spaces, lines by newlines), the
//! other half repeat a random segment so that copying from context pays
//! off. Ids 0 and 1 act as newline and space, matching the probe tokenizer.

use alloc::vec::Vec;

use crate::error::value_err;
use crate::numerics::{hash64, Rng};
use crate::Result;

const NEWLINE: u32 = 0;
const SPACE: u32 = 1;
/// First id that is neither a separator nor `:`.
const FIRST_SYMBOL: u32 = 3;
const SUCCESSORS: usize = 4;
const SPLIT_SALT: u64 = 0x6865_6c64_6f75_74;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusConfig {
    pub n_sequences: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    /// Share of copy-pattern sequences.
    pub copy_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_sequences: 4096,
            seq_len: 64,
            vocab_size: 64,
            copy_fraction: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    sequences: Vec<Vec<u32>>,
    train: Vec<usize>,
    held_out: Vec<usize>,
}

impl SyntheticCorpus {
    pub fn generate(cfg: &CorpusConfig) -> Result<Self> {
        if cfg.vocab_size < FIRST_SYMBOL as usize + SUCCESSORS {
            return Err(value_err!("vocabulary of {} is too small for the corpus", cfg.vocab_size));
        }
        if cfg.seq_len < 2 || cfg.n_sequences == 0 {
            return Err(value_err!("need seq_len >= 2 and at least one sequence"));
        }
        if !(0.0..=1.0).contains(&cfg.copy_fraction) {
            return Err(value_err!("copy_fraction must lie in [0, 1]"));
        }
        let symbols = cfg.vocab_size - FIRST_SYMBOL as usize;
        let mut rng = Rng::new(cfg.seed);
        let table: Vec<Vec<u32>> = (0..symbols)
            .map(|_| {
                rng.sample_distinct(symbols, SUCCESSORS)
                    .into_iter()
                    .map(|s| s as u32 + FIRST_SYMBOL)
                    .collect()
            })
            .collect();
        let sequences = (0..cfg.n_sequences)
            .map(|i| {
                let mut r = rng.fork(i as u64);
                if r.uniform() < cfg.copy_fraction {
                    copy_sequence(&mut r, cfg.seq_len, symbols)
                } else {
                    markov_sequence(&mut r, cfg.seq_len, symbols, &table)
                }
            })
            .collect();
        let (held_out, train) = (0..cfg.n_sequences).partition(|&i| is_held_out(i));
        Ok(Self {
            sequences,
            train,
            held_out,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn sequence(&self, i: usize) -> &[u32] {
        &self.sequences[i]
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    pub fn held_out_indices(&self) -> &[usize] {
        &self.held_out
    }

    pub fn held_out(&self) -> Vec<&[u32]> {
        self.held_out.iter().map(|&i| self.sequences[i].as_slice()).collect()
    }

    /// `n` training sequences drawn with replacement.
    pub fn sample_batch(&self, rng: &mut Rng, n: usize) -> Vec<&[u32]> {
        (0..n)
            .map(|_| {
                let i = self.train[rng.below(self.train.len() as u64) as usize];
                self.sequences[i].as_slice()
            })
            .collect()
    }
}

/// Stable 2% split, independent of the generation seed.
pub fn is_held_out(index: usize) -> bool {
    hash64(SPLIT_SALT, index as u64) % 50 == 0
}

fn symbol(rng: &mut Rng, symbols: usize) -> u32 {
    rng.below(symbols as u64) as u32 + FIRST_SYMBOL
}

fn markov_sequence(rng: &mut Rng, len: usize, symbols: usize, table: &[Vec<u32>]) -> Vec<u32> {
    let mut out = Vec::with_capacity(len);
    let mut prev = symbol(rng, symbols);
    let mut word_left = 2 + rng.below(5);
    out.push(prev);
    while out.len() < len {
        if word_left == 0 {
            out.push(if rng.below(6) == 0 { NEWLINE } else { SPACE });
            prev = symbol(rng, symbols);
            word_left = 2 + rng.below(5);
        } else {
            // skewed towards the first successor
            let pick = match rng.below(8) {
                0..=3 => 0,
                4 | 5 => 1,
                6 => 2,
                _ => 3,
            };
            prev = table[(prev - FIRST_SYMBOL) as usize][pick];
            word_left -= 1;
        }
        out.push(prev);
    }
    out.truncate(len);
    out
}

fn copy_sequence(rng: &mut Rng, len: usize, symbols: usize) -> Vec<u32> {
    let seg_len = 4 + rng.below(9) as usize;
    let segment: Vec<u32> = (0..seg_len).map(|_| symbol(rng, symbols)).collect();
    let mut out = Vec::with_capacity(len + seg_len);
    while out.len() < len {
        out.extend_from_slice(&segment);
        out.push(SPACE);
    }
    out.truncate(len);
    out
}
