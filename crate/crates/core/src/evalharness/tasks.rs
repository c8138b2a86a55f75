//! Synthetic function-style probe families. Items are short lowercase
//! "words"; every instance has a single correct answer string.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::value_err;
use crate::numerics::{hash64, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProbeFamily {
    ChooseFirst,
    ChooseLast,
    ChooseMiddle,
    OrderedFirst,
    OrderedLast,
    NextItem,
    PrevItem,
    /// Bijection lowercase → uppercase, standing in for capitalization.
    MapToken,
    ItemLength,
}

impl ProbeFamily {
    fn takes_k(self) -> bool {
        matches!(
            self,
            ProbeFamily::ChooseFirst
                | ProbeFamily::ChooseLast
                | ProbeFamily::ChooseMiddle
                | ProbeFamily::OrderedFirst
                | ProbeFamily::OrderedLast
        )
    }

    fn stem(self) -> &'static str {
        match self {
            ProbeFamily::ChooseFirst => "choose_first_of",
            ProbeFamily::ChooseLast => "choose_last_of",
            ProbeFamily::ChooseMiddle => "choose_middle_of",
            ProbeFamily::OrderedFirst => "ordered_first_of",
            ProbeFamily::OrderedLast => "ordered_last_of",
            ProbeFamily::NextItem => "next_item",
            ProbeFamily::PrevItem => "prev_item",
            ProbeFamily::MapToken => "map_token",
            ProbeFamily::ItemLength => "item_length",
        }
    }

    const ALL: [ProbeFamily; 9] = [
        ProbeFamily::ChooseFirst,
        ProbeFamily::ChooseLast,
        ProbeFamily::ChooseMiddle,
        ProbeFamily::OrderedFirst,
        ProbeFamily::OrderedLast,
        ProbeFamily::NextItem,
        ProbeFamily::PrevItem,
        ProbeFamily::MapToken,
        ProbeFamily::ItemLength,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ProbeTask {
    pub family: ProbeFamily,
    /// Candidate count for selection families; ignored otherwise.
    pub k: usize,
    pub seed: u64,
}

/// One input/output pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeInstance {
    pub demos: Vec<Example>,
    pub query: Example,
}

impl ProbeTask {
    pub fn new(family: ProbeFamily, k: usize, seed: u64) -> Result<Self> {
        let t = Self { family, k, seed };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.family.takes_k() {
            if !(2..=5).contains(&self.k) {
                return Err(value_err!("{}: k must lie in 2..=5, got {}", self.family.stem(), self.k));
            }
            if self.family == ProbeFamily::ChooseMiddle && self.k % 2 == 0 {
                return Err(value_err!("choose_middle_of needs an odd k, got {}", self.k));
            }
        }
        Ok(())
    }

    /// The nine default families, selection ones at `k = 3`.
    pub fn default_suite(seed: u64) -> Vec<Self> {
        ProbeFamily::ALL
            .iter()
            .map(|&family| Self {
                family,
                k: if family.takes_k() { 3 } else { 0 },
                seed,
            })
            .collect()
    }

    pub fn name(&self) -> String {
        if self.family.takes_k() {
            alloc::format!("{}_{}", self.family.stem(), self.k)
        } else {
            String::from(self.family.stem())
        }
    }

    /// Draws one example.
    pub fn example(&self, rng: &mut Rng) -> Example {
        match self.family {
            ProbeFamily::NextItem => {
                let c = b'a' + rng.below(25) as u8;
                ex(&[c], &[c + 1])
            }
            ProbeFamily::PrevItem => {
                let c = b'b' + rng.below(25) as u8;
                ex(&[c], &[c - 1])
            }
            ProbeFamily::MapToken => {
                let w = word(rng, 1, 4);
                let up = w.to_ascii_uppercase();
                Example { input: w, output: up }
            }
            ProbeFamily::ItemLength => {
                let w = word(rng, 1, 9);
                let n = alloc::format!("{}", w.len());
                Example { input: w, output: n }
            }
            family => {
                let mut items: Vec<String> = Vec::with_capacity(self.k);
                while items.len() < self.k {
                    let w = word(rng, 1, 3);
                    if !items.contains(&w) {
                        items.push(w);
                    }
                }
                let answer = match family {
                    ProbeFamily::ChooseFirst => items[0].clone(),
                    ProbeFamily::ChooseLast => items[self.k - 1].clone(),
                    ProbeFamily::ChooseMiddle => items[self.k / 2].clone(),
                    ProbeFamily::OrderedFirst => items.iter().min().cloned().unwrap_or_default(),
                    _ => items.iter().max().cloned().unwrap_or_default(),
                };
                Example {
                    input: items.join(" "),
                    output: answer,
                }
            }
        }
    }

    /// Instance `index` with demonstrations from `demo_seed`. The query
    /// depends only on the task and index; demonstrations are distinct
    /// from each other and from the query.
    pub fn instance(&self, index: usize, demo_seed: u64, n_shots: usize) -> ProbeInstance {
        let base = hash64(self.seed, self.name_hash());
        let mut qrng = Rng::new(hash64(base, index as u64));
        let query = self.example(&mut qrng);
        let mut drng = Rng::new(hash64(hash64(base, index as u64), demo_seed ^ 0x5ee_d5));
        let mut demos: Vec<Example> = Vec::with_capacity(n_shots);
        let mut attempts = 0;
        while demos.len() < n_shots {
            let e = self.example(&mut drng);
            attempts += 1;
            let fresh = e.input != query.input && demos.iter().all(|d| d.input != e.input);
            // small families (next/prev) admit only 25 inputs
            if fresh || attempts > 10_000 {
                demos.push(e);
            }
        }
        ProbeInstance { demos, query }
    }

    fn name_hash(&self) -> u64 {
        self.name().bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
    }
}

fn ex(input: &[u8], output: &[u8]) -> Example {
    Example {
        input: String::from_utf8(input.to_vec()).unwrap_or_default(),
        output: String::from_utf8(output.to_vec()).unwrap_or_default(),
    }
}

fn word(rng: &mut Rng, min: usize, max: usize) -> String {
    let len = min + rng.below((max - min + 1) as u64) as usize;
    (0..len).map(|_| (b'a' + rng.below(26) as u8) as char).collect()
}

impl fmt::Display for ProbeTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for ProbeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProbeFamily::ALL
            .iter()
            .copied()
            .find(|f| f.stem() == s)
            .ok_or_else(|| value_err!("unknown probe family {s:?}"))
    }
}

impl ProbeTask {
    /// Parses names like `choose_first_of_3` or `next_item`.
    pub fn parse(name: &str, seed: u64) -> Result<Self> {
        if let Ok(family) = name.parse::<ProbeFamily>() {
            if !family.takes_k() {
                return Self::new(family, 0, seed);
            }
        }
        let (stem, k) = name
            .rsplit_once('_')
            .ok_or_else(|| value_err!("unknown probe task {name:?}"))?;
        let family: ProbeFamily = stem.parse()?;
        let k: usize = k.parse().map_err(|_| value_err!("bad k in probe task {name:?}"))?;
        if !family.takes_k() {
            return Err(value_err!("{stem} takes no k"));
        }
        Self::new(family, k, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn answers_are_correct_and_unique() {
        let mut rng = Rng::new(3);
        for task in ProbeTask::default_suite(0) {
            for _ in 0..200 {
                let e = task.example(&mut rng);
                match task.family {
                    ProbeFamily::ChooseFirst => assert!(e.input.starts_with(&e.output)),
                    ProbeFamily::ChooseLast => assert!(e.input.ends_with(&e.output)),
                    ProbeFamily::ChooseMiddle => assert_eq!(e.input.split(' ').nth(1).unwrap(), e.output),
                    ProbeFamily::OrderedFirst => {
                        assert_eq!(e.input.split(' ').min().unwrap(), e.output)
                    }
                    ProbeFamily::OrderedLast => assert_eq!(e.input.split(' ').max().unwrap(), e.output),
                    ProbeFamily::NextItem => assert_eq!(e.output.as_bytes()[0], e.input.as_bytes()[0] + 1),
                    ProbeFamily::PrevItem => assert_eq!(e.output.as_bytes()[0] + 1, e.input.as_bytes()[0]),
                    ProbeFamily::MapToken => assert_eq!(e.input.to_ascii_uppercase(), e.output),
                    ProbeFamily::ItemLength => assert_eq!(alloc::format!("{}", e.input.len()), e.output),
                }
                if task.family.takes_k() {
                    let items: Vec<&str> = e.input.split(' ').collect();
                    assert_eq!(items.len(), 3);
                    assert!(items.iter().enumerate().all(|(i, a)| !items[..i].contains(a)));
                }
            }
        }
    }

    #[test]
    fn instances_are_disjoint_and_seeded() {
        let task = ProbeTask::parse("choose_first_of_3", 7).unwrap();
        let a = task.instance(4, 0, 10);
        assert_eq!(a, task.instance(4, 0, 10));
        let b = task.instance(4, 1, 10);
        assert_eq!(a.query, b.query);
        assert_ne!(a.demos, b.demos);
        assert!(a.demos.iter().all(|d| d.input != a.query.input));
        let next = ProbeTask::parse("next_item", 0).unwrap().instance(0, 0, 10);
        assert!(next.demos.iter().all(|d| d.input != next.query.input));
    }

    #[test]
    fn names_round_trip() {
        for t in ProbeTask::default_suite(0) {
            assert_eq!(ProbeTask::parse(&t.name(), 0).unwrap(), t);
        }
        assert!(ProbeTask::parse("choose_middle_of_4", 0).is_err());
        assert!(ProbeTask::parse("next_item_3", 0).is_err());
        assert!(ProbeTask::parse("bogus", 0).is_err());
    }
}
