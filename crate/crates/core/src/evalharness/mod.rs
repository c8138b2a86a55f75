//! Held-out perplexity and a few-shot probe suite.
//!
//! Prompts are `n_shots` demonstrations `Q:<input>\nA:<output>` joined by
//! blank lines, followed by `Q:<query>\nA:`, with no instruction prefix.
//! Answers are decoded greedily until a newline or the token cap and scored
//! by exact match.

mod tasks;
mod tokenizer;

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::value_err;
use crate::exec::Executor;
use crate::model::TransformerModel;
use crate::numerics::tape::log_softmax_rows;
use crate::numerics::{hash64, Matrix, Real};
use crate::{Error, Result};

pub use tasks::{Example, ProbeFamily, ProbeInstance, ProbeTask};
pub use tokenizer::{Tokenizer, ALPHABET};

/// Anything that maps a token sequence to `T×V` next-token logits.
pub trait LogitModel: Sync {
    fn logits(&self, tokens: &[u32]) -> Result<Matrix<f64>>;
    fn max_seq_len(&self) -> usize;
}

impl<T: Real> LogitModel for TransformerModel<T> {
    fn logits(&self, tokens: &[u32]) -> Result<Matrix<f64>> {
        Ok(self.forward(tokens)?.cast())
    }

    fn max_seq_len(&self) -> usize {
        self.config().max_seq_len
    }
}

/// Produces answer tokens for a prompt.
pub trait ProbeModel: Sync {
    /// At most `max_new` tokens, stopping after (and excluding) `stop`.
    fn generate(&self, prompt: &[u32], max_new: usize, stop: u32) -> Vec<u32>;
}

impl<T: Real> ProbeModel for TransformerModel<T> {
    fn generate(&self, prompt: &[u32], max_new: usize, stop: u32) -> Vec<u32> {
        greedy_decode(self, prompt, max_new, stop)
    }
}

/// Argmax decoding (lowest id wins ties). Decoding ends early if the
/// context would exceed the model's window or the model errors.
pub fn greedy_decode<M: LogitModel + ?Sized>(model: &M, prompt: &[u32], max_new: usize, stop: u32) -> Vec<u32> {
    let mut ctx = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new && ctx.len() <= model.max_seq_len() {
        let Ok(z) = model.logits(&ctx) else { break };
        let last = z.row(z.rows() - 1);
        let mut best = 0;
        for (i, v) in last.iter().enumerate() {
            if *v > last[best] {
                best = i;
            }
        }
        let t = best as u32;
        if t == stop {
            break;
        }
        out.push(t);
        ctx.push(t);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSpec {
    pub n_shots: usize,
    /// Demonstration seeds; accuracies are reported per seed.
    pub seeds: Vec<u64>,
    pub max_answer_tokens: usize,
    pub instances_per_seed: usize,
    /// Prompt plus answer must fit in this many tokens.
    pub max_len: usize,
}

impl Default for PromptSpec {
    fn default() -> Self {
        Self {
            n_shots: 10,
            seeds: alloc::vec![0, 1, 2],
            max_answer_tokens: 8,
            instances_per_seed: 100,
            max_len: 256,
        }
    }
}

impl PromptSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(value_err!("at least one demonstration seed is required"));
        }
        if self.max_answer_tokens == 0 || self.instances_per_seed == 0 {
            return Err(value_err!("max_answer_tokens and instances_per_seed must be positive"));
        }
        Ok(())
    }
}

pub const INPUT_MARKER: &str = "Q:";
pub const ANSWER_MARKER: &str = "A:";

/// Prompt text for an instance (demonstrations are truncated to
/// `n_shots`).
pub fn prompt_text(instance: &ProbeInstance, n_shots: usize) -> String {
    let mut s = String::new();
    for d in instance.demos.iter().take(n_shots) {
        s.push_str(INPUT_MARKER);
        s.push_str(&d.input);
        s.push('\n');
        s.push_str(ANSWER_MARKER);
        s.push_str(&d.output);
        s.push_str("\n\n");
    }
    s.push_str(INPUT_MARKER);
    s.push_str(&instance.query.input);
    s.push('\n');
    s.push_str(ANSWER_MARKER);
    s
}

/// Tokenized prompt; fails if prompt plus the answer budget exceeds
/// `spec.max_len`.
pub fn build_prompt(instance: &ProbeInstance, spec: &PromptSpec, tokenizer: &Tokenizer) -> Result<Vec<u32>> {
    let tokens = tokenizer.encode(&prompt_text(instance, spec.n_shots))?;
    let len = tokens.len() + spec.max_answer_tokens;
    if len > spec.max_len {
        return Err(Error::Length {
            len,
            limit: spec.max_len,
        });
    }
    Ok(tokens)
}

/// Text of the last query's input in a prompt, if well formed.
fn last_query(text: &str) -> Option<&str> {
    let start = text.rfind(INPUT_MARKER)? + INPUT_MARKER.len();
    let rest = &text[start..];
    Some(&rest[..rest.find('\n')?])
}

/// Answers by copying the first query item. Scores 100% on
/// `choose_first_of_k`.
#[derive(Debug, Clone)]
pub struct CopyFirstOracle {
    pub tokenizer: Tokenizer,
}

impl ProbeModel for CopyFirstOracle {
    fn generate(&self, prompt: &[u32], max_new: usize, _stop: u32) -> Vec<u32> {
        let Ok(text) = self.tokenizer.decode(prompt) else { return Vec::new() };
        let Some(q) = last_query(&text) else { return Vec::new() };
        let first = q.split(' ').next().unwrap_or("");
        let mut t = self.tokenizer.encode(first).unwrap_or_default();
        t.truncate(max_new);
        t
    }
}

/// Picks one query item uniformly at random, as a pure function of the
/// prompt and seed.
#[derive(Debug, Clone)]
pub struct RandomCandidate {
    pub tokenizer: Tokenizer,
    pub seed: u64,
}

impl ProbeModel for RandomCandidate {
    fn generate(&self, prompt: &[u32], max_new: usize, _stop: u32) -> Vec<u32> {
        let Ok(text) = self.tokenizer.decode(prompt) else { return Vec::new() };
        let Some(q) = last_query(&text) else { return Vec::new() };
        let items: Vec<&str> = q.split(' ').collect();
        let h = prompt.iter().fold(self.seed, |h, &t| hash64(h, t as u64));
        let pick = items[(h % items.len() as u64) as usize];
        let mut t = self.tokenizer.encode(pick).unwrap_or_default();
        t.truncate(max_new);
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskResult {
    pub task: String,
    /// Exact-match accuracy in percent, one entry per seed.
    pub per_seed: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub seeds: Vec<u64>,
    pub tasks: Vec<TaskResult>,
    /// Mean over tasks for each seed.
    pub per_seed_composite: Vec<f64>,
    /// Mean of task means, in `[0, 100]`.
    pub composite: f64,
    /// Population standard deviation of the per-seed composites.
    pub composite_std: f64,
}

/// Exact-match accuracy of `model` on one task and seed, in percent.
pub fn task_accuracy<M: ProbeModel + ?Sized, E: Executor>(
    model: &M,
    task: &ProbeTask,
    seed: u64,
    spec: &PromptSpec,
    tokenizer: &Tokenizer,
    exec: &E,
) -> Result<f64> {
    let stop = tokenizer.newline();
    let hits = exec.map(spec.instances_per_seed, |i| -> Result<bool> {
        let inst = task.instance(i, seed, spec.n_shots);
        let prompt = build_prompt(&inst, spec, tokenizer)?;
        let answer = model.generate(&prompt, spec.max_answer_tokens, stop);
        Ok(tokenizer.decode(&answer).map(|a| a == inst.query.output).unwrap_or(false))
    });
    let mut correct = 0usize;
    for h in hits {
        correct += h? as usize;
    }
    Ok(100.0 * correct as f64 / spec.instances_per_seed as f64)
}

pub fn run_probe_suite<M: ProbeModel + ?Sized, E: Executor>(
    model: &M,
    tasks: &[ProbeTask],
    spec: &PromptSpec,
    tokenizer: &Tokenizer,
    exec: &E,
) -> Result<ProbeReport> {
    spec.validate()?;
    if tasks.is_empty() {
        return Err(value_err!("probe suite needs at least one task"));
    }
    let mut results = Vec::with_capacity(tasks.len());
    for task in tasks {
        task.validate()?;
        let per_seed = spec
            .seeds
            .iter()
            .map(|&s| task_accuracy(model, task, s, spec, tokenizer, exec))
            .collect::<Result<Vec<f64>>>()?;
        let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        results.push(TaskResult {
            task: task.name(),
            per_seed,
            mean,
        });
    }
    let n_seeds = spec.seeds.len();
    let per_seed_composite: Vec<f64> = (0..n_seeds)
        .map(|s| results.iter().map(|r| r.per_seed[s]).sum::<f64>() / results.len() as f64)
        .collect();
    let composite = results.iter().map(|r| r.mean).sum::<f64>() / results.len() as f64;
    let var = per_seed_composite.iter().map(|c| (c - composite) * (c - composite)).sum::<f64>() / n_seeds as f64;
    Ok(ProbeReport {
        seeds: spec.seeds.clone(),
        tasks: results,
        per_seed_composite,
        composite,
        composite_std: libm::sqrt(var),
    })
}

/// `exp` of the mean next-token NLL over Ω, pooled across the slice.
pub fn perplexity<M: LogitModel + ?Sized, E: Executor>(model: &M, slice: &[&[u32]], exec: &E) -> Result<f64> {
    if slice.is_empty() {
        return Err(value_err!("perplexity over an empty slice"));
    }
    let parts = exec.map(slice.len(), |i| -> Result<(f64, usize)> {
        let seq = slice[i];
        if seq.len() < 2 {
            return Err(value_err!("sequence {i} has no next-token targets"));
        }
        let z = model.logits(seq)?;
        if !z.is_finite() {
            return Err(value_err!("non-finite logits on sequence {i}"));
        }
        let lp = log_softmax_rows(&z, 1.0);
        let nll: f64 = (0..seq.len() - 1).map(|t| -lp.get(t, seq[t + 1] as usize)).sum();
        Ok((nll, seq.len() - 1))
    });
    let (mut nll, mut count) = (0.0, 0usize);
    for p in parts {
        let (a, b) = p?;
        nll += a;
        count += b;
    }
    Ok(libm::exp(nll / count as f64))
}
