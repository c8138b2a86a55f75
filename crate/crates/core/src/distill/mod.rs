//! Knowledge-distillation objective and the training loop around it.
//!
//! ```text
//! L_KD   = τ²/|Ω| Σ_{t∈Ω} KL(softmax(z_T/τ) ‖ softmax(z_S/τ))
//! L_CE   = −1/|Ω| Σ_{t∈Ω} log p_S(x_{t+1} | x_{≤t})
//! L      = λ L_KD + (1 − λ) L_CE
//! ```
//!
//! Ω is every position with a next token, i.e. all but the last.

mod corpus;
mod optim;
mod plan;
mod train;

use alloc::vec::Vec;

use crate::error::value_err;
use crate::numerics::tape::log_softmax_rows;
use crate::numerics::{Matrix, Real};
use crate::{Error, Result};

pub use corpus::{CorpusConfig, SyntheticCorpus};
pub use optim::{clip_global_norm, global_norm, AdamW, AdamWConfig};
pub use plan::TrainPlan;
pub use train::{distill, ema, pretrain, Controller, StepRecord, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdConfig {
    pub tau: f64,
    pub lambda_kd: f64,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self { tau: 3.0, lambda_kd: 0.8 }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(value_err!("tau must be positive, got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.lambda_kd) {
            return Err(value_err!("lambda_kd must lie in [0, 1], got {}", self.lambda_kd));
        }
        Ok(())
    }
}

/// Next-token targets; the last position has none.
pub fn next_token_targets(tokens: &[u32]) -> Vec<Option<usize>> {
    let mut t: Vec<Option<usize>> = tokens.iter().skip(1).map(|&x| Some(x as usize)).collect();
    t.push(None);
    t
}

/// Ω as a mask: every position but the last.
pub fn omega_mask(len: usize) -> Vec<bool> {
    (0..len).map(|i| i + 1 < len).collect()
}

fn check_finite<T: Real>(m: &Matrix<T>) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(value_err!("non-finite logits"))
    }
}

/// Tempered KL(teacher ‖ student), scaled by `τ²` and averaged over Ω.
pub fn kd_loss<T: Real>(teacher: &Matrix<T>, student: &Matrix<T>, mask: &[bool], tau: f64) -> Result<f64> {
    if teacher.shape() != student.shape() || mask.len() != teacher.rows() {
        return Err(Error::Shape(alloc::format!(
            "teacher {:?}, student {:?}, mask of {}",
            teacher.shape(),
            student.shape(),
            mask.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(value_err!("tau must be positive"));
    }
    check_finite(teacher)?;
    check_finite(student)?;
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(value_err!("KD loss over an empty position set"));
    }
    let lp = log_softmax_rows(teacher, tau);
    let lq = log_softmax_rows(student, tau);
    let mut total = 0.0;
    for i in (0..mask.len()).filter(|&i| mask[i]) {
        for (a, b) in lp.row(i).iter().zip(lq.row(i)) {
            let p = libm::exp(*a);
            if p > 0.0 {
                total += p * (a - b);
            }
        }
    }
    Ok(tau * tau * total / count as f64)
}

/// Mean negative log-likelihood over positions that carry a target.
pub fn ce_loss<T: Real>(student: &Matrix<T>, targets: &[Option<usize>]) -> Result<f64> {
    if targets.len() != student.rows() {
        return Err(Error::Shape(alloc::format!("{} targets for {} rows", targets.len(), student.rows())));
    }
    check_finite(student)?;
    let lp = log_softmax_rows(student, 1.0);
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, t) in targets.iter().enumerate() {
        if let Some(t) = *t {
            if t >= student.cols() {
                return Err(value_err!("target {t} outside vocabulary of {}", student.cols()));
            }
            total -= lp.get(i, t);
            count += 1;
        }
    }
    if count == 0 {
        return Err(value_err!("cross-entropy over an empty position set"));
    }
    Ok(total / count as f64)
}

pub fn combined_loss(kd: f64, ce: f64, cfg: &KdConfig) -> f64 {
    cfg.lambda_kd * kd + (1.0 - cfg.lambda_kd) * ce
}
