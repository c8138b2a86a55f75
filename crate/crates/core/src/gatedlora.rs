//! Budget-aware gated LoRA linear module.
//!
//! ```text
//! y = d · x Wᵀ + (α / r_max) · ((x Aᵀ) ⊙ g) Bᵀ,    g = σ(θ)
//! ```
//!
//! `W` is frozen, `A`, `B` and the gate logits `θ` are trained, and the
//! retention coefficient `d ∈ [0, 1]` is written by the budget controller.
//! When `d` falls below the skip threshold the dense product is not computed
//! at all.

use alloc::string::String;

use crate::error::value_err;
use crate::numerics::{Matrix, Real, Rng, Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LoraConfig {
    pub r_max: usize,
    pub alpha: f64,
    pub gate_logit_init: f64,
    pub dense_skip_threshold: f64,
}

/// `ln(p / (1 − p))`.
pub fn logit(p: f64) -> f64 {
    libm::log(p / (1.0 - p))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            r_max: 128,
            alpha: 256.0,
            gate_logit_init: logit(0.9),
            dense_skip_threshold: 1e-3,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r_max == 0 {
            return Err(value_err!("r_max must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(value_err!("alpha must be positive, got {}", self.alpha));
        }
        if !self.gate_logit_init.is_finite() {
            return Err(value_err!("gate_logit_init must be finite"));
        }
        if !(self.dense_skip_threshold > 0.0 && self.dense_skip_threshold < 1.0) {
            return Err(value_err!(
                "dense_skip_threshold must lie in (0, 1), got {}",
                self.dense_skip_threshold
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatedLinear<T> {
    name: String,
    weight: Matrix<T>,
    lora_a: Matrix<T>,
    lora_b: Matrix<T>,
    gate_logits: Matrix<T>,
    retention: f64,
    alpha: f64,
    dense_skip_threshold: f64,
}

/// Tape handles for the four tensors of a [`GatedLinear`].
#[derive(Debug, Clone, Copy)]
pub struct GatedVars {
    pub weight: Var,
    pub lora_a: Var,
    pub lora_b: Var,
    pub gate_logits: Var,
}

impl<T: Real> GatedLinear<T> {
    /// Wraps a frozen `d_out×d_in` weight. `A ~ N(0, 1/d_in)`, `B = 0`, every
    /// gate logit starts at `gate_logit_init`, retention starts at 1.
    pub fn new(name: impl Into<String>, weight: Matrix<T>, cfg: &LoraConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (d_out, d_in) = weight.shape();
        let lora_a = rng.normal_matrix(cfg.r_max, d_in, 1.0 / libm::sqrt(d_in as f64));
        let lora_b = Matrix::zeros(d_out, cfg.r_max);
        let gate_logits = Matrix::filled(1, cfg.r_max, T::cast(cfg.gate_logit_init));
        Ok(Self {
            name: name.into(),
            weight,
            lora_a,
            lora_b,
            gate_logits,
            retention: 1.0,
            alpha: cfg.alpha,
            dense_skip_threshold: cfg.dense_skip_threshold,
        })
    }

    /// Assembles a module from explicit tensors (checkpoint loading, tests).
    pub fn from_parts(
        name: impl Into<String>,
        weight: Matrix<T>,
        lora_a: Matrix<T>,
        lora_b: Matrix<T>,
        gate_logits: Matrix<T>,
        retention: f64,
        alpha: f64,
        dense_skip_threshold: f64,
    ) -> Result<Self> {
        let (d_out, d_in) = weight.shape();
        let r = lora_a.rows();
        if r == 0
            || lora_a.cols() != d_in
            || lora_b.shape() != (d_out, r)
            || gate_logits.shape() != (1, r)
        {
            return Err(Error::Shape(alloc::format!(
                "gated module W {:?}, A {:?}, B {:?}, gates {:?}",
                weight.shape(),
                lora_a.shape(),
                lora_b.shape(),
                gate_logits.shape()
            )));
        }
        if !(alpha > 0.0) {
            return Err(value_err!("alpha must be positive"));
        }
        let mut m = Self {
            name: name.into(),
            weight,
            lora_a,
            lora_b,
            gate_logits,
            retention: 1.0,
            alpha,
            dense_skip_threshold,
        };
        m.set_retention(retention)?;
        Ok(m)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }

    pub fn r_max(&self) -> usize {
        self.lora_a.rows()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn dense_skip_threshold(&self) -> f64 {
        self.dense_skip_threshold
    }

    /// `α / r_max`.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.r_max() as f64
    }

    pub fn retention(&self) -> f64 {
        self.retention
    }

    pub fn set_retention(&mut self, d: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&d) {
            return Err(value_err!("retention must lie in [0, 1], got {d}"));
        }
        self.retention = d;
        Ok(())
    }

    /// Whether the dense product is evaluated at the current retention.
    pub fn dense_active(&self) -> bool {
        self.retention >= self.dense_skip_threshold
    }

    /// MAC count of the dense projection, `d_in · d_out`.
    pub fn dense_cost(&self) -> u64 {
        (self.d_in() * self.d_out()) as u64
    }

    pub fn weight(&self) -> &Matrix<T> {
        &self.weight
    }

    pub fn lora_a(&self) -> &Matrix<T> {
        &self.lora_a
    }

    pub fn lora_b(&self) -> &Matrix<T> {
        &self.lora_b
    }

    pub fn gate_logits(&self) -> &Matrix<T> {
        &self.gate_logits
    }

    /// Mutable access to the trainable tensors `(A, B, θ)`.
    pub fn trainable_mut(&mut self) -> (&mut Matrix<T>, &mut Matrix<T>, &mut Matrix<T>) {
        (&mut self.lora_a, &mut self.lora_b, &mut self.gate_logits)
    }

    /// Dense weight; only full-parameter modes and tests should touch it.
    pub fn weight_mut(&mut self) -> &mut Matrix<T> {
        &mut self.weight
    }

    /// `(W, A, B, θ)` at once.
    pub fn tensors_mut(&mut self) -> [&mut Matrix<T>; 4] {
        [&mut self.weight, &mut self.lora_a, &mut self.lora_b, &mut self.gate_logits]
    }

    /// `σ(θ)` per rank.
    pub fn gate_values(&self) -> alloc::vec::Vec<f64> {
        self.gate_logits.data().iter().map(|t| sigmoid(t.as_f64())).collect()
    }

    pub fn gated_forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.d_in() {
            return Err(Error::Shape(alloc::format!(
                "input width {} for module {} expecting {}",
                x.cols(),
                self.name,
                self.d_in()
            )));
        }
        let gates = self.gate_logits.map(|t| T::one() / (T::one() + (-t).exp()));
        let mut ax = x.matmul_bt(&self.lora_a)?;
        for i in 0..ax.rows() {
            for (v, &g) in ax.row_mut(i).iter_mut().zip(gates.data()) {
                *v *= g;
            }
        }
        let low = ax.matmul_bt(&self.lora_b)?.scale(T::cast(self.scaling()));
        if !self.dense_active() {
            return Ok(low);
        }
        x.matmul_bt(&self.weight)?.scale(T::cast(self.retention)).add(&low)
    }

    /// Records the forward pass on `tape` using already-bound tensors.
    pub fn forward_on(&self, tape: &mut Tape<T>, x: Var, vars: GatedVars) -> Result<Var> {
        let ax = tape.matmul_bt(x, vars.lora_a)?;
        let g = tape.sigmoid(vars.gate_logits)?;
        let axg = tape.mul_row(ax, g)?;
        let low = tape.matmul_bt(axg, vars.lora_b)?;
        let low = tape.scale(low, T::cast(self.scaling()))?;
        if !self.dense_active() {
            return Ok(low);
        }
        let dense = tape.matmul_bt(x, vars.weight)?;
        let dense = tape.scale(dense, T::cast(self.retention))?;
        tape.add(dense, low)
    }
}
