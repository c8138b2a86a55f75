//! Post-training compression: gate hardening, then one of three deployment
//! forms per module depending on its final retention `d`.
//!
//! - Case 1, `d < eps_zero`: dense path dropped, only the hardened LoRA
//!   factors remain (a two-matrix low-rank operator).
//! - Case 2, `eps_zero <= d < eps_lr`: `d·W` approximated by a truncated SVD
//!   whose factors are concatenated with the LoRA factors into one low-rank
//!   operator (SVD ranks first, LoRA ranks after).
//! - Case 3, `d >= eps_lr`: `W_eff = d·W + ΔW` as a single dense matrix.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::error::value_err;
use crate::gatedlora::GatedLinear;
use crate::model::{Linear, ModuleShape, TransformerModel};
use crate::numerics::{truncated_svd, Matrix, Real};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressionConfig {
    pub gate_threshold: f64,
    pub eps_zero: f64,
    pub eps_lr: f64,
    pub r_max_dense: usize,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            gate_threshold: 0.3,
            eps_zero: 1e-3,
            eps_lr: 0.7,
            r_max_dense: 128,
        }
    }
}

impl CompressionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gate_threshold > 0.0 && self.gate_threshold < 1.0) {
            return Err(value_err!("gate_threshold must lie in (0, 1), got {}", self.gate_threshold));
        }
        if !(self.eps_zero > 0.0 && self.eps_zero < self.eps_lr && self.eps_lr <= 1.0) {
            return Err(value_err!(
                "thresholds must satisfy 0 < eps_zero < eps_lr <= 1, got {} and {}",
                self.eps_zero,
                self.eps_lr
            ));
        }
        if self.r_max_dense == 0 {
            return Err(value_err!("r_max_dense must be at least 1"));
        }
        Ok(())
    }

    pub fn classify(&self, d: f64) -> CompressionCase {
        if d < self.eps_zero {
            CompressionCase::DropDense
        } else if d < self.eps_lr {
            CompressionCase::SvdResidual
        } else {
            CompressionCase::MergeDense
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CompressionCase {
    DropDense = 1,
    SvdResidual = 2,
    MergeDense = 3,
}

impl CompressionCase {
    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(CompressionCase::DropDense),
            2 => Ok(CompressionCase::SvdResidual),
            3 => Ok(CompressionCase::MergeDense),
            _ => Err(value_err!("unknown compression case {n}")),
        }
    }
}

impl fmt::Display for CompressionCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CompressionCase::DropDense => "dropped",
            CompressionCase::SvdResidual => "svd",
            CompressionCase::MergeDense => "kept",
        };
        f.write_str(s)
    }
}

/// SVD rank for a Case-2 retention: `max(1, round_half_even(r_max_dense · d / eps_lr))`,
/// capped at `min(d_out, d_in)`.
pub fn svd_rank(d: f64, cfg: &CompressionConfig, d_out: usize, d_in: usize) -> Result<usize> {
    if cfg.classify(d) != CompressionCase::SvdResidual {
        return Err(Error::Contract(alloc::format!(
            "svd_rank needs eps_zero <= d < eps_lr, got d={d}"
        )));
    }
    let raw = libm::rint(cfg.r_max_dense as f64 * d / cfg.eps_lr);
    Ok((raw as usize).max(1).min(d_out.min(d_in)))
}

/// Surviving LoRA ranks with gate values and scaling folded into the
/// up-projection: `ΔW = up · down`.
#[derive(Debug, Clone, PartialEq)]
pub struct HardenedLora<T> {
    pub keep: Vec<usize>,
    /// d_out × |keep|: `B[:, keep] · diag(α/r_max · g[keep])`
    pub up: Matrix<T>,
    /// |keep| × d_in: `A[keep, :]`
    pub down: Matrix<T>,
}

impl<T: Real> HardenedLora<T> {
    pub fn delta(&self) -> Matrix<T> {
        self.up.matmul(&self.down).expect("hardened factors are conformable")
    }
}

/// Keeps ranks with `g_i >= threshold`, or the single strongest rank if none
/// qualify.
pub fn harden_gates<T: Real>(m: &GatedLinear<T>, gate_threshold: f64) -> HardenedLora<T> {
    let g = m.gate_values();
    let mut keep: Vec<usize> = (0..g.len()).filter(|&i| g[i] >= gate_threshold).collect();
    if keep.is_empty() {
        let best = (0..g.len())
            .max_by(|&a, &b| g[a].total_cmp(&g[b]).then(b.cmp(&a)))
            .expect("r_max >= 1");
        keep.push(best);
    }
    let scale = m.scaling();
    let mut up = m.lora_b().select_cols(&keep);
    for i in 0..up.rows() {
        for (v, &k) in up.row_mut(i).iter_mut().zip(&keep) {
            *v *= T::cast(scale * g[k]);
        }
    }
    let down = m.lora_a().select_rows(&keep);
    HardenedLora { keep, up, down }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Deployed<T> {
    /// `y = (x Vᵀ) Uᵀ` with `u: d_out×k`, `v: k×d_in`.
    LowRank { u: Matrix<T>, v: Matrix<T> },
    /// `y = x Wᵀ`.
    DenseMerged { weight: Matrix<T> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedModule<T> {
    pub name: String,
    pub deployed: Deployed<T>,
    pub case: CompressionCase,
    pub retention: f64,
    /// Number of LoRA ranks surviving hardening.
    pub active_rank: usize,
    /// SVD rank of the dense residual (Case 2 only).
    pub svd_rank: Option<usize>,
}

impl<T: Real> CompressedModule<T> {
    pub fn d_in(&self) -> usize {
        match &self.deployed {
            Deployed::LowRank { v, .. } => v.cols(),
            Deployed::DenseMerged { weight } => weight.cols(),
        }
    }

    pub fn d_out(&self) -> usize {
        match &self.deployed {
            Deployed::LowRank { u, .. } => u.rows(),
            Deployed::DenseMerged { weight } => weight.rows(),
        }
    }

    /// Inner dimension of a low-rank operator.
    pub fn total_rank(&self) -> Option<usize> {
        match &self.deployed {
            Deployed::LowRank { u, .. } => Some(u.cols()),
            Deployed::DenseMerged { .. } => None,
        }
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        match &self.deployed {
            Deployed::LowRank { u, v } => x.matmul_bt(v)?.matmul_bt(u),
            Deployed::DenseMerged { weight } => x.matmul_bt(weight),
        }
    }

    /// Stored scalar count.
    pub fn params(&self) -> u64 {
        match &self.deployed {
            Deployed::LowRank { u, v } => (u.len() + v.len()) as u64,
            Deployed::DenseMerged { weight } => weight.len() as u64,
        }
    }

    /// Multiply-accumulates per token.
    pub fn macs(&self) -> u64 {
        let (d_in, d_out) = (self.d_in() as u64, self.d_out() as u64);
        match self.total_rank() {
            Some(k) => k as u64 * (d_in + d_out),
            None => d_in * d_out,
        }
    }

    pub fn record(&self) -> ModuleRecord {
        ModuleRecord {
            name: self.name.clone(),
            d_in: self.d_in(),
            d_out: self.d_out(),
            case: self.case,
            retention: self.retention,
            active_rank: self.active_rank,
            svd_rank: self.svd_rank,
            macs: self.macs(),
            params: self.params(),
        }
    }
}

pub fn compress_module<T: Real>(m: &GatedLinear<T>, cfg: &CompressionConfig) -> Result<CompressedModule<T>> {
    cfg.validate()?;
    let lora = harden_gates(m, cfg.gate_threshold);
    let d = m.retention();
    let case = cfg.classify(d);
    let active_rank = lora.keep.len();
    let (deployed, svd_k) = match case {
        CompressionCase::DropDense => (Deployed::LowRank { u: lora.up, v: lora.down }, None),
        CompressionCase::SvdResidual => {
            let k = svd_rank(d, cfg, m.d_out(), m.d_in())?;
            let residual = m.weight().scale(T::cast(d));
            let (uk, vk) = truncated_svd(&residual, k)?;
            let u = uk.hcat(&lora.up)?;
            let v = vk.vcat(&lora.down)?;
            (Deployed::LowRank { u, v }, Some(k))
        }
        CompressionCase::MergeDense => {
            let weight = m.weight().scale(T::cast(d)).add(&lora.delta())?;
            (Deployed::DenseMerged { weight }, None)
        }
    };
    Ok(CompressedModule {
        name: String::from(m.name()),
        deployed,
        case,
        retention: d,
        active_rank,
        svd_rank: svd_k,
    })
}

/// Accounting view of one compressed module.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleRecord {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub case: CompressionCase,
    pub retention: f64,
    pub active_rank: usize,
    pub svd_rank: Option<usize>,
    pub macs: u64,
    pub params: u64,
}

impl ModuleRecord {
    pub fn total_rank(&self) -> Option<usize> {
        match self.case {
            CompressionCase::DropDense => Some(self.active_rank),
            CompressionCase::SvdResidual => Some(self.active_rank + self.svd_rank.unwrap_or(0)),
            CompressionCase::MergeDense => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CompressionSummary {
    pub modules: Vec<ModuleRecord>,
}

impl CompressionSummary {
    fn count(&self, case: CompressionCase) -> usize {
        self.modules.iter().filter(|m| m.case == case).count()
    }

    pub fn kept(&self) -> usize {
        self.count(CompressionCase::MergeDense)
    }

    pub fn svd(&self) -> usize {
        self.count(CompressionCase::SvdResidual)
    }

    pub fn dropped(&self) -> usize {
        self.count(CompressionCase::DropDense)
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    pub fn mean_active_rank(&self) -> f64 {
        if self.modules.is_empty() {
            return 0.0;
        }
        self.modules.iter().map(|m| m.active_rank as f64).sum::<f64>() / self.modules.len() as f64
    }

    /// Summary built from shapes and retentions alone, assuming every LoRA
    /// rank survives hardening. Used for accounting without weights.
    pub fn from_retentions(
        shapes: &[ModuleShape],
        retentions: &[f64],
        lora_rank: usize,
        cfg: &CompressionConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if shapes.len() != retentions.len() {
            return Err(Error::Shape(alloc::format!(
                "{} shapes with {} retentions",
                shapes.len(),
                retentions.len()
            )));
        }
        let mut modules = Vec::with_capacity(shapes.len());
        for (s, &d) in shapes.iter().zip(retentions) {
            let case = cfg.classify(d);
            let svd_k = match case {
                CompressionCase::SvdResidual => Some(svd_rank(d, cfg, s.d_out, s.d_in)?),
                _ => None,
            };
            let (d_in, d_out) = (s.d_in as u64, s.d_out as u64);
            let (macs, params) = match case {
                CompressionCase::MergeDense => (d_in * d_out, d_out * d_in),
                _ => {
                    let k = (lora_rank + svd_k.unwrap_or(0)) as u64;
                    // U is d_out×k and V is k×d_in
                    (k * (d_in + d_out), d_out * k + k * d_in)
                }
            };
            modules.push(ModuleRecord {
                name: s.name.clone(),
                d_in: s.d_in,
                d_out: s.d_out,
                case,
                retention: d,
                active_rank: lora_rank,
                svd_rank: svd_k,
                macs,
                params,
            });
        }
        Ok(Self { modules })
    }
}

/// Replaces every gated module with its deployment form. Models without
/// gated modules come back unchanged with an empty summary.
pub fn compress_model<T: Real>(
    model: &TransformerModel<T>,
    cfg: &CompressionConfig,
) -> Result<(TransformerModel<T>, CompressionSummary)> {
    cfg.validate()?;
    let mut out = model.clone();
    let mut summary = CompressionSummary::default();
    for lin in out.linears_mut() {
        if let Linear::Gated(g) = lin {
            let c = compress_module(g, cfg)?;
            summary.modules.push(c.record());
            *lin = Linear::Compressed(c);
        }
    }
    Ok((out, summary))
}
