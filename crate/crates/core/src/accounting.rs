//! Per-token MAC and parameter tallies over the adapted projections, and
//! the training-compute proxies for the three distillation methods.
//!
//! Every figure here is a count derived from shapes; nothing is timed.
//! For a bias-free linear map the per-token MACs equal the parameter count,
//! so one tally serves both.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::{self, Write as _};
use core::str::FromStr;

use crate::budget::{BudgetSchedule, ControllerState};
use crate::compress::{CompressionCase, CompressionConfig, CompressionSummary};
use crate::error::value_err;
use crate::model::ModuleShape;
use crate::{Error, Result};

/// Dense forward MACs per token: Σ d_in·d_out.
pub fn dense_macs(shapes: &[ModuleShape]) -> u64 {
    shapes.iter().map(ModuleShape::dense_cost).sum()
}

/// LoRA forward MACs per token at rank `r`: Σ r·(d_in + d_out).
pub fn lora_macs(shapes: &[ModuleShape], r: usize) -> u64 {
    shapes.iter().map(|s| r as u64 * (s.d_in + s.d_out) as u64).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrainMethod {
    Full,
    Lora,
    Budgeted,
}

impl TrainMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMethod::Full => "full",
            TrainMethod::Lora => "lora",
            TrainMethod::Budgeted => "budgeted",
        }
    }
}

impl fmt::Display for TrainMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(TrainMethod::Full),
            "lora" => Ok(TrainMethod::Lora),
            "budgeted" => Ok(TrainMethod::Budgeted),
            other => Err(value_err!("unknown method {other:?} (expected full, lora or budgeted)")),
        }
    }
}

/// Training-compute proxy for one method, with its ratio to full KD.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainProxy {
    pub method: TrainMethod,
    /// Average retained dense fraction; 1 for full and LoRA training.
    pub avg_dense_fraction: f64,
    pub cost: f64,
    pub ratio_vs_full: f64,
}

/// `3D` for full KD, `2D + 3L` for LoRA KD and `2·d̄·D + 3L` for budgeted
/// KD. The backward through a frozen weight still costs one dense pass
/// (input gradients) but skips the weight-gradient pass.
pub fn train_proxy(method: TrainMethod, d: u64, l: u64, avg_dense_fraction: f64) -> TrainProxy {
    let (d, l) = (d as f64, l as f64);
    let (dbar, cost) = match method {
        TrainMethod::Full => (1.0, 3.0 * d),
        TrainMethod::Lora => (1.0, 2.0 * d + 3.0 * l),
        TrainMethod::Budgeted => (avg_dense_fraction, 2.0 * avg_dense_fraction * d + 3.0 * l),
    };
    let full = 3.0 * d;
    TrainProxy {
        method,
        avg_dense_fraction: dbar,
        cost,
        ratio_vs_full: if full > 0.0 { cost / full } else { 0.0 },
    }
}

/// Fixed point of the controller with no smoothing at the end of the
/// schedule: the greedy retentions for a final fraction `F`.
pub fn static_greedy_retentions(shapes: &[ModuleShape], final_fraction: f64, eps_zero: f64) -> Result<Vec<f64>> {
    let costs: Vec<u64> = shapes.iter().map(ModuleShape::dense_cost).collect();
    let mut state = ControllerState::new(&costs, 0.0, eps_zero)?;
    let schedule = BudgetSchedule::short_decay(final_fraction)?;
    state.advance(&schedule, 1.0)?;
    Ok(state.retentions().to_vec())
}

/// MAC / parameter accounting for a compressed model, measured over the
/// replaced modules only.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub n_modules: usize,
    pub kept: usize,
    pub svd: usize,
    pub dropped: usize,
    pub mean_active_rank: f64,
    pub lora_rank: usize,
    pub dense_macs: u64,
    pub lora_macs: u64,
    pub compressed_macs: u64,
    pub params_before: u64,
    pub params_after: u64,
    pub speedup_vs_dense: f64,
    pub speedup_vs_lora: f64,
    pub param_reduction: f64,
    /// Filled in by [`CostReport::with_train_proxies`].
    pub train_proxies: Vec<TrainProxy>,
}

/// Builds the report for `summary`, where every module carries LoRA rank
/// `lora_rank` before compression. Fails if any module's MAC and parameter
/// tallies disagree.
pub fn compression_report(summary: &CompressionSummary, lora_rank: usize) -> Result<CostReport> {
    let mut dense = 0u64;
    let mut lora = 0u64;
    let mut compressed = 0u64;
    let mut after = 0u64;
    for m in &summary.modules {
        if m.macs != m.params {
            return Err(Error::Contract(format!(
                "{}: {} MACs but {} parameters",
                m.name, m.macs, m.params
            )));
        }
        let (d_in, d_out) = (m.d_in as u64, m.d_out as u64);
        let expected = match m.case {
            CompressionCase::MergeDense => d_in * d_out,
            _ => m.total_rank().unwrap_or(0) as u64 * (d_in + d_out),
        };
        if m.macs != expected {
            return Err(Error::Contract(format!(
                "{}: recorded {} MACs, shapes give {expected}",
                m.name, m.macs
            )));
        }
        dense += d_in * d_out;
        lora += lora_rank as u64 * (d_in + d_out);
        compressed += m.macs;
        after += m.params;
    }
    let ratio = |num: u64| if compressed > 0 { num as f64 / compressed as f64 } else { f64::INFINITY };
    let before = dense + lora;
    Ok(CostReport {
        n_modules: summary.len(),
        kept: summary.kept(),
        svd: summary.svd(),
        dropped: summary.dropped(),
        mean_active_rank: summary.mean_active_rank(),
        lora_rank,
        dense_macs: dense,
        lora_macs: lora,
        compressed_macs: compressed,
        params_before: before,
        params_after: after,
        speedup_vs_dense: ratio(dense),
        speedup_vs_lora: ratio(before),
        param_reduction: if before > 0 { 1.0 - after as f64 / before as f64 } else { 0.0 },
        train_proxies: Vec::new(),
    })
}

impl CostReport {
    /// Attaches full / LoRA / budgeted proxies using this report's `D` and
    /// `L` and the schedule's linearized average retention.
    pub fn with_train_proxies(mut self, schedule: &BudgetSchedule) -> Self {
        let dbar = schedule.average_dense_fraction();
        self.train_proxies = [TrainMethod::Full, TrainMethod::Lora, TrainMethod::Budgeted]
            .into_iter()
            .map(|m| train_proxy(m, self.dense_macs, self.lora_macs, dbar))
            .collect();
        self
    }

    /// `key: value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "modules: {}", self.n_modules);
        let _ = writeln!(s, "kept: {}", self.kept);
        let _ = writeln!(s, "svd: {}", self.svd);
        let _ = writeln!(s, "dropped: {}", self.dropped);
        let _ = writeln!(s, "mean_active_rank: {:.2}", self.mean_active_rank);
        let _ = writeln!(s, "lora_rank: {}", self.lora_rank);
        let _ = writeln!(s, "dense_macs: {}", self.dense_macs);
        let _ = writeln!(s, "lora_macs: {}", self.lora_macs);
        let _ = writeln!(s, "compressed_macs: {}", self.compressed_macs);
        let _ = writeln!(s, "params_before: {}", self.params_before);
        let _ = writeln!(s, "params_after: {}", self.params_after);
        let _ = writeln!(s, "speedup_vs_dense: {:.4}", self.speedup_vs_dense);
        let _ = writeln!(s, "speedup_vs_lora: {:.4}", self.speedup_vs_lora);
        let _ = writeln!(s, "param_reduction: {:.4}", self.param_reduction);
        for p in &self.train_proxies {
            let _ = writeln!(s, "train_proxy.{}.avg_dense_fraction: {:.4}", p.method, p.avg_dense_fraction);
            let _ = writeln!(s, "train_proxy.{}.cost: {:.6e}", p.method, p.cost);
            let _ = writeln!(s, "train_proxy.{}.ratio_vs_full: {:.4}", p.method, p.ratio_vs_full);
        }
        s
    }
}

/// Convenience: report for the static greedy retentions at `F`, assuming
/// all LoRA ranks survive.
pub fn static_report(
    shapes: &[ModuleShape],
    final_fraction: f64,
    lora_rank: usize,
    cfg: &CompressionConfig,
) -> Result<CostReport> {
    let d = static_greedy_retentions(shapes, final_fraction, cfg.eps_zero)?;
    let summary = CompressionSummary::from_retentions(shapes, &d, lora_rank, cfg)?;
    Ok(compression_report(&summary, lora_rank)?.with_train_proxies(&BudgetSchedule::short_decay(final_fraction)?))
}
