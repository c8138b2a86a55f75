//! Dense-budget schedule and the greedy retention controller.
//!
//! The schedule `b(t)` holds at 1 until `t0`, follows a half cosine down to
//! the final fraction `F` at `t1`, and stays at `F` afterwards. Each
//! controller step turns `b(t)` into a dense-cost target
//! `C*(t) = b(t) Σ c_m` and lowers per-module target retentions, cheapest
//! modules first, until the retained cost `Σ d_m c_m` meets it. Applied
//! retentions follow the targets through an EMA and are clamped to exactly
//! zero below `eps_zero`.

use alloc::vec::Vec;

use crate::error::value_err;
use crate::gatedlora::GatedLinear;
use crate::numerics::Real;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetSchedule {
    t0: f64,
    t1: f64,
    final_fraction: f64,
}

impl BudgetSchedule {
    pub fn new(t0: f64, t1: f64, final_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&t0) || !(t1 > t0 && t1 <= 1.0) {
            return Err(value_err!("schedule needs 0 <= t0 < t1 <= 1, got t0={t0}, t1={t1}"));
        }
        if !(0.0..=1.0).contains(&final_fraction) {
            return Err(value_err!("final dense fraction must lie in [0, 1], got {final_fraction}"));
        }
        Ok(Self { t0, t1, final_fraction })
    }

    /// Short-decay defaults `(t0, t1) = (0.1, 0.3)`.
    pub fn short_decay(final_fraction: f64) -> Result<Self> {
        Self::new(0.1, 0.3, final_fraction)
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t1(&self) -> f64 {
        self.t1
    }

    pub fn final_fraction(&self) -> f64 {
        self.final_fraction
    }

    /// `b(t)` for a training fraction `t ∈ [0, 1]`.
    pub fn fraction(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(value_err!("training fraction must lie in [0, 1], got {t}"));
        }
        let f = self.final_fraction;
        Ok(if t <= self.t0 {
            1.0
        } else if t >= self.t1 {
            f
        } else {
            let phase = (t - self.t0) / (self.t1 - self.t0);
            f + (1.0 - f) * (1.0 + libm::cos(core::f64::consts::PI * phase)) / 2.0
        })
    }

    /// Training-average dense fraction with the transition approximated as
    /// linear: `t0 + (t1 − t0)(1 + F)/2 + (1 − t1) F`.
    pub fn average_dense_fraction(&self) -> f64 {
        let f = self.final_fraction;
        self.t0 + (self.t1 - self.t0) * (1.0 + f) / 2.0 + (1.0 - self.t1) * f
    }

    /// Exact average of `b(t)` over `[0, 1]`. A half cosine averages to its
    /// midpoint, so this agrees with the linearized form.
    pub fn average_dense_fraction_exact(&self) -> f64 {
        let f = self.final_fraction;
        let w = self.t1 - self.t0;
        let pi = core::f64::consts::PI;
        // ∫ cos(π (t − t0) / w) dt over the transition
        let cos_integral = w / pi * (libm::sin(pi) - libm::sin(0.0));
        let transition = w * (f + (1.0 - f) / 2.0) + (1.0 - f) / 2.0 * cos_integral;
        self.t0 + transition + (1.0 - self.t1) * f
    }
}

/// Outcome of one controller step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerStep {
    pub budget_fraction: f64,
    pub target_cost: f64,
    /// `Σ d_m c_m / Σ c_m` over the applied (smoothed, clamped) retentions.
    pub retained_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    costs: Vec<f64>,
    /// Visit order: ascending cost, ties by registration index.
    order: Vec<usize>,
    targets: Vec<f64>,
    smoothed: Vec<f64>,
    ema_beta: f64,
    eps_zero: f64,
}

impl ControllerState {
    /// `costs` are the modules' dense MAC counts in registration order.
    pub fn new(costs: &[u64], ema_beta: f64, eps_zero: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&ema_beta) {
            return Err(value_err!("ema_beta must lie in [0, 1), got {ema_beta}"));
        }
        if !(eps_zero >= 0.0 && eps_zero < 1.0) {
            return Err(value_err!("eps_zero must lie in [0, 1), got {eps_zero}"));
        }
        let costs: Vec<f64> = costs.iter().map(|&c| c as f64).collect();
        let mut order: Vec<usize> = (0..costs.len()).collect();
        order.sort_by(|&a, &b| costs[a].total_cmp(&costs[b]).then(a.cmp(&b)));
        let n = costs.len();
        Ok(Self {
            costs,
            order,
            targets: alloc::vec![1.0; n],
            smoothed: alloc::vec![1.0; n],
            ema_beta,
            eps_zero,
        })
    }

    pub fn for_modules<T: Real>(modules: &[&GatedLinear<T>], ema_beta: f64, eps_zero: f64) -> Result<Self> {
        let costs: Vec<u64> = modules.iter().map(|m| m.dense_cost()).collect();
        Self::new(&costs, ema_beta, eps_zero)
    }

    pub fn len(&self) -> usize {
        self.costs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.costs.is_empty()
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// Retentions as applied to the modules.
    pub fn retentions(&self) -> &[f64] {
        &self.smoothed
    }

    pub fn ema_beta(&self) -> f64 {
        self.ema_beta
    }

    pub fn total_cost(&self) -> f64 {
        self.costs.iter().sum()
    }

    /// `C*(b) = b Σ c_m`.
    pub fn target_dense_cost(&self, b: f64) -> f64 {
        b * self.total_cost()
    }

    pub fn retained_cost(&self) -> f64 {
        weighted(&self.smoothed, &self.costs)
    }

    pub fn retained_fraction(&self) -> f64 {
        let total = self.total_cost();
        if total == 0.0 {
            1.0
        } else {
            self.retained_cost() / total
        }
    }

    /// Greedy targets for `c_star`, lowering the current targets (never
    /// raising them). Modules are visited cheapest first and taken to zero
    /// before moving on; the last one touched may end fractional.
    pub fn greedy_targets(&self, c_star: f64) -> Vec<f64> {
        lower_greedily(&self.costs, &self.order, &self.targets, c_star)
    }

    /// Controller update at training fraction `t` without touching modules.
    pub fn advance(&mut self, schedule: &BudgetSchedule, t: f64) -> Result<ControllerStep> {
        let b = schedule.fraction(t)?;
        let c_star = self.target_dense_cost(b);
        self.targets = self.greedy_targets(c_star);
        let beta = self.ema_beta;
        for (i, s) in self.smoothed.iter_mut().enumerate() {
            if *s == 0.0 {
                // clamped retentions stay removed
                self.targets[i] = 0.0;
                continue;
            }
            let next = beta * *s + (1.0 - beta) * self.targets[i];
            *s = if next < self.eps_zero { 0.0 } else { next.min(*s) };
            if *s == 0.0 {
                self.targets[i] = 0.0;
            }
        }
        Ok(ControllerStep {
            budget_fraction: b,
            target_cost: c_star,
            retained_fraction: self.retained_fraction(),
        })
    }

    /// Full controller step: update, then write retentions into the modules
    /// (registration order).
    pub fn controller_step<T: Real>(
        &mut self,
        schedule: &BudgetSchedule,
        t: f64,
        modules: &mut [&mut GatedLinear<T>],
    ) -> Result<ControllerStep> {
        if modules.len() != self.costs.len() {
            return Err(Error::State(alloc::format!(
                "controller tracks {} modules, got {}",
                self.costs.len(),
                modules.len()
            )));
        }
        let step = self.advance(schedule, t)?;
        for (m, &d) in modules.iter_mut().zip(&self.smoothed) {
            m.set_retention(d)?;
        }
        Ok(step)
    }
}

fn weighted(d: &[f64], c: &[f64]) -> f64 {
    d.iter().zip(c).map(|(a, b)| a * b).sum()
}

fn lower_greedily(costs: &[f64], order: &[usize], current: &[f64], c_star: f64) -> Vec<f64> {
    let mut targets = current.to_vec();
    let retained = weighted(&targets, costs);
    let mut excess = retained - c_star;
    if excess <= 0.0 {
        return targets;
    }
    for &m in order {
        let held = targets[m] * costs[m];
        if held <= 0.0 {
            continue;
        }
        if held <= excess {
            excess -= held;
            targets[m] = 0.0;
        } else {
            targets[m] = (held - excess) / costs[m];
            break;
        }
    }
    targets
}
