//! Token ranking and budgeted skip decisions.
//!
//! A token's importance at a gated sub-module is the mean of its gate vector.
//! Under a budget `b` the `(1 - b)`-quantile of the importances becomes a
//! threshold and every token at or below it bypasses the sub-module.

mod policy;

pub use policy::{BudgetPolicy, FixedMasks, NoSkip, RandomPolicy, Site, SkipAll, SkipPolicy};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Per-token importance, the mean over the hidden dimension of each gate row.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceScores(pub Vec<f64>);

impl ImportanceScores {
    /// Collapses an `[S, H]` (or `[S, 1]`) gate tensor to one score per row.
    pub fn from_gate(gate: &Tensor) -> Self {
        let c = gate.cols();
        Self(
            gate.data()
                .chunks_exact(c)
                .map(|row| row.iter().sum::<f64>() / c as f64)
                .collect(),
        )
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Skip decisions, `true` meaning the token bypasses the sub-module.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SkipMask(pub Vec<bool>);

impl SkipMask {
    pub fn none(n: usize) -> Self {
        Self(vec![false; n])
    }

    pub fn all(n: usize) -> Self {
        Self(vec![true; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn skipped(&self) -> usize {
        self.0.iter().filter(|s| **s).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }
}

/// True when the threshold falls into the short-circuit branch: at most one
/// value, or all values equal.
pub fn is_degenerate(values: &[f64]) -> bool {
    values.len() <= 1 || values.iter().all(|v| *v == values[0])
}

/// Linear-interpolated `q`-quantile between adjacent order statistics.
///
/// With a single value or all values equal, the first value is returned
/// as-is.
pub fn quantile_threshold(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("quantile_threshold values"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Config(format!("quantile {q} outside [0, 1]")));
    }
    if is_degenerate(values) {
        return Ok(values[0]);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(interpolate_sorted(&sorted, q))
}

/// Interpolated quantile of an already ascending slice.
pub(crate) fn interpolate_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let pos = q * (n - 1) as f64;
    let i = pos.floor() as usize;
    let alpha = pos - i as f64;
    if i + 1 >= n {
        return sorted[n - 1];
    }
    (1.0 - alpha) * sorted[i] + alpha * sorted[i + 1]
}

/// Linear budget decay from `start` to `end` over `total_steps` steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BudgetSchedule {
    pub start: f64,
    pub end: f64,
    pub total_steps: usize,
}

impl BudgetSchedule {
    pub fn new(start: f64, end: f64, total_steps: usize) -> Result<Self> {
        if !(end > 0.0 && end <= start && start <= 1.0) {
            return Err(Error::Config(format!(
                "budget schedule needs 0 < end <= start <= 1, got {start} -> {end}"
            )));
        }
        if total_steps == 0 {
            return Err(Error::Config("budget schedule needs at least one step".into()));
        }
        Ok(Self {
            start,
            end,
            total_steps,
        })
    }

    pub fn constant(budget: f64, total_steps: usize) -> Result<Self> {
        Self::new(budget, budget, total_steps)
    }
}

/// Budget at 1-based step `t`: `start` at `t = 1`, `end` at `t = total`.
pub fn budget_at(schedule: &BudgetSchedule, t: usize) -> Result<f64> {
    let total = schedule.total_steps;
    if t == 0 || t > total {
        return Err(Error::StepOutOfRange { step: t, total });
    }
    if total == 1 {
        return Ok(schedule.start);
    }
    let frac = (t - 1) as f64 / (total - 1) as f64;
    Ok(schedule.start - (schedule.start - schedule.end) * frac)
}

/// Outcome of ranking one set of active tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    /// One entry per active token, in the order of `active`.
    pub mask: SkipMask,
    pub threshold: f64,
    pub degenerate: bool,
}

/// Skips every active token whose score is at or below the
/// `(1 - budget)`-quantile of the active scores.
///
/// `active` lists indices into `scores`; tokens not listed take no part in
/// the ranking.
pub fn select_skips(scores: &ImportanceScores, budget: f64, active: &[usize]) -> Result<Selection> {
    if active.is_empty() {
        return Err(Error::Empty("select_skips active set"));
    }
    if !(budget > 0.0 && budget <= 1.0) {
        return Err(Error::Config(format!("budget {budget} outside (0, 1]")));
    }
    let values: Vec<f64> = active
        .iter()
        .map(|&i| {
            scores.0.get(i).copied().ok_or(Error::CacheIndex {
                index: i,
                len: scores.len(),
            })
        })
        .collect::<Result<_>>()?;
    let threshold = quantile_threshold(&values, 1.0 - budget)?;
    Ok(Selection {
        mask: SkipMask(values.iter().map(|v| *v <= threshold).collect()),
        threshold,
        degenerate: is_degenerate(&values),
    })
}

/// Uniformly chooses `round(skip_fraction * n_active)` of `n_active` tokens.
pub fn random_skip_mask(n_active: usize, skip_fraction: f64, seed: u64) -> Result<SkipMask> {
    if !(0.0..=1.0).contains(&skip_fraction) {
        return Err(Error::Config(format!(
            "skip fraction {skip_fraction} outside [0, 1]"
        )));
    }
    let count = ((skip_fraction * n_active as f64).round() as usize).min(n_active);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![false; n_active];
    for i in index::sample(&mut rng, n_active, count) {
        mask[i] = true;
    }
    Ok(SkipMask(mask))
}
