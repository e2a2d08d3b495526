//! Budget sweeps on held-out text.
//!
//! Each budget yields teacher-forced next-token accuracy and perplexity,
//! the exact-match rate of greedy continuations on a probe set, and the
//! realized saved compute. Metrics are then interpolated linearly onto
//! exact savings targets. Random skipping at matched fractions is the
//! reference.

use std::fmt::Write as _;

use crate::accounting::saved_fraction;
use crate::error::{Error, Result};
use crate::inference::{generate, generate_with, GenerationConfig, KvCache, Sampling};
use crate::model::{Model, ModuleRecord};
use crate::numerics::kernels::log_sum_exp;
use crate::skipping::{BudgetPolicy, RandomPolicy, SkipPolicy};
use crate::training::Corpus;

pub const DEFAULT_BUDGETS: [f64; 6] = [1.00, 0.95, 0.90, 0.85, 0.80, 0.75];
pub const DEFAULT_TARGETS: [f64; 6] = [0.00, 0.05, 0.10, 0.15, 0.20, 0.25];

/// A prompt and the continuation it should produce.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub prompt: Vec<u32>,
    pub expected: Vec<u32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalSet {
    /// Teacher-forced windows; position `i` predicts token `i + 1`.
    pub sequences: Vec<Vec<u32>>,
    pub probes: Vec<Probe>,
}

impl EvalSet {
    /// Held-out windows of `seq_len + 1` tokens; each of the first
    /// `n_probes` windows also gives a probe whose prompt is its first half.
    pub fn from_corpus(
        corpus: &Corpus,
        seq_len: usize,
        max_sequences: usize,
        n_probes: usize,
        probe_len: usize,
    ) -> Result<Self> {
        let sequences = corpus.held_out_windows(seq_len + 1, max_sequences);
        if sequences.is_empty() {
            return Err(Error::Insufficient(format!(
                "held-out text of {} tokens has no window of {}",
                corpus.held_out.len(),
                seq_len + 1
            )));
        }
        let half = (seq_len + 1) / 2;
        let probes = sequences
            .iter()
            .take(n_probes)
            .map(|w| {
                let end = (half + probe_len).min(w.len());
                Probe {
                    prompt: w[..half].to_vec(),
                    expected: w[half..end].to_vec(),
                }
            })
            .filter(|p| !p.expected.is_empty())
            .collect();
        Ok(Self { sequences, probes })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    /// For random points, `1 - skip_fraction`.
    pub requested_budget: f64,
    pub realized_savings: f64,
    pub accuracy: f64,
    pub perplexity: f64,
    pub exact_match: f64,
    /// `Some(seed)` for random-skipping points.
    pub baseline_seed: Option<u64>,
}

struct TeacherForced {
    correct: usize,
    total: usize,
    nll: f64,
    records: Vec<ModuleRecord>,
}

fn teacher_forced(model: &Model, set: &EvalSet, policy: &mut dyn SkipPolicy) -> Result<TeacherForced> {
    let mut out = TeacherForced {
        correct: 0,
        total: 0,
        nll: 0.0,
        records: Vec::new(),
    };
    for seq in &set.sequences {
        if seq.len() < 2 {
            continue;
        }
        let (inputs, targets) = (&seq[..seq.len() - 1], &seq[1..]);
        let mut cache = KvCache::new(model.config.n_layers, model.config.hidden);
        let (logits, records, _) =
            model.logits(inputs, policy, Some(&mut cache), Default::default())?;
        for (i, &t) in targets.iter().enumerate() {
            let row = logits.row(i);
            let t = t as usize;
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            out.correct += (best == t) as usize;
            out.nll += log_sum_exp(row) - row[t];
            out.total += 1;
        }
        out.records.extend(records);
    }
    if out.total == 0 {
        return Err(Error::Empty("evaluation sequences"));
    }
    Ok(out)
}

fn probe_config(budget: f64, probe: &Probe) -> GenerationConfig {
    GenerationConfig {
        budget,
        max_new_tokens: probe.expected.len(),
        sampling: Sampling::Greedy,
        eos_id: None,
        ..GenerationConfig::default()
    }
}

fn point(model: &Model, tf: TeacherForced, matches: usize, n_probes: usize, budget: f64, seed: Option<u64>) -> Result<SweepPoint> {
    let flops = saved_fraction(&tf.records, &model.config)?;
    Ok(SweepPoint {
        requested_budget: budget,
        realized_savings: flops.saved_fraction,
        accuracy: tf.correct as f64 / tf.total as f64,
        perplexity: (tf.nll / tf.total as f64).exp(),
        exact_match: if n_probes == 0 {
            0.0
        } else {
            matches as f64 / n_probes as f64
        },
        baseline_seed: seed,
    })
}

/// Gate-ranked skipping at budget `budget`.
pub fn eval_at_budget(model: &Model, set: &EvalSet, budget: f64) -> Result<SweepPoint> {
    let tf = teacher_forced(model, set, &mut BudgetPolicy::new(budget))?;
    let mut matches = 0;
    for probe in &set.probes {
        let g = generate(model, &probe.prompt, &probe_config(budget, probe))?;
        matches += (g.generated() == probe.expected.as_slice()) as usize;
    }
    point(model, tf, matches, set.probes.len(), budget, None)
}

/// Uniform random skipping of `fraction` of the tokens at every eligible
/// sub-module, driven by `seed`.
pub fn eval_random(model: &Model, set: &EvalSet, fraction: f64, seed: u64) -> Result<SweepPoint> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("skip fraction {fraction} outside [0, 1]")));
    }
    let mut policy = RandomPolicy::new(fraction, seed);
    let tf = teacher_forced(model, set, &mut policy)?;
    let mut matches = 0;
    for probe in &set.probes {
        let cfg = probe_config(1.0, probe);
        let g = generate_with(
            model,
            std::slice::from_ref(&probe.prompt),
            &cfg,
            &mut |p: &mut RandomPolicy, _| Box::new(p),
            &mut policy,
        )?
        .remove(0);
        matches += (g.generated() == probe.expected.as_slice()) as usize;
    }
    point(model, tf, matches, set.probes.len(), 1.0 - fraction, Some(seed))
}

pub fn sweep(model: &Model, set: &EvalSet, budgets: &[f64]) -> Result<Vec<SweepPoint>> {
    budgets.iter().map(|b| eval_at_budget(model, set, *b)).collect()
}

/// One random-skipping point per fraction, all with the same seed.
pub fn compare_random_baseline(
    model: &Model,
    set: &EvalSet,
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    fractions.iter().map(|f| eval_random(model, set, *f, seed)).collect()
}

/// Piecewise-linear interpolation of `(x, y)` knots at each target.
///
/// Knots sharing an abscissa are averaged first. Targets outside the knot
/// range (or NaN) give `None`; nothing is extrapolated.
pub fn interpolate_to_grid(points: &[(f64, f64)], targets: &[f64]) -> Result<Vec<Option<f64>>> {
    let mut sorted: Vec<(f64, f64)> = points.to_vec();
    if sorted.iter().any(|(x, y)| !x.is_finite() || y.is_nan()) {
        return Err(Error::Config("interpolation knots must be finite".into()));
    }
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut knots: Vec<(f64, f64)> = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let x = sorted[i].0;
        let mut j = i;
        let mut sum = 0.0;
        while j < sorted.len() && sorted[j].0 == x {
            sum += sorted[j].1;
            j += 1;
        }
        knots.push((x, sum / (j - i) as f64));
        i = j;
    }
    if knots.len() < 2 {
        return Err(Error::Insufficient(format!(
            "interpolation needs 2 distinct abscissae, got {}",
            knots.len()
        )));
    }
    let (lo, hi) = (knots[0].0, knots[knots.len() - 1].0);
    Ok(targets
        .iter()
        .map(|&t| {
            if !(lo..=hi).contains(&t) {
                return None;
            }
            let k = knots.partition_point(|(x, _)| *x <= t);
            let (x0, y0) = knots[k - 1];
            if x0 == t {
                return Some(y0);
            }
            let (x1, y1) = knots[k];
            Some(y0 + (y1 - y0) * (t - x0) / (x1 - x0))
        })
        .collect())
}

/// Metrics interpolated at one savings target; `None` where unavailable.
#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub target: f64,
    pub accuracy: Option<f64>,
    pub perplexity: Option<f64>,
    pub exact_match: Option<f64>,
}

fn grid(points: &[SweepPoint], targets: &[f64]) -> Result<Vec<GridRow>> {
    let metric = |f: fn(&SweepPoint) -> f64| -> Result<Vec<Option<f64>>> {
        let knots: Vec<(f64, f64)> = points.iter().map(|p| (p.realized_savings, f(p))).collect();
        match interpolate_to_grid(&knots, targets) {
            Err(Error::Insufficient(_)) => Ok(vec![None; targets.len()]),
            other => other,
        }
    };
    let acc = metric(|p| p.accuracy)?;
    let ppl = metric(|p| p.perplexity)?;
    let em = metric(|p| p.exact_match)?;
    Ok(targets
        .iter()
        .enumerate()
        .map(|(i, &target)| GridRow {
            target,
            accuracy: acc[i],
            perplexity: ppl[i],
            exact_match: em[i],
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    pub baseline: Vec<SweepPoint>,
    pub grid: Vec<GridRow>,
    pub baseline_grid: Vec<GridRow>,
}

impl SweepReport {
    pub fn new(points: Vec<SweepPoint>, baseline: Vec<SweepPoint>, targets: &[f64]) -> Result<Self> {
        let grid = grid(&points, targets)?;
        let baseline_grid = if baseline.is_empty() {
            Vec::new()
        } else {
            self::grid(&baseline, targets)?
        };
        Ok(Self {
            points,
            baseline,
            grid,
            baseline_grid,
        })
    }

    /// Columns `requested_budget,realized_savings,accuracy,perplexity,exact_match,baseline`.
    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("requested_budget,realized_savings,accuracy,perplexity,exact_match,baseline\n");
        for p in self.points.iter().chain(&self.baseline) {
            let _ = writeln!(
                s,
                "{:.6},{:.6},{:.6},{:.6},{:.6},{}",
                p.requested_budget,
                p.realized_savings,
                p.accuracy,
                p.perplexity,
                p.exact_match,
                p.baseline_seed.is_some() as u8
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("unavailable".to_string(), |v| format!("{v:.6}"));
        let mut s = String::new();
        for (name, pts, rows) in [
            ("gate", &self.points, &self.grid),
            ("random", &self.baseline, &self.baseline_grid),
        ] {
            if pts.is_empty() {
                continue;
            }
            let _ = writeln!(s, "[{name}]");
            for p in pts {
                let _ = writeln!(
                    s,
                    "budget = {:.4} savings = {:.6} accuracy = {:.6} perplexity = {:.6} exact_match = {:.6}",
                    p.requested_budget, p.realized_savings, p.accuracy, p.perplexity, p.exact_match
                );
            }
            let _ = writeln!(s, "[{name}.interpolated]");
            for r in rows {
                let _ = writeln!(
                    s,
                    "target = {:.4} accuracy = {} perplexity = {} exact_match = {}",
                    r.target,
                    fmt(r.accuracy),
                    fmt(r.perplexity),
                    fmt(r.exact_match)
                );
            }
        }
        s
    }
}
