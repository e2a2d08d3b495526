//! Joint training of backbone and gates.
//!
//! Each step draws the current budget from a linear decay schedule, runs the
//! gated forward pass with per-layer quantile skipping, and minimizes
//! cross-entropy plus a weighted mean-gate-activation penalty with AdamW.

mod data;
mod optim;

pub use data::{Batch, BatchSampler, Corpus};
pub use optim::{adamw_update, clip_global_norm, cosine_lr, AdamWConfig, OptimizerState};

use std::fmt;
use std::io::Write;

use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model, ModuleRecord};
use crate::numerics::{Tape, Var};
use crate::skipping::{budget_at, BudgetPolicy, BudgetSchedule};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub sparsity_weight: f64,
    pub schedule: BudgetSchedule,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub adam: AdamWConfig,
    pub grad_clip_norm: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let total_steps = 2000;
        Self {
            sparsity_weight: 0.1,
            schedule: BudgetSchedule {
                start: 1.0,
                end: 0.8,
                total_steps,
            },
            peak_lr: 3e-3,
            warmup_steps: 100,
            total_steps,
            adam: AdamWConfig::default(),
            grad_clip_norm: 1.0,
            batch_size: 8,
            seq_len: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.sparsity_weight < 0.0 || !self.sparsity_weight.is_finite() {
            return fail(format!("sparsity weight {} must be >= 0", self.sparsity_weight));
        }
        if self.total_steps == 0 || self.warmup_steps > self.total_steps {
            return fail(format!(
                "need 0 <= warmup ({}) <= total ({}) and total > 0",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.schedule.total_steps != self.total_steps {
            return fail("budget schedule length differs from total_steps".into());
        }
        BudgetSchedule::new(self.schedule.start, self.schedule.end, self.total_steps)?;
        if self.batch_size == 0 || self.seq_len == 0 {
            return fail("batch_size and seq_len must be positive".into());
        }
        if self.grad_clip_norm <= 0.0 {
            return fail("grad_clip_norm must be positive".into());
        }
        Ok(())
    }
}

/// Mean gate activation over every recorded element.
pub fn sparsity_loss(tape: &mut Tape, activations: &[Var]) -> Result<Var> {
    if activations.is_empty() {
        return Err(Error::Empty("gate activations"));
    }
    let mut count = 0usize;
    let mut total: Option<Var> = None;
    for &a in activations {
        count += tape.value(a).numel();
        let s = tape.sum_all(a);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    Ok(tape.scale(total.expect("non-empty"), 1.0 / count as f64))
}

/// `ce + weight * sparsity`; a zero weight returns `ce` itself.
pub fn total_loss(tape: &mut Tape, ce: Var, sparsity: Var, weight: f64) -> Result<Var> {
    if weight == 0.0 {
        return Ok(ce);
    }
    let s = tape.scale(sparsity, weight);
    tape.add(ce, s)
}

/// Per-step summary, printed as one log line.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub budget: f64,
    pub lr: f64,
    pub ce: f64,
    pub sparsity: f64,
    pub total: f64,
    pub grad_norm: f64,
    /// Skipped fraction of (token, branch) pairs per layer.
    pub skip_fraction: Vec<f64>,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} budget={:.6} lr={:.6e} ce={:.6} sparsity={:.6} total={:.6} grad_norm={:.6}",
            self.step, self.budget, self.lr, self.ce, self.sparsity, self.total, self.grad_norm
        )?;
        f.write_str(" skip=")?;
        for (i, s) in self.skip_fraction.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{s:.4}")?;
        }
        Ok(())
    }
}

fn layer_skip_fractions(records: &[ModuleRecord], n_layers: usize) -> Vec<f64> {
    let mut skipped = vec![0usize; n_layers];
    let mut total = vec![0usize; n_layers];
    for r in records {
        skipped[r.site.layer] += r.skipped.iter().filter(|s| **s).count();
        total[r.site.layer] += r.skipped.len();
    }
    skipped
        .iter()
        .zip(&total)
        .map(|(s, t)| if *t == 0 { 0.0 } else { *s as f64 / *t as f64 })
        .collect()
}

/// Owns a model and its optimizer state across steps.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub state: OptimizerState,
    /// Treat cross-entropy as a constant so only the sparsity term drives
    /// the update.
    pub freeze_ce: bool,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut sizes = Vec::new();
        model.params.visit(&mut |_, t| sizes.push(t.numel()));
        Ok(Self {
            model,
            config,
            state: OptimizerState::new(sizes),
            freeze_ce: false,
        })
    }

    /// One optimization step at 1-based step index `t`.
    pub fn train_step(&mut self, batch: &Batch, t: usize) -> Result<StepLog> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch"));
        }
        let cfg = self.config;
        let budget = budget_at(&cfg.schedule, t)?;
        let lr = cosine_lr(t, cfg.warmup_steps, cfg.total_steps, cfg.peak_lr);

        let mut tape = Tape::new();
        let vars = self.model.bind(&mut tape, true);
        let mut policy = BudgetPolicy::new(budget);
        let mut logits = Vec::with_capacity(batch.len());
        let mut gates = Vec::new();
        let mut records = Vec::new();
        for seq in &batch.inputs {
            let pass = self.model.forward(
                &mut tape,
                &vars,
                seq,
                &mut policy,
                None,
                ForwardOptions::default(),
            )?;
            logits.push(pass.logits);
            gates.extend(pass.gate_activations);
            records.extend(pass.records);
        }
        let all_logits = tape.concat_rows(&logits)?;
        let targets: Vec<usize> = batch.targets.iter().flatten().map(|t| *t as usize).collect();
        let mask: Vec<bool> = batch.loss_mask.iter().flatten().copied().collect();
        let ce = tape.cross_entropy(all_logits, &targets, &mask)?;
        let sparsity = sparsity_loss(&mut tape, &gates)?;
        let (ce_value, sp_value) = (tape.value(ce).item(), tape.value(sparsity).item());
        let objective = if self.freeze_ce {
            tape.scale(sparsity, cfg.sparsity_weight)
        } else {
            total_loss(&mut tape, ce, sparsity, cfg.sparsity_weight)?
        };
        let total = ce_value + cfg.sparsity_weight * sp_value;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: t,
                snapshot: format!("budget={budget} lr={lr} ce={ce_value} sparsity={sp_value}"),
            });
        }
        tape.backward(objective)?;

        let mut grads: Vec<Vec<f64>> = Vec::new();
        vars.visit(&mut |_, v| {
            grads.push(
                tape.grad(*v)
                    .map(|g| g.into_data())
                    .unwrap_or_else(|| vec![0.0; tape.value(*v).numel()]),
            )
        });
        let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip_norm);
        self.state.step += 1;
        let step = self.state.step;
        let state = &mut self.state;
        let mut i = 0;
        self.model.params.visit_mut(&mut |_, p| {
            adamw_update(
                p.data_mut(),
                &grads[i],
                &mut state.first[i],
                &mut state.second[i],
                step,
                lr,
                &cfg.adam,
            );
            i += 1;
        });

        Ok(StepLog {
            step: t,
            budget,
            lr,
            ce: ce_value,
            sparsity: sp_value,
            total,
            grad_norm,
            skip_fraction: layer_skip_fractions(&records, self.model.config.n_layers),
        })
    }

    /// Runs steps `1..=total_steps`, writing one log line per step.
    /// `on_step` runs after every step and may write checkpoints.
    pub fn run(
        &mut self,
        corpus: &[u32],
        log: &mut dyn Write,
        on_step: &mut dyn FnMut(&Trainer, &StepLog) -> Result<()>,
    ) -> Result<Vec<StepLog>> {
        let mut sampler =
            BatchSampler::new(self.config.batch_size, self.config.seq_len, self.config.seed);
        let mut logs = Vec::with_capacity(self.config.total_steps);
        for t in 1..=self.config.total_steps {
            let batch = sampler.next_batch(corpus)?;
            let entry = self.train_step(&batch, t)?;
            writeln!(log, "{entry}")?;
            on_step(self, &entry)?;
            logs.push(entry);
        }
        Ok(logs)
    }
}

/// Mean gate activation of `model` on `batch` with no skipping.
pub fn mean_gate_activation(model: &Model, batch: &Batch) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let mut gates = Vec::new();
    for seq in &batch.inputs {
        let pass = model.forward(
            &mut tape,
            &vars,
            seq,
            &mut crate::skipping::NoSkip,
            None,
            ForwardOptions::default(),
        )?;
        gates.extend(pass.gate_activations);
    }
    let s = sparsity_loss(&mut tape, &gates)?;
    Ok(tape.value(s).item())
}

#[cfg(test)]
mod tests;
