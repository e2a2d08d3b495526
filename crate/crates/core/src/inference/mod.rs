//! Budgeted autoregressive generation with a key/value cache.
//!
//! The prompt is ranked as a whole; afterwards each new token is compared
//! against a rolling window of recent importance scores at every gated
//! sub-module, since one token alone cannot be ranked.

mod cache;
mod streaming;

pub use cache::{cache_copy_up, KvCache};
pub use streaming::{PrefillPolicy, StreamingPolicy};

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::accounting::{saved_fraction, FlopReport};
use crate::analysis::GateTrace;
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model, ModuleRecord};
use crate::numerics::kernels::softmax_in_place;
use crate::skipping::SkipPolicy;
use crate::tokenizer;

/// Default number of recent scores a decode threshold is computed from.
pub const DEFAULT_WINDOW: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampling {
    Greedy,
    Temperature(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerationConfig {
    pub budget: f64,
    pub max_new_tokens: usize,
    pub sampling: Sampling,
    pub eos_id: Option<u32>,
    pub seed: u64,
    pub window: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            budget: 1.0,
            max_new_tokens: 64,
            sampling: Sampling::Greedy,
            eos_id: Some(tokenizer::EOS),
            seed: 0,
            window: DEFAULT_WINDOW,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.budget > 0.0 && self.budget <= 1.0) {
            return Err(Error::Config(format!("budget {} outside (0, 1]", self.budget)));
        }
        if self.window == 0 {
            return Err(Error::Config("decode threshold window must be positive".into()));
        }
        if let Sampling::Temperature(t) = self.sampling {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("temperature {t} must be positive")));
            }
        }
        Ok(())
    }
}

/// Output of the prompt pass.
#[derive(Clone, Debug)]
pub struct Prefill {
    /// Next-token logits after the last prompt token.
    pub last_logits: Vec<f64>,
    pub records: Vec<ModuleRecord>,
}

/// Runs the whole prompt through the model, filling `cache`.
pub fn prefill(
    model: &Model,
    prompt: &[u32],
    policy: &mut dyn SkipPolicy,
    cache: &mut KvCache,
) -> Result<Prefill> {
    let (logits, records, _) = model.logits(prompt, policy, Some(cache), ForwardOptions::default())?;
    Ok(Prefill {
        last_logits: logits.row(logits.rows() - 1).to_vec(),
        records,
    })
}

/// Feeds one token after the cached prefix and returns its next-token
/// logits with the skip records of this step.
pub fn decode_step(
    model: &Model,
    cache: &mut KvCache,
    token: u32,
    policy: &mut dyn SkipPolicy,
) -> Result<(Vec<f64>, Vec<ModuleRecord>)> {
    if cache.is_empty() {
        return Err(Error::CacheInconsistent("decode_step needs a prefilled cache".into()));
    }
    let (logits, records, _) =
        model.logits(&[token], policy, Some(cache), ForwardOptions::default())?;
    Ok((logits.into_data(), records))
}

/// One finished sequence.
#[derive(Clone, Debug)]
pub struct Generation {
    /// Prompt followed by the generated tokens.
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
    pub records: Vec<ModuleRecord>,
    pub trace: GateTrace,
    pub flops: FlopReport,
    pub cache: KvCache,
    pub elapsed: Duration,
}

impl Generation {
    pub fn generated(&self) -> &[u32] {
        &self.tokens[self.prompt_len..]
    }

    /// Skipped (token, branch) pairs per layer.
    pub fn layer_skip_counts(&self, n_layers: usize) -> Vec<usize> {
        let mut counts = vec![0; n_layers];
        for r in &self.records {
            counts[r.site.layer] += r.skipped.iter().filter(|s| **s).count();
        }
        counts
    }

    pub fn to_text(&self, n_layers: usize) -> String {
        let mut s = String::new();
        let ids: Vec<String> = self.tokens.iter().map(|t| t.to_string()).collect();
        let _ = writeln!(s, "tokens = {}", ids.join(" "));
        let _ = writeln!(s, "text = {:?}", tokenizer::decode(self.generated()));
        let _ = writeln!(s, "prompt_len = {}", self.prompt_len);
        let _ = writeln!(s, "generated = {}", self.tokens.len() - self.prompt_len);
        let counts: Vec<String> = self
            .layer_skip_counts(n_layers)
            .iter()
            .map(|c| c.to_string())
            .collect();
        let _ = writeln!(s, "layer_skips = {}", counts.join(","));
        let _ = writeln!(s, "saved_fraction = {:.6}", self.flops.saved_fraction);
        let _ = writeln!(s, "wall_clock_ms = {:.3}", self.elapsed.as_secs_f64() * 1e3);
        s
    }
}

fn sample(logits: &[f64], sampling: Sampling, rng: &mut ChaCha8Rng) -> u32 {
    match sampling {
        Sampling::Greedy => {
            let mut best = 0;
            for (i, v) in logits.iter().enumerate() {
                if *v > logits[best] {
                    best = i;
                }
            }
            best as u32
        }
        Sampling::Temperature(t) => {
            let mut p: Vec<f64> = logits.iter().map(|l| l / t).collect();
            softmax_in_place(&mut p);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, pi) in p.iter().enumerate() {
                acc += pi;
                if u < acc {
                    return i as u32;
                }
            }
            (p.len() - 1) as u32
        }
    }
}

/// Generates a continuation of `prompt`.
pub fn generate(model: &Model, prompt: &[u32], config: &GenerationConfig) -> Result<Generation> {
    Ok(generate_batch(model, &[prompt.to_vec()], config)?.remove(0))
}

/// Generates continuations of several prompts that share one threshold
/// history. A sequence that emits the end token leaves the active set and
/// contributes no further scores.
pub fn generate_batch(
    model: &Model,
    prompts: &[Vec<u32>],
    config: &GenerationConfig,
) -> Result<Vec<Generation>> {
    config.validate()?;
    let mut stream = StreamingPolicy::new(config.budget, config.window)?;
    generate_with(model, prompts, config, &mut |stream_policy, stage| match stage {
        Stage::Prefill => Box::new(PrefillPolicy::new(config.budget, stream_policy)),
        Stage::Decode => Box::new(&mut *stream_policy),
    }, &mut stream)
}

/// Which phase a policy is requested for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Prefill,
    Decode,
}

type PolicyFactory<'f, S> =
    dyn for<'a> FnMut(&'a mut S, Stage) -> Box<dyn SkipPolicy + 'a> + 'f;

/// Generation loop with caller-chosen skip policies over shared state `S`.
pub fn generate_with<S>(
    model: &Model,
    prompts: &[Vec<u32>],
    config: &GenerationConfig,
    policies: &mut PolicyFactory<'_, S>,
    state: &mut S,
) -> Result<Vec<Generation>> {
    if prompts.is_empty() {
        return Err(Error::Empty("prompts"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let max_seq = model.config.max_seq;
    struct Live {
        tokens: Vec<u32>,
        prompt_len: usize,
        records: Vec<ModuleRecord>,
        cache: KvCache,
        logits: Vec<f64>,
        started: Instant,
        elapsed: Duration,
    }
    let mut live = Vec::with_capacity(prompts.len());
    for prompt in prompts {
        let started = Instant::now();
        let mut cache = KvCache::new(model.config.n_layers, model.config.hidden);
        let pre = {
            let mut policy = policies(state, Stage::Prefill);
            prefill(model, prompt, policy.as_mut(), &mut cache)?
        };
        live.push(Live {
            tokens: prompt.clone(),
            prompt_len: prompt.len(),
            records: pre.records,
            cache,
            logits: pre.last_logits,
            started,
            elapsed: started.elapsed(),
        });
    }

    let mut active: BTreeSet<usize> = (0..live.len()).collect();
    if config.max_new_tokens == 0 {
        active.clear();
    }
    while !active.is_empty() {
        let mut finished = Vec::new();
        for &i in &active {
            let seq = &mut live[i];
            let next = sample(&seq.logits, config.sampling, &mut rng);
            seq.tokens.push(next);
            let produced = seq.tokens.len() - seq.prompt_len;
            let done = config.eos_id == Some(next)
                || produced >= config.max_new_tokens
                || seq.tokens.len() >= max_seq;
            if done {
                finished.push(i);
                seq.elapsed = seq.started.elapsed();
                continue;
            }
            let mut policy = policies(state, Stage::Decode);
            let (logits, records) = decode_step(model, &mut seq.cache, next, policy.as_mut())?;
            seq.logits = logits;
            seq.records.extend(records);
            seq.elapsed = seq.started.elapsed();
        }
        for i in finished {
            active.remove(&i);
        }
    }

    live.into_iter()
        .map(|s| {
            let flops = saved_fraction(&s.records, &model.config)?;
            let trace = GateTrace::from_records(&s.tokens, &s.records)?;
            Ok(Generation {
                tokens: s.tokens,
                prompt_len: s.prompt_len,
                records: s.records,
                trace,
                flops,
                cache: s.cache,
                elapsed: s.elapsed,
            })
        })
        .collect()
}

/// Checks that every cached row of a skipped (layer >= 1, token) pair equals
/// the row one layer below.
pub fn verify_copy_up(cache: &KvCache, records: &[ModuleRecord]) -> Result<()> {
    for r in records {
        if r.site.layer == 0 || r.site.kind != crate::model::ModuleKind::Attention {
            continue;
        }
        for (&pos, _) in r.positions.iter().zip(&r.skipped).filter(|(_, s)| **s) {
            let l = r.site.layer;
            if cache.key_row(l, pos)? != cache.key_row(l - 1, pos)?
                || cache.value_row(l, pos)? != cache.value_row(l - 1, pos)?
            {
                return Err(Error::CacheInconsistent(format!(
                    "row {pos} at layer {l} skipped but differs from layer {}",
                    l - 1
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
