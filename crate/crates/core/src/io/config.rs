//! Run configuration files.
//!
//! A file holds `[section]` headers followed by `key = value` lines;
//! `#` starts a comment. Every key must be known, and overrides of the form
//! `section.key=value` are applied after the file.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::inference::{GenerationConfig, Sampling};
use crate::model::ModelConfig;
use crate::tokenizer;
use crate::training::TrainConfig;

/// One `key = value` line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub section: String,
    pub key: String,
    pub value: String,
    pub line: usize,
}

pub const SECTIONS: [&str; 5] = ["model", "gate", "train", "generate", "paths"];

/// Splits a configuration file into entries without interpreting values.
pub fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    let mut section: Option<String> = None;
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or_default().trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| Error::Config(format!("line {line}: unterminated section header")))?
                .trim();
            if !SECTIONS.contains(&name) {
                return Err(Error::Config(format!("line {line}: unknown section [{name}]")));
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {line}: expected `key = value`")))?;
        let section = section
            .clone()
            .ok_or_else(|| Error::Config(format!("line {line}: key outside any section")))?;
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config(format!("line {line}: empty key")));
        }
        if out.iter().any(|e| e.section == section && e.key == key) {
            return Err(Error::Config(format!("line {line}: duplicate key {section}.{key}")));
        }
        out.push(Entry {
            section,
            key,
            value: value.trim().to_string(),
            line,
        });
    }
    Ok(out)
}

/// Every setting a command may need.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generation: GenerationConfig,
    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            generation: GenerationConfig::default(),
            corpus: None,
            checkpoint: None,
            out_dir: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    /// Defaults updated by the file's entries; the result is validated.
    pub fn from_text(text: &str) -> Result<Self> {
        Self::load(text, &[])
    }

    /// Like [`RunConfig::from_text`], with `section.key=value` overrides
    /// applied after the file and before validation.
    pub fn load(text: &str, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        for e in parse_entries(text)? {
            cfg.set(&e.section, &e.key, &e.value)
                .map_err(|err| Error::Config(format!("line {}: {err}", e.line)))?;
        }
        for o in overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `section.key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (path, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {spec:?} is not section.key=value")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("override {spec:?} is not section.key=value")))?;
        self.set(section, key, value.trim())
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let name = format!("{section}.{key}");
        let k = name.as_str();
        let m = &mut self.model;
        let t = &mut self.train;
        let g = &mut self.generation;
        match k {
            "model.n_layers" => m.n_layers = parse(k, value)?,
            "model.hidden" => m.hidden = parse(k, value)?,
            "model.n_heads" => m.n_heads = parse(k, value)?,
            "model.ff_dim" => m.ff_dim = parse(k, value)?,
            "model.vocab" => m.vocab = parse(k, value)?,
            "model.max_seq" => m.max_seq = parse(k, value)?,
            "gate.shape" => m.gate.shape = value.parse()?,
            "gate.sharing" => m.gate.sharing = value.parse()?,
            "gate.placement" => m.gate.placement = value.parse()?,
            "gate.arch" => m.gate.arch = value.parse()?,
            "gate.granularity" => m.gate.granularity = value.parse()?,
            "train.steps" => {
                t.total_steps = parse(k, value)?;
                t.schedule.total_steps = t.total_steps;
            }
            "train.sparsity_weight" => t.sparsity_weight = parse(k, value)?,
            "train.budget_start" => t.schedule.start = parse(k, value)?,
            "train.budget_end" => t.schedule.end = parse(k, value)?,
            "train.peak_lr" => t.peak_lr = parse(k, value)?,
            "train.warmup_steps" => t.warmup_steps = parse(k, value)?,
            "train.weight_decay" => t.adam.weight_decay = parse(k, value)?,
            "train.beta1" => t.adam.beta1 = parse(k, value)?,
            "train.beta2" => t.adam.beta2 = parse(k, value)?,
            "train.grad_clip" => t.grad_clip_norm = parse(k, value)?,
            "train.batch_size" => t.batch_size = parse(k, value)?,
            "train.seq_len" => t.seq_len = parse(k, value)?,
            "train.seed" => t.seed = parse(k, value)?,
            "generate.budget" => g.budget = parse(k, value)?,
            "generate.max_new_tokens" => g.max_new_tokens = parse(k, value)?,
            "generate.temperature" => {
                let temp: f64 = parse(k, value)?;
                g.sampling = if temp == 0.0 {
                    Sampling::Greedy
                } else {
                    Sampling::Temperature(temp)
                };
            }
            "generate.eos" => {
                g.eos_id = match value {
                    "none" => None,
                    "default" => Some(tokenizer::EOS),
                    v => Some(parse(k, v)?),
                }
            }
            "generate.window" => g.window = parse(k, value)?,
            "generate.seed" => g.seed = parse(k, value)?,
            "paths.corpus" => self.corpus = Some(PathBuf::from(value)),
            "paths.checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "paths.out_dir" => self.out_dir = Some(PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown key {name}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.generation.validate()?;
        if self.train.seq_len > self.model.max_seq {
            return Err(Error::Config(format!(
                "train.seq_len {} exceeds model.max_seq {}",
                self.train.seq_len, self.model.max_seq
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GateShape, Granularity};

    #[test]
    fn parses_sections_comments_and_overrides() {
        let text = "\
# toy run
[model]
n_layers = 2   # shallow
hidden = 32

[gate]
shape = scalar
granularity = whole-layer

[train]
steps = 50
warmup_steps = 5
budget_end = 0.9

[generate]
eos = none
temperature = 0

[paths]
corpus = data/toy.txt
";
        let mut cfg = RunConfig::from_text(text).unwrap();
        assert_eq!(cfg.model.n_layers, 2);
        assert_eq!(cfg.model.hidden, 32);
        assert_eq!(cfg.model.gate.shape, GateShape::Scalar);
        assert_eq!(cfg.model.gate.granularity, Granularity::WholeLayerByAttnGate);
        assert_eq!(cfg.train.total_steps, 50);
        assert_eq!(cfg.train.schedule.total_steps, 50);
        assert_eq!(cfg.train.schedule.end, 0.9);
        assert_eq!(cfg.train.sparsity_weight, 0.1);
        assert_eq!(cfg.generation.eos_id, None);
        assert_eq!(cfg.corpus, Some(PathBuf::from("data/toy.txt")));
        cfg.apply_override("train.sparsity_weight=0.5").unwrap();
        assert_eq!(cfg.train.sparsity_weight, 0.5);
        assert!(cfg.apply_override("train.nope=1").is_err());
        assert!(cfg.apply_override("steps=1").is_err());

        let fixed = RunConfig::load("[train]\nsteps = 50", &["train.warmup_steps=0".into()]);
        assert_eq!(fixed.unwrap().train.warmup_steps, 0);
    }

    #[test]
    fn defaults_follow_the_reference_schedule() {
        let cfg = RunConfig::from_text("").unwrap();
        assert_eq!(cfg.train.sparsity_weight, 0.1);
        assert_eq!((cfg.train.schedule.start, cfg.train.schedule.end), (1.0, 0.8));
    }

    #[test]
    fn rejects_bad_files() {
        for bad in [
            "n_layers = 2",
            "[model\nn_layers = 2",
            "[optimizer]\nlr = 1",
            "[model]\nn_layers",
            "[model]\n = 3",
            "[model]\nn_layers = two",
            "[model]\nn_layers = 2\nn_layers = 3",
            "[model]\nwidth = 3",
            "[model]\nn_layers = 0",
            "[gate]\nshape = matrix",
            "[train]\nbudget_start = 0.5\nbudget_end = 0.9",
            "[train]\nseq_len = 1000",
        ] {
            assert!(RunConfig::from_text(bad).is_err(), "{bad:?}");
        }
        match RunConfig::from_text("[model]\n\nwidth = 3") {
            Err(Error::Config(m)) => assert!(m.contains("line 3"), "{m}"),
            other => panic!("{other:?}"),
        }
    }
}
