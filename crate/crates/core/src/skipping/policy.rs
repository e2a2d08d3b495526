use std::collections::{BTreeSet, HashMap};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{random_skip_mask, select_skips, ImportanceScores, SkipMask};
use crate::error::{Error, Result};
use crate::model::ModuleKind;

/// A gated sub-module: layer index (0-based) and branch kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Site {
    pub layer: usize,
    pub kind: ModuleKind,
}

impl Site {
    pub fn new(layer: usize, kind: ModuleKind) -> Self {
        Self { layer, kind }
    }
}

impl std::fmt::Display for Site {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "layer {} {}", self.layer, self.kind)
    }
}

/// Decides which tokens bypass a gated sub-module.
///
/// The model consults the policy once per eligible sub-module with the
/// importance scores of the tokens in the current forward pass.
/// `positions[i]` is the absolute position of the token scored `scores[i]`.
pub trait SkipPolicy {
    fn decide(&mut self, site: Site, scores: &[f64], positions: &[usize]) -> Result<SkipMask>;
}

/// Processes every token.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoSkip;

impl SkipPolicy for NoSkip {
    fn decide(&mut self, _: Site, scores: &[f64], _: &[usize]) -> Result<SkipMask> {
        Ok(SkipMask::none(scores.len()))
    }
}

/// Skips every token at every eligible sub-module.
#[derive(Clone, Copy, Debug, Default)]
pub struct SkipAll;

impl SkipPolicy for SkipAll {
    fn decide(&mut self, _: Site, scores: &[f64], _: &[usize]) -> Result<SkipMask> {
        Ok(SkipMask::all(scores.len()))
    }
}

/// Replays predetermined masks; sites without an entry process everything.
#[derive(Clone, Debug, Default)]
pub struct FixedMasks {
    pub masks: HashMap<Site, SkipMask>,
}

impl FixedMasks {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, site: Site, mask: SkipMask) -> Self {
        self.masks.insert(site, mask);
        self
    }

    pub fn insert(&mut self, site: Site, mask: SkipMask) {
        self.masks.insert(site, mask);
    }
}

impl SkipPolicy for FixedMasks {
    fn decide(&mut self, site: Site, scores: &[f64], _: &[usize]) -> Result<SkipMask> {
        match self.masks.get(&site) {
            Some(mask) if mask.len() != scores.len() => Err(Error::MaskLength {
                site: site.to_string(),
                got: mask.len(),
                expected: scores.len(),
            }),
            Some(mask) => Ok(mask.clone()),
            None => Ok(SkipMask::none(scores.len())),
        }
    }
}

/// Gate-ranked skipping at a fixed budget, thresholded per call.
///
/// Positions listed in `inactive` (for example tokens that already emitted
/// end-of-sequence) are excluded from the ranking and never processed.
#[derive(Clone, Debug)]
pub struct BudgetPolicy {
    pub budget: f64,
    pub inactive: BTreeSet<usize>,
    /// Number of thresholds that hit the single-value / all-equal branch.
    pub degenerate_thresholds: usize,
    pub thresholds: usize,
}

impl BudgetPolicy {
    pub fn new(budget: f64) -> Self {
        Self {
            budget,
            inactive: BTreeSet::new(),
            degenerate_thresholds: 0,
            thresholds: 0,
        }
    }
}

impl SkipPolicy for BudgetPolicy {
    fn decide(&mut self, _: Site, scores: &[f64], positions: &[usize]) -> Result<SkipMask> {
        let active: Vec<usize> = (0..scores.len())
            .filter(|i| !self.inactive.contains(&positions[*i]))
            .collect();
        let mut mask = SkipMask::all(scores.len());
        if active.is_empty() {
            return Ok(mask);
        }
        let sel = select_skips(&ImportanceScores(scores.to_vec()), self.budget, &active)?;
        self.thresholds += 1;
        if sel.degenerate {
            self.degenerate_thresholds += 1;
        }
        for (&i, &s) in active.iter().zip(sel.mask.as_slice()) {
            mask.0[i] = s;
        }
        Ok(mask)
    }
}

/// Uniform random skipping of a fixed fraction of tokens per sub-module.
///
/// Several tokens skip exactly `round(fraction * n)` of them; a single
/// token (incremental decoding) is skipped with probability `fraction`.
#[derive(Clone, Debug)]
pub struct RandomPolicy {
    pub skip_fraction: f64,
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(skip_fraction: f64, seed: u64) -> Self {
        Self {
            skip_fraction,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl SkipPolicy for RandomPolicy {
    fn decide(&mut self, _: Site, scores: &[f64], _: &[usize]) -> Result<SkipMask> {
        if scores.len() == 1 {
            if !(0.0..=1.0).contains(&self.skip_fraction) {
                return Err(Error::Config(format!(
                    "skip fraction {} outside [0, 1]",
                    self.skip_fraction
                )));
            }
            return Ok(SkipMask(vec![self.rng.random_bool(self.skip_fraction)]));
        }
        random_skip_mask(scores.len(), self.skip_fraction, self.rng.next_u64())
    }
}

impl<P: SkipPolicy + ?Sized> SkipPolicy for &mut P {
    fn decide(&mut self, site: Site, scores: &[f64], positions: &[usize]) -> Result<SkipMask> {
        (**self).decide(site, scores, positions)
    }
}
