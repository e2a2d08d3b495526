use std::collections::{BTreeMap, VecDeque};

use crate::error::{Error, Result};
use crate::skipping::{quantile_threshold, BudgetPolicy, Site, SkipMask, SkipPolicy};

/// Per-site thresholds over a rolling window of recent scores.
///
/// A token is skipped when its score is at or below the `(1 - budget)`
/// quantile of the window; with an empty window it is processed. Its score
/// joins the window after the decision.
#[derive(Clone, Debug)]
pub struct StreamingPolicy {
    pub budget: f64,
    pub window: usize,
    history: BTreeMap<Site, VecDeque<f64>>,
    pub decisions: usize,
    pub skips: usize,
}

impl StreamingPolicy {
    pub fn new(budget: f64, window: usize) -> Result<Self> {
        if !(budget > 0.0 && budget <= 1.0) {
            return Err(Error::Config(format!("budget {budget} outside (0, 1]")));
        }
        if window == 0 {
            return Err(Error::Config("window must be positive".into()));
        }
        Ok(Self {
            budget,
            window,
            history: BTreeMap::new(),
            decisions: 0,
            skips: 0,
        })
    }

    /// Appends scores to a site's window without deciding anything.
    pub fn observe(&mut self, site: Site, scores: impl IntoIterator<Item = f64>) {
        let h = self.history.entry(site).or_default();
        for s in scores {
            h.push_back(s);
            if h.len() > self.window {
                h.pop_front();
            }
        }
    }

    pub fn history(&self, site: Site) -> Vec<f64> {
        self.history
            .get(&site)
            .map(|h| h.iter().copied().collect())
            .unwrap_or_default()
    }
}

impl SkipPolicy for StreamingPolicy {
    fn decide(&mut self, site: Site, scores: &[f64], _: &[usize]) -> Result<SkipMask> {
        let mut mask = Vec::with_capacity(scores.len());
        for &s in scores {
            let h = self.history.entry(site).or_default();
            let skip = if h.is_empty() {
                false
            } else {
                s <= quantile_threshold(h.make_contiguous(), 1.0 - self.budget)?
            };
            self.decisions += 1;
            self.skips += skip as usize;
            mask.push(skip);
            self.observe(site, [s]);
        }
        Ok(SkipMask(mask))
    }
}

/// Ranks the whole prompt at a fixed budget and seeds the streaming
/// windows with the scores of the active prompt tokens.
#[derive(Debug)]
pub struct PrefillPolicy<'a> {
    pub ranking: BudgetPolicy,
    stream: &'a mut StreamingPolicy,
}

impl<'a> PrefillPolicy<'a> {
    pub fn new(budget: f64, stream: &'a mut StreamingPolicy) -> Self {
        Self {
            ranking: BudgetPolicy::new(budget),
            stream,
        }
    }
}

impl SkipPolicy for PrefillPolicy<'_> {
    fn decide(&mut self, site: Site, scores: &[f64], positions: &[usize]) -> Result<SkipMask> {
        let mask = self.ranking.decide(site, scores, positions)?;
        let inactive = &self.ranking.inactive;
        let active = scores
            .iter()
            .zip(positions)
            .filter(|(_, p)| !inactive.contains(p))
            .map(|(s, _)| *s);
        self.stream.observe(site, active);
        Ok(mask)
    }
}
