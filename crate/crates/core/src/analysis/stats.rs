use std::collections::BTreeMap;

use super::{finish, GateTrace};
use crate::error::{Error, Result};
use crate::model::ModuleKind;
use crate::skipping::{interpolate_sorted, is_degenerate};
use crate::tokenizer;

/// Quantile levels reported by [`distribution_stats`].
pub const QUANTILES: [f64; 7] = [0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99];
/// Equal-width bins over `[0, 1]`.
pub const HISTOGRAM_BINS: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Moments {
    mean: f64,
    count: u64,
}

/// Running mean gate activation per token id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VocabStats {
    by_id: BTreeMap<u32, Moments>,
}

impl VocabStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, id: u32, value: f64) {
        let m = self.by_id.entry(id).or_default();
        m.count += 1;
        m.mean += (value - m.mean) / m.count as f64;
    }

    /// Combines two partial aggregates; the result does not depend on how
    /// samples were split between them beyond rounding.
    pub fn merge(&mut self, other: &VocabStats) {
        for (&id, o) in &other.by_id {
            let m = self.by_id.entry(id).or_default();
            let n = m.count + o.count;
            m.mean += (o.mean - m.mean) * (o.count as f64 / n as f64);
            m.count = n;
        }
    }

    /// Adds every trace entry, optionally restricted to one module kind.
    /// Entries from all layers are pooled.
    pub fn add_trace(&mut self, trace: &GateTrace, module: Option<ModuleKind>) {
        for e in &trace.entries {
            if module.is_none_or(|m| m == e.module) {
                self.push(e.token_id, e.score);
            }
        }
    }

    pub fn get(&self, id: u32) -> Option<(f64, u64)> {
        self.by_id.get(&id).map(|m| (m.mean, m.count))
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VocabEntry {
    pub id: u32,
    pub mean: f64,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopK {
    pub entries: Vec<VocabEntry>,
    /// Rank-1 mean minus rank-2 mean, when two ids are ranked.
    pub margin: Option<f64>,
}

/// The `k` ids with the highest mean activation, ties broken by ascending
/// id. Asking for more ids than observed returns all of them.
pub fn vocab_topk(stats: &VocabStats, k: usize) -> Result<TopK> {
    if k == 0 {
        return Err(Error::Config("top-k needs k >= 1".into()));
    }
    let mut all: Vec<VocabEntry> = stats
        .by_id
        .iter()
        .map(|(&id, m)| VocabEntry {
            id,
            mean: m.mean,
            count: m.count,
        })
        .collect();
    all.sort_by(|a, b| b.mean.total_cmp(&a.mean).then(a.id.cmp(&b.id)));
    all.truncate(k);
    let margin = (all.len() >= 2).then(|| all[0].mean - all[1].mean);
    Ok(TopK {
        entries: all,
        margin,
    })
}

/// Columns `id,token,mean,count`.
pub fn vocab_csv(entries: &[VocabEntry]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "token", "mean", "count"])?;
    for e in entries {
        w.write_record([
            e.id.to_string(),
            tokenizer::token_label(e.id),
            e.mean.to_string(),
            e.count.to_string(),
        ])?;
    }
    finish(w)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistributionSummary {
    pub count: usize,
    pub mean: f64,
    /// Sample standard deviation (`n - 1` denominator).
    pub std: f64,
    pub min: f64,
    pub max: f64,
    /// Values at the levels of [`QUANTILES`], same order.
    pub quantiles: [f64; 7],
    /// Counts over [`HISTOGRAM_BINS`] equal bins of `[0, 1]`; values
    /// outside are clamped into the end bins.
    pub histogram: Vec<u64>,
}

/// Summary statistics of at least two values.
///
/// Quantiles follow the skip-threshold rule exactly, including its
/// single-value / all-equal short cut.
pub fn distribution_stats(values: &[f64]) -> Result<DistributionSummary> {
    if values.len() < 2 {
        return Err(Error::Insufficient(format!(
            "distribution needs at least 2 samples, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let degenerate = is_degenerate(values);
    let (mean, var) = if degenerate {
        (values[0], 0.0)
    } else {
        let mean = values.iter().sum::<f64>() / n;
        (mean, values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0))
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let quantiles = QUANTILES.map(|q| {
        if degenerate {
            values[0]
        } else {
            interpolate_sorted(&sorted, q)
        }
    });
    let mut histogram = vec![0u64; HISTOGRAM_BINS];
    for v in values {
        let bin = (v * HISTOGRAM_BINS as f64).floor().clamp(0.0, (HISTOGRAM_BINS - 1) as f64);
        histogram[bin as usize] += 1;
    }
    Ok(DistributionSummary {
        count: values.len(),
        mean,
        std: var.sqrt(),
        min: sorted[0],
        max: sorted[sorted.len() - 1],
        quantiles,
        histogram,
    })
}

/// Distribution of one (layer, module) site pooled over many traces.
pub fn site_distribution(
    traces: &[GateTrace],
    layer: usize,
    module: ModuleKind,
) -> Result<DistributionSummary> {
    let values: Vec<f64> = traces
        .iter()
        .flat_map(|t| &t.entries)
        .filter(|e| e.layer == layer && e.module == module)
        .map(|e| e.score)
        .collect();
    distribution_stats(&values)
}

/// One row per (layer, module) summary.
pub fn distribution_csv(rows: &[(usize, ModuleKind, DistributionSummary)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["layer", "module", "count", "mean", "std", "min", "max"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(QUANTILES.iter().map(|q| format!("q{:02}", (q * 100.0).round() as u32)));
    w.write_record(&header)?;
    for (layer, module, d) in rows {
        let mut rec = vec![
            layer.to_string(),
            module.as_str().to_string(),
            d.count.to_string(),
            d.mean.to_string(),
            d.std.to_string(),
            d.min.to_string(),
            d.max.to_string(),
        ];
        rec.extend(d.quantiles.iter().map(|q| q.to_string()));
        w.write_record(&rec)?;
    }
    finish(w)
}

/// Long-format histogram: `layer,module,bin_low,bin_high,count`.
pub fn histogram_csv(rows: &[(usize, ModuleKind, DistributionSummary)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer", "module", "bin_low", "bin_high", "count"])?;
    let width = 1.0 / HISTOGRAM_BINS as f64;
    for (layer, module, d) in rows {
        for (b, c) in d.histogram.iter().enumerate() {
            w.write_record([
                layer.to_string(),
                module.as_str().to_string(),
                (b as f64 * width).to_string(),
                ((b + 1) as f64 * width).to_string(),
                c.to_string(),
            ])?;
        }
    }
    finish(w)
}
