//! Gate-value recording and analysis: per-token heatmaps, vocabulary
//! aggregation and per-site distribution summaries, all exportable as CSV.

mod stats;

pub use stats::{
    distribution_csv, distribution_stats, histogram_csv, site_distribution, vocab_csv, vocab_topk,
    DistributionSummary, TopK, VocabEntry, VocabStats, HISTOGRAM_BINS, QUANTILES,
};

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::inference::{prefill, KvCache};
use crate::model::{Model, ModuleKind, ModuleRecord};
use crate::skipping::BudgetPolicy;
use crate::tokenizer;

/// Mean gate value of one token at one gated sub-module.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceEntry {
    pub layer: usize,
    pub module: ModuleKind,
    pub position: usize,
    pub token_id: u32,
    pub score: f64,
    pub skipped: bool,
}

/// Every importance score of one sequence, with the applied decisions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GateTrace {
    pub tokens: Vec<u32>,
    pub entries: Vec<TraceEntry>,
}

/// Upper bound on positions accepted from a trace file.
pub const MAX_TRACE_POSITIONS: usize = 1 << 20;

const TRACE_HEADER: [&str; 6] = ["layer", "module", "position", "token_id", "score", "skipped"];

impl GateTrace {
    /// Flattens forward-pass records; `tokens[p]` is the token at position `p`.
    pub fn from_records(tokens: &[u32], records: &[ModuleRecord]) -> Result<Self> {
        let mut entries = Vec::new();
        for r in records {
            for ((&position, &score), &skipped) in r.positions.iter().zip(&r.scores).zip(&r.skipped) {
                let token_id = *tokens.get(position).ok_or(Error::CacheIndex {
                    index: position,
                    len: tokens.len(),
                })?;
                entries.push(TraceEntry {
                    layer: r.site.layer,
                    module: r.site.kind,
                    position,
                    token_id,
                    score,
                    skipped,
                });
            }
        }
        Ok(Self {
            tokens: tokens.to_vec(),
            entries,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.entries.iter().map(|e| e.layer + 1).max().unwrap_or(0)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(TRACE_HEADER)?;
        for e in &self.entries {
            w.write_record([
                e.layer.to_string(),
                e.module.as_str().to_string(),
                e.position.to_string(),
                e.token_id.to_string(),
                e.score.to_string(),
                (e.skipped as u8).to_string(),
            ])?;
        }
        finish(w)
    }

    /// Parses the format written by [`GateTrace::to_csv`].
    ///
    /// Every position from 0 to the largest one must carry a token id, and
    /// a position may not change token between entries.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_reader(text.as_bytes());
        let mut records = r.records();
        let bad = |line: usize, msg: String| Error::Trace { line, msg };
        match records.next() {
            Some(Ok(h)) if h.iter().eq(TRACE_HEADER) => {}
            Some(Ok(_)) | None => return Err(bad(1, format!("expected header {}", TRACE_HEADER.join(",")))),
            Some(Err(e)) => return Err(bad(1, e.to_string())),
        }
        let mut tokens: Vec<Option<u32>> = Vec::new();
        let mut seen = BTreeSet::new();
        let mut entries = Vec::new();
        for (i, rec) in records.enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| bad(line, e.to_string()))?;
            if rec.len() != TRACE_HEADER.len() {
                return Err(bad(line, format!("expected 6 fields, got {}", rec.len())));
            }
            let field = |j: usize| rec.get(j).unwrap_or_default();
            let num = |j: usize| -> Result<usize> {
                field(j)
                    .parse()
                    .map_err(|_| bad(line, format!("{} is not a count: {:?}", TRACE_HEADER[j], field(j))))
            };
            let layer = num(0)?;
            let module: ModuleKind = field(1)
                .parse()
                .map_err(|_| bad(line, format!("unknown module {:?}", field(1))))?;
            let position = num(2)?;
            let token_id: u32 = field(3)
                .parse()
                .map_err(|_| bad(line, format!("bad token id {:?}", field(3))))?;
            let score: f64 = field(4)
                .parse()
                .map_err(|_| bad(line, format!("bad score {:?}", field(4))))?;
            if !(0.0..=1.0).contains(&score) {
                return Err(bad(line, format!("score {score} outside [0, 1]")));
            }
            let skipped = match field(5) {
                "0" => false,
                "1" => true,
                other => return Err(bad(line, format!("skipped must be 0 or 1, got {other:?}"))),
            };
            if position >= MAX_TRACE_POSITIONS {
                return Err(bad(line, format!("position {position} exceeds {MAX_TRACE_POSITIONS}")));
            }
            if !seen.insert((layer, module, position)) {
                return Err(bad(line, format!("duplicate entry for layer {layer} {module} position {position}")));
            }
            if tokens.len() <= position {
                tokens.resize(position + 1, None);
            }
            match tokens[position] {
                Some(t) if t != token_id => {
                    return Err(bad(line, format!("position {position} holds token {t} and {token_id}")))
                }
                _ => tokens[position] = Some(token_id),
            }
            entries.push(TraceEntry {
                layer,
                module,
                position,
                token_id,
                score,
                skipped,
            });
        }
        let tokens = tokens
            .into_iter()
            .enumerate()
            .map(|(p, t)| t.ok_or_else(|| bad(0, format!("no entry for position {p}"))))
            .collect::<Result<_>>()?;
        Ok(Self { tokens, entries })
    }
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is built from UTF-8 fields"))
}

/// Scores and decisions of one prompt pass at `budget`.
pub fn record_trace(model: &Model, tokens: &[u32], budget: f64) -> Result<GateTrace> {
    let mut cache = KvCache::new(model.config.n_layers, model.config.hidden);
    let mut policy = BudgetPolicy::new(budget);
    let pre = prefill(model, tokens, &mut policy, &mut cache)?;
    GateTrace::from_records(tokens, &pre.records)
}

/// `[layers x tokens]` scores of one module kind.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub module: ModuleKind,
    /// Column labels, one per token in order.
    pub labels: Vec<String>,
    /// `values[layer][position]`.
    pub values: Vec<Vec<f64>>,
}

pub fn heatmap_matrix(trace: &GateTrace, module: ModuleKind) -> Result<Heatmap> {
    let (l, s) = (trace.n_layers(), trace.tokens.len());
    let mut values = vec![vec![f64::NAN; s]; l];
    for e in trace.entries.iter().filter(|e| e.module == module) {
        if e.position >= s {
            return Err(Error::CacheIndex { index: e.position, len: s });
        }
        values[e.layer][e.position] = e.score;
    }
    if values.iter().flatten().any(|v| v.is_nan()) {
        return Err(Error::Insufficient(format!(
            "trace lacks {module} scores for some (layer, position) pairs"
        )));
    }
    Ok(Heatmap {
        module,
        labels: trace.tokens.iter().map(|t| tokenizer::token_label(*t)).collect(),
        values,
    })
}

impl Heatmap {
    /// Header `layer,<token labels>`, then one row per layer.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["layer".to_string()];
        header.extend(self.labels.iter().cloned());
        w.write_record(&header)?;
        for (l, row) in self.values.iter().enumerate() {
            let mut rec = vec![l.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        finish(w)
    }

    pub fn from_csv(module: ModuleKind, text: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_reader(text.as_bytes());
        let mut rows = r.records();
        let header = rows
            .next()
            .ok_or(Error::Trace { line: 1, msg: "missing header".into() })??;
        if header.get(0) != Some("layer") {
            return Err(Error::Trace { line: 1, msg: "first column must be layer".into() });
        }
        let labels: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut values = Vec::new();
        for (i, rec) in rows.enumerate() {
            let line = i + 2;
            let rec = rec?;
            if rec.get(0) != Some(i.to_string().as_str()) || rec.len() != labels.len() + 1 {
                return Err(Error::Trace { line, msg: "layer index or width mismatch".into() });
            }
            let row = rec
                .iter()
                .skip(1)
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| Error::Trace { line, msg: format!("bad value {v:?}") })
                })
                .collect::<Result<Vec<_>>>()?;
            values.push(row);
        }
        Ok(Self {
            module,
            labels,
            values,
        })
    }
}
