//! Closed-form FLOP costs and saved-compute reports.
//!
//! A matrix-vector product with an `m x n` matrix costs `2mn` FLOPs per
//! token. Only attention and MLP branches can be skipped; gates and the
//! output head run for every token and are reported as fixed overhead.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{GateArch, GateConfig, GateShape, ModelConfig, ModuleKind, ModuleRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlopKind {
    Attention,
    Mlp,
    GateLinearVector,
    GateLinearScalar,
    GateTwoLayer,
}

/// Per-token FLOPs of one sub-module at context length `s_ctx`.
pub fn module_flops(kind: FlopKind, hidden: u64, ff_dim: u64, s_ctx: u64) -> u64 {
    let h = hidden;
    match kind {
        FlopKind::Attention => 8 * h * h + 4 * h * s_ctx,
        FlopKind::Mlp => 4 * h * ff_dim,
        FlopKind::GateLinearVector => 2 * h * h,
        FlopKind::GateLinearScalar => 2 * h,
        FlopKind::GateTwoLayer => 8 * h * h,
    }
}

/// Per-token FLOPs of one gate evaluation.
pub fn gate_flops(gate: &GateConfig, hidden: u64) -> u64 {
    match (gate.arch, gate.shape) {
        (GateArch::Linear, GateShape::Vector) => {
            module_flops(FlopKind::GateLinearVector, hidden, 0, 0)
        }
        (GateArch::Linear, GateShape::Scalar) => {
            module_flops(FlopKind::GateLinearScalar, hidden, 0, 0)
        }
        (GateArch::TwoLayer, GateShape::Vector) => {
            module_flops(FlopKind::GateTwoLayer, hidden, 0, 0)
        }
        // [2H x H] then [1 x 2H]
        (GateArch::TwoLayer, GateShape::Scalar) => 4 * hidden * hidden + 4 * hidden,
    }
}

/// Skippable cost and skipped share of one layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LayerFlops {
    pub attention: u64,
    pub attention_skipped: u64,
    pub mlp: u64,
    pub mlp_skipped: u64,
}

impl LayerFlops {
    pub fn total(&self) -> u64 {
        self.attention + self.mlp
    }

    pub fn skipped(&self) -> u64 {
        self.attention_skipped + self.mlp_skipped
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlopReport {
    /// Cost of all attention and MLP branches had nothing been skipped.
    pub skippable_flops: u64,
    pub skipped_flops: u64,
    /// Gates and output head, charged for every token.
    pub overhead_flops: u64,
    /// `skippable_flops + overhead_flops`.
    pub total_flops: u64,
    /// `skipped_flops / skippable_flops`, or 0 with nothing skippable.
    pub saved_fraction: f64,
    pub layers: Vec<LayerFlops>,
}

impl FlopReport {
    /// Key/value header followed by a per-layer table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "total_flops = {}", self.total_flops);
        let _ = writeln!(s, "skippable_flops = {}", self.skippable_flops);
        let _ = writeln!(s, "skipped_flops = {}", self.skipped_flops);
        let _ = writeln!(s, "overhead_flops = {}", self.overhead_flops);
        let _ = writeln!(s, "saved_fraction = {:.6}", self.saved_fraction);
        let _ = writeln!(s, "layer,attention_flops,attention_skipped,mlp_flops,mlp_skipped");
        for (i, l) in self.layers.iter().enumerate() {
            let _ = writeln!(
                s,
                "{i},{},{},{},{}",
                l.attention, l.attention_skipped, l.mlp, l.mlp_skipped
            );
        }
        s
    }
}

/// Accounts the skip decisions of any number of forward passes.
///
/// Attention cost uses each token's context length `position + 1`. The
/// output head is charged once per token of the layer-0 attention records.
pub fn saved_fraction(records: &[ModuleRecord], config: &ModelConfig) -> Result<FlopReport> {
    let (h, ff, v) = (config.hidden as u64, config.ff_dim as u64, config.vocab as u64);
    let gate_cost = gate_flops(&config.gate, h);
    let head_cost = 2 * h * v;
    let mut layers = vec![LayerFlops::default(); config.n_layers];
    let mut overhead = 0u64;
    for r in records {
        let layer = layers.get_mut(r.site.layer).ok_or(Error::LayerOutOfRange {
            layer: r.site.layer,
            layers: config.n_layers,
        })?;
        let n = r.positions.len();
        if r.skipped.len() != n || r.scores.len() != n {
            return Err(Error::MaskLength {
                site: r.site.to_string(),
                got: r.skipped.len(),
                expected: n,
            });
        }
        for (&pos, &skip) in r.positions.iter().zip(&r.skipped) {
            overhead += gate_cost;
            let (total, skipped, cost) = match r.site.kind {
                ModuleKind::Attention => (
                    &mut layer.attention,
                    &mut layer.attention_skipped,
                    module_flops(FlopKind::Attention, h, ff, pos as u64 + 1),
                ),
                ModuleKind::Mlp => (
                    &mut layer.mlp,
                    &mut layer.mlp_skipped,
                    module_flops(FlopKind::Mlp, h, ff, 0),
                ),
            };
            *total += cost;
            if skip {
                *skipped += cost;
            }
        }
        if r.site.layer == 0 && r.site.kind == ModuleKind::Attention {
            overhead += head_cost * n as u64;
        }
    }
    let skippable: u64 = layers.iter().map(LayerFlops::total).sum();
    let skipped: u64 = layers.iter().map(LayerFlops::skipped).sum();
    Ok(FlopReport {
        skippable_flops: skippable,
        skipped_flops: skipped,
        overhead_flops: overhead,
        total_flops: skippable + overhead,
        saved_fraction: if skippable == 0 {
            0.0
        } else {
            skipped as f64 / skippable as f64
        },
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skipping::Site;

    #[test]
    fn module_cost_examples() {
        assert_eq!(module_flops(FlopKind::Mlp, 2, 4, 0), 32);
        assert_eq!(module_flops(FlopKind::GateLinearScalar, 64, 0, 0), 128);
        assert_eq!(module_flops(FlopKind::Attention, 2, 0, 1), 40);
        assert_eq!(module_flops(FlopKind::GateTwoLayer, 3, 0, 0), 72);
    }

    fn record(layer: usize, kind: ModuleKind, skipped: Vec<bool>) -> ModuleRecord {
        let n = skipped.len();
        ModuleRecord {
            site: Site::new(layer, kind),
            positions: (0..n).collect(),
            scores: vec![0.5; n],
            skipped,
        }
    }

    fn config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            hidden: 8,
            n_heads: 2,
            ff_dim: 16,
            ..ModelConfig::default()
        }
    }

    fn all_records(skip: bool, n: usize) -> Vec<ModuleRecord> {
        let mut v = Vec::new();
        for layer in 0..2 {
            for kind in ModuleKind::ALL {
                v.push(record(layer, kind, vec![skip; n]));
            }
        }
        v
    }

    #[test]
    fn extremes() {
        let cfg = config();
        let none = saved_fraction(&all_records(false, 5), &cfg).unwrap();
        assert_eq!(none.saved_fraction, 0.0);
        let all = saved_fraction(&all_records(true, 5), &cfg).unwrap();
        assert_eq!(all.saved_fraction, 1.0);
        assert_eq!(none.skippable_flops, all.skippable_flops);
        assert_eq!(none.overhead_flops, 4 * 5 * 2 * 64 + 5 * 2 * 8 * cfg.vocab as u64);
    }

    #[test]
    fn uniform_fraction_over_equal_cost_modules() {
        // MLP costs are position independent, so a uniform skip fraction
        // over MLP-only records saves exactly that fraction.
        let cfg = config();
        let mut recs = Vec::new();
        for layer in 0..2 {
            let mask = (0..8).map(|i| i % 4 == layer).collect();
            recs.push(record(layer, ModuleKind::Mlp, mask));
        }
        let r = saved_fraction(&recs, &cfg).unwrap();
        assert!((r.saved_fraction - 0.25).abs() < 1e-12);
    }

    #[test]
    fn totals_are_additive() {
        let cfg = config();
        let mut recs = all_records(false, 6);
        recs[1].skipped[2] = true;
        recs[2].skipped[0] = true;
        let r = saved_fraction(&recs, &cfg).unwrap();
        let by_layer: u64 = r.layers.iter().map(|l| l.total()).sum();
        assert_eq!(by_layer, r.skippable_flops);
        assert_eq!(r.total_flops, r.skippable_flops + r.overhead_flops);
        // layer 1 attention at position 0
        assert_eq!(r.layers[1].attention_skipped, 8 * 64 + 4 * 8);
        let text = r.to_text();
        assert!(text.starts_with("total_flops = "));
        assert_eq!(text.lines().count(), 6 + 2);
    }

    #[test]
    fn inconsistent_records_rejected() {
        let cfg = config();
        let mut bad = record(0, ModuleKind::Mlp, vec![false; 3]);
        bad.positions.pop();
        assert!(saved_fraction(&[bad], &cfg).is_err());
        let out_of_range = record(5, ModuleKind::Mlp, vec![false; 3]);
        assert!(saved_fraction(&[out_of_range], &cfg).is_err());
    }

    #[test]
    fn two_layer_scalar_gate_cost() {
        let g = GateConfig {
            arch: GateArch::TwoLayer,
            shape: GateShape::Scalar,
            ..GateConfig::default()
        };
        assert_eq!(gate_flops(&g, 4), 4 * 16 + 16);
    }
}
