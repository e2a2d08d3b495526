use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{GateArch, GateConfig, GateShape, GateSharing, ModelConfig};
use crate::error::Result;
use crate::numerics::Tensor;

/// Standard deviation of freshly initialized gate weights.
pub const GATE_INIT_STD: f64 = 0.01;
/// Initial gate output bias; `sigmoid(5)` is about 0.9933.
pub const GATE_INIT_BIAS: f64 = 5.0;
const BACKBONE_INIT_STD: f64 = 0.02;

/// Parameters of one gate. Weights are stored `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub enum GateParams<T = Tensor> {
    Linear { weight: T, bias: T },
    TwoLayer { w1: T, b1: T, w2: T, b2: T },
}

impl<T> GateParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> GateParams<U> {
        match self {
            GateParams::Linear { weight, bias } => GateParams::Linear {
                weight: f(weight),
                bias: f(bias),
            },
            GateParams::TwoLayer { w1, b1, w2, b2 } => GateParams::TwoLayer {
                w1: f(w1),
                b1: f(b1),
                w2: f(w2),
                b2: f(b2),
            },
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        match self {
            GateParams::Linear { weight, bias } => {
                f(format!("{prefix}.weight"), weight);
                f(format!("{prefix}.bias"), bias);
            }
            GateParams::TwoLayer { w1, b1, w2, b2 } => {
                f(format!("{prefix}.w1"), w1);
                f(format!("{prefix}.b1"), b1);
                f(format!("{prefix}.w2"), w2);
                f(format!("{prefix}.b2"), b2);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        match self {
            GateParams::Linear { weight, bias } => {
                f(format!("{prefix}.weight"), weight);
                f(format!("{prefix}.bias"), bias);
            }
            GateParams::TwoLayer { w1, b1, w2, b2 } => {
                f(format!("{prefix}.w1"), w1);
                f(format!("{prefix}.b1"), b1);
                f(format!("{prefix}.w2"), w2);
                f(format!("{prefix}.b2"), b2);
            }
        }
    }
}

/// Backbone weights of one block plus its own gates (absent when shared).
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T = Tensor> {
    pub attn_norm: T,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub attn_gate: Option<GateParams<T>>,
    pub mlp_norm: T,
    pub w_up: T,
    pub w_down: T,
    pub mlp_gate: Option<GateParams<T>>,
}

impl<T> BlockParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> BlockParams<U> {
        BlockParams {
            attn_norm: f(&self.attn_norm),
            wq: f(&self.wq),
            wk: f(&self.wk),
            wv: f(&self.wv),
            wo: f(&self.wo),
            attn_gate: self.attn_gate.as_ref().map(|g| g.map(f)),
            mlp_norm: f(&self.mlp_norm),
            w_up: f(&self.w_up),
            w_down: f(&self.w_down),
            mlp_gate: self.mlp_gate.as_ref().map(|g| g.map(f)),
        }
    }
}

/// Gates shared by every block: one for attention, one for MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedGates<T = Tensor> {
    pub attention: GateParams<T>,
    pub mlp: GateParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub token_embed: T,
    pub pos_embed: T,
    pub blocks: Vec<BlockParams<T>>,
    pub shared_gates: Option<SharedGates<T>>,
    pub final_norm: T,
    pub lm_head: T,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            token_embed: f(&self.token_embed),
            pos_embed: f(&self.pos_embed),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            shared_gates: self.shared_gates.as_ref().map(|s| SharedGates {
                attention: s.attention.map(f),
                mlp: s.mlp.map(f),
            }),
            final_norm: f(&self.final_norm),
            lm_head: f(&self.lm_head),
        }
    }

    /// Visits every parameter with its dotted name, in declaration order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        f("token_embed".into(), &self.token_embed);
        f("pos_embed".into(), &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            f(format!("{p}.attn_norm"), &b.attn_norm);
            f(format!("{p}.wq"), &b.wq);
            f(format!("{p}.wk"), &b.wk);
            f(format!("{p}.wv"), &b.wv);
            f(format!("{p}.wo"), &b.wo);
            if let Some(g) = &b.attn_gate {
                g.visit(&format!("{p}.attn_gate"), f);
            }
            f(format!("{p}.mlp_norm"), &b.mlp_norm);
            f(format!("{p}.w_up"), &b.w_up);
            f(format!("{p}.w_down"), &b.w_down);
            if let Some(g) = &b.mlp_gate {
                g.visit(&format!("{p}.mlp_gate"), f);
            }
        }
        if let Some(s) = &self.shared_gates {
            s.attention.visit("shared.attn_gate", f);
            s.mlp.visit("shared.mlp_gate", f);
        }
        f("final_norm".into(), &self.final_norm);
        f("lm_head".into(), &self.lm_head);
    }

    /// Same order as [`ModelParams::visit`].
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut T)) {
        f("token_embed".into(), &mut self.token_embed);
        f("pos_embed".into(), &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("blocks.{i}");
            f(format!("{p}.attn_norm"), &mut b.attn_norm);
            f(format!("{p}.wq"), &mut b.wq);
            f(format!("{p}.wk"), &mut b.wk);
            f(format!("{p}.wv"), &mut b.wv);
            f(format!("{p}.wo"), &mut b.wo);
            if let Some(g) = &mut b.attn_gate {
                g.visit_mut(&format!("{p}.attn_gate"), f);
            }
            f(format!("{p}.mlp_norm"), &mut b.mlp_norm);
            f(format!("{p}.w_up"), &mut b.w_up);
            f(format!("{p}.w_down"), &mut b.w_down);
            if let Some(g) = &mut b.mlp_gate {
                g.visit_mut(&format!("{p}.mlp_gate"), f);
            }
        }
        if let Some(s) = &mut self.shared_gates {
            s.attention.visit_mut("shared.attn_gate", f);
            s.mlp.visit_mut("shared.mlp_gate", f);
        }
        f("final_norm".into(), &mut self.final_norm);
        f("lm_head".into(), &mut self.lm_head);
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n, t)));
        out
    }

    /// Gate parameters of block `layer` for the given branch.
    pub fn gate(&self, layer: usize, kind: super::ModuleKind) -> &GateParams<T> {
        use super::ModuleKind::*;
        match (&self.shared_gates, kind) {
            (Some(s), Attention) => &s.attention,
            (Some(s), Mlp) => &s.mlp,
            (None, Attention) => self.blocks[layer].attn_gate.as_ref().expect("per-module gate"),
            (None, Mlp) => self.blocks[layer].mlp_gate.as_ref().expect("per-module gate"),
        }
    }
}

impl ModelParams<Tensor> {
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    /// Parameters belonging to gates only.
    pub fn gate_param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |name, t| {
            if name.contains("_gate.") {
                n += t.numel()
            }
        });
        n
    }
}

fn gaussian(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
        .expect("shape matches")
}

/// Fresh gate: weights from N(0, 0.01²), output bias 5, hidden bias 0.
pub fn init_gates(config: &GateConfig, hidden: usize, seed: u64) -> GateParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = config.out_dim(hidden);
    match config.arch {
        GateArch::Linear => GateParams::Linear {
            weight: gaussian(&mut rng, &[out, hidden], GATE_INIT_STD),
            bias: Tensor::full(&[out], GATE_INIT_BIAS),
        },
        GateArch::TwoLayer => GateParams::TwoLayer {
            w1: gaussian(&mut rng, &[2 * hidden, hidden], GATE_INIT_STD),
            b1: Tensor::zeros(&[2 * hidden]),
            w2: gaussian(&mut rng, &[out, 2 * hidden], GATE_INIT_STD),
            b2: Tensor::full(&[out], GATE_INIT_BIAS),
        },
    }
}

/// Closed-form gate parameter count for a model of `layers` blocks.
pub fn gate_param_count(config: &GateConfig, hidden: u64, layers: u64) -> u64 {
    let out = match config.shape {
        GateShape::Vector => hidden,
        GateShape::Scalar => 1,
    };
    let per_gate = match config.arch {
        GateArch::Linear => out * hidden + out,
        GateArch::TwoLayer => 2 * hidden * hidden + 2 * hidden + out * 2 * hidden + out,
    };
    let copies = match config.sharing {
        GateSharing::PerModule => layers,
        GateSharing::Shared => 1,
    };
    2 * copies * per_gate
}

pub(crate) fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, ff, l) = (config.hidden, config.ff_dim, config.n_layers);
    let resid_std = BACKBONE_INIT_STD / ((2 * l) as f64).sqrt();
    let per_module = config.gate.sharing == GateSharing::PerModule;
    let token_embed = gaussian(&mut rng, &[config.vocab, h], BACKBONE_INIT_STD);
    let pos_embed = gaussian(&mut rng, &[config.max_seq, h], BACKBONE_INIT_STD);
    let mut blocks = Vec::with_capacity(l);
    for _ in 0..l {
        let wq = gaussian(&mut rng, &[h, h], BACKBONE_INIT_STD);
        let wk = gaussian(&mut rng, &[h, h], BACKBONE_INIT_STD);
        let wv = gaussian(&mut rng, &[h, h], BACKBONE_INIT_STD);
        let wo = gaussian(&mut rng, &[h, h], resid_std);
        let attn_gate = per_module.then(|| init_gates(&config.gate, h, rng.next_u64()));
        let w_up = gaussian(&mut rng, &[ff, h], BACKBONE_INIT_STD);
        let w_down = gaussian(&mut rng, &[h, ff], resid_std);
        let mlp_gate = per_module.then(|| init_gates(&config.gate, h, rng.next_u64()));
        blocks.push(BlockParams {
            attn_norm: Tensor::ones(&[h]),
            wq,
            wk,
            wv,
            wo,
            attn_gate,
            mlp_norm: Tensor::ones(&[h]),
            w_up,
            w_down,
            mlp_gate,
        });
    }
    let shared_gates = (!per_module).then(|| SharedGates {
        attention: init_gates(&config.gate, h, rng.next_u64()),
        mlp: init_gates(&config.gate, h, rng.next_u64()),
    });
    let lm_head = gaussian(&mut rng, &[config.vocab, h], BACKBONE_INIT_STD);
    Ok(ModelParams {
        token_embed,
        pos_embed,
        blocks,
        shared_gates,
        final_norm: Tensor::ones(&[h]),
        lm_head,
    })
}
