//! Decoder-only transformer with a sigmoid gate on every attention and MLP
//! branch.
//!
//! Each block is pre-normed. For a branch with input stream `h` the gate
//! `g = sigmoid(W h + b)` is always computed from the raw stream. With exit
//! placement a processed token receives `h + g * branch(norm(h))`; with
//! entry placement it receives `h + branch(g * norm(h))`. Skipped tokens keep
//! `h` unchanged.

mod config;
mod params;

pub use config::{
    GateArch, GateConfig, GatePlacement, GateShape, GateSharing, Granularity, ModelConfig,
    ModuleKind,
};
pub use params::{
    gate_param_count, init_gates, BlockParams, GateParams, ModelParams, SharedGates,
    GATE_INIT_BIAS, GATE_INIT_STD,
};

use crate::error::{Error, Result};
use crate::inference::KvCache;
use crate::numerics::{Tape, Tensor, Var};
use crate::skipping::{ImportanceScores, Site, SkipMask, SkipPolicy};

/// How branch outputs are scaled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BranchScale {
    /// Use the learned gates.
    Learned,
    /// Replace every gate by a constant; `Constant(1.0)` is the ungated
    /// reference model.
    Constant(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub branch_scale: BranchScale,
    /// Keep the residual stream before the first block and after every
    /// branch (`2 * n_layers + 1` snapshots).
    pub capture_hidden: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            branch_scale: BranchScale::Learned,
            capture_hidden: false,
        }
    }
}

/// Scores and decisions of one gated sub-module during one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ModuleRecord {
    pub site: Site,
    pub positions: Vec<usize>,
    pub scores: Vec<f64>,
    pub skipped: Vec<bool>,
}

#[derive(Debug)]
pub struct ForwardPass {
    /// `[S, V]` next-token logits.
    pub logits: Var,
    /// Every gate activation tensor, for the sparsity penalty.
    pub gate_activations: Vec<Var>,
    /// One record per (layer, branch), attention before MLP.
    pub records: Vec<ModuleRecord>,
    pub hidden: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

/// Evaluates a gate on a tape: `[S, H]` in, `[S, H]` or `[S, 1]` out.
pub fn gate_forward(tape: &mut Tape, params: &GateParams<Var>, h: Var) -> Result<Var> {
    match params {
        GateParams::Linear { weight, bias } => {
            let z = tape.linear(h, *weight)?;
            let z = tape.add_row(z, *bias)?;
            Ok(tape.sigmoid(z))
        }
        GateParams::TwoLayer { w1, b1, w2, b2 } => {
            let a = tape.linear(h, *w1)?;
            let a = tape.add_row(a, *b1)?;
            let a = tape.tanh(a);
            let z = tape.linear(a, *w2)?;
            let z = tape.add_row(z, *b2)?;
            Ok(tape.sigmoid(z))
        }
    }
}

/// Gate values for a plain tensor input.
pub fn evaluate_gate(params: &GateParams, h: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = params.map(&mut |t| tape.constant(t.clone()));
    let hv = tape.constant(h.clone());
    let g = gate_forward(&mut tape, &p, hv)?;
    Ok(tape.value(g).clone())
}

/// Multiplies by a gate of either shape.
fn apply_gate(tape: &mut Tape, x: Var, g: Var) -> Result<Var> {
    if tape.value(g).cols() == 1 && tape.value(x).cols() != 1 {
        tape.mul_col(x, g)
    } else {
        tape.mul(x, g)
    }
}

struct BlockCtx<'a> {
    positions: &'a [usize],
    opts: ForwardOptions,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = params::init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking every name and shape
    /// against the layout implied by `config`.
    pub fn from_params(config: ModelConfig, params: ModelParams) -> Result<Self> {
        let reference = params::init_params(&config, 0)?;
        let want = reference.named();
        let got = params.named();
        if want.len() != got.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                want.len(),
                got.len()
            )));
        }
        for ((wn, wt), (gn, gt)) in want.iter().zip(&got) {
            if wn != gn || wt.shape() != gt.shape() {
                return Err(Error::Config(format!(
                    "parameter {gn} {:?} does not match expected {wn} {:?}",
                    gt.shape(),
                    wt.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelParams<Var> {
        self.params.map(&mut |t| tape.leaf(t.clone(), trainable))
    }

    fn check_tokens(&self, tokens: &[u32], start: usize) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        let len = start + tokens.len();
        if len > self.config.max_seq {
            return Err(Error::SequenceTooLong {
                len,
                max: self.config.max_seq,
            });
        }
        if let Some(&id) = tokens.iter().find(|t| **t as usize >= self.config.vocab) {
            return Err(Error::InvalidToken {
                id,
                vocab: self.config.vocab,
            });
        }
        Ok(())
    }

    /// Full forward pass over `tokens`.
    ///
    /// Without a cache the tokens occupy positions `0..S` and keys/values
    /// are computed for every token. With a cache the tokens continue after
    /// the cached prefix, new rows are appended, and rows of skipped tokens
    /// above layer 0 are copied from the layer below. The cached path does
    /// not propagate gradients into keys and values.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &ModelParams<Var>,
        tokens: &[u32],
        policy: &mut dyn SkipPolicy,
        mut cache: Option<&mut KvCache>,
        opts: ForwardOptions,
    ) -> Result<ForwardPass> {
        let start = match cache.as_deref() {
            Some(c) => {
                if c.n_layers() != self.config.n_layers || c.hidden() != self.config.hidden {
                    return Err(Error::CacheInconsistent(format!(
                        "cache has {} layers of width {}, model has {} of width {}",
                        c.n_layers(),
                        c.hidden(),
                        self.config.n_layers,
                        self.config.hidden
                    )));
                }
                c.len()?
            }
            None => 0,
        };
        self.check_tokens(tokens, start)?;
        let positions: Vec<usize> = (start..start + tokens.len()).collect();
        let ids: Vec<usize> = tokens.iter().map(|t| *t as usize).collect();

        let tok = tape.gather_rows(vars.token_embed, &ids)?;
        let pos = tape.gather_rows(vars.pos_embed, &positions)?;
        let mut h = tape.add(tok, pos)?;

        let mut pass = ForwardPass {
            logits: h,
            gate_activations: Vec::new(),
            records: Vec::with_capacity(2 * self.config.n_layers),
            hidden: Vec::new(),
        };
        if opts.capture_hidden {
            pass.hidden.push(tape.value(h).clone());
        }
        let ctx = BlockCtx {
            positions: &positions,
            opts,
        };
        for layer in 0..self.config.n_layers {
            h = self.block_forward(tape, vars, layer, h, &ctx, policy, cache.as_deref_mut(), &mut pass)?;
        }
        let normed = tape.rmsnorm(h, vars.final_norm)?;
        pass.logits = tape.linear(normed, vars.lm_head)?;
        Ok(pass)
    }

    /// One pre-norm block: gated attention then gated MLP.
    #[allow(clippy::too_many_arguments)]
    fn block_forward(
        &self,
        tape: &mut Tape,
        vars: &ModelParams<Var>,
        layer: usize,
        mut h: Var,
        ctx: &BlockCtx<'_>,
        policy: &mut dyn SkipPolicy,
        mut cache: Option<&mut KvCache>,
        pass: &mut ForwardPass,
    ) -> Result<Var> {
        let gate_cfg = &self.config.gate;
        let n = ctx.positions.len();
        let mut attn_mask: Option<SkipMask> = None;
        for kind in ModuleKind::ALL {
            let site = Site::new(layer, kind);
            let g = match ctx.opts.branch_scale {
                BranchScale::Learned => {
                    let g = gate_forward(tape, vars.gate(layer, kind), h)?;
                    pass.gate_activations.push(g);
                    g
                }
                BranchScale::Constant(c) => {
                    tape.constant(Tensor::full(&[n, gate_cfg.out_dim(self.config.hidden)], c))
                }
            };
            let scores = ImportanceScores::from_gate(tape.value(g)).0;
            let mask = if kind == ModuleKind::Mlp && gate_cfg.granularity == Granularity::WholeLayerByAttnGate {
                attn_mask.clone().unwrap_or_else(|| SkipMask::none(n))
            } else if gate_cfg.decides_at(layer, kind) {
                policy.decide(site, &scores, ctx.positions)?
            } else {
                SkipMask::none(n)
            };
            if mask.len() != n {
                return Err(Error::MaskLength {
                    site: site.to_string(),
                    got: mask.len(),
                    expected: n,
                });
            }

            let block = &vars.blocks[layer];
            let norm_gain = match kind {
                ModuleKind::Attention => block.attn_norm,
                ModuleKind::Mlp => block.mlp_norm,
            };
            let mut x = tape.rmsnorm(h, norm_gain)?;
            if gate_cfg.placement == GatePlacement::Entry {
                x = apply_gate(tape, x, g)?;
            }
            let mut out = match kind {
                ModuleKind::Attention => {
                    self.attention(tape, block, layer, x, ctx.positions, &mask, cache.as_deref_mut())?
                }
                ModuleKind::Mlp => {
                    let up = tape.linear(x, block.w_up)?;
                    let up = tape.gelu(up);
                    tape.linear(up, block.w_down)?
                }
            };
            if gate_cfg.placement == GatePlacement::Exit {
                out = apply_gate(tape, out, g)?;
            }
            let updated = tape.add(h, out)?;
            h = tape.row_where(mask.as_slice(), h, updated)?;
            if ctx.opts.capture_hidden {
                pass.hidden.push(tape.value(h).clone());
            }
            pass.records.push(ModuleRecord {
                site,
                positions: ctx.positions.to_vec(),
                scores,
                skipped: mask.0.clone(),
            });
            if kind == ModuleKind::Attention {
                attn_mask = Some(mask);
            }
        }
        Ok(h)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape,
        block: &BlockParams<Var>,
        layer: usize,
        x: Var,
        positions: &[usize],
        mask: &SkipMask,
        cache: Option<&mut KvCache>,
    ) -> Result<Var> {
        let heads = self.config.n_heads;
        let q = tape.linear(x, block.wq)?;
        let k = tape.linear(x, block.wk)?;
        let v = tape.linear(x, block.wv)?;
        let mixed = match cache {
            None => tape.causal_attention(q, k, v, heads, 0)?,
            Some(cache) => {
                let hsz = self.config.hidden;
                let mut keys = tape.value(k).data().to_vec();
                let mut values = tape.value(v).data().to_vec();
                if layer > 0 {
                    for (i, _) in mask.as_slice().iter().enumerate().filter(|(_, s)| **s) {
                        let row = i * hsz..(i + 1) * hsz;
                        keys[row.clone()].copy_from_slice(cache.key_row(layer - 1, positions[i])?);
                        values[row].copy_from_slice(cache.value_row(layer - 1, positions[i])?);
                    }
                }
                cache.append(layer, &keys, &values)?;
                let (kt, vt) = cache.layer_tensors(layer)?;
                let kc = tape.constant(kt);
                let vc = tape.constant(vt);
                tape.causal_attention(q, kc, vc, heads, positions[0])?
            }
        };
        tape.linear(mixed, block.wo)
    }

    /// Logits and skip records for one sequence, without gradients.
    pub fn logits(
        &self,
        tokens: &[u32],
        policy: &mut dyn SkipPolicy,
        cache: Option<&mut KvCache>,
        opts: ForwardOptions,
    ) -> Result<(Tensor, Vec<ModuleRecord>, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let pass = self.forward(&mut tape, &vars, tokens, policy, cache, opts)?;
        Ok((tape.value(pass.logits).clone(), pass.records, pass.hidden))
    }

    /// Embedding-only logits: `head(norm(token + position))`.
    pub fn embedding_logits(&self, tokens: &[u32]) -> Result<Tensor> {
        self.check_tokens(tokens, 0)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let ids: Vec<usize> = tokens.iter().map(|t| *t as usize).collect();
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let tok = tape.gather_rows(vars.token_embed, &ids)?;
        let pos = tape.gather_rows(vars.pos_embed, &positions)?;
        let h = tape.add(tok, pos)?;
        let n = tape.rmsnorm(h, vars.final_norm)?;
        let l = tape.linear(n, vars.lm_head)?;
        Ok(tape.value(l).clone())
    }
}
