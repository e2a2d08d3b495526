use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// The two gated branches of a transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModuleKind {
    Attention,
    Mlp,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 2] = [ModuleKind::Attention, ModuleKind::Mlp];

    pub fn as_str(self) -> &'static str {
        match self {
            ModuleKind::Attention => "attention",
            ModuleKind::Mlp => "mlp",
        }
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModuleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" | "attn" => Ok(ModuleKind::Attention),
            "mlp" => Ok(ModuleKind::Mlp),
            _ => Err(Error::Config(format!("unknown module kind `{s}`"))),
        }
    }
}

macro_rules! config_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }

            pub(crate) fn code(self) -> u8 {
                Self::ALL.iter().position(|v| *v == self).unwrap() as u8
            }

            pub(crate) fn from_code(code: u8) -> Option<Self> {
                Self::ALL.get(code as usize).copied()
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($name), " `{}`"), s
                    ))),
                }
            }
        }
    };
}

config_enum!(
    /// One gate value per hidden unit, or one per token.
    GateShape { Vector => "vector", Scalar => "scalar" }
);
config_enum!(
    /// Separate gates per block, or one attention gate and one MLP gate
    /// shared by all blocks.
    GateSharing { PerModule => "per-module", Shared => "shared" }
);
config_enum!(
    /// Exit multiplies the branch output; Entry multiplies the branch input.
    GatePlacement { Exit => "exit", Entry => "entry" }
);
config_enum!(
    /// Single affine map, or a tanh hidden layer of width 2H before the
    /// output map.
    GateArch { Linear => "linear", TwoLayer => "two-layer" }
);
config_enum!(
    /// Which sub-modules honor skip decisions.
    Granularity {
        All => "all",
        AttentionOnly => "attention-only",
        MlpOnly => "mlp-only",
        WholeLayerByAttnGate => "whole-layer",
        EverySecondLayer => "every-second-layer",
    }
);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GateConfig {
    pub shape: GateShape,
    pub sharing: GateSharing,
    pub placement: GatePlacement,
    pub arch: GateArch,
    pub granularity: Granularity,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            shape: GateShape::Vector,
            sharing: GateSharing::PerModule,
            placement: GatePlacement::Exit,
            arch: GateArch::Linear,
            granularity: Granularity::All,
        }
    }
}

impl GateConfig {
    /// Width of the gate output: `hidden` for vector gates, 1 for scalar.
    pub fn out_dim(&self, hidden: usize) -> usize {
        match self.shape {
            GateShape::Vector => hidden,
            GateShape::Scalar => 1,
        }
    }

    /// Whether skip decisions are consulted at this sub-module. Under
    /// `WholeLayerByAttnGate` the MLP branch follows the attention decision
    /// instead of making its own.
    pub fn decides_at(&self, layer: usize, kind: ModuleKind) -> bool {
        match (self.granularity, kind) {
            (Granularity::All, _) => true,
            (Granularity::AttentionOnly, k) => k == ModuleKind::Attention,
            (Granularity::MlpOnly, k) => k == ModuleKind::Mlp,
            (Granularity::WholeLayerByAttnGate, k) => k == ModuleKind::Attention,
            (Granularity::EverySecondLayer, _) => layer % 2 == 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub gate: GateConfig,
}

impl Default for ModelConfig {
    /// Four layers, width 64, four heads, byte vocabulary plus BOS and EOS.
    fn default() -> Self {
        Self {
            n_layers: 4,
            hidden: 64,
            n_heads: 4,
            ff_dim: 256,
            vocab: crate::tokenizer::VOCAB_SIZE,
            max_seq: 256,
            gate: GateConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 {
            return fail("n_layers must be at least 1".into());
        }
        if self.n_heads == 0 || self.hidden < self.n_heads {
            return fail(format!(
                "need hidden >= n_heads >= 1, got hidden {} and {} heads",
                self.hidden, self.n_heads
            ));
        }
        if self.hidden % self.n_heads != 0 {
            return fail(format!(
                "hidden {} is not divisible by {} heads",
                self.hidden, self.n_heads
            ));
        }
        if self.ff_dim == 0 || self.vocab == 0 || self.max_seq == 0 {
            return fail("ff_dim, vocab and max_seq must be positive".into());
        }
        Ok(())
    }
}

impl ModelConfig {
    /// Total parameter count implied by the configuration, gates included.
    /// Computed in 128 bits so absurd configurations cannot overflow.
    pub fn param_count(&self) -> u128 {
        let (v, s, l) = (self.vocab as u128, self.max_seq as u128, self.n_layers as u128);
        let (h, ff) = (self.hidden as u128, self.ff_dim as u128);
        let per_block = 2 * h + 4 * h * h + 2 * h * ff;
        let out = match self.gate.shape {
            GateShape::Vector => h,
            GateShape::Scalar => 1,
        };
        let per_gate = match self.gate.arch {
            GateArch::Linear => out * h + out,
            GateArch::TwoLayer => 2 * h * h + 2 * h + out * 2 * h + out,
        };
        let gates = match self.gate.sharing {
            GateSharing::PerModule => 2 * l * per_gate,
            GateSharing::Shared => 2 * per_gate,
        };
        2 * v * h + s * h + l * per_block + h + gates
    }
}
