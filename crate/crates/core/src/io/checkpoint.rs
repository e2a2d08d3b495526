//! Binary model container.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! magic        4 bytes  "GSKP"
//! version      u32      currently 1
//! n_layers, hidden, n_heads, ff_dim, vocab, max_seq    6 x u32
//! gate shape, sharing, placement, arch, granularity    5 x u8 (variant index)
//! tensor count u32
//! per tensor, in parameter visiting order:
//!   name length u16, name bytes (UTF-8)
//!   rank u8, dims rank x u32
//!   values      product(dims) x f64
//! ```
//!
//! Nothing may follow the last tensor.

use std::path::Path;

use super::write_atomic;
use crate::error::{Error, Result};
use crate::model::{
    GateArch, GateConfig, GatePlacement, GateShape, GateSharing, Granularity, Model, ModelConfig,
};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"GSKP";
pub const VERSION: u32 = 1;

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let c = &model.config;
    let mut out = Vec::with_capacity(64 + 8 * model.params.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [c.n_layers, c.hidden, c.n_heads, c.ff_dim, c.vocab, c.max_seq] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let g = &c.gate;
    out.extend_from_slice(&[
        g.shape.code(),
        g.sharing.code(),
        g.placement.code(),
        g.arch.code(),
        g.granularity.code(),
    ]);
    let named = model.params.named();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for d in t.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

fn gate_field<T>(code: u8, parse: fn(u8) -> Option<T>, field: &str) -> Result<T> {
    parse(code).ok_or_else(|| Error::Checkpoint(format!("unknown {field} code {code}")))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32("model dimensions")? as usize;
    }
    let gate = GateConfig {
        shape: gate_field(r.u8("gate")?, GateShape::from_code, "gate shape")?,
        sharing: gate_field(r.u8("gate")?, GateSharing::from_code, "gate sharing")?,
        placement: gate_field(r.u8("gate")?, GatePlacement::from_code, "gate placement")?,
        arch: gate_field(r.u8("gate")?, GateArch::from_code, "gate arch")?,
        granularity: gate_field(r.u8("gate")?, Granularity::from_code, "granularity")?,
    };
    let config = ModelConfig {
        n_layers: dims[0],
        hidden: dims[1],
        n_heads: dims[2],
        ff_dim: dims[3],
        vocab: dims[4],
        max_seq: dims[5],
        gate,
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("stored configuration: {e}")))?;

    let count = r.u32("tensor count")? as usize;
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    let mut total: u128 = 0;
    for i in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint(format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel: u128 = 1;
        for _ in 0..rank {
            let d = r.u32("dimension")? as usize;
            numel = numel
                .checked_mul(d as u128)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
            shape.push(d);
        }
        if numel * 8 > r.remaining() as u128 {
            return Err(Error::Checkpoint(format!(
                "tensor {name} claims {numel} values but only {} bytes remain",
                r.remaining()
            )));
        }
        let raw = r.take(numel as usize * 8, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        total += numel;
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.remaining() != 0 {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            r.remaining()
        )));
    }
    // Only build the reference layout once the stored values account for
    // every parameter, so a forged header cannot force a huge allocation.
    if total != config.param_count() {
        return Err(Error::Checkpoint(format!(
            "stored {total} values but the configuration needs {}",
            config.param_count()
        )));
    }
    let mut params = Model::new(config, 0)?.params;
    let mut stored = tensors.into_iter();
    let mut mismatch = None;
    params.visit_mut(&mut |name, slot| {
        if mismatch.is_some() {
            return;
        }
        match stored.next() {
            Some((n, t)) if n == name && t.shape() == slot.shape() => *slot = t,
            Some((n, t)) => {
                mismatch = Some(format!(
                    "found {n} {:?} where {name} {:?} belongs",
                    t.shape(),
                    slot.shape()
                ))
            }
            None => mismatch = Some(format!("missing tensor {name}")),
        }
    });
    if let Some(m) = mismatch {
        return Err(Error::Checkpoint(m));
    }
    if stored.next().is_some() {
        return Err(Error::Checkpoint("more tensors than the configuration has".into()));
    }
    Model::from_params(config, params)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("cannot read checkpoint {}: {e}", path.display()),
        ))
    })?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(gate: GateConfig) -> Model {
        let cfg = ModelConfig {
            n_layers: 2,
            hidden: 8,
            n_heads: 2,
            ff_dim: 12,
            vocab: 20,
            max_seq: 10,
            gate,
        };
        Model::new(cfg, 4).unwrap()
    }

    #[test]
    fn round_trip_is_lossless_for_every_gate_variant() {
        for shape in GateShape::ALL {
            for sharing in GateSharing::ALL {
                for arch in GateArch::ALL {
                    let gate = GateConfig {
                        shape: *shape,
                        sharing: *sharing,
                        arch: *arch,
                        placement: GatePlacement::Entry,
                        granularity: Granularity::EverySecondLayer,
                    };
                    let m = small(gate);
                    let bytes = encode_checkpoint(&m);
                    assert_eq!(decode_checkpoint(&bytes).unwrap(), m);
                }
            }
        }
    }

    #[test]
    fn header_layout() {
        let m = small(GateConfig::default());
        let b = encode_checkpoint(&m);
        assert_eq!(&b[..4], b"GSKP");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(&b[32..37], &[0, 0, 0, 0, 0]);
        let values = m.params.param_count();
        assert!(b.len() > 8 * values);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let m = small(GateConfig::default());
        let good = encode_checkpoint(&m);

        let mut v = good.clone();
        v[4] = 2;
        assert!(matches!(
            decode_checkpoint(&v),
            Err(Error::CheckpointVersion { found: 2, expected: 1 })
        ));
        let mut v = good.clone();
        v[0] = b'X';
        assert!(decode_checkpoint(&v).is_err());
        assert!(decode_checkpoint(&good[..good.len() - 1]).is_err());
        let mut v = good.clone();
        v.push(0);
        assert!(decode_checkpoint(&v).is_err());
        let mut v = good.clone();
        v[32] = 9;
        assert!(decode_checkpoint(&v).is_err());
        // hidden not divisible by heads
        let mut v = good.clone();
        v[16] = 3;
        assert!(decode_checkpoint(&v).is_err());
        // a huge layer count with too little data behind it
        let mut v = good.clone();
        v[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_checkpoint(&v).is_err());
        assert!(decode_checkpoint(&[]).is_err());
    }

    #[test]
    fn renamed_tensor_is_rejected() {
        let m = small(GateConfig::default());
        let mut v = encode_checkpoint(&m);
        let at = v.windows(11).position(|w| w == b"token_embed").unwrap();
        v[at] = b'T';
        assert!(matches!(decode_checkpoint(&v), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn file_round_trip() {
        let m = small(GateConfig::default());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        save_checkpoint(&m, &p).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), m);
        assert!(load_checkpoint(&dir.path().join("missing")).is_err());
    }
}
