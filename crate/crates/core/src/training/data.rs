use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tokenizer;

/// A batch of next-token prediction examples.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Vec<u32>>,
    pub targets: Vec<Vec<u32>>,
    /// `false` excludes a position from the loss.
    pub loss_mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Next-token examples with every position counted in the loss.
    pub fn from_windows(windows: &[Vec<u32>]) -> Self {
        let mut b = Batch::default();
        for w in windows {
            b.inputs.push(w[..w.len() - 1].to_vec());
            b.targets.push(w[1..].to_vec());
            b.loss_mask.push(vec![true; w.len() - 1]);
        }
        b
    }
}

/// Byte-tokenized corpus split into training and held-out parts.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<u32>,
    pub held_out: Vec<u32>,
}

impl Corpus {
    /// The last `held_out_fraction` of the bytes are held out.
    pub fn from_bytes(bytes: &[u8], held_out_fraction: f64) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::Empty("corpus"));
        }
        let tokens = tokenizer::encode(bytes);
        let cut = ((1.0 - held_out_fraction) * tokens.len() as f64).round() as usize;
        let cut = cut.clamp(1, tokens.len());
        Ok(Self {
            train: tokens[..cut].to_vec(),
            held_out: tokens[cut..].to_vec(),
        })
    }

    /// Consecutive non-overlapping windows of `len` tokens from the
    /// held-out part.
    pub fn held_out_windows(&self, len: usize, max: usize) -> Vec<Vec<u32>> {
        self.held_out
            .chunks_exact(len)
            .take(max)
            .map(|c| c.to_vec())
            .collect()
    }
}

/// Draws random training windows in a seed-determined order.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    pub batch_size: usize,
    pub seq_len: usize,
}

impl BatchSampler {
    pub fn new(batch_size: usize, seq_len: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            batch_size,
            seq_len,
        }
    }

    pub fn next_batch(&mut self, tokens: &[u32]) -> Result<Batch> {
        let window = self.seq_len + 1;
        if tokens.len() < window {
            return Err(Error::Config(format!(
                "corpus of {} tokens is shorter than one window of {window}",
                tokens.len()
            )));
        }
        let windows: Vec<Vec<u32>> = (0..self.batch_size)
            .map(|_| {
                let start = self.rng.random_range(0..=tokens.len() - window);
                tokens[start..start + window].to_vec()
            })
            .collect();
        Ok(Batch::from_windows(&windows))
    }
}
