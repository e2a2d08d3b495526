use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
struct LayerKv {
    keys: Vec<f64>,
    values: Vec<f64>,
    len: usize,
}

/// Per-layer key/value rows for every position seen so far.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    hidden: usize,
    layers: Vec<LayerKv>,
}

impl KvCache {
    pub fn new(n_layers: usize, hidden: usize) -> Self {
        Self {
            hidden,
            layers: vec![LayerKv::default(); n_layers],
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Valid length shared by all layers.
    pub fn len(&self) -> Result<usize> {
        let first = self.layers.first().map_or(0, |l| l.len);
        match self.layers.iter().position(|l| l.len != first) {
            None => Ok(first),
            Some(i) => Err(Error::CacheInconsistent(format!(
                "layer {i} holds {} rows but layer 0 holds {first}",
                self.layers[i].len
            ))),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(|l| l.len == 0)
    }

    pub fn layer_len(&self, layer: usize) -> Result<usize> {
        Ok(self.layer(layer)?.len)
    }

    fn layer(&self, layer: usize) -> Result<&LayerKv> {
        self.layers.get(layer).ok_or(Error::LayerOutOfRange {
            layer,
            layers: self.layers.len(),
        })
    }

    fn layer_mut(&mut self, layer: usize) -> Result<&mut LayerKv> {
        let layers = self.layers.len();
        self.layers
            .get_mut(layer)
            .ok_or(Error::LayerOutOfRange { layer, layers })
    }

    pub fn key_row(&self, layer: usize, index: usize) -> Result<&[f64]> {
        let l = self.layer(layer)?;
        if index >= l.len {
            return Err(Error::CacheIndex { index, len: l.len });
        }
        Ok(&l.keys[index * self.hidden..(index + 1) * self.hidden])
    }

    pub fn value_row(&self, layer: usize, index: usize) -> Result<&[f64]> {
        let l = self.layer(layer)?;
        if index >= l.len {
            return Err(Error::CacheIndex { index, len: l.len });
        }
        Ok(&l.values[index * self.hidden..(index + 1) * self.hidden])
    }

    /// All cached keys and values of one layer as `[len, hidden]` tensors.
    pub fn layer_tensors(&self, layer: usize) -> Result<(Tensor, Tensor)> {
        let l = self.layer(layer)?;
        Ok((
            Tensor::new(vec![l.len, self.hidden], l.keys.clone())?,
            Tensor::new(vec![l.len, self.hidden], l.values.clone())?,
        ))
    }

    /// Appends `[rows, hidden]` keys and values to one layer.
    pub(crate) fn append(&mut self, layer: usize, keys: &[f64], values: &[f64]) -> Result<()> {
        let h = self.hidden;
        if keys.len() != values.len() || keys.len() % h != 0 {
            return Err(Error::CacheInconsistent(format!(
                "append of {} keys / {} values with hidden {h}",
                keys.len(),
                values.len()
            )));
        }
        let l = self.layer_mut(layer)?;
        l.keys.extend_from_slice(keys);
        l.values.extend_from_slice(values);
        l.len += keys.len() / h;
        Ok(())
    }

    /// Replaces the row of `index` at `layer` with the row one layer below.
    ///
    /// Layer 0 has no layer below; its rows always come from its own
    /// projections, so the call leaves them untouched.
    pub fn copy_up(&mut self, layer: usize, index: usize) -> Result<()> {
        let len = self.layer_len(layer)?;
        if index >= len {
            return Err(Error::CacheIndex { index, len });
        }
        if layer == 0 {
            return Ok(());
        }
        let h = self.hidden;
        let (below, above) = self.layers.split_at_mut(layer);
        let src = &below[layer - 1];
        if index >= src.len {
            return Err(Error::CacheIndex {
                index,
                len: src.len,
            });
        }
        let dst = &mut above[0];
        let r = index * h..(index + 1) * h;
        dst.keys[r.clone()].copy_from_slice(&src.keys[r.clone()]);
        dst.values[r.clone()].copy_from_slice(&src.values[r]);
        Ok(())
    }

    /// Drops every row at position `len` and beyond.
    pub fn truncate(&mut self, len: usize) {
        let h = self.hidden;
        for l in &mut self.layers {
            if l.len > len {
                l.len = len;
                l.keys.truncate(len * h);
                l.values.truncate(len * h);
            }
        }
    }
}

/// Free-function form of [`KvCache::copy_up`].
pub fn cache_copy_up(cache: &mut KvCache, layer: usize, index: usize) -> Result<()> {
    cache.copy_up(layer, index)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filled(layers: usize, h: usize, rows: usize) -> KvCache {
        let mut c = KvCache::new(layers, h);
        for l in 0..layers {
            let k: Vec<f64> = (0..rows * h).map(|i| (l * 1000 + i) as f64).collect();
            let v: Vec<f64> = k.iter().map(|x| -x).collect();
            c.append(l, &k, &v).unwrap();
        }
        c
    }

    #[test]
    fn copy_up_is_exact_and_idempotent() {
        let mut c = filled(3, 4, 5);
        c.copy_up(1, 2).unwrap();
        assert_eq!(c.key_row(1, 2).unwrap(), c.key_row(0, 2).unwrap());
        assert_eq!(c.value_row(1, 2).unwrap(), c.value_row(0, 2).unwrap());
        let snapshot = c.clone();
        c.copy_up(1, 2).unwrap();
        assert_eq!(c, snapshot);
    }

    #[test]
    fn chained_copies_reach_two_layers_down() {
        let mut c = filled(3, 4, 5);
        c.copy_up(1, 3).unwrap();
        c.copy_up(2, 3).unwrap();
        assert_eq!(c.key_row(2, 3).unwrap(), c.key_row(0, 3).unwrap());
        assert_ne!(c.key_row(2, 2).unwrap(), c.key_row(0, 2).unwrap());
    }

    #[test]
    fn copy_up_bounds() {
        let mut c = filled(2, 4, 3);
        assert!(matches!(c.copy_up(1, 3), Err(Error::CacheIndex { .. })));
        assert!(matches!(c.copy_up(2, 0), Err(Error::LayerOutOfRange { .. })));
        let before = c.clone();
        c.copy_up(0, 1).unwrap();
        assert_eq!(c, before);
    }

    #[test]
    fn uneven_lengths_are_reported() {
        let mut c = filled(2, 2, 2);
        c.append(0, &[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert!(c.len().is_err());
        c.truncate(2);
        assert_eq!(c.len().unwrap(), 2);
    }
}
