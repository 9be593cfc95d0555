//! Per-layer KV cache containers with original-position bookkeeping and
//! exact memory accounting.
//!
//! Caches carry the absolute token index of every retained entry so that
//! rotary encodings can be gathered after eviction. A cache is single-owner
//! mutable state: transfer it between workers, never share it concurrently.

use thiserror::Error;

use crate::math::HeadTensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CacheError {
    #[error("append position {pos} is not greater than last stored position {last}")]
    NonIncreasingAppend { pos: usize, last: usize },
    #[error("gather indices must be strictly ascending")]
    UnsortedIndices,
    #[error("gather index {index} out of range for cache of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("key/value shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Retained keys, values, and original token positions for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKvCache {
    keys: HeadTensor,
    values: HeadTensor,
    positions: Vec<usize>,
}

impl LayerKvCache {
    pub fn empty(heads: usize, head_dim: usize) -> Self {
        Self {
            keys: HeadTensor::zeros(heads, 0, head_dim),
            values: HeadTensor::zeros(heads, 0, head_dim),
            positions: Vec::new(),
        }
    }

    /// Build from parts; positions must be strictly increasing and match the
    /// tensor sequence lengths.
    pub fn from_parts(
        keys: HeadTensor,
        values: HeadTensor,
        positions: Vec<usize>,
    ) -> Result<Self, CacheError> {
        if keys.seq() != values.seq() || keys.seq() != positions.len() {
            return Err(CacheError::ShapeMismatch(format!(
                "keys seq {}, values seq {}, positions {}",
                keys.seq(),
                values.seq(),
                positions.len()
            )));
        }
        if keys.heads() != values.heads() || keys.head_dim() != values.head_dim() {
            return Err(CacheError::ShapeMismatch(format!(
                "keys {}x{} vs values {}x{} (heads x head_dim)",
                keys.heads(),
                keys.head_dim(),
                values.heads(),
                values.head_dim()
            )));
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CacheError::UnsortedIndices);
        }
        Ok(Self {
            keys,
            values,
            positions,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn keys(&self) -> &HeadTensor {
        &self.keys
    }

    pub fn values(&self) -> &HeadTensor {
        &self.values
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// Append `k.seq()` entries whose positions start at `start_pos`.
    ///
    /// `start_pos` must exceed the last stored position.
    pub fn append(
        &mut self,
        k: &HeadTensor,
        v: &HeadTensor,
        start_pos: usize,
    ) -> Result<(), CacheError> {
        if k.seq() != v.seq() {
            return Err(CacheError::ShapeMismatch(format!(
                "append k seq {} != v seq {}",
                k.seq(),
                v.seq()
            )));
        }
        if k.heads() != self.keys.heads() || k.head_dim() != self.keys.head_dim() {
            return Err(CacheError::ShapeMismatch(format!(
                "append k {}x{} into cache {}x{}",
                k.heads(),
                k.head_dim(),
                self.keys.heads(),
                self.keys.head_dim()
            )));
        }
        if let Some(&last) = self.positions.last() {
            if start_pos <= last {
                return Err(CacheError::NonIncreasingAppend {
                    pos: start_pos,
                    last,
                });
            }
        }
        self.keys = self.keys.concat_seq(k);
        self.values = self.values.concat_seq(v);
        self.positions.extend((0..k.seq()).map(|i| start_pos + i));
        Ok(())
    }

    /// Keep only the entries at `indices` (strictly ascending, in-range).
    /// Retained entries keep their original relative order and position values.
    pub fn gather(&self, indices: &[usize]) -> Result<LayerKvCache, CacheError> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CacheError::UnsortedIndices);
        }
        if let Some(&max) = indices.last() {
            if max >= self.len() {
                return Err(CacheError::IndexOutOfRange {
                    index: max,
                    len: self.len(),
                });
            }
        }
        Ok(LayerKvCache {
            keys: self.keys.gather_seq(indices),
            values: self.values.gather_seq(indices),
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
        })
    }
}

/// One `LayerKvCache` per model layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheSet {
    layers: Vec<LayerKvCache>,
}

impl CacheSet {
    pub fn new(layers: Vec<LayerKvCache>) -> Self {
        Self { layers }
    }

    pub fn empty(num_layers: usize, heads: usize, head_dim: usize) -> Self {
        Self {
            layers: (0..num_layers)
                .map(|_| LayerKvCache::empty(heads, head_dim))
                .collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> &LayerKvCache {
        &self.layers[l]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut LayerKvCache {
        &mut self.layers[l]
    }

    pub fn layers(&self) -> &[LayerKvCache] {
        &self.layers
    }

    /// Per-layer retained lengths.
    pub fn lengths(&self) -> Vec<usize> {
        self.layers.iter().map(LayerKvCache::len).collect()
    }

    /// Total retained entries over all layers.
    pub fn kv_entry_count(&self) -> usize {
        self.layers.iter().map(LayerKvCache::len).sum()
    }

    /// Exact byte accounting: key and value tensors of every retained entry.
    ///
    /// `bytes_per_element` is 2 or 4. This is a pure formula, not a process
    /// memory measurement.
    pub fn kv_bytes(&self, heads: usize, head_dim: usize, bytes_per_element: usize) -> usize {
        debug_assert!(bytes_per_element == 2 || bytes_per_element == 4);
        2 * self.kv_entry_count() * heads * head_dim * bytes_per_element
    }
}
