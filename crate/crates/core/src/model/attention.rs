use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// Attention weights of one sentence, indexed `(layer, head, query, key)`.
///
/// The same type carries token-level maps (units are tokens including CLS
/// and SEP) and word-level maps (units are CLS, the words, then SEP).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceAttention {
    pub layers: usize,
    pub heads: usize,
    pub len: usize,
    pub data: Vec<f64>,
}

impl SentenceAttention {
    pub fn zeros(layers: usize, heads: usize, len: usize) -> Self {
        Self {
            layers,
            heads,
            len,
            data: alloc::vec![0.0; layers * heads * len * len],
        }
    }

    #[inline]
    pub fn index(&self, l: usize, h: usize, i: usize, j: usize) -> usize {
        ((l * self.heads + h) * self.len + i) * self.len + j
    }

    #[inline]
    pub fn get(&self, l: usize, h: usize, i: usize, j: usize) -> f64 {
        self.data[self.index(l, h, i, j)]
    }

    #[inline]
    pub fn set(&mut self, l: usize, h: usize, i: usize, j: usize, v: f64) {
        let k = self.index(l, h, i, j);
        self.data[k] = v;
    }

    pub fn row(&self, l: usize, h: usize, i: usize) -> &[f64] {
        let k = self.index(l, h, i, 0);
        &self.data[k..k + self.len]
    }
}

/// Batch of attention maps, batch-major: `(sentence, layer, head, query, key)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTensor {
    pub batch: usize,
    pub layers: usize,
    pub heads: usize,
    pub seq: usize,
    /// Valid (non-padding) tokens per sentence.
    pub lengths: Vec<usize>,
    pub data: Vec<f64>,
}

impl AttentionTensor {
    #[inline]
    pub fn get(&self, b: usize, l: usize, h: usize, i: usize, j: usize) -> f64 {
        self.data[(((b * self.layers + l) * self.heads + h) * self.seq + i) * self.seq + j]
    }

    /// Attention of sentence `b` restricted to its valid tokens.
    pub fn sentence(&self, b: usize) -> SentenceAttention {
        let len = self.lengths[b];
        let mut out = SentenceAttention::zeros(self.layers, self.heads, len);
        for l in 0..self.layers {
            for h in 0..self.heads {
                for i in 0..len {
                    for j in 0..len {
                        out.set(l, h, i, j, self.get(b, l, h, i, j));
                    }
                }
            }
        }
        out
    }
}
