use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{CLS, MASK, NUM_SPECIAL, PAD, SEP};

/// Label value at positions that carry no prediction target.
pub const IGNORE: u32 = u32::MAX;

/// A padded masked-language-modeling batch.
///
/// Every sequence is `CLS w_1 .. w_n SEP`, right-padded with PAD to `seq`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlmBatch {
    pub batch: usize,
    pub seq: usize,
    /// `[batch * seq]` model inputs after corruption.
    pub input_ids: Vec<u32>,
    /// `[batch * seq]` uncorrupted tokens.
    pub original_ids: Vec<u32>,
    /// `[batch * seq]` original id at selected positions, `IGNORE` elsewhere.
    pub labels: Vec<u32>,
    /// Valid tokens per sequence; the attention mask is `t < lengths[b]`.
    pub lengths: Vec<usize>,
    /// Selected `(sequence, token position)` pairs in row-major order.
    pub mask_positions: Vec<(usize, usize)>,
}

impl MlmBatch {
    /// Uncorrupted batch with no prediction targets (for attention extraction).
    pub fn unmasked(sentences: &[&[u32]], max_len: usize) -> Result<Self> {
        let (seq, lengths, ids) = frame(sentences, max_len)?;
        Ok(Self {
            batch: sentences.len(),
            seq,
            input_ids: ids.clone(),
            original_ids: ids,
            labels: alloc::vec![IGNORE; sentences.len() * seq],
            lengths,
            mask_positions: Vec::new(),
        })
    }

    /// Flat row indices (`b * seq + t`) of the selected positions.
    pub fn target_rows(&self) -> Vec<usize> {
        self.mask_positions.iter().map(|&(b, t)| b * self.seq + t).collect()
    }

    pub fn target_ids(&self) -> Vec<usize> {
        self.mask_positions
            .iter()
            .map(|&(b, t)| self.labels[b * self.seq + t] as usize)
            .collect()
    }
}

fn frame(sentences: &[&[u32]], max_len: usize) -> Result<(usize, Vec<usize>, Vec<u32>)> {
    if sentences.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut lengths = Vec::with_capacity(sentences.len());
    for s in sentences {
        if s.is_empty() {
            return Err(Error::Empty("sentence"));
        }
        let len = s.len() + 2;
        if len > max_len {
            return Err(Error::SequenceTooLong { len, max: max_len });
        }
        lengths.push(len);
    }
    let seq = *lengths.iter().max().unwrap_or(&0);
    let mut ids = alloc::vec![PAD; sentences.len() * seq];
    for (b, s) in sentences.iter().enumerate() {
        let row = &mut ids[b * seq..(b + 1) * seq];
        row[0] = CLS;
        row[1..=s.len()].copy_from_slice(s);
        row[s.len() + 1] = SEP;
    }
    Ok((seq, lengths, ids))
}

/// 80/10/10 corruption of a selected token given one uniform draw `u`.
pub fn corrupt_token(u: f64, original: u32, random_word: u32) -> u32 {
    if u < 0.8 {
        MASK
    } else if u < 0.9 {
        random_word
    } else {
        original
    }
}

/// Builds a batch from word-id sentences, selecting each word position with
/// probability `rate` (at least one per sequence) and corrupting it 80/10/10.
pub fn mask_batch<R: Rng + ?Sized>(
    sentences: &[&[u32]],
    rate: f64,
    vocab_size: usize,
    max_len: usize,
    rng: &mut R,
) -> Result<MlmBatch> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::InvalidConfig(format!("mask rate {rate} outside (0, 1)")));
    }
    if vocab_size <= NUM_SPECIAL as usize {
        return Err(Error::VocabularyTooSmall(format!("{vocab_size} symbols")));
    }
    let (seq, lengths, ids) = frame(sentences, max_len)?;
    let mut input = ids.clone();
    let mut labels = alloc::vec![IGNORE; ids.len()];
    let mut positions = Vec::new();
    let mut picked = Vec::new();
    for (b, s) in sentences.iter().enumerate() {
        loop {
            picked.clear();
            for t in 1..=s.len() {
                if rng.random::<f64>() < rate {
                    picked.push(t);
                }
            }
            if !picked.is_empty() {
                break;
            }
        }
        for &t in &picked {
            let k = b * seq + t;
            let u: f64 = rng.random();
            let random_word = rng.random_range(NUM_SPECIAL..vocab_size as u32);
            input[k] = corrupt_token(u, ids[k], random_word);
            labels[k] = ids[k];
            positions.push((b, t));
        }
    }
    Ok(MlmBatch {
        batch: sentences.len(),
        seq,
        input_ids: input,
        original_ids: ids,
        labels,
        lengths,
        mask_positions: positions,
    })
}
