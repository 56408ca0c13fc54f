//! Fixed-length sequence extraction. Both sampling modes yield exactly
//! `floor(split_len / seq_len)` sequences per epoch so the two model
//! families train on the same number of sequences.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Result, TextError};

/// A sampled matrix of token ids, `rows` contiguous windows of `seq_len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<u32>,
    pub rows: usize,
    pub seq_len: usize,
}

impl Batch {
    pub fn row(&self, r: usize) -> &[u32] {
        &self.tokens[r * self.seq_len..(r + 1) * self.seq_len]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    /// Deal out a permutation of the aligned non-overlapping window
    /// partition; every window appears exactly once per epoch.
    WithoutReplacement,
    /// Draw uniform random start offsets; any valid offset can appear.
    WithReplacement,
}

/// One epoch worth of batches over a token split.
pub struct EpochSampler {
    mode: SamplingMode,
    seq_len: usize,
    /// permuted window indices (without replacement)
    order: Vec<usize>,
    cursor: usize,
    /// sequences still to be emitted this epoch
    remaining: usize,
    max_offset: usize,
}

impl EpochSampler {
    pub fn new(
        mode: SamplingMode,
        split_len: usize,
        seq_len: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if seq_len == 0 {
            return Err(TextError::Invalid("zero sequence length".into()));
        }
        if seq_len > split_len {
            return Err(TextError::Invalid(format!(
                "sequence length {seq_len} exceeds split length {split_len}"
            )));
        }
        let n_windows = split_len / seq_len;
        let mut order: Vec<usize> = (0..n_windows).collect();
        if mode == SamplingMode::WithoutReplacement {
            order.shuffle(rng);
        }
        Ok(EpochSampler {
            mode,
            seq_len,
            order,
            cursor: 0,
            remaining: n_windows,
            max_offset: split_len - seq_len,
        })
    }

    /// Sequences this epoch will produce in total.
    pub fn sequences_per_epoch(&self) -> usize {
        self.order.len()
    }

    /// Optimizer steps this epoch will take at `batch_size`.
    pub fn batches_per_epoch(&self, batch_size: usize) -> usize {
        self.order.len().div_ceil(batch_size)
    }

    /// Next batch of up to `batch_size` rows, or `None` once the epoch's
    /// sequence budget is spent. The final batch may be short.
    pub fn next_batch(
        &mut self,
        split: &[u32],
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Option<Batch> {
        if self.remaining == 0 || batch_size == 0 {
            return None;
        }
        let rows = batch_size.min(self.remaining);
        self.remaining -= rows;
        let mut tokens = Vec::with_capacity(rows * self.seq_len);
        for _ in 0..rows {
            let start = match self.mode {
                SamplingMode::WithoutReplacement => {
                    let w = self.order[self.cursor];
                    self.cursor += 1;
                    w * self.seq_len
                }
                SamplingMode::WithReplacement => rng.gen_range(0..=self.max_offset),
            };
            tokens.extend_from_slice(&split[start..start + self.seq_len]);
        }
        Some(Batch {
            tokens,
            rows,
            seq_len: self.seq_len,
        })
    }
}

/// Single batch drawn outside any epoch accounting (validation sampling).
pub fn sample_batch(
    split: &[u32],
    seq_len: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
    replacement: bool,
) -> Result<Batch> {
    let mode = if replacement {
        SamplingMode::WithReplacement
    } else {
        SamplingMode::WithoutReplacement
    };
    let mut sampler = EpochSampler::new(mode, split.len(), seq_len, rng)?;
    sampler
        .next_batch(split, batch_size, rng)
        .ok_or_else(|| TextError::Invalid("empty split".into()))
}
