//! Byte-level tokenizer and deterministic corpus batching.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const BYTE_VOCAB: usize = 256;

/// Identity byte mapping.
pub fn tokenize(text: impl AsRef<[u8]>) -> Vec<usize> {
    text.as_ref().iter().map(|&b| b as usize).collect()
}

pub fn detokenize(ids: &[usize]) -> Result<Vec<u8>> {
    ids.iter()
        .map(|&id| {
            u8::try_from(id).map_err(|_| Error::TokenOutOfRange {
                id,
                vocab: BYTE_VOCAB,
            })
        })
        .collect()
}

/// Flattened `[batch, seq]` inputs and next-token targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
    /// Byte offset of every window in the corpus.
    pub offsets: Vec<usize>,
}

impl Batch {
    fn from_offsets(bytes: &[u8], offsets: Vec<usize>, seq: usize) -> Self {
        let mut inputs = Vec::with_capacity(offsets.len() * seq);
        let mut targets = Vec::with_capacity(offsets.len() * seq);
        for &o in &offsets {
            inputs.extend(bytes[o..o + seq].iter().map(|&b| b as usize));
            targets.extend(bytes[o + 1..o + seq + 1].iter().map(|&b| b as usize));
        }
        Self {
            inputs,
            targets,
            batch: offsets.len(),
            seq,
            offsets,
        }
    }
}

/// Raw text split into a leading train span and a trailing eval span.
#[derive(Clone, Debug)]
pub struct Corpus {
    bytes: Vec<u8>,
    train_end: usize,
    seed: u64,
}

impl Corpus {
    pub fn new(bytes: Vec<u8>, split_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&split_fraction) {
            return Err(Error::Config(format!("split_fraction {split_fraction} outside [0, 1)")));
        }
        let eval_len = (bytes.len() as f64 * split_fraction).round() as usize;
        Ok(Self {
            train_end: bytes.len() - eval_len,
            bytes,
            seed,
        })
    }

    pub fn load(path: &Path, split_fraction: f64, seed: u64) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::new(bytes, split_fraction, seed)
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn train_span(&self) -> std::ops::Range<usize> {
        0..self.train_end
    }

    pub fn eval_span(&self) -> std::ops::Range<usize> {
        self.train_end..self.bytes.len()
    }

    fn windows_in(span_len: usize, seq: usize) -> usize {
        span_len.saturating_sub(1) / seq
    }

    /// Every window start the train sampler can emit.
    pub fn train_window_offsets(&self, seq: usize) -> Vec<usize> {
        (0..Self::windows_in(self.train_end, seq)).map(|i| i * seq).collect()
    }

    /// Sequential, non-overlapping window starts inside the eval span.
    pub fn eval_window_offsets(&self, seq: usize) -> Vec<usize> {
        let span = self.eval_span();
        (0..Self::windows_in(span.len(), seq)).map(|i| span.start + i * seq).collect()
    }

    /// Training batch for `step`: a pure function of (corpus, seed, step).
    /// Windows are visited in a fresh seeded permutation each epoch.
    pub fn next_batch(&self, step: usize, batch_size: usize, seq: usize) -> Result<Batch> {
        let n = Self::windows_in(self.train_end, seq);
        if n == 0 || seq == 0 {
            return Err(Error::CorpusTooShort {
                len: self.train_end,
                needed: seq + 1,
            });
        }
        let first = step * batch_size;
        let mut offsets = Vec::with_capacity(batch_size);
        let mut cached: Option<(usize, Vec<usize>)> = None;
        for k in first..first + batch_size {
            let epoch = k / n;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                cached = Some((epoch, self.permutation(epoch, n)));
            }
            let perm = &cached.as_ref().unwrap().1;
            offsets.push(perm[k % n] * seq);
        }
        Ok(Batch::from_offsets(&self.bytes, offsets, seq))
    }

    fn permutation(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        perm
    }

    /// Held-out batches covering at least `n_tokens` predicted tokens, or
    /// the whole eval span if it is shorter.
    pub fn eval_batches(&self, n_tokens: usize, batch_size: usize, seq: usize) -> Result<Vec<Batch>> {
        let offsets = self.eval_window_offsets(seq);
        if offsets.is_empty() || batch_size == 0 {
            return Err(Error::CorpusTooShort {
                len: self.eval_span().len(),
                needed: seq + 1,
            });
        }
        let want = n_tokens.div_ceil(seq).clamp(1, offsets.len());
        Ok(offsets[..want]
            .chunks(batch_size)
            .map(|c| Batch::from_offsets(&self.bytes, c.to_vec(), seq))
            .collect())
    }
}
