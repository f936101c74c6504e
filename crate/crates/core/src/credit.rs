//! Trace credit: per-position, per-token evidence accumulated across reverse
//! steps and fused into the current logits as a log-domain prior.
//!
//! Each update first decays every credit of a position by `beta`, then adds
//! a bonus `p^gamma` computed from the raw distribution of the step just
//! executed. The top-1 variant credits only the current argmax; the full
//! variant credits every token. Fusion adds `alpha * ln(1 + C)` to the raw
//! logits, which multiplies the raw probabilities by `(1 + C)^alpha` before
//! renormalization.
//!
//! Credits live only for masked positions of the active block and are
//! cleared whenever the decoder moves to the next block.

use std::collections::BTreeMap;

use crate::denoise::LogitsMatrix;
use crate::error::{Error, Result};
use crate::model::{TokenId, Vocab};
use crate::prob::{softmax, softmax_f32, top_candidate};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CreditMode {
    /// Sparse storage; only tokens that were ever top-1 hold credit.
    Top1,
    /// Dense storage over the whole vocabulary.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
enum PositionCredits {
    Sparse(BTreeMap<TokenId, f64>),
    Dense(Vec<f64>),
}

impl PositionCredits {
    fn get(&self, token: TokenId) -> f64 {
        match self {
            PositionCredits::Sparse(m) => m.get(&token).copied().unwrap_or(0.0),
            PositionCredits::Dense(v) => v[token as usize],
        }
    }

    fn decay(&mut self, beta: f64) {
        match self {
            PositionCredits::Sparse(m) => m.values_mut().for_each(|c| *c *= beta),
            PositionCredits::Dense(v) => v.iter_mut().for_each(|c| *c *= beta),
        }
    }

    fn add(&mut self, token: TokenId, bonus: f64) {
        match self {
            PositionCredits::Sparse(m) => *m.entry(token).or_insert(0.0) += bonus,
            PositionCredits::Dense(v) => v[token as usize] += bonus,
        }
    }
}

/// Trace credits for the masked positions of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct CreditStore {
    mode: CreditMode,
    block_id: usize,
    vocab: Vocab,
    credits: BTreeMap<usize, PositionCredits>,
}

impl CreditStore {
    /// Zero credits scoped to `block_id`.
    pub fn new(mode: CreditMode, block_id: usize, vocab: Vocab) -> Self {
        Self {
            mode,
            block_id,
            vocab,
            credits: BTreeMap::new(),
        }
    }

    pub fn mode(&self) -> CreditMode {
        self.mode
    }

    pub fn block_id(&self) -> usize {
        self.block_id
    }

    pub fn credit(&self, position: usize, token: TokenId) -> f64 {
        self.credits.get(&position).map_or(0.0, |c| c.get(token))
    }

    /// Full credit vector of a position (zeros when it holds none).
    pub fn credit_vector(&self, position: usize) -> Vec<f64> {
        (0..self.vocab.size() as TokenId)
            .map(|v| self.credit(position, v))
            .collect()
    }

    /// Number of tokens at `position` holding nonzero credit.
    pub fn support(&self, position: usize) -> usize {
        self.credit_vector(position)
            .iter()
            .filter(|&&c| c > 0.0)
            .count()
    }

    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.credits.keys().copied()
    }

    pub fn is_zero(&self) -> bool {
        self.credits
            .keys()
            .all(|&p| self.credit_vector(p).iter().all(|&c| c == 0.0))
    }

    fn slot(&mut self, position: usize) -> &mut PositionCredits {
        let (mode, size) = (self.mode, self.vocab.size());
        self.credits.entry(position).or_insert_with(|| match mode {
            CreditMode::Top1 => PositionCredits::Sparse(BTreeMap::new()),
            CreditMode::Full => PositionCredits::Dense(vec![0.0; size]),
        })
    }

    /// Decay, then credit the raw top-1 token of every row with `p^gamma`.
    /// Positions absent from `logits` are dropped.
    pub fn update_top1(&mut self, logits: &LogitsMatrix, beta: f64, gamma: f64) {
        self.apply(logits, beta, |probs, mask_id, slot| {
            let (top, p) = top_candidate(probs, mask_id);
            slot.add(top, p.powf(gamma));
        });
    }

    /// Decay, then credit every token with `p^gamma`.
    pub fn update_full(&mut self, logits: &LogitsMatrix, beta: f64, gamma: f64) {
        self.apply(logits, beta, |probs, _, slot| {
            for (v, &p) in probs.iter().enumerate() {
                slot.add(v as TokenId, p.powf(gamma));
            }
        });
    }

    fn apply(
        &mut self,
        logits: &LogitsMatrix,
        beta: f64,
        bonus: impl Fn(&[f64], TokenId, &mut PositionCredits),
    ) {
        self.credits.retain(|&p, _| logits.contains(p));
        let mask_id = self.vocab.mask_id();
        for (p, row) in logits.iter() {
            let probs = softmax_f32(row);
            let slot = self.slot(p);
            slot.decay(beta);
            bonus(&probs, mask_id, slot);
        }
    }

    /// Clears all credits and rescopes the store to a later block.
    pub fn reset_for_block(&mut self, block_id: usize) -> Result<()> {
        if block_id <= self.block_id {
            return Err(Error::InvalidTransition {
                from: self.block_id,
                to: block_id,
            });
        }
        self.block_id = block_id;
        self.credits.clear();
        Ok(())
    }
}

/// Logits after fusion, in `f64`, keyed like the raw matrix.
pub type FusedLogits = BTreeMap<usize, Vec<f64>>;

/// `raw + alpha * ln(1 + C)` per entry. With `alpha == 0` the raw values are
/// returned unchanged.
pub fn fuse_logits(raw: &LogitsMatrix, store: &CreditStore, alpha: f64) -> FusedLogits {
    raw.iter()
        .map(|(p, row)| {
            let widened = row.iter().map(|&x| f64::from(x));
            let fused = if alpha == 0.0 {
                widened.collect()
            } else {
                widened
                    .enumerate()
                    .map(|(v, x)| x + alpha * store.credit(p, v as TokenId).ln_1p())
                    .collect()
            };
            (p, fused)
        })
        .collect()
}

/// Softmax of every fused row.
pub fn enhanced_distribution(fused: &FusedLogits) -> BTreeMap<usize, Vec<f64>> {
    fused.iter().map(|(&p, row)| (p, softmax(row))).collect()
}
