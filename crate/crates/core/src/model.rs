//! Sequence state, vocabulary, block layout and decoder configuration.
//!
//! A run starts from a prompt followed by `gen_length` masked positions.
//! Generation positions are decoded block by block, left to right; inside a
//! block any masked position may be committed at any step. Once a position is
//! committed its token is final.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Vocabulary shape: size plus the two special ids the engine cares about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawVocab", into = "RawVocab")]
pub struct Vocab {
    size: usize,
    mask_id: TokenId,
    eos_id: TokenId,
}

#[derive(Serialize, Deserialize)]
struct RawVocab {
    size: usize,
    mask_id: TokenId,
    eos_id: TokenId,
}

impl TryFrom<RawVocab> for Vocab {
    type Error = Error;

    fn try_from(raw: RawVocab) -> Result<Self> {
        Vocab::new(raw.size, raw.mask_id, raw.eos_id)
    }
}

impl From<Vocab> for RawVocab {
    fn from(v: Vocab) -> Self {
        RawVocab {
            size: v.size,
            mask_id: v.mask_id,
            eos_id: v.eos_id,
        }
    }
}

impl Vocab {
    pub fn new(size: usize, mask_id: TokenId, eos_id: TokenId) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidConfig(format!(
                "vocabulary size must be at least 2, got {size}"
            )));
        }
        if mask_id == eos_id {
            return Err(Error::InvalidConfig(format!(
                "mask id and eos id must differ (both {mask_id})"
            )));
        }
        if mask_id as usize >= size || eos_id as usize >= size {
            return Err(Error::InvalidConfig(format!(
                "mask id {mask_id} and eos id {eos_id} must be below vocabulary size {size}"
            )));
        }
        Ok(Self {
            size,
            mask_id,
            eos_id,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn contains(&self, token: TokenId) -> bool {
        (token as usize) < self.size
    }
}

/// Token sequence at one reverse step: a fixed prompt followed by generation
/// positions that are either masked or committed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceState {
    tokens: Vec<TokenId>,
    masked: Vec<bool>,
    prompt_len: usize,
    vocab: Vocab,
}

impl SequenceState {
    /// Fully masked generation span after `prompt`.
    pub fn new(prompt: &[TokenId], gen_length: usize, vocab: Vocab) -> Result<Self> {
        if gen_length == 0 {
            return Err(Error::InvalidConfig("gen_length must be positive".into()));
        }
        if let Some((i, &t)) = prompt
            .iter()
            .enumerate()
            .find(|(_, &t)| t == vocab.mask_id() || !vocab.contains(t))
        {
            return Err(Error::InvalidPrompt(format!(
                "prompt token {t} at index {i} is the mask token or outside the vocabulary"
            )));
        }
        let prompt_len = prompt.len();
        let mut tokens = prompt.to_vec();
        tokens.resize(prompt_len + gen_length, vocab.mask_id());
        let mut masked = vec![false; prompt_len];
        masked.resize(prompt_len + gen_length, true);
        Ok(Self {
            tokens,
            masked,
            prompt_len,
            vocab,
        })
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn gen_length(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }

    pub fn generation_span(&self) -> Range<usize> {
        self.prompt_len..self.tokens.len()
    }

    pub fn is_masked(&self, position: usize) -> bool {
        self.masked.get(position).copied().unwrap_or(false)
    }

    /// Masked generation positions in ascending order.
    pub fn masked_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.masked
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn is_complete(&self) -> bool {
        !self.masked.iter().any(|&m| m)
    }

    /// Fraction of generation positions still masked.
    pub fn mask_ratio(&self) -> f64 {
        self.masked_count() as f64 / self.gen_length() as f64
    }

    pub fn commit(&mut self, position: usize, token: TokenId) -> Result<()> {
        if !self.generation_span().contains(&position) {
            return Err(Error::InvalidPosition(position));
        }
        if !self.masked[position] {
            return Err(Error::DoubleCommit(position));
        }
        if token == self.vocab.mask_id() || !self.vocab.contains(token) {
            return Err(Error::InvalidToken(token));
        }
        self.tokens[position] = token;
        self.masked[position] = false;
        Ok(())
    }

    /// Leftmost block that still holds a masked position.
    pub fn current_block(&self, layout: &BlockLayout) -> Result<Block> {
        let first = self
            .masked_positions()
            .next()
            .ok_or(Error::GenerationComplete)?;
        Ok(layout.block(layout.block_of(first - self.prompt_len), self.prompt_len))
    }
}

/// One decoding block, in absolute sequence positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub index: usize,
    pub range: Range<usize>,
}

/// Partition of the generation span into blocks plus the per-block step
/// budget derived from the total step count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    gen_length: usize,
    block_length: usize,
    total_steps: usize,
}

impl BlockLayout {
    pub fn new(gen_length: usize, block_length: usize, total_steps: usize) -> Result<Self> {
        if gen_length == 0 || block_length == 0 || total_steps == 0 {
            return Err(Error::InvalidConfig(format!(
                "gen_length ({gen_length}), block_length ({block_length}) and steps \
                 ({total_steps}) must all be positive"
            )));
        }
        Ok(Self {
            gen_length,
            block_length: block_length.min(gen_length),
            total_steps,
        })
    }

    pub fn gen_length(&self) -> usize {
        self.gen_length
    }

    pub fn block_length(&self) -> usize {
        self.block_length
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn num_blocks(&self) -> usize {
        self.gen_length.div_ceil(self.block_length)
    }

    /// Block index of a generation offset (0-based, prompt excluded).
    pub fn block_of(&self, offset: usize) -> usize {
        offset / self.block_length
    }

    /// Generation offsets covered by block `index`.
    pub fn offsets(&self, index: usize) -> Range<usize> {
        let start = index * self.block_length;
        start.min(self.gen_length)..(start + self.block_length).min(self.gen_length)
    }

    pub fn block(&self, index: usize, prompt_len: usize) -> Block {
        let r = self.offsets(index);
        Block {
            index,
            range: prompt_len + r.start..prompt_len + r.end,
        }
    }

    /// Step budget of a full-length block.
    pub fn steps_per_block(&self) -> usize {
        self.budget_for_len(self.block_length)
    }

    /// Step budget of block `index`; a shorter final block gets the
    /// proportional share, rounded up.
    pub fn budget_for_block(&self, index: usize) -> usize {
        self.budget_for_len(self.offsets(index).len())
    }

    fn budget_for_len(&self, len: usize) -> usize {
        (len * self.total_steps).div_ceil(self.gen_length).max(1)
    }
}

/// Forward passes left for the active block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepBudget {
    remaining: usize,
}

impl StepBudget {
    pub fn new(remaining: usize) -> Self {
        Self { remaining }
    }

    pub fn remaining(&self) -> usize {
        self.remaining
    }

    pub fn is_exhausted(&self) -> bool {
        self.remaining == 0
    }

    /// Charge one forward pass.
    pub fn consume(&mut self, block: usize) -> Result<()> {
        self.remaining = self
            .remaining
            .checked_sub(1)
            .ok_or(Error::BudgetExhausted(block))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// One commit per forward, highest raw confidence first.
    Baseline,
    /// Commit every position whose raw confidence clears the threshold.
    Threshold,
    /// Threshold decoding over logits fused with top-1 trace credit.
    CreditTop1,
    /// Threshold decoding over logits fused with full-vocabulary trace credit.
    CreditFull,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Baseline,
        Strategy::Threshold,
        Strategy::CreditTop1,
        Strategy::CreditFull,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::Threshold => "threshold",
            Strategy::CreditTop1 => "credit-top1",
            Strategy::CreditFull => "credit-full",
        }
    }

    pub fn uses_credit(&self) -> bool {
        matches!(self, Strategy::CreditTop1 | Strategy::CreditFull)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown strategy `{s}` (expected baseline, threshold, credit-top1 or credit-full)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    #[default]
    Greedy,
    /// Draw committed tokens from the decision distribution with a ChaCha8
    /// generator seeded from `DecoderConfig::seed`.
    Categorical,
}

impl Sampling {
    pub fn as_str(&self) -> &'static str {
        match self {
            Sampling::Greedy => "greedy",
            Sampling::Categorical => "categorical",
        }
    }
}

impl fmt::Display for Sampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Sampling::Greedy),
            "categorical" => Ok(Sampling::Categorical),
            _ => Err(Error::InvalidConfig(format!(
                "unknown sampling mode `{s}` (expected greedy or categorical)"
            ))),
        }
    }
}

pub const DEFAULT_ALPHA: f64 = 0.65;
pub const DEFAULT_BETA: f64 = 0.7;
pub const DEFAULT_GAMMA: f64 = 0.5;
pub const DEFAULT_THRESHOLD: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub strategy: Strategy,
    /// Fusion strength on `ln(1 + credit)`.
    pub alpha: f64,
    /// Per-step credit decay.
    pub beta: f64,
    /// Concave exponent applied to the bonus probability.
    pub gamma: f64,
    /// Commit threshold on the decision confidence (inclusive).
    pub threshold: f64,
    pub early_stop: bool,
    pub sampling: Sampling,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::CreditTop1,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            gamma: DEFAULT_GAMMA,
            threshold: DEFAULT_THRESHOLD,
            early_stop: false,
            sampling: Sampling::Greedy,
            seed: 0,
        }
    }
}

impl DecoderConfig {
    pub fn with_strategy(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str, v: f64| {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{what} out of range: {v}")))
            }
        };
        check(
            self.alpha.is_finite() && self.alpha >= 0.0,
            "alpha (>= 0)",
            self.alpha,
        )?;
        // beta = 0 is admitted so ablation grids can start at zero memory.
        check((0.0..1.0).contains(&self.beta), "beta [0, 1)", self.beta)?;
        check(
            self.gamma > 0.0 && self.gamma < 1.0,
            "gamma (0, 1)",
            self.gamma,
        )?;
        check(
            self.threshold > 0.0 && self.threshold < 1.0,
            "threshold (0, 1)",
            self.threshold,
        )
    }
}
