//! Reverse-diffusion loop.
//!
//! Blocks are decoded left to right. Every reverse step runs exactly one
//! denoiser forward pass and commits at least one position of the active
//! block:
//!
//! * `Baseline` commits the single most confident position.
//! * `Threshold` commits every position whose raw top-1 probability reaches
//!   the threshold.
//! * `CreditTop1` / `CreditFull` update the block's trace credits from the raw
//!   logits, fuse them into the logits and threshold the enhanced
//!   distribution instead.
//!
//! When nothing clears the threshold the most confident position is
//! committed anyway (`forced_fallback`). When a block's step budget runs out,
//! its remaining masked positions are committed from the last forward's
//! argmax in one sweep.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::credit::{enhanced_distribution, fuse_logits, CreditMode, CreditStore};
use crate::denoise::Denoiser;
use crate::error::{Error, Result};
use crate::model::{
    Block, BlockLayout, DecoderConfig, Sampling, SequenceState, StepBudget, Strategy, TokenId,
    Vocab,
};
use crate::prob::{softmax_f32, top_candidate};
use crate::trace::{GenerationTrace, RunStatus, TraceRecorder};

/// What one reverse step decided.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDecision {
    /// Forward-pass index within the run.
    pub step: usize,
    pub block: usize,
    /// Positions committed by this step, ascending.
    pub selected: Vec<usize>,
    pub committed_tokens: BTreeMap<usize, TokenId>,
    /// Decision confidence (enhanced for credit strategies, raw otherwise)
    /// of every masked position of the active block.
    pub confidences: BTreeMap<usize, f64>,
    pub forced_fallback: bool,
    /// Budget ran out and the rest of the block was committed at once.
    pub sweep: bool,
}

/// Per-position view of one forward pass, kept for the trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub raw_conf: f64,
    pub enh_conf: f64,
    /// Distribution the decision was taken from.
    pub distribution: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub decision: StepDecision,
    pub observations: BTreeMap<usize, Observation>,
}

/// Result of threshold selection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub positions: Vec<usize>,
    pub forced_fallback: bool,
}

/// Positions whose confidence is at least `threshold`; if none, the single
/// most confident position (lowest index on ties) with `forced_fallback`.
pub fn select_positions(confidences: &BTreeMap<usize, f64>, threshold: f64) -> Result<Selection> {
    if confidences.is_empty() {
        return Err(Error::NoMaskedPositions);
    }
    let positions: Vec<usize> = confidences
        .iter()
        .filter_map(|(&p, &c)| (c >= threshold).then_some(p))
        .collect();
    if !positions.is_empty() {
        return Ok(Selection {
            positions,
            forced_fallback: false,
        });
    }
    Ok(Selection {
        positions: vec![most_confident(confidences)],
        forced_fallback: true,
    })
}

fn most_confident(confidences: &BTreeMap<usize, f64>) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (&p, &c) in confidences {
        match best {
            Some((_, bc)) if c <= bc => {}
            _ => best = Some((p, c)),
        }
    }
    best.expect("non-empty confidences").0
}

/// Mutable per-run bookkeeping threaded through reverse steps.
#[derive(Debug, Clone)]
pub struct StepCursor {
    calls: u64,
    block: Block,
    budget: StepBudget,
    rng: ChaCha8Rng,
}

impl StepCursor {
    pub fn new(block: Block, budget: StepBudget, seed: u64) -> Self {
        Self {
            calls: 0,
            block,
            budget,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Forward passes made so far.
    pub fn calls(&self) -> u64 {
        self.calls
    }

    pub fn block(&self) -> &Block {
        &self.block
    }

    pub fn budget(&self) -> StepBudget {
        self.budget
    }

    pub fn enter_block(&mut self, block: Block, budget: StepBudget) {
        self.block = block;
        self.budget = budget;
    }
}

/// One forward pass plus the strategy's commit decision.
pub fn reverse_step(
    state: &mut SequenceState,
    store: Option<&mut CreditStore>,
    denoiser: &mut dyn Denoiser,
    config: &DecoderConfig,
    cursor: &mut StepCursor,
) -> Result<StepOutcome> {
    let block = cursor.block.clone();
    if !block.range.clone().any(|p| state.is_masked(p)) {
        return Err(Error::NoMaskedPositions);
    }
    if cursor.budget.is_exhausted() {
        return Err(Error::BudgetExhausted(block.index));
    }

    let logits = denoiser.denoise(state, cursor.calls)?;
    logits.validate_for(state)?;
    let step = cursor.calls as usize;
    cursor.calls += 1;
    cursor.budget.consume(block.index)?;

    let active = logits.restrict(block.range.clone());
    let mask_id = state.vocab().mask_id();
    let raw: BTreeMap<usize, Vec<f64>> = active.iter().map(|(p, r)| (p, softmax_f32(r))).collect();

    let decision_dists = if config.strategy.uses_credit() {
        let store = store.ok_or_else(|| {
            Error::InvalidConfig(format!("{} needs a credit store", config.strategy))
        })?;
        match config.strategy {
            Strategy::CreditTop1 => store.update_top1(&active, config.beta, config.gamma),
            _ => store.update_full(&active, config.beta, config.gamma),
        }
        enhanced_distribution(&fuse_logits(&active, store, config.alpha))
    } else {
        raw.clone()
    };

    let mut candidates = BTreeMap::new();
    let mut observations = BTreeMap::new();
    for (&p, dist) in &decision_dists {
        let (token, conf) = top_candidate(dist, mask_id);
        candidates.insert(p, (token, conf));
        observations.insert(
            p,
            Observation {
                raw_conf: top_candidate(&raw[&p], mask_id).1,
                enh_conf: conf,
                distribution: dist.clone(),
            },
        );
    }
    let confidences: BTreeMap<usize, f64> = candidates.iter().map(|(&p, &(_, c))| (p, c)).collect();

    let selection = match config.strategy {
        Strategy::Baseline => Selection {
            positions: vec![most_confident(&confidences)],
            forced_fallback: false,
        },
        _ => select_positions(&confidences, config.threshold)?,
    };

    let mut committed_tokens = BTreeMap::new();
    for &p in &selection.positions {
        let token = match config.sampling {
            Sampling::Greedy => candidates[&p].0,
            Sampling::Categorical => sample(&decision_dists[&p], mask_id, &mut cursor.rng)?,
        };
        committed_tokens.insert(p, token);
    }

    let mut sweep = false;
    if cursor.budget.is_exhausted() {
        for (&p, &(token, _)) in &candidates {
            if let std::collections::btree_map::Entry::Vacant(slot) = committed_tokens.entry(p) {
                slot.insert(token);
                sweep = true;
            }
        }
    }

    for (&p, &token) in &committed_tokens {
        state.commit(p, token)?;
    }

    Ok(StepOutcome {
        decision: StepDecision {
            step,
            block: block.index,
            selected: committed_tokens.keys().copied().collect(),
            committed_tokens,
            confidences,
            forced_fallback: selection.forced_fallback,
            sweep,
        },
        observations,
    })
}

fn sample(dist: &[f64], mask_id: TokenId, rng: &mut ChaCha8Rng) -> Result<TokenId> {
    let weights = dist
        .iter()
        .enumerate()
        .map(|(v, &p)| if v as TokenId == mask_id { 0.0 } else { p });
    let index = WeightedIndex::new(weights)
        .map_err(|e| Error::MalformedLogits(format!("cannot sample: {e}")))?;
    Ok(index.sample(rng) as TokenId)
}

/// Position of a committed EOS that has every earlier generation position
/// committed, if any.
pub fn early_stop_position(state: &SequenceState) -> Option<usize> {
    let eos = state.vocab().eos_id();
    for p in state.generation_span() {
        if state.is_masked(p) {
            return None;
        }
        if state.tokens()[p] == eos {
            return Some(p);
        }
    }
    None
}

pub fn early_stop_check(state: &SequenceState) -> bool {
    early_stop_position(state).is_some()
}

/// Fills every masked position after `eos_position` with EOS. Returns the
/// filled positions.
pub fn fill_after_eos(state: &mut SequenceState, eos_position: usize) -> Result<Vec<usize>> {
    let eos = state.vocab().eos_id();
    let tail: Vec<usize> = state
        .masked_positions()
        .filter(|&p| p > eos_position)
        .collect();
    for &p in &tail {
        state.commit(p, eos)?;
    }
    Ok(tail)
}

/// Completed run.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    pub trace: GenerationTrace,
}

/// A run that stopped on an error, with everything recorded up to that point.
#[derive(Debug, thiserror::Error)]
#[error("generation aborted: {error}")]
pub struct RunAborted {
    #[source]
    pub error: Error,
    pub trace: GenerationTrace,
}

/// Decodes `gen_length` positions after `prompt` with the given strategy.
pub fn run_generation(
    prompt: &[TokenId],
    vocab: Vocab,
    denoiser: &mut dyn Denoiser,
    config: &DecoderConfig,
    layout: &BlockLayout,
) -> Result<Generation, Box<RunAborted>> {
    let mut recorder = TraceRecorder::new(config, layout, vocab, prompt.len());
    let abort = |error: Error, recorder: TraceRecorder, state: Option<&SequenceState>| {
        Box::new(RunAborted {
            trace: recorder.finish(state, RunStatus::Aborted, Some(error.to_string())),
            error,
        })
    };
    if let Err(e) = config.validate() {
        return Err(abort(e, recorder, None));
    }
    let mut state = match SequenceState::new(prompt, layout.gen_length(), vocab) {
        Ok(s) => s,
        Err(e) => return Err(abort(e, recorder, None)),
    };

    let mode = match config.strategy {
        Strategy::CreditTop1 => Some(CreditMode::Top1),
        Strategy::CreditFull => Some(CreditMode::Full),
        _ => None,
    };
    let mut store = mode.map(|m| CreditStore::new(m, 0, vocab));
    let first = layout.block(0, prompt.len());
    let mut cursor = StepCursor::new(
        first,
        StepBudget::new(layout.budget_for_block(0)),
        config.seed,
    );

    loop {
        if config.early_stop {
            if let Some(p) = early_stop_position(&state) {
                match fill_after_eos(&mut state, p) {
                    Ok(tail) => recorder.record_tail(&tail, vocab.eos_id()),
                    Err(e) => return Err(abort(e, recorder, Some(&state))),
                }
                break;
            }
        }
        let block = match state.current_block(layout) {
            Ok(b) => b,
            Err(Error::GenerationComplete) => break,
            Err(e) => return Err(abort(e, recorder, Some(&state))),
        };
        if block.index != cursor.block().index {
            if let Some(store) = store.as_mut() {
                if let Err(e) = store.reset_for_block(block.index) {
                    return Err(abort(e, recorder, Some(&state)));
                }
            }
            let budget = StepBudget::new(layout.budget_for_block(block.index));
            cursor.enter_block(block, budget);
        }
        match reverse_step(&mut state, store.as_mut(), denoiser, config, &mut cursor) {
            Ok(outcome) => recorder.record_step(&outcome),
            Err(e) => return Err(abort(e, recorder, Some(&state))),
        }
    }

    Ok(Generation {
        tokens: state.tokens().to_vec(),
        trace: recorder.finish(Some(&state), RunStatus::Complete, None),
    })
}
