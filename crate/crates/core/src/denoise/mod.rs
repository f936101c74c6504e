//! Denoiser abstraction.
//!
//! A denoiser maps the current sequence state to raw logits for every masked
//! generation position. The engine passes the running forward-call index so
//! replayed scripts are unambiguous. Logits cross this boundary as `f32`.

mod bridge;
mod scripted;
mod synthetic;

use std::collections::BTreeMap;

pub use bridge::{BridgeDenoiser, Request, Response, PROTOCOL_VERSION};
pub use scripted::{ScriptedDenoiser, ScriptedTable};
pub use synthetic::{ConvergenceProfile, SyntheticDenoiser, MASK_LOGIT};

use crate::error::{Error, Result};
use crate::model::SequenceState;

/// Raw logits keyed by absolute sequence position.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LogitsMatrix {
    rows: BTreeMap<usize, Vec<f32>>,
}

impl LogitsMatrix {
    pub fn new(rows: BTreeMap<usize, Vec<f32>>) -> Self {
        Self { rows }
    }

    pub fn get(&self, position: usize) -> Option<&[f32]> {
        self.rows.get(&position).map(Vec::as_slice)
    }

    pub fn contains(&self, position: usize) -> bool {
        self.rows.contains_key(&position)
    }

    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.rows.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f32])> {
        self.rows.iter().map(|(&p, r)| (p, r.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows whose position falls inside `range`.
    pub fn restrict(&self, range: std::ops::Range<usize>) -> LogitsMatrix {
        LogitsMatrix {
            rows: self
                .rows
                .range(range)
                .map(|(&p, r)| (p, r.clone()))
                .collect(),
        }
    }

    /// Checks the denoiser contract against the state it was produced for:
    /// keys equal the masked positions, rows have vocabulary width, values
    /// are finite.
    pub fn validate_for(&self, state: &SequenceState) -> Result<()> {
        let expected: Vec<usize> = state.masked_positions().collect();
        let got: Vec<usize> = self.rows.keys().copied().collect();
        if expected != got {
            return Err(Error::MalformedLogits(format!(
                "expected rows for masked positions {expected:?}, got {got:?}"
            )));
        }
        let width = state.vocab().size();
        for (&p, row) in &self.rows {
            if row.len() != width {
                return Err(Error::MalformedLogits(format!(
                    "row for position {p} has {} entries, vocabulary has {width}",
                    row.len()
                )));
            }
            if let Some(x) = row.iter().find(|x| !x.is_finite()) {
                return Err(Error::MalformedLogits(format!(
                    "non-finite logit {x} at position {p}"
                )));
            }
        }
        Ok(())
    }
}

impl FromIterator<(usize, Vec<f32>)> for LogitsMatrix {
    fn from_iter<I: IntoIterator<Item = (usize, Vec<f32>)>>(iter: I) -> Self {
        Self {
            rows: iter.into_iter().collect(),
        }
    }
}

pub trait Denoiser {
    /// Logits for exactly the masked positions of `state`. `call` is the
    /// number of forward passes already made in this run.
    fn denoise(&mut self, state: &SequenceState, call: u64) -> Result<LogitsMatrix>;
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn denoise(&mut self, state: &SequenceState, call: u64) -> Result<LogitsMatrix> {
        (**self).denoise(state, call)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &mut D {
    fn denoise(&mut self, state: &SequenceState, call: u64) -> Result<LogitsMatrix> {
        (**self).denoise(state, call)
    }
}
