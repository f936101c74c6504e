use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Denoiser, LogitsMatrix};
use crate::error::{Error, Result};
use crate::model::{SequenceState, TokenId, Vocab};

/// Pre-recorded logits, indexed by forward-call index then absolute position.
///
/// On disk this is JSON:
/// `{"vocab":{"size":N,"mask_id":m,"eos_id":e},"prompt":[..],"calls":[{"0":[..],"1":[..]},..]}`.
/// A call entry may hold rows for positions that are no longer masked; only
/// the masked ones are served.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedTable {
    pub vocab: Vocab,
    #[serde(default)]
    pub prompt: Vec<TokenId>,
    pub calls: Vec<BTreeMap<usize, Vec<f32>>>,
}

impl ScriptedTable {
    pub fn new(vocab: Vocab, calls: Vec<BTreeMap<usize, Vec<f32>>>) -> Self {
        Self {
            vocab,
            prompt: Vec::new(),
            calls,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).expect("table serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Rows the table holds for `call`, restricted to `positions`.
    pub fn lookup(&self, call: u64, positions: &[usize]) -> Result<Vec<Vec<f32>>> {
        let entry = self
            .calls
            .get(call as usize)
            .ok_or(Error::ScriptExhausted {
                call,
                position: None,
            })?;
        positions
            .iter()
            .map(|&p| {
                entry.get(&p).cloned().ok_or(Error::ScriptExhausted {
                    call,
                    position: Some(p),
                })
            })
            .collect()
    }
}

/// Replays a [`ScriptedTable`] by call index.
#[derive(Debug, Clone)]
pub struct ScriptedDenoiser {
    table: ScriptedTable,
}

impl ScriptedDenoiser {
    pub fn new(table: ScriptedTable) -> Self {
        Self { table }
    }

    pub fn table(&self) -> &ScriptedTable {
        &self.table
    }
}

impl Denoiser for ScriptedDenoiser {
    fn denoise(&mut self, state: &SequenceState, call: u64) -> Result<LogitsMatrix> {
        let positions: Vec<usize> = state.masked_positions().collect();
        let rows = self.table.lookup(call, &positions)?;
        if let Some((p, r)) = positions
            .iter()
            .zip(&rows)
            .find(|(_, r)| r.len() != self.table.vocab.size())
        {
            return Err(Error::MalformedLogits(format!(
                "script row for call {call}, position {p} has {} entries",
                r.len()
            )));
        }
        Ok(positions.into_iter().zip(rows).collect())
    }
}
