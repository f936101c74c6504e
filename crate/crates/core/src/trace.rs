//! Generation traces and the metrics computed from them.
//!
//! A trace holds one record per forward pass. Each record lists every masked
//! position of the active block at that step with its raw and decision
//! top-1 probabilities, the token committed there (if any) and the rank of
//! the position's eventually-final token in that step's decision
//! distribution. Ranks are exact up to [`EXACT_RANK_LIMIT`] and rounded up to
//! a power of two beyond it.
//!
//! Tokens filled in by early stop are not produced by any forward pass; they
//! are counted separately and excluded from tokens-per-forward.

use std::collections::BTreeMap;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::StepOutcome;
use crate::error::{Error, Result};
use crate::model::{BlockLayout, DecoderConfig, Sampling, SequenceState, Strategy, TokenId, Vocab};
use crate::prob::rank_of;

pub const EXACT_RANK_LIMIT: u32 = 64;

/// Stored form of a rank: exact through 64, next power of two above.
pub fn rank_bucket(rank: u32) -> u32 {
    if rank <= EXACT_RANK_LIMIT {
        rank
    } else {
        rank.next_power_of_two()
    }
}

/// Settings the run was produced with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub strategy: Strategy,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub threshold: f64,
    pub early_stop: bool,
    pub sampling: Sampling,
    pub seed: u64,
    pub gen_length: usize,
    pub block_length: usize,
    pub steps: usize,
}

impl ConfigSnapshot {
    pub fn new(config: &DecoderConfig, layout: &BlockLayout) -> Self {
        Self {
            strategy: config.strategy,
            alpha: config.alpha,
            beta: config.beta,
            gamma: config.gamma,
            threshold: config.threshold,
            early_stop: config.early_stop,
            sampling: config.sampling,
            seed: config.seed,
            gen_length: layout.gen_length(),
            block_length: layout.block_length(),
            steps: layout.total_steps(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Complete,
    Aborted,
}

pub const TPF_CONVENTION: &str = "generated excludes early-stop tail";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub config: ConfigSnapshot,
    pub vocab_size: usize,
    pub mask_id: TokenId,
    pub eos_id: TokenId,
    pub prompt_len: usize,
    pub status: RunStatus,
    pub error: Option<String>,
    pub forwards: usize,
    /// Generation tokens committed by forward passes.
    pub generated: usize,
    /// Positions filled with EOS by early stop.
    pub early_stop_tail: usize,
    pub tpf_convention: String,
    pub tpf: Option<f64>,
    pub tpf_with_tail: Option<f64>,
    pub final_tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub pos: usize,
    pub committed: Option<TokenId>,
    pub raw_conf: f32,
    pub enh_conf: f32,
    pub final_rank: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub block: usize,
    pub forced: bool,
    pub sweep: bool,
    pub events: Vec<EventRecord>,
}

impl StepRecord {
    pub fn commits(&self) -> impl Iterator<Item = (usize, TokenId)> + '_ {
        self.events
            .iter()
            .filter_map(|e| e.committed.map(|t| (e.pos, t)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub header: TraceHeader,
    pub steps: Vec<StepRecord>,
}

/// Builds a [`GenerationTrace`] step by step while a run progresses.
#[derive(Debug)]
pub struct TraceRecorder {
    header: TraceHeader,
    steps: Vec<StepRecord>,
    /// Decision distributions of still-masked positions, waiting for the
    /// final token: (step index, event index, distribution).
    pending: BTreeMap<usize, Vec<(usize, usize, Vec<f64>)>>,
}

impl TraceRecorder {
    pub fn new(
        config: &DecoderConfig,
        layout: &BlockLayout,
        vocab: Vocab,
        prompt_len: usize,
    ) -> Self {
        Self {
            header: TraceHeader {
                config: ConfigSnapshot::new(config, layout),
                vocab_size: vocab.size(),
                mask_id: vocab.mask_id(),
                eos_id: vocab.eos_id(),
                prompt_len,
                status: RunStatus::Aborted,
                error: None,
                forwards: 0,
                generated: 0,
                early_stop_tail: 0,
                tpf_convention: TPF_CONVENTION.to_string(),
                tpf: None,
                tpf_with_tail: None,
                final_tokens: Vec::new(),
            },
            steps: Vec::new(),
            pending: BTreeMap::new(),
        }
    }

    pub fn record_step(&mut self, outcome: &StepOutcome) {
        let d = &outcome.decision;
        let step_index = self.steps.len();
        let mut events = Vec::with_capacity(outcome.observations.len());
        for (&pos, obs) in &outcome.observations {
            self.pending.entry(pos).or_default().push((
                step_index,
                events.len(),
                obs.distribution.clone(),
            ));
            events.push(EventRecord {
                pos,
                committed: d.committed_tokens.get(&pos).copied(),
                raw_conf: obs.raw_conf as f32,
                enh_conf: obs.enh_conf as f32,
                final_rank: None,
            });
        }
        self.steps.push(StepRecord {
            step: d.step,
            block: d.block,
            forced: d.forced_fallback,
            sweep: d.sweep,
            events,
        });
        self.header.forwards += 1;
        self.header.generated += d.committed_tokens.len();
        for (&pos, &tok) in &d.committed_tokens {
            self.resolve(pos, tok);
        }
    }

    pub fn record_tail(&mut self, positions: &[usize], eos: TokenId) {
        self.header.early_stop_tail += positions.len();
        for &p in positions {
            self.resolve(p, eos);
        }
    }

    fn resolve(&mut self, pos: usize, token: TokenId) {
        let mask_id = self.header.mask_id;
        for (step, event, dist) in self.pending.remove(&pos).unwrap_or_default() {
            self.steps[step].events[event].final_rank =
                Some(rank_bucket(rank_of(&dist, token, mask_id)));
        }
    }

    pub fn finish(
        mut self,
        state: Option<&SequenceState>,
        status: RunStatus,
        error: Option<String>,
    ) -> GenerationTrace {
        let h = &mut self.header;
        h.status = status;
        h.error = error;
        if h.forwards > 0 {
            h.tpf = Some(h.generated as f64 / h.forwards as f64);
            h.tpf_with_tail = Some((h.generated + h.early_stop_tail) as f64 / h.forwards as f64);
        }
        if let Some(s) = state {
            h.final_tokens = s.tokens().to_vec();
        }
        GenerationTrace {
            header: self.header,
            steps: self.steps,
        }
    }
}

/// Generated tokens per forward pass, early-stop tail excluded.
pub fn tokens_per_forward(trace: &GenerationTrace) -> Result<f64> {
    if trace.header.forwards == 0 {
        return Err(Error::UndefinedMetric(
            "tokens per forward of a run with no forward passes",
        ));
    }
    Ok(trace.header.generated as f64 / trace.header.forwards as f64)
}

/// Same as [`tokens_per_forward`] but counting the EOS tail as generated.
pub fn tokens_per_forward_with_tail(trace: &GenerationTrace) -> Result<f64> {
    let base = tokens_per_forward(trace)?;
    Ok(base + trace.header.early_stop_tail as f64 / trace.header.forwards as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Boundary {
    /// First step at which the committed token was the step-wise argmax.
    pub ideal_step: usize,
    /// Step that committed the position.
    pub actual_step: usize,
}

impl Boundary {
    pub fn gap(&self) -> usize {
        self.actual_step - self.ideal_step
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BoundaryReport {
    pub entries: BTreeMap<usize, Boundary>,
}

impl BoundaryReport {
    pub fn mean_gap(&self) -> Option<f64> {
        if self.entries.is_empty() {
            return None;
        }
        let total: usize = self.entries.values().map(Boundary::gap).sum();
        Some(total as f64 / self.entries.len() as f64)
    }
}

/// Ideal vs. actual decoding step of every position committed by a forward
/// pass. A sampled token that was never the argmax gets `ideal == actual`.
pub fn decoding_boundary(trace: &GenerationTrace) -> BoundaryReport {
    let mut first_top1: BTreeMap<usize, usize> = BTreeMap::new();
    let mut report = BoundaryReport::default();
    for rec in &trace.steps {
        for e in &rec.events {
            if e.final_rank == Some(1) {
                first_top1.entry(e.pos).or_insert(rec.step);
            }
            if e.committed.is_some() {
                let actual = rec.step;
                let ideal = first_top1
                    .get(&e.pos)
                    .copied()
                    .unwrap_or(actual)
                    .min(actual);
                report.entries.insert(
                    e.pos,
                    Boundary {
                        ideal_step: ideal,
                        actual_step: actual,
                    },
                );
            }
        }
    }
    report
}

/// Cumulative decoded fraction after each step, against the fraction of
/// steps taken.
pub fn normalized_progress(trace: &GenerationTrace) -> Vec<(f64, f64)> {
    let total_steps = trace.steps.len() as f64;
    let generated = trace.header.generated as f64;
    let mut decoded = 0usize;
    trace
        .steps
        .iter()
        .enumerate()
        .map(|(k, rec)| {
            decoded += rec.commits().count();
            ((k + 1) as f64 / total_steps, decoded as f64 / generated)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    /// Header record, then one JSON object per step.
    JsonLines,
    /// One row per committed (step, position) event.
    Csv,
}

impl TraceFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            TraceFormat::JsonLines => "jsonl",
            TraceFormat::Csv => "csv",
        }
    }
}

pub const CSV_COLUMNS: [&str; 7] = [
    "step",
    "pos",
    "committed",
    "raw_conf",
    "enh_conf",
    "final_rank",
    "forced",
];

pub fn write_trace<W: Write>(
    trace: &GenerationTrace,
    format: TraceFormat,
    out: W,
) -> io::Result<()> {
    match format {
        TraceFormat::JsonLines => write_jsonl(trace, out),
        TraceFormat::Csv => write_csv(trace, out),
    }
}

fn write_jsonl<W: Write>(trace: &GenerationTrace, mut out: W) -> io::Result<()> {
    serde_json::to_writer(&mut out, &trace.header)?;
    out.write_all(b"\n")?;
    for rec in &trace.steps {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

fn write_csv<W: Write>(trace: &GenerationTrace, out: W) -> io::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for rec in &trace.steps {
        for e in rec.events.iter().filter(|e| e.committed.is_some()) {
            w.serialize((
                rec.step,
                e.pos,
                e.committed,
                e.raw_conf,
                e.enh_conf,
                e.final_rank,
                rec.forced,
            ))?;
        }
    }
    w.flush()
}

/// Writes the trace to `path` atomically (temporary file, then rename).
pub fn export_trace(
    trace: &GenerationTrace,
    format: TraceFormat,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    crate::io::write_atomic(path, |f| write_trace(trace, format, f))
}

/// Reads a json-lines trace back.
pub fn import_trace(path: impl AsRef<Path>) -> Result<GenerationTrace> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(BufReader::new(file)).map_err(|e| match e {
        ReadError::Io(e) => Error::io(path, e),
        ReadError::Format(msg) => Error::format(path, msg),
    })
}

enum ReadError {
    Io(io::Error),
    Format(String),
}

fn read_jsonl<R: BufRead>(input: R) -> std::result::Result<GenerationTrace, ReadError> {
    let mut lines = input.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| ReadError::Format("empty trace file".into()))?
        .map_err(ReadError::Io)?;
    let header: TraceHeader = serde_json::from_str(&header_line)
        .map_err(|e| ReadError::Format(format!("header: {e}")))?;
    let mut steps = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(ReadError::Io)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StepRecord = serde_json::from_str(&line)
            .map_err(|e| ReadError::Format(format!("line {}: {e}", i + 2)))?;
        steps.push(rec);
    }
    if steps.len() != header.forwards {
        return Err(ReadError::Format(format!(
            "header reports {} forwards but the file holds {} steps",
            header.forwards,
            steps.len()
        )));
    }
    Ok(GenerationTrace { header, steps })
}
