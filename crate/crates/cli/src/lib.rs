//! Command implementations behind the `creditdec` binary.

mod settings;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use creditdec_core::denoise::{BridgeDenoiser, Denoiser, ScriptedDenoiser, SyntheticDenoiser};
use creditdec_core::io::write_atomic;
use creditdec_core::trace::{
    decoding_boundary, export_trace, tokens_per_forward, tokens_per_forward_with_tail,
    GenerationTrace, TraceFormat,
};
use creditdec_core::{run_generation, DecoderConfig, ErrorKind, Generation, Strategy, TokenId};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use settings::Loaded;
pub use settings::{DenoiserSource, GridRange, Prepared, RunSpec, Settings, KEYS};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("denoiser error: {0}")]
    Denoiser(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("internal error: {0}")]
    Engine(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Denoiser(_) => 3,
            CliError::Io(_) => 4,
            CliError::Engine(_) => 1,
        }
    }
}

impl From<creditdec_core::Error> for CliError {
    fn from(e: creditdec_core::Error) -> Self {
        let msg = e.to_string();
        match e.kind() {
            ErrorKind::Config => CliError::Config(msg),
            ErrorKind::Denoiser => CliError::Denoiser(msg),
            ErrorKind::Io => CliError::Io(msg),
            ErrorKind::Engine => CliError::Engine(msg),
        }
    }
}

impl Prepared {
    /// A fresh denoiser for one run.
    pub fn denoiser(&self, seed: u64) -> Result<Box<dyn Denoiser>, CliError> {
        Ok(match &self.loaded {
            Loaded::Script(table) => Box::new(ScriptedDenoiser::new(table.clone())),
            Loaded::Profile(profile) => {
                Box::new(SyntheticDenoiser::new(profile.clone(), self.layout, seed)?)
            }
            Loaded::Bridge(command) => Box::new(BridgeDenoiser::spawn(command, self.vocab)?),
        })
    }

    /// Runs one generation. An aborted run still returns its partial trace
    /// next to the error.
    pub fn generate(
        &self,
        config: &DecoderConfig,
    ) -> Result<Generation, (CliError, Option<Box<GenerationTrace>>)> {
        let mut denoiser = self.denoiser(config.seed).map_err(|e| (e, None))?;
        run_generation(
            &self.prompt,
            self.vocab,
            &mut denoiser,
            config,
            &self.layout,
        )
        .map_err(|aborted| (CliError::from(aborted.error), Some(Box::new(aborted.trace))))
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    Ok(write_atomic(path, |f| f.write_all(text.as_bytes()))?)
}

/// Hex prefix of the SHA-256 of the token ids (little-endian u32).
pub fn sequence_hash(tokens: &[TokenId]) -> String {
    let mut h = Sha256::new();
    for t in tokens {
        h.update(t.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

fn tpf_or_nan(trace: &GenerationTrace) -> f64 {
    tokens_per_forward(trace).unwrap_or(f64::NAN)
}

pub fn summary_text(trace: &GenerationTrace) -> String {
    let h = &trace.header;
    let mut s = String::new();
    let _ = writeln!(s, "strategy: {}", h.config.strategy);
    let _ = writeln!(s, "status: {}", format!("{:?}", h.status).to_lowercase());
    if let Some(e) = &h.error {
        let _ = writeln!(s, "error: {e}");
    }
    let _ = writeln!(s, "forwards: {}", h.forwards);
    let _ = writeln!(s, "generated: {}", h.generated);
    let _ = writeln!(s, "early_stop_tail: {}", h.early_stop_tail);
    let fmt =
        |v: creditdec_core::Result<f64>| v.map_or("undefined".to_string(), |x| format!("{x:?}"));
    let _ = writeln!(s, "tpf: {}", fmt(tokens_per_forward(trace)));
    let _ = writeln!(
        s,
        "tpf_with_tail: {}",
        fmt(tokens_per_forward_with_tail(trace))
    );
    let gap = decoding_boundary(trace).mean_gap();
    let _ = writeln!(
        s,
        "mean_boundary_gap: {}",
        gap.map_or("undefined".to_string(), |g| format!("{g:?}"))
    );
    let toks: Vec<String> = h.final_tokens.iter().map(ToString::to_string).collect();
    let _ = writeln!(s, "final_tokens: {}", toks.join(" "));
    s
}

#[derive(Debug)]
pub struct RunReport {
    pub generation: Generation,
    pub out: PathBuf,
}

/// Runs one generation and writes `trace.jsonl`, `trace.csv`,
/// `summary.txt` and `config.txt` into the output directory.
pub fn cmd_run(spec: &RunSpec) -> Result<RunReport, CliError> {
    let prepared = spec.prepare()?;
    ensure_dir(&spec.out)?;
    write_text(
        &spec.out.join("config.txt"),
        &spec.snapshot(&prepared.layout),
    )?;
    let (result, trace) = match prepared.generate(&spec.config) {
        Ok(g) => {
            let t = g.trace.clone();
            (Ok(g), t)
        }
        Err((e, Some(t))) => (Err(e), *t),
        Err((e, None)) => return Err(e),
    };
    export_trace(&trace, TraceFormat::JsonLines, spec.out.join("trace.jsonl"))?;
    export_trace(&trace, TraceFormat::Csv, spec.out.join("trace.csv"))?;
    write_text(&spec.out.join("summary.txt"), &summary_text(&trace))?;
    Ok(RunReport {
        generation: result?,
        out: spec.out.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub strategy: Strategy,
    pub forwards: usize,
    pub generated: usize,
    pub tpf: f64,
    /// forwards of the first strategy over forwards of this one.
    pub speedup: f64,
    /// Final sequence equals the first strategy's.
    pub agrees: bool,
    pub tokens: Vec<TokenId>,
}

/// Runs every strategy on the same source and seed. Writes one trace per
/// row plus `compare.csv`.
pub fn cmd_compare(spec: &RunSpec, strategies: &[Strategy]) -> Result<Vec<CompareRow>, CliError> {
    if strategies.len() < 2 {
        return Err(CliError::Config(
            "compare needs at least two strategies".into(),
        ));
    }
    let prepared = spec.prepare()?;
    ensure_dir(&spec.out)?;
    write_text(
        &spec.out.join("config.txt"),
        &spec.snapshot(&prepared.layout),
    )?;
    let mut runs = Vec::new();
    for (i, &strategy) in strategies.iter().enumerate() {
        let config = DecoderConfig {
            strategy,
            ..spec.config
        };
        let g = prepared.generate(&config).map_err(|(e, _)| e)?;
        let path = spec.out.join(format!("{i}-{strategy}.jsonl"));
        export_trace(&g.trace, TraceFormat::JsonLines, path)?;
        runs.push(g);
    }
    let first = &runs[0];
    let rows: Vec<CompareRow> = runs
        .iter()
        .zip(strategies)
        .map(|(g, &strategy)| CompareRow {
            strategy,
            forwards: g.trace.header.forwards,
            generated: g.trace.header.generated,
            tpf: tpf_or_nan(&g.trace),
            speedup: first.trace.header.forwards as f64 / g.trace.header.forwards as f64,
            agrees: g.tokens == first.tokens,
            tokens: g.tokens.clone(),
        })
        .collect();
    write_atomic(&spec.out.join("compare.csv"), |f| {
        writeln!(f, "strategy,forwards,generated,tpf,speedup,agrees")?;
        for r in &rows {
            writeln!(
                f,
                "{},{},{},{},{},{}",
                r.strategy, r.forwards, r.generated, r.tpf, r.speedup, r.agrees
            )?;
        }
        Ok(())
    })?;
    Ok(rows)
}

pub fn compare_table(rows: &[CompareRow]) -> String {
    let mut s = format!(
        "{:<12} {:>8} {:>9} {:>8} {:>8} {:>7}\n",
        "strategy", "forwards", "generated", "tpf", "speedup", "agrees"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<12} {:>8} {:>9} {:>8.3} {:>8.3} {:>7}",
            r.strategy.as_str(),
            r.forwards,
            r.generated,
            r.tpf,
            r.speedup,
            if r.agrees { "yes" } else { "no" }
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub beta: f64,
    pub tpf: f64,
    pub forwards: usize,
    pub sequence_hash: String,
}

/// Grid-runs CreditTop1 over (alpha, beta) in parallel and writes
/// `sweep.csv`. Rows are ordered by alpha, then beta.
pub fn cmd_sweep(
    spec: &RunSpec,
    alphas: &GridRange,
    betas: &GridRange,
) -> Result<Vec<SweepRow>, CliError> {
    let prepared = spec.prepare()?;
    ensure_dir(&spec.out)?;
    write_text(
        &spec.out.join("config.txt"),
        &spec.snapshot(&prepared.layout),
    )?;
    let grid: Vec<(f64, f64)> = alphas
        .points()
        .into_iter()
        .flat_map(|a| betas.points().into_iter().map(move |b| (a, b)))
        .collect();
    let rows = grid
        .par_iter()
        .map(|&(alpha, beta)| {
            let config = DecoderConfig {
                strategy: Strategy::CreditTop1,
                alpha,
                beta,
                ..spec.config
            };
            let g = prepared.generate(&config).map_err(|(e, _)| e)?;
            Ok(SweepRow {
                alpha,
                beta,
                tpf: tpf_or_nan(&g.trace),
                forwards: g.trace.header.forwards,
                sequence_hash: sequence_hash(&g.tokens),
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    write_atomic(&spec.out.join("sweep.csv"), |f| {
        writeln!(f, "alpha,beta,tpf,forwards,sequence_hash")?;
        for r in &rows {
            writeln!(
                f,
                "{},{},{},{},{}",
                r.alpha, r.beta, r.tpf, r.forwards, r.sequence_hash
            )?;
        }
        Ok(())
    })?;
    Ok(rows)
}
