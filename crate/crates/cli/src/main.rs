use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use creditdec_cli::{
    cmd_compare, cmd_run, cmd_sweep, compare_table, summary_text, CliError, GridRange, RunSpec,
    Settings,
};
use creditdec_core::Strategy;

/// Confidence-threshold and trace-credit decoding for masked diffusion
/// language models.
#[derive(Parser)]
#[command(name = "creditdec", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode once and write trace, summary and config snapshot.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Decode with several strategies on the same denoiser and seed.
    Compare {
        /// Comma-separated strategy names; speedups are relative to the first.
        #[arg(long, value_delimiter = ',', default_value = "threshold,credit-top1")]
        strategies: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Grid over alpha and beta with credit-top1.
    Sweep {
        /// start:stop:step, or a single value.
        #[arg(long, default_value = "0:0.95:0.05")]
        alpha_range: String,
        #[arg(long, default_value = "0:0.95:0.05")]
        beta_range: String,
        #[command(flatten)]
        common: Common,
    },
}

/// Run settings. Each flag overrides the same key in `--config`.
#[derive(Args)]
struct Common {
    /// Settings file of `key = value` lines using the flag names below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    threshold: Option<String>,
    /// greedy or categorical.
    #[arg(long)]
    sampling: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    early_stop: Option<String>,
    #[arg(long)]
    gen_length: Option<String>,
    #[arg(long)]
    block_length: Option<String>,
    /// Total forward-pass budget, split across blocks.
    #[arg(long)]
    steps: Option<String>,
    /// Scripted logits table (JSON).
    #[arg(long)]
    denoiser_script: Option<String>,
    /// Synthetic convergence profile (JSON).
    #[arg(long)]
    denoiser_profile: Option<String>,
    /// Command line of an external denoiser speaking the stdio bridge protocol.
    #[arg(long)]
    denoiser_bridge: Option<String>,
    #[arg(long)]
    vocab_size: Option<String>,
    #[arg(long)]
    mask_id: Option<String>,
    #[arg(long)]
    eos_id: Option<String>,
    /// Comma-separated prompt token ids (bridge only).
    #[arg(long)]
    prompt: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
}

impl Common {
    fn spec(&self) -> Result<RunSpec, CliError> {
        let base = match &self.config {
            Some(path) => Settings::load(path)?,
            None => Settings::new(),
        };
        let mut flags = Settings::new();
        let pairs = [
            ("strategy", &self.strategy),
            ("alpha", &self.alpha),
            ("beta", &self.beta),
            ("gamma", &self.gamma),
            ("threshold", &self.threshold),
            ("sampling", &self.sampling),
            ("seed", &self.seed),
            ("early-stop", &self.early_stop),
            ("gen-length", &self.gen_length),
            ("block-length", &self.block_length),
            ("steps", &self.steps),
            ("denoiser-script", &self.denoiser_script),
            ("denoiser-profile", &self.denoiser_profile),
            ("denoiser-bridge", &self.denoiser_bridge),
            ("vocab-size", &self.vocab_size),
            ("mask-id", &self.mask_id),
            ("eos-id", &self.eos_id),
            ("prompt", &self.prompt),
            ("out", &self.out),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                flags.set(key, v.as_str())?;
            }
        }
        RunSpec::from_settings(&base.merged(&flags))
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { common } => {
            let report = cmd_run(&common.spec()?)?;
            print!("{}", summary_text(&report.generation.trace));
            println!("output: {}", report.out.display());
        }
        Command::Compare { strategies, common } => {
            let strategies = strategies
                .iter()
                .map(|s| s.parse::<Strategy>())
                .collect::<Result<Vec<_>, _>>()?;
            let rows = cmd_compare(&common.spec()?, &strategies)?;
            print!("{}", compare_table(&rows));
        }
        Command::Sweep {
            alpha_range,
            beta_range,
            common,
        } => {
            let spec = common.spec()?;
            let rows = cmd_sweep(
                &spec,
                &alpha_range.parse()?,
                &beta_range.parse::<GridRange>()?,
            )?;
            println!(
                "{} grid points written to {}",
                rows.len(),
                spec.out.join("sweep.csv").display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("creditdec: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
