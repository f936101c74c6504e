//! Flat `key = value` run settings shared by config files, flags and the
//! snapshot written next to every run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use creditdec_core::denoise::{ConvergenceProfile, ScriptedTable};
use creditdec_core::{BlockLayout, DecoderConfig, TokenId, Vocab};

use crate::CliError;

/// Every key a settings file may contain, in snapshot order. Names match the
/// command-line flags without the leading dashes.
pub const KEYS: [&str; 19] = [
    "strategy",
    "alpha",
    "beta",
    "gamma",
    "threshold",
    "sampling",
    "seed",
    "early-stop",
    "gen-length",
    "block-length",
    "steps",
    "denoiser-script",
    "denoiser-profile",
    "denoiser-bridge",
    "vocab-size",
    "mask-id",
    "eos-id",
    "prompt",
    "out",
];

const DEFAULT_BLOCK_LENGTH: usize = 32;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut s = Settings::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", n + 1)))?;
            s.set(key.trim(), value.trim())
                .map_err(|e| CliError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<(), CliError> {
        if !KEYS.contains(&key) {
            return Err(CliError::Config(format!("unknown setting `{key}`")));
        }
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Values from `other` win.
    pub fn merged(mut self, other: &Settings) -> Settings {
        for (k, v) in &other.values {
            self.values.insert(k.clone(), v.clone());
        }
        self
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.parse()
                    .map_err(|e| CliError::Config(format!("{key} = {v}: {e}")))
            })
            .transpose()
    }
}

/// Where logits come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DenoiserSource {
    Script(PathBuf),
    Profile(PathBuf),
    Bridge {
        command: String,
        vocab: Vocab,
        prompt: Vec<TokenId>,
    },
}

/// Fully resolved description of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub source: DenoiserSource,
    pub config: DecoderConfig,
    pub gen_length: Option<usize>,
    pub block_length: usize,
    pub steps: Option<usize>,
    pub out: PathBuf,
}

impl RunSpec {
    pub fn from_settings(s: &Settings) -> Result<Self, CliError> {
        let sources: Vec<&str> = ["denoiser-script", "denoiser-profile", "denoiser-bridge"]
            .into_iter()
            .filter(|k| s.get(k).is_some())
            .collect();
        if sources.len() != 1 {
            return Err(CliError::Config(format!(
                "exactly one of denoiser-script, denoiser-profile, denoiser-bridge is required (got {})",
                if sources.is_empty() { "none".to_string() } else { sources.join(", ") }
            )));
        }
        let bridge_only = ["vocab-size", "mask-id", "eos-id", "prompt"];
        let source = match sources[0] {
            "denoiser-script" => DenoiserSource::Script(s.get("denoiser-script").unwrap().into()),
            "denoiser-profile" => {
                DenoiserSource::Profile(s.get("denoiser-profile").unwrap().into())
            }
            _ => {
                let need = |k: &str| {
                    s.parsed::<u64>(k)?
                        .ok_or_else(|| CliError::Config(format!("the bridge denoiser needs {k}")))
                };
                let vocab = Vocab::new(
                    need("vocab-size")? as usize,
                    need("mask-id")? as TokenId,
                    need("eos-id")? as TokenId,
                )?;
                DenoiserSource::Bridge {
                    command: s.get("denoiser-bridge").unwrap().to_string(),
                    vocab,
                    prompt: parse_tokens(s.get("prompt").unwrap_or(""))?,
                }
            }
        };
        if !matches!(source, DenoiserSource::Bridge { .. }) {
            if let Some(k) = bridge_only.iter().find(|k| s.get(k).is_some()) {
                return Err(CliError::Config(format!(
                    "{k} only applies to the bridge denoiser; scripts and profiles carry their own"
                )));
            }
        }

        let d = DecoderConfig::default();
        let config = DecoderConfig {
            strategy: s.parsed("strategy")?.unwrap_or(d.strategy),
            alpha: s.parsed("alpha")?.unwrap_or(d.alpha),
            beta: s.parsed("beta")?.unwrap_or(d.beta),
            gamma: s.parsed("gamma")?.unwrap_or(d.gamma),
            threshold: s.parsed("threshold")?.unwrap_or(d.threshold),
            early_stop: s.parsed("early-stop")?.unwrap_or(d.early_stop),
            sampling: s.parsed("sampling")?.unwrap_or(d.sampling),
            seed: s.parsed("seed")?.unwrap_or(d.seed),
        };
        config.validate()?;
        Ok(RunSpec {
            source,
            config,
            gen_length: s.parsed("gen-length")?,
            block_length: s.parsed("block-length")?.unwrap_or(DEFAULT_BLOCK_LENGTH),
            steps: s.parsed("steps")?,
            out: s.get("out").unwrap_or("out").into(),
        })
    }

    /// Loads the denoiser source and settles the block layout.
    pub fn prepare(&self) -> Result<Prepared, CliError> {
        let (loaded, vocab, prompt, natural_len) = match &self.source {
            DenoiserSource::Script(path) => {
                let table = ScriptedTable::load(path)?;
                let n = table.calls.first().map_or(0, |c| c.len());
                let (v, p) = (table.vocab, table.prompt.clone());
                (Loaded::Script(table), v, p, Some(n))
            }
            DenoiserSource::Profile(path) => {
                let profile = ConvergenceProfile::load(path)?;
                let (v, p, n) = (profile.vocab, profile.prompt.clone(), profile.gen_length());
                (Loaded::Profile(profile), v, p, Some(n))
            }
            DenoiserSource::Bridge {
                command,
                vocab,
                prompt,
            } => (
                Loaded::Bridge(command.clone()),
                *vocab,
                prompt.clone(),
                None,
            ),
        };
        let gen_length = match (self.gen_length, natural_len) {
            (Some(g), _) => g,
            (None, Some(n)) => n,
            (None, None) => {
                return Err(CliError::Config(
                    "gen-length is required with the bridge denoiser".into(),
                ))
            }
        };
        if let (Loaded::Profile(_), Some(n)) = (&loaded, natural_len) {
            if n != gen_length {
                return Err(CliError::Config(format!(
                    "gen-length {gen_length} does not match the profile's {n} targets"
                )));
            }
        }
        let layout = BlockLayout::new(
            gen_length,
            self.block_length,
            self.steps.unwrap_or(gen_length),
        )?;
        Ok(Prepared {
            loaded,
            vocab,
            prompt,
            layout,
        })
    }

    /// Settings that reproduce this run, with every default spelled out.
    pub fn snapshot(&self, layout: &BlockLayout) -> String {
        let c = &self.config;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("strategy", c.strategy.to_string());
        put("alpha", c.alpha.to_string());
        put("beta", c.beta.to_string());
        put("gamma", c.gamma.to_string());
        put("threshold", c.threshold.to_string());
        put("sampling", c.sampling.to_string());
        put("seed", c.seed.to_string());
        put("early-stop", c.early_stop.to_string());
        put("gen-length", layout.gen_length().to_string());
        put("block-length", layout.block_length().to_string());
        put("steps", layout.total_steps().to_string());
        match &self.source {
            DenoiserSource::Script(p) => put("denoiser-script", p.display().to_string()),
            DenoiserSource::Profile(p) => put("denoiser-profile", p.display().to_string()),
            DenoiserSource::Bridge {
                command,
                vocab,
                prompt,
            } => {
                put("denoiser-bridge", command.clone());
                put("vocab-size", vocab.size().to_string());
                put("mask-id", vocab.mask_id().to_string());
                put("eos-id", vocab.eos_id().to_string());
                let p: Vec<String> = prompt.iter().map(ToString::to_string).collect();
                put("prompt", p.join(","));
            }
        }
        put("out", self.out.display().to_string());
        out
    }
}

fn parse_tokens(text: &str) -> Result<Vec<TokenId>, CliError> {
    text.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|e| CliError::Config(format!("prompt token `{t}`: {e}")))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub(crate) enum Loaded {
    Script(ScriptedTable),
    Profile(ConvergenceProfile),
    Bridge(String),
}

/// A spec with its source loaded; hands out fresh denoisers per run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub(crate) loaded: Loaded,
    pub vocab: Vocab,
    pub prompt: Vec<TokenId>,
    pub layout: BlockLayout,
}

/// Inclusive arithmetic grid written `start:stop:step`, or a single value.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRange {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl GridRange {
    pub fn single(v: f64) -> Self {
        Self {
            start: v,
            stop: v,
            step: 1.0,
        }
    }

    /// Grid points, rounded to nine decimals so `0.05` steps stay clean.
    pub fn points(&self) -> Vec<f64> {
        let n = ((self.stop - self.start) / self.step + 1e-9).floor() as usize;
        (0..=n)
            .map(|k| ((self.start + k as f64 * self.step) * 1e9).round() / 1e9)
            .collect()
    }
}

impl FromStr for GridRange {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        let bad = || {
            CliError::Config(format!(
                "range `{s}`: expected start:stop:step or a single value"
            ))
        };
        let parts: Vec<f64> = s
            .split(':')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_, _>>()?;
        let range = match parts[..] {
            [v] => GridRange::single(v),
            [start, stop, step] => GridRange { start, stop, step },
            _ => return Err(bad()),
        };
        let in_unit = |x: f64| (0.0..1.0).contains(&x);
        if !(in_unit(range.start) && in_unit(range.stop) && range.start <= range.stop) {
            return Err(CliError::Config(format!(
                "range `{s}` must lie within [0, 1)"
            )));
        }
        if !(range.step > 0.0 && range.step.is_finite()) {
            return Err(CliError::Config(format!(
                "range `{s}`: step must be positive"
            )));
        }
        Ok(range)
    }
}
