//! Client side of the stdio bridge protocol.
//!
//! The engine launches the server process, performs a `hello`/`ready`
//! handshake, then exchanges one `denoise` request and one `logits` response
//! per forward pass. Messages are single-line JSON objects tagged by `type`.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use serde::{Deserialize, Serialize};

use super::{Denoiser, LogitsMatrix};
use crate::error::{Error, Result};
use crate::model::{SequenceState, TokenId, Vocab};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Request {
    Hello {
        version: u32,
        vocab_size: usize,
        mask_id: TokenId,
        eos_id: TokenId,
    },
    Denoise {
        call: u64,
        tokens: Vec<TokenId>,
        masked: Vec<usize>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Response {
    Ready { version: u32 },
    Logits { call: u64, rows: Vec<Vec<f32>> },
    Error { message: String },
}

pub struct BridgeDenoiser {
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
    vocab: Vocab,
    command: String,
}

impl BridgeDenoiser {
    /// Launches `command` (shell-style word splitting, no shell) and completes
    /// the handshake.
    pub fn spawn(command: &str, vocab: Vocab) -> Result<Self> {
        let argv = shlex::split(command)
            .filter(|a| !a.is_empty())
            .ok_or_else(|| {
                Error::InvalidConfig(format!("cannot parse bridge command `{command}`"))
            })?;
        let mut child = Command::new(&argv[0])
            .args(&argv[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| {
                Error::DenoiserUnavailable(format!("failed to launch `{command}`: {e}"))
            })?;
        let stdin = child.stdin.take();
        let stdout = BufReader::new(child.stdout.take().expect("stdout is piped"));
        let mut bridge = Self {
            child,
            stdin,
            stdout,
            vocab,
            command: command.to_string(),
        };
        bridge.handshake()?;
        Ok(bridge)
    }

    fn handshake(&mut self) -> Result<()> {
        self.send(&Request::Hello {
            version: PROTOCOL_VERSION,
            vocab_size: self.vocab.size(),
            mask_id: self.vocab.mask_id(),
            eos_id: self.vocab.eos_id(),
        })?;
        match self.receive()? {
            Response::Ready { version } if version == PROTOCOL_VERSION => Ok(()),
            Response::Ready { version } => Err(Error::Protocol(format!(
                "version mismatch: engine speaks {PROTOCOL_VERSION}, server replied {version}"
            ))),
            other => Err(Error::Protocol(format!("expected ready, got {other:?}"))),
        }
    }

    fn send(&mut self, msg: &Request) -> Result<()> {
        let mut line = serde_json::to_string(msg).expect("request serializes");
        line.push('\n');
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| Error::DenoiserUnavailable("bridge input already closed".into()))?;
        stdin
            .write_all(line.as_bytes())
            .and_then(|()| stdin.flush())
            .map_err(|e| self.unavailable(format!("write failed: {e}")))
    }

    fn receive(&mut self) -> Result<Response> {
        let mut line = String::new();
        let n = self
            .stdout
            .read_line(&mut line)
            .map_err(|e| self.unavailable(format!("read failed: {e}")))?;
        if n == 0 {
            return Err(self.unavailable("server closed its output".into()));
        }
        serde_json::from_str(line.trim_end())
            .map_err(|e| Error::Protocol(format!("unreadable message `{}`: {e}", line.trim_end())))
    }

    fn unavailable(&mut self, what: String) -> Error {
        let status = match self.child.try_wait() {
            Ok(Some(status)) => format!(" ({status})"),
            _ => String::new(),
        };
        Error::DenoiserUnavailable(format!("`{}`: {what}{status}", self.command))
    }
}

impl Denoiser for BridgeDenoiser {
    fn denoise(&mut self, state: &SequenceState, call: u64) -> Result<LogitsMatrix> {
        let masked: Vec<usize> = state.masked_positions().collect();
        self.send(&Request::Denoise {
            call,
            tokens: state.tokens().to_vec(),
            masked: masked.clone(),
        })?;
        match self.receive()? {
            Response::Logits { call: c, rows } => {
                if c != call {
                    return Err(Error::Protocol(format!(
                        "response for call {c} while waiting for call {call}"
                    )));
                }
                if rows.len() != masked.len() {
                    return Err(Error::Protocol(format!(
                        "{} rows for {} masked positions",
                        rows.len(),
                        masked.len()
                    )));
                }
                Ok(masked.into_iter().zip(rows).collect())
            }
            Response::Error { message } => Err(Error::DenoiserUnavailable(format!(
                "server reported an error at call {call}: {message}"
            ))),
            other => Err(Error::Protocol(format!("expected logits, got {other:?}"))),
        }
    }
}

impl Drop for BridgeDenoiser {
    fn drop(&mut self) {
        drop(self.stdin.take());
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
