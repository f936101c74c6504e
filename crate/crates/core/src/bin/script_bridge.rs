//! Replays a scripted logits table over the stdio bridge protocol.
//!
//! Usage: `script-bridge TABLE.json [--version N] [--exit-after CALLS]`
//!
//! `--version` overrides the version announced in the `ready` reply and
//! `--exit-after` makes the process exit after answering that many denoise
//! requests. Both exist to exercise the engine's failure paths.

use std::io::{self, BufRead, Write};
use std::process::ExitCode;

use creditdec_core::denoise::{Response, ScriptedTable, PROTOCOL_VERSION};
use serde_json::Value;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut table_path = None;
    let mut version = PROTOCOL_VERSION;
    let mut exit_after: Option<u64> = None;
    let mut it = args.iter();
    while let Some(a) = it.next() {
        match a.as_str() {
            "--version" => version = it.next().and_then(|v| v.parse().ok()).unwrap_or(0),
            "--exit-after" => exit_after = it.next().and_then(|v| v.parse().ok()),
            _ => table_path = Some(a.clone()),
        }
    }
    let Some(table_path) = table_path else {
        eprintln!("usage: script-bridge TABLE.json [--version N] [--exit-after CALLS]");
        return ExitCode::from(2);
    };
    let table = match ScriptedTable::load(&table_path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("script-bridge: {e}");
            return ExitCode::from(2);
        }
    };

    let stdin = io::stdin();
    let mut out = io::stdout().lock();
    let mut answered = 0u64;
    for line in stdin.lock().lines() {
        let Ok(line) = line else { break };
        let msg: Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => return protocol_error(&mut out, &format!("unreadable request: {e}")),
        };
        let reply = match msg["type"].as_str() {
            Some("hello") => Response::Ready { version },
            Some("denoise") => {
                if exit_after.is_some_and(|n| answered >= n) {
                    return ExitCode::from(1);
                }
                let call = msg["call"].as_u64().unwrap_or(0);
                let masked: Vec<usize> = msg["masked"]
                    .as_array()
                    .map(|a| {
                        a.iter()
                            .filter_map(|v| v.as_u64().map(|p| p as usize))
                            .collect()
                    })
                    .unwrap_or_default();
                match table.lookup(call, &masked) {
                    Ok(rows) => {
                        answered += 1;
                        Response::Logits { call, rows }
                    }
                    Err(e) => return protocol_error(&mut out, &e.to_string()),
                }
            }
            _ => return protocol_error(&mut out, "unexpected message type"),
        };
        let reply = serde_json::to_string(&reply).expect("reply serializes");
        if writeln!(out, "{reply}").and_then(|()| out.flush()).is_err() {
            return ExitCode::from(1);
        }
    }
    ExitCode::SUCCESS
}

fn protocol_error(out: &mut impl Write, message: &str) -> ExitCode {
    let reply = Response::Error {
        message: message.to_string(),
    };
    let _ = writeln!(
        out,
        "{}",
        serde_json::to_string(&reply).expect("reply serializes")
    );
    let _ = out.flush();
    ExitCode::from(1)
}
