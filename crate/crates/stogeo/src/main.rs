//! `stogeo` — command-line runner for the stochastic geometric mechanics
//! toolkit.
//!
//! Usage: `stogeo <command> --config cfg.json --out dir [--seed S] [--threads k]`
//!
//! The command on the command line must match the `command` key in the
//! configuration file; everything structured lives in the JSON. Exit codes:
//! 0 all tolerances pass, 1 a tolerance failed (or a symmetry check said
//! not-symmetry), 2 configuration error, 3 numerical error.

#![allow(clippy::needless_range_loop)]

mod config;
mod expr;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

struct Args {
    command: String,
    config: PathBuf,
    out: PathBuf,
    seed: Option<u64>,
    threads: Option<usize>,
}

fn parse_args() -> Result<Args, String> {
    let mut argv = std::env::args().skip(1);
    let command = match argv.next() {
        Some(c) if !c.starts_with('-') => c,
        _ => return Err(
            "usage: stogeo <command> --config cfg.json --out dir [--seed S] [--threads k]".into(),
        ),
    };
    let mut config = None;
    let mut out = None;
    let mut seed = None;
    let mut threads = None;
    while let Some(flag) = argv.next() {
        let mut need = |name: &str| -> Result<String, String> {
            argv.next().ok_or(format!("flag {name} needs a value"))
        };
        match flag.as_str() {
            "--config" => config = Some(PathBuf::from(need("--config")?)),
            "--out" => out = Some(PathBuf::from(need("--out")?)),
            "--seed" => {
                seed = Some(
                    need("--seed")?
                        .parse()
                        .map_err(|_| "bad --seed value".to_string())?,
                )
            }
            "--threads" => {
                threads = Some(
                    need("--threads")?
                        .parse()
                        .map_err(|_| "bad --threads value".to_string())?,
                )
            }
            other => return Err(format!("unknown flag {other}")),
        }
    }
    Ok(Args {
        command,
        config: config.ok_or("missing --config")?,
        out: out.ok_or("missing --out")?,
        seed,
        threads,
    })
}

fn main() -> ExitCode {
    let args = match parse_args() {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("{msg}");
            return ExitCode::from(2);
        }
    };

    let text = match std::fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("config error: cannot read {}: {e}", args.config.display());
            return ExitCode::from(2);
        }
    };
    let value: serde_json::Value = match serde_json::from_str(&text) {
        Ok(v) => v,
        Err(e) => {
            eprintln!(
                "config error: malformed JSON at line {} column {}: {e}",
                e.line(),
                e.column()
            );
            return ExitCode::from(2);
        }
    };
    let mut cfg = match config::validate(value) {
        Ok(c) => c,
        Err(errors) => {
            eprint!("{errors}");
            return ExitCode::from(2);
        }
    };

    // the positional command must agree with the config
    let cli_cmd = args.command.as_str();
    let cfg_cmd = serde_json::to_value(cfg.command)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default();
    if cli_cmd != cfg_cmd {
        eprintln!("config error: command line says `{cli_cmd}` but config says `{cfg_cmd}`");
        return ExitCode::from(2);
    }

    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let threads = args.threads.or(cfg.threads);
    if let Some(k) = threads {
        if k > 0 {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build_global();
        }
    }

    let outcome = run::dispatch(&cfg, &args.out);
    ExitCode::from(outcome.exit_code as u8)
}
