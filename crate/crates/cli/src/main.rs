//! `skybench` command-line front end.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod args;
mod commands;
mod config;

use std::ffi::OsString;
use std::process::ExitCode;

use clap::Parser;
use skybench::tiles::TileError;

use args::{Cli, Command};
use commands::Globals;

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NETWORK: u8 = 4;

/// A bad flag value caught after argument parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(t) = cause.downcast_ref::<TileError>() {
            if t.is_network() {
                return EXIT_NETWORK;
            }
        }
    }
    EXIT_DATA
}

fn parse(argv: Vec<OsString>) -> anyhow::Result<Cli> {
    let argv = match config::config_path(&argv) {
        Some(path) => config::expand(argv, path.as_ref())?,
        None => argv,
    };
    Ok(Cli::try_parse_from(argv)?)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let g = Globals { seed: cli.seed, out_dir: cli.out_dir.clone() };
    match &cli.command {
        Command::GenSite(a) => commands::gen_site(&g, a),
        Command::Sample(a) => commands::sample(&g, a),
        Command::Forward(a) => commands::forward(&g, a),
        Command::Eval(a) => commands::eval(&g, a),
        Command::FetchTiles(a) => commands::fetch_tiles(&g, a),
    }
}

fn main() -> ExitCode {
    let cli = match parse(std::env::args_os().collect()) {
        Ok(cli) => cli,
        Err(e) => {
            if let Some(clap_err) = e.downcast_ref::<clap::Error>() {
                // Help and version requests print and exit 0.
                let _ = clap_err.print();
                return ExitCode::from(if clap_err.use_stderr() { EXIT_USAGE } else { 0 });
            }
            eprintln!("error: {e:#}");
            return ExitCode::from(exit_code(&e));
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error ({}): {e:#}", cli.command.name());
            ExitCode::from(exit_code(&e))
        }
    }
}
