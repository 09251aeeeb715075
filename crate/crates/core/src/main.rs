use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use zipper_lora::adapters::HardPolarity;
use zipper_lora::autodiff::OpKind;
use zipper_lora::checks::{self, CheckRow, Scope};
use zipper_lora::config::{Overrides, RunConfig};
use zipper_lora::{experiment, report, Error, Result};

/// Rank-composable adapters on a toy multilingual speech model.
#[derive(Parser, Debug)]
#[command(name = "zipper-lora", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Run a single seed (run) or seed the suites (gradcheck).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// r=32, alpha=64, top-k=8 and lr 2e-5.
    #[arg(long, global = true)]
    paper_hparams: bool,
    /// Hard-mask polarity: spec_on_one or shared_on_one.
    #[arg(long, global = true, value_parser = parse_polarity)]
    hard_polarity: Option<HardPolarity>,
    /// Segment-wise encoding in Stage 2.
    #[arg(long, global = true, overrides_with = "no_chunked")]
    chunked: bool,
    #[arg(long, global = true, overrides_with = "chunked")]
    no_chunked: bool,
    /// Output directory for `run`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Stage 1, then Stage 2 for every variant and seed, then the report.
    Run { config: PathBuf },
    /// Backward rules vs central finite differences.
    Gradcheck {
        /// ops, adapters, router, model; all scopes when omitted.
        #[arg(long, value_parser = parse_scope)]
        scope: Option<Scope>,
        /// Corrupt one backward rule (negative control).
        #[arg(long, hide = true, value_parser = parse_op)]
        fault: Option<OpKind>,
    },
    /// Cross-variant algebraic identities.
    Equiv {
        #[arg(long, default_value_t = checks::EQUIV_SEEDS)]
        seeds: u64,
    },
    /// Rebuild the comparison files of a finished run.
    Report { dir: PathBuf },
    /// Mean-pooled encoder outputs per eval utterance.
    ExportEmbeddings { dir: PathBuf },
}

fn parse_polarity(s: &str) -> std::result::Result<HardPolarity, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_scope(s: &str) -> std::result::Result<Scope, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_op(s: &str) -> std::result::Result<OpKind, String> {
    OpKind::from_name(s).ok_or_else(|| format!("unknown op '{s}'"))
}

fn print_checks(rows: &[CheckRow]) -> ExitCode {
    print!("{}", checks::render_table(rows));
    match rows.iter().find(|r| !r.passed()) {
        None => ExitCode::SUCCESS,
        Some(r) => {
            eprintln!("FAILED: {} / {} ({})", r.suite, r.check, r.detail);
            ExitCode::from(1)
        }
    }
}

fn execute(cli: Cli) -> Result<ExitCode> {
    let g = &cli.global;
    match cli.command {
        Command::Run { config } => {
            let mut cfg = RunConfig::load(&config)?;
            let chunked = match (g.chunked, g.no_chunked) {
                (true, _) => Some(true),
                (_, true) => Some(false),
                _ => None,
            };
            cfg.apply(&Overrides {
                seed: g.seed,
                paper_hparams: g.paper_hparams,
                hard_polarity: g.hard_polarity,
                chunked,
                out: g.out.clone(),
            });
            let out = experiment::cmd_run(&cfg)?;
            println!("run complete: {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { scope, fault } => {
            let seed = g.seed.unwrap_or(0);
            let scopes = scope.map_or(Scope::ALL.to_vec(), |s| vec![s]);
            let mut rows = Vec::new();
            for s in scopes {
                rows.extend(checks::gradcheck(s, seed, fault)?);
            }
            Ok(print_checks(&rows))
        }
        Command::Equiv { seeds } => {
            let polarity = g.hard_polarity.unwrap_or_default();
            Ok(print_checks(&checks::equiv(seeds, polarity)?))
        }
        Command::Report { dir } => {
            report::cmd_report(&dir)?;
            println!("report written to {}", dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::ExportEmbeddings { dir } => {
            report::cmd_export_embeddings(&dir)?;
            println!("embeddings written under {}", dir.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
