//! `voxveil`: train, run and evaluate the voice de-identification pipeline.
//!
//! Artifacts go to files, decision metadata to stderr, and reports or
//! summaries to stdout. Settings come from flags, then `--config`, then
//! library defaults; each output directory receives the merged result as
//! `effective_config.toml`.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0  | success (for `eval`, the WER constraint also holds) |
//! | 1  | `eval` finished but the WER gap exceeds delta |
//! | 2  | manifest missing or malformed |
//! | 3  | not enough speakers, frames or voiced speech |
//! | 4  | unreadable or incompatible audio |
//! | 5  | recognizer unreachable; partial report written |
//! | 6  | any other artifact or I/O failure |
//! | 64 | invalid command line or config file |

mod commands;
mod config;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::CliConfig;
use crate::exit::{Code, Failure};

#[derive(Debug, Parser)]
#[command(name = "voxveil", version, about = "Voice de-identification at the source")]
struct Cli {
    /// TOML file with run settings; flags take precedence over it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train SID and conversion models from the manifest's train rows.
    ///
    /// Exit codes: 0, 2 manifest, 3 insufficient data, 4 audio, 6 I/O.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Model directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Identify the speaker, pick a random target and write converted audio.
    ///
    /// Exit codes: 0, 4 audio, 6 models or I/O.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Print SID scores for one recording as JSON.
    ///
    /// Exit codes: 0, 4 audio, 6 models or I/O.
    Identify {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        models: PathBuf,
    },
    /// Measure SID accuracy and WER before and after conversion.
    ///
    /// An attacker SID is trained on the manifest's train rows and tested on
    /// its test rows. Exit codes: 0 constraint met, 1 violated, 2 manifest,
    /// 3 insufficient data, 4 audio, 5 recognizer unreachable, 6 I/O.
    Eval(EvalArgs),
    /// Time SID and conversion on every manifest row.
    ///
    /// Exit codes: 0, 2 manifest, 4 audio, 6 models or I/O.
    Bench {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        models: PathBuf,
        /// Run directory for latency.csv and summary.json.
        #[arg(long)]
        out: PathBuf,
        /// Timed runs per utterance (at least 3); the median is kept.
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Write a synthetic corpus and its manifest.
    ///
    /// Exit codes: 0, 6 I/O.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Roster::Device)]
        roster: Roster,
        #[arg(long, default_value_t = 20)]
        per_speaker: usize,
        /// Fraction of utterances marked for training.
        #[arg(long, default_value_t = 0.7)]
        train_fraction: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
struct SeedArg {
    /// Seed for target selection; omitted means OS entropy.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    models: PathBuf,
    /// Run directory for report.json and audit.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// Largest tolerated gap between converted and original mean WER.
    #[arg(long)]
    delta: Option<f64>,
    /// Transcribe with reference transcripts instead of a recognizer.
    #[arg(long, conflicts_with = "asr_endpoint")]
    stub: bool,
    /// Token deletion rate the stub applies to converted audio only.
    #[arg(long, requires = "stub", value_name = "RATE")]
    stub_deletions: Option<f64>,
    /// HTTP recognizer accepting multipart audio.
    #[arg(long, value_name = "URL")]
    asr_endpoint: Option<String>,
    /// Per-request recognizer timeout in seconds.
    #[arg(long, value_name = "SECONDS")]
    asr_timeout: Option<f64>,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Roster {
    Device,
    Users,
}

fn run(cli: Cli) -> Result<Code, Failure> {
    let mut cfg = CliConfig::load(cli.config.as_deref())?;
    if cli.sequential {
        cfg.parallel = false;
    }
    match cli.command {
        Command::Train { manifest, out } => commands::train(&cfg, &manifest, &out),
        Command::Convert {
            input,
            models,
            output,
            seed,
        } => {
            cfg.pipeline.selection.seed = seed.seed.or(cfg.pipeline.selection.seed);
            commands::convert(&cfg, &input, &models, &output)
        }
        Command::Identify { input, models } => commands::identify(&cfg, &input, &models),
        Command::Eval(a) => {
            cfg.pipeline.selection.seed = a.seed.seed.or(cfg.pipeline.selection.seed);
            let e = &mut cfg.eval;
            e.delta = a.delta.unwrap_or(e.delta);
            e.asr_timeout = a.asr_timeout.unwrap_or(e.asr_timeout);
            e.stub_deletions = a.stub_deletions.unwrap_or(e.stub_deletions);
            if a.stub {
                e.stub = true;
                e.asr_endpoint = None;
            }
            if a.asr_endpoint.is_some() {
                e.stub = false;
                e.asr_endpoint = a.asr_endpoint;
            }
            commands::eval(&cfg, &a.manifest, &a.models, &a.out)
        }
        Command::Bench {
            manifest,
            models,
            out,
            repeats,
        } => {
            cfg.bench.repeats = repeats.unwrap_or(cfg.bench.repeats);
            commands::bench(&cfg, &manifest, &models, &out)
        }
        Command::Synth {
            out,
            roster,
            per_speaker,
            train_fraction,
            seed,
        } => commands::synth(&cfg, &out, roster == Roster::Users, per_speaker, train_fraction, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { Code::Usage } else { Code::Ok }.into();
        }
    };
    match run(cli) {
        Ok(code) => code.into(),
        Err(f) => {
            eprintln!("error: {f}");
            f.code.into()
        }
    }
}
