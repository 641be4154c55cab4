//! `dualprompt` command line: train, evaluate, ingest synthetic images,
//! measure FID, export embeddings and tabulate reports.

mod commands;
mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dualprompt::Error;

use commands::EvalProtocol;

#[derive(Parser)]
#[command(name = "dualprompt", version, about = "Prompt learning with real and synthetic images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Dotted override such as `weights.alpha=0.1`; repeatable, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train prompts and write the log, checkpoints and the effective config.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Shorthand for `--set baseline=<name>`.
        #[arg(long)]
        baseline: Option<String>,
        /// Shorthand for `--set paths.output_dir=<dir>`.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Score a checkpoint and print B, N and HM.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the config echoed next to the checkpoint.
        #[command(flatten)]
        cfg: ConfigArgs,
        /// zsl, gzsl, both, cross-dataset or domain-generalization.
        #[arg(long)]
        protocol: Option<String>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Write the report(s) as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Match a synthetic image folder to the class list and write a manifest.
    Ingest {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Folder of `<class name>/<image>` files; defaults to paths.synthetic_root.
        #[arg(long)]
        synth: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fréchet distance between the embeddings of two image folders.
    Fid {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        synth: PathBuf,
        /// Embed the synthetic folder through the synthetic prompt route.
        #[arg(long)]
        own_routes: bool,
    },
    /// Write one JSON line of embedding per example of a split.
    Export {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// train, few-shot, val, test or synthetic.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate JSON reports written by `eval --out`.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// 1: bad configuration or input, 2: numeric failure, 3: file or format problem.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::Input(_)
        | Error::Label { .. }
        | Error::Tokenizer(_)
        | Error::UnmatchedClasses(_)
        | Error::Incompatible(_) => 1,
        Error::Numeric(_) | Error::NonFiniteLoss { .. } | Error::Shape { .. } | Error::Index { .. } => 2,
        Error::Io { .. } | Error::Checksum(_) | Error::Format { .. } => 3,
    }
}

fn run(cli: Cli) -> dualprompt::Result<()> {
    match cli.command {
        Command::Train { cfg, baseline, output } => {
            let mut overrides = Vec::new();
            if let Some(b) = baseline {
                overrides.push(format!("baseline={b:?}"));
            }
            if let Some(o) = output {
                overrides.push(format!("paths.output_dir={:?}", o.to_string_lossy()));
            }
            overrides.extend(cfg.set);
            commands::train_cmd(commands::TrainArgs {
                config: cfg.config.as_deref(),
                overrides,
            })
        }
        Command::Eval {
            checkpoint,
            cfg,
            protocol,
            split,
            out,
        } => commands::eval_cmd(commands::EvalArgs {
            checkpoint: &checkpoint,
            config: cfg.config.as_deref(),
            overrides: cfg.set,
            protocol: protocol.map(|p| p.parse::<EvalProtocol>()).transpose()?,
            split,
            out: out.as_deref(),
        }),
        Command::Ingest { cfg, synth, out } => commands::ingest_cmd(commands::IngestArgs {
            config: cfg.config.as_deref(),
            overrides: cfg.set,
            synth: synth.as_deref(),
            out: out.as_deref(),
        }),
        Command::Fid {
            cfg,
            checkpoint,
            real,
            synth,
            own_routes,
        } => commands::fid_cmd(commands::FidArgs {
            config: cfg.config.as_deref(),
            overrides: cfg.set,
            checkpoint: checkpoint.as_deref(),
            real: &real,
            synth: &synth,
            own_routes,
        }),
        Command::Export {
            cfg,
            checkpoint,
            split,
            out,
        } => commands::export_cmd(commands::ExportArgs {
            config: cfg.config.as_deref(),
            overrides: cfg.set,
            checkpoint: checkpoint.as_deref(),
            split,
            out: &out,
        }),
        Command::Report { reports, out } => commands::report_cmd(&reports, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
