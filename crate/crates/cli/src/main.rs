mod commands;
mod config;
mod error;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use protonorm::encoder::ProjectionParams;
use protonorm::NormalizationMode;

use crate::commands::GradcheckArgs;
use crate::config::{parse_split, read_json, resolve, RunConfig};
use crate::error::CliResult;

/// Few-shot NER with prototypical networks and prototype normalization.
#[derive(Parser)]
#[command(name = "protonorm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Dotted-path override, e.g. `--set train.max_epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    /// Output directory (a file for `sample` and `gradcheck`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Evaluation and sampling threads; results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Args, Clone, Default)]
struct DataArgs {
    /// Directory written by `synth`.
    #[arg(long)]
    data: Option<PathBuf>,

    /// Generate the synthetic corpus in memory.
    #[arg(long)]
    synthetic: bool,

    #[arg(long)]
    mode: Option<NormalizationMode>,

    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// Run directory from `train`; supplies config.json and params.bin.
    #[arg(long)]
    run: Option<PathBuf>,

    /// Projection parameters; without these (or --run) raw embeddings are used.
    #[arg(long)]
    params: Option<PathBuf>,

    #[arg(long)]
    split: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus: per-split CoNLL files, PNE1 dumps, frequency table.
    Synth {
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Episodic training into a run directory.
    Train(DataArgs),
    /// Micro-F1 on held-out episodes.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
        /// Span-level instead of token-level matching.
        #[arg(long)]
        span_level: bool,
    },
    /// Prototype-norm survey, bias probe and frequency analyses.
    Diagnose {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Analytic against finite-difference gradients in every mode.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_sign_error: bool,
    },
    /// Export sampled episodes as JSONL.
    Sample {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Random stream; 4 reproduces the evaluation episodes.
        #[arg(long, default_value_t = commands::EVAL_STREAM)]
        stream: u64,
    },
}

fn flag_overrides(cli: &Cli, data: Option<&DataArgs>) -> Vec<String> {
    let mut out = cli.set.clone();
    if let Some(w) = cli.workers {
        out.push(format!("train.workers={w}"));
    }
    if let Some(d) = data {
        if let Some(dir) = &d.data {
            out.push(format!("data.dir={}", serde_json::Value::String(dir.display().to_string())));
            out.push("data.synthetic=false".into());
        }
        if d.synthetic {
            out.push("data.synthetic=true".into());
        }
        if let Some(m) = d.mode {
            out.push(format!("train.mode={m}"));
        }
        if let Some(s) = d.seed {
            out.push(format!("seed={s}"));
        }
    }
    out
}

fn load_config(cli: &Cli, base: Option<serde_json::Value>, extra: Vec<String>) -> CliResult<RunConfig> {
    let base = match (&cli.config, base) {
        (Some(path), _) => Some(read_json(path)?),
        (None, b) => b,
    };
    resolve(base, &extra)
}

/// Config and parameters for commands that can start from a run directory.
fn load_run(cli: &Cli, data: &DataArgs, run: &RunArgs, mut extra: Vec<String>) -> CliResult<(RunConfig, Option<ProjectionParams>)> {
    let base = run.run.as_ref().map(|dir| read_json(&dir.join("config.json"))).transpose()?;
    if let Some(s) = &run.split {
        let split = parse_split(s)?;
        extra.push(format!("eval.split={}", config::split_name(split)));
        extra.push(format!("diagnostics.split={}", config::split_name(split)));
    }
    let mut overrides = flag_overrides(cli, Some(data));
    overrides.append(&mut extra);
    let cfg = load_config(cli, base, overrides)?;
    let params_path = run.params.clone().or_else(|| run.run.as_ref().map(|d| d.join("params.bin")));
    let params = params_path.map(|p| ProjectionParams::read(&p)).transpose()?;
    Ok((cfg, params))
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Synth { seed } => {
            let mut extra = flag_overrides(cli, None);
            if let Some(s) = seed {
                extra.push(format!("seed={s}"));
            }
            let cfg = load_config(cli, None, extra)?;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("synthetic"));
            commands::synth(&cfg, &out)
        }
        Command::Train(data) => {
            let cfg = load_config(cli, None, flag_overrides(cli, Some(data)))?;
            let out = cli
                .out
                .clone()
                .unwrap_or_else(|| Path::new("runs").join(format!("{}_seed{}", cfg.train.mode, cfg.train.seed)));
            commands::train_cmd(&cfg, &out)
        }
        Command::Eval { data, run, span_level } => {
            let extra = if *span_level { vec!["train.span_level=true".into()] } else { Vec::new() };
            let (cfg, params) = load_run(cli, data, run, extra)?;
            let out = cli.out.clone().or_else(|| run.run.clone());
            commands::eval_cmd(&cfg, params.as_ref(), out.as_deref()).map(|_| ())
        }
        Command::Diagnose { data, run } => {
            let (cfg, params) = load_run(cli, data, run, Vec::new())?;
            let out = cli.out.clone().unwrap_or_else(|| match &run.run {
                Some(dir) => dir.join("diagnostics"),
                None => PathBuf::from("diagnostics"),
            });
            commands::diagnose(&cfg, params.as_ref(), &out)
        }
        Command::Gradcheck { episodes, h, tol, seed, inject_sign_error } => {
            let args = GradcheckArgs { episodes: *episodes, h: *h, tol: *tol, seed: *seed, inject_sign_error: *inject_sign_error };
            commands::gradcheck(&args, cli.out.as_deref()).map(|_| ())
        }
        Command::Sample { data, split, count, stream } => {
            let cfg = load_config(cli, None, flag_overrides(cli, Some(data)))?;
            commands::sample(&cfg, parse_split(split)?, *count, *stream, cli.out.as_ref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
