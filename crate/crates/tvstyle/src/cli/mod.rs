//! Command-line front end. Exit codes: 0 success, 1 runtime failure,
//! 2 configuration or usage error.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::inversion::{InversionConfig, InversionMode};
pub use config::{sub_seed, RunConfig, RESOLVED_CONFIG_FILE};

#[derive(Debug, Parser)]
#[command(name = "tvstyle", version, about = "Example-based spectrogram style transfer")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration (dotted keys allowed).
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Master seed from which every component seed is derived.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory (`run.dir`).
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(long, short, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize the captioned corpus.
    Corpus {
        #[arg(long)]
        n_content: Option<usize>,
        #[arg(long)]
        n_style: Option<usize>,
    },
    /// Train the text-conditioned diffusion model.
    Pretrain {
        /// Continue from the existing checkpoint.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Learn a pseudo-word for a style from its corpus clips.
    Invert {
        #[arg(long)]
        style: String,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<InversionMode>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Stylize content audio with a learned pseudo-word.
    Stylize {
        /// A .wav, a .mel or a corpus clip id.
        #[arg(long)]
        content: String,
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        strength: Option<f64>,
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Seed of the partial-diffusion noise.
        #[arg(long)]
        noise_seed: Option<u64>,
        /// Start denoising from the randomly noised content.
        #[arg(long)]
        no_brs: bool,
        /// Also dump per-window intermediate spectrograms.
        #[arg(long)]
        intermediates: bool,
    },
    /// Run the ablation benchmark over held-out styles.
    Eval {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        n_content: Option<usize>,
        #[arg(long)]
        n_seeds: Option<usize>,
    },
    /// Dump the pseudo-word's embedding trajectory over timesteps.
    Trace {
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        points: Option<usize>,
    },
}

fn parse_mode(s: &str) -> std::result::Result<InversionMode, String> {
    match s {
        "tve" => Ok(InversionMode::Tve),
        "fixed" => Ok(InversionMode::Fixed),
        _ => Err(format!("expected tve or fixed, got {s:?}")),
    }
}

fn push<T: std::fmt::Display>(sets: &mut Vec<String>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        sets.push(format!("{key}={v}"));
    }
}

fn quoted(p: &std::path::Path) -> String {
    format!("{:?}", p.display().to_string())
}

/// Resolves the configuration: defaults < file < `--set` < command flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut sets = cli.global.overrides.clone();
    push(&mut sets, "seed", cli.global.seed);
    push(&mut sets, "run.dir", cli.global.run_dir.as_deref().map(quoted));
    match &cli.command {
        Command::Corpus { n_content, n_style } => {
            push(&mut sets, "corpus.n_content", *n_content);
            push(&mut sets, "corpus.n_style", *n_style);
        }
        Command::Pretrain { epochs, .. } => push(&mut sets, "train.epochs", *epochs),
        Command::Invert { mode, steps, .. } => {
            push(&mut sets, "invert.max_steps", *steps);
            let m = mode.map(|m| {
                if m == InversionMode::Tve {
                    "\"tve\""
                } else {
                    "\"fixed\""
                }
            });
            push(&mut sets, "invert.mode", m);
        }
        Command::Stylize {
            strength,
            scale,
            steps,
            noise_seed,
            no_brs,
            ..
        } => {
            push(&mut sets, "stylize.strength", *strength);
            push(&mut sets, "stylize.scale", *scale);
            push(&mut sets, "stylize.n_steps", *steps);
            push(&mut sets, "stylize.seed", *noise_seed);
            if *no_brs {
                sets.push("stylize.bias_reduced=false".into());
            }
        }
        Command::Eval { n_content, n_seeds, .. } => {
            push(&mut sets, "eval.n_content", *n_content);
            push(&mut sets, "eval.n_seeds", *n_seeds);
        }
        Command::Trace { points, .. } => push(&mut sets, "run.trace_points", *points),
    }
    RunConfig::load(cli.global.config.as_deref(), &sets)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Corpus { .. } => {
            let m = commands::cmd_corpus(&cfg)?;
            println!("{} clips written to {}", m.records.len(), cfg.corpus_dir().display());
        }
        Command::Pretrain { resume, .. } => {
            let ckpt = commands::cmd_pretrain(&cfg, *resume)?;
            println!(
                "checkpoint {} after {} steps, loss {:.4}",
                cfg.checkpoint_path().display(),
                ckpt.meta.progress.step,
                ckpt.meta
                    .progress
                    .recent_loss(cfg.run.log_every as usize)
                    .unwrap_or(f64::NAN)
            );
        }
        Command::Invert { style, .. } => {
            let (_, clips) = commands::open_corpus(&cfg)?;
            let ckpt = commands::load_frozen(&cfg)?;
            let inv: InversionConfig = cfg.invert.clone();
            let art = commands::cmd_invert(&cfg, &ckpt, &clips, style, &inv)?;
            println!(
                "{} ({:?}): loss {:.4} -> {:.4}",
                commands::artifact_path(&cfg, style, inv.mode).display(),
                inv.mode,
                crate::inversion::head_mean(&art.meta.losses, 100).unwrap_or(f64::NAN),
                art.meta.final_loss
            );
        }
        Command::Stylize {
            content,
            artifact,
            out,
            intermediates,
            ..
        } => {
            let out = out.clone().unwrap_or_else(|| {
                let stem = std::path::Path::new(content)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "content".into());
                let art = artifact
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                cfg.run.dir.join("stylize").join(format!("{stem}-{art}"))
            });
            let res = commands::cmd_stylize(&cfg, content, artifact, &out, *intermediates)?;
            println!("{} (t_p = {})", out.display(), res.t_p);
        }
        Command::Eval { out, .. } => {
            let out = out.clone().unwrap_or_else(|| cfg.run.dir.join("eval"));
            commands::cmd_eval(&cfg, &out)?;
            println!("report written to {}", out.display());
        }
        Command::Trace { artifact, out, .. } => {
            let out = out.clone().unwrap_or_else(|| {
                let stem = artifact
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                cfg.run.dir.join("trace").join(stem)
            });
            commands::cmd_trace(&cfg, artifact, &out)?;
        }
    }
    Ok(())
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_config() || matches!(e, Error::Usage(_)) {
        2
    } else {
        1
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_secs()
        .init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
