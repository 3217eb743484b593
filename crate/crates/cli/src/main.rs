use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{ArgGroup, CommandFactory, Parser, Subcommand};

use compcos::eval::PrimitiveBias;
use compcos::experiment::{
    choose_mask, evaluate_scores_file, output_dir, prepare, run_config, ExperimentConfig, MaskSettings, Prepared,
};
use compcos::feasibility::{feasibility_scores, Mixing};
use compcos::gradcheck::check_all_modes;
use compcos::io::report::{feasibility_report, json_string};
use compcos::io::{load_checkpoint, Checkpoint};
use compcos::space::Split;
use compcos::synth::{generate_synthetic, write_synthetic, GenConfig};
use compcos::{Error, Result};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "compcos", version, about = "Open-world compositional zero-shot learning")]
struct Cli {
    /// Overrides the training seed (and the generator seed for synthetic data).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, or output file for single-report commands.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (manifest, features, embeddings, truth).
    Synth,
    /// Train and evaluate per the config, writing all artifacts.
    Train,
    /// Evaluate a checkpoint, or an external score matrix against a manifest.
    #[command(group(ArgGroup::new("source").required(true).args(["scores", "checkpoint"])))]
    Eval {
        #[arg(long, conflicts_with = "checkpoint", requires = "manifest")]
        scores: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Feasibility ranking (TSV) used as a hard mask.
        #[arg(long, requires = "tau")]
        mask: Option<PathBuf>,
        #[arg(long, requires = "mask")]
        tau: Option<f64>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Use zero bias for primitive accuracy instead of the best-HM bias.
        #[arg(long)]
        zero_bias: bool,
    },
    /// Write the feasibility ranking of a checkpoint's primitive embeddings.
    Feasibility {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        mixing: Option<Mixing>,
    },
    /// Tune the hard-mask threshold on validation AUC.
    TuneMask {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20)]
        steps: usize,
    },
    /// Check analytic gradients against finite differences on a toy instance.
    Gradcheck {
        #[arg(long, default_value_t = 0.4)]
        alpha: f64,
    },
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split `{s}` (expected train, val or test)")),
    }
}

enum Outcome {
    Ok,
    Failed,
}

fn load_config(cli: &Cli) -> Result<(ExperimentConfig, PathBuf)> {
    let (cfg, base) = match &cli.config {
        Some(path) => (
            ExperimentConfig::load(path)?,
            path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf),
        ),
        None => (ExperimentConfig::default(), PathBuf::from(".")),
    };
    Ok(match cli.seed {
        Some(seed) => (cfg.with_seed(seed), base),
        None => (cfg, base),
    })
}

fn require_config(cli: &Cli) -> Result<(ExperimentConfig, PathBuf)> {
    if cli.config.is_none() {
        Cli::command()
            .error(ErrorKind::MissingRequiredArgument, "this command needs --config <CONFIG>")
            .exit();
    }
    load_config(cli)
}

fn load_model(cli: &Cli, checkpoint: &Path) -> Result<(ExperimentConfig, Prepared, Checkpoint)> {
    let (cfg, base) = require_config(cli)?;
    let data = prepare(&cfg.data, &base, cfg.train.seed)?;
    Ok((cfg, data, load_checkpoint(checkpoint)?))
}

/// Writes to `--out` when given, else stdout.
fn emit(cli: &Cli, text: &str) -> Result<()> {
    match &cli.out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::Io {
                    path: dir.to_path_buf(),
                    source: e,
                })?;
            }
            std::fs::write(path, text).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Synth => {
            let mut gen = match &cli.config {
                Some(_) => match load_config(cli)?.0.data {
                    compcos::experiment::DataConfig::Synthetic(g) => g,
                    _ => return Err(Error::InvalidConfig("`synth` needs a synthetic [data] section".into())),
                },
                None => GenConfig::default(),
            };
            if let Some(seed) = cli.seed {
                gen.seed = seed;
            }
            let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("synthetic"));
            write_synthetic(&generate_synthetic(&gen)?, &dir)?;
            println!("wrote {}", dir.display());
        }
        Command::Train => {
            let (cfg, base) = require_config(cli)?;
            let out = cli.out.clone().unwrap_or_else(|| output_dir(&cfg, &base));
            let outcome = run_config(&cfg, &base, &out)?;
            print!("{}", json_string(&outcome.report)?);
        }
        Command::Eval {
            scores,
            manifest,
            mask,
            tau,
            split,
            checkpoint,
            zero_bias,
        } => {
            let bias = if *zero_bias { PrimitiveBias::Zero } else { PrimitiveBias::BestHm };
            if let (Some(scores), Some(manifest)) = (scores, manifest) {
                let ranking = mask.as_deref().zip(*tau);
                let report = evaluate_scores_file(scores, manifest, *split, ranking, bias)?;
                emit(cli, &json_string(&report)?)?;
            } else if let Some(checkpoint) = checkpoint {
                let (mut cfg, base) = require_config(cli)?;
                cfg.output.checkpoint = Some(std::path::absolute(checkpoint).map_err(|e| Error::Io {
                    path: checkpoint.clone(),
                    source: e,
                })?);
                cfg.eval.primitive_bias = bias;
                let out = cli.out.clone().unwrap_or_else(|| output_dir(&cfg, &base));
                let outcome = run_config(&cfg, &base, &out)?;
                print!("{}", json_string(&outcome.report)?);
            } else {
                unreachable!("clap requires --scores or --checkpoint");
            }
        }
        Command::Feasibility { checkpoint, mixing } => {
            let (cfg, data, ckpt) = load_model(cli, checkpoint)?;
            let mixing = mixing.unwrap_or(cfg.train.mixing);
            let feas = feasibility_scores(&ckpt.params().primitives, &data.space, mixing, ckpt.best_epoch.unwrap_or(0))?;
            emit(cli, &feasibility_report(&feas, &data.space)?)?;
        }
        Command::TuneMask { checkpoint, steps } => {
            let (cfg, data, ckpt) = load_model(cli, checkpoint)?;
            let params = ckpt.params();
            let feas = feasibility_scores(&params.primitives, &data.space, cfg.train.mixing, ckpt.best_epoch.unwrap_or(0))?;
            let settings = MaskSettings {
                steps: *steps,
                ..MaskSettings::default()
            };
            let (_, summary) = choose_mask(params, &data, &feas, &settings)?;
            emit(cli, &json_string(&summary)?)?;
        }
        Command::Gradcheck { alpha } => {
            let seed = cli.seed.unwrap_or(0);
            let err = check_all_modes(seed, *alpha)?;
            println!("max relative error {err:e} (seed {seed}, alpha {alpha})");
            if !(err <= GRADCHECK_TOLERANCE) {
                return Ok(Outcome::Failed);
            }
        }
    }
    Ok(Outcome::Ok)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io_or_parse() { 2 } else { 1 })
        }
    }
}
