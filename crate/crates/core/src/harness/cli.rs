//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::config::{ExperimentConfig, Task};
use super::train::{evaluate, EvalData, RunOutcome, Trainer};
use super::{Checkpoint, HarnessError};
use crate::cells::{CellKind, NetworkSpec};
use crate::data::{read_file, MnistSet, MnistSplit};
use crate::grad::{finite_diff_check, random_check_problem, GradCheckOptions};
use crate::math::ActivationKind;
use crate::optim::RegConfig;

#[derive(Debug, Parser)]
#[command(name = "lstwm", version, about = "Train and evaluate LSTM / LSTWM networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a config file, or resume from a checkpoint.
    Train {
        #[arg(long, required_unless_present = "resume")]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Stop (with a checkpoint) once this many optimizer steps are done.
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long, conflicts_with_all = ["config", "seed", "output", "set"])]
        resume: Option<PathBuf>,
        /// Override a config key, e.g. `--set eta=0.01`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on its task's test data.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus for text checkpoints (defaults to the path in the checkpoint's config).
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// MNIST directory for digit checkpoints (defaults to the checkpoint's config).
        #[arg(long)]
        mnist_dir: Option<PathBuf>,
    },
    /// Compare BPTT gradients with central differences on a random problem.
    Gradcheck {
        #[arg(long, default_value = "lstwm")]
        cell: String,
        #[arg(long, default_value = "log")]
        activation: String,
        #[arg(long, default_value_t = 8)]
        width: usize,
        #[arg(long, default_value_t = 2)]
        depth: usize,
        #[arg(long, default_value_t = 12)]
        len: usize,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        eta: f64,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Print a checkpoint's configuration, architecture and progress.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Train {
            config,
            seed,
            output,
            max_steps,
            resume,
            set,
            quiet,
        } => {
            let mut trainer = match resume {
                Some(path) => Trainer::resume(&path)?,
                None => {
                    let path = config.expect("clap requires --config without --resume");
                    let mut cfg = ExperimentConfig::load(&path)?;
                    for kv in &set {
                        let (k, v) = kv
                            .split_once('=')
                            .ok_or_else(|| HarnessError::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
                        cfg.set(k.trim(), v.trim())?;
                    }
                    if let Some(s) = seed {
                        cfg.seed = s;
                    }
                    if let Some(o) = output {
                        cfg.output_dir = o;
                    }
                    Trainer::new(cfg)?
                }
            };
            trainer.verbose = !quiet;
            if !quiet {
                eprintln!(
                    "{} on {} task, {} parameters, output {}",
                    trainer.network().spec.label(),
                    trainer.config().task.name(),
                    trainer.network().parameter_count(),
                    trainer.output_dir().display()
                );
            }
            match trainer.run(max_steps)? {
                RunOutcome::Finished => println!("finished at step {}", trainer.step()),
                RunOutcome::Stopped { step } => println!(
                    "stopped at step {step}; resume with --resume {}",
                    trainer.output_dir().join(super::train::CHECKPOINT_FILE).display()
                ),
            }
            Ok(())
        }
        Command::Eval {
            checkpoint,
            corpus,
            mnist_dir,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let data = match ck.config.task {
                Task::Text => {
                    let path = corpus
                        .or_else(|| ck.config.corpus_path.clone())
                        .ok_or_else(|| HarnessError::Config("no corpus given".into()))?;
                    let mut bytes = read_file(&path)?;
                    if let Some(m) = ck.config.corpus_bytes {
                        bytes.truncate(m);
                    }
                    EvalData::Text(bytes)
                }
                Task::Combo | Task::Digit => {
                    let dir = mnist_dir
                        .or_else(|| ck.config.mnist_dir.clone())
                        .ok_or_else(|| HarnessError::Config("no MNIST directory given".into()))?;
                    EvalData::Digits(MnistSet::load(&dir, MnistSplit::Test)?)
                }
            };
            let rec = evaluate(&ck, &data)?;
            let metric = rec.test_metric.unwrap_or(f64::NAN);
            match ck.config.task {
                Task::Text => println!("test_bpc {metric:.6}"),
                _ => println!("test_correct {metric} / {}", ck.config.test_samples),
            }
            Ok(())
        }
        Command::Gradcheck {
            cell,
            activation,
            width,
            depth,
            len,
            batch,
            eta,
            epsilon,
            seed,
        } => {
            let kind = CellKind::parse(&cell).ok_or_else(|| HarnessError::Config(format!("unknown cell `{cell}`")))?;
            let act = ActivationKind::parse(&activation)
                .ok_or_else(|| HarnessError::Config(format!("unknown activation `{activation}`")))?;
            if width == 0 || depth == 0 || len == 0 || batch == 0 {
                return Err(HarnessError::Config("width, depth, len and batch must be positive".into()));
            }
            let spec = NetworkSpec::uniform(5, kind, &vec![width; depth], act, 4);
            let (net, seqs) = random_check_problem(&spec, len, batch, seed)?;
            let report = finite_diff_check(
                &net,
                &seqs,
                RegConfig::new(eta),
                GradCheckOptions {
                    epsilon,
                    max_coords_per_tensor: None,
                },
            )?;
            for (name, err) in &report.per_tensor {
                println!("{name:<28} {err:.3e}");
            }
            println!(
                "max_rel_error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e}, {} coordinates)",
                report.max_rel_error,
                report.worst_tensor,
                report.worst_index,
                report.analytic,
                report.numeric,
                report.coords_checked
            );
            Ok(())
        }
        Command::Inspect { checkpoint } => inspect(&checkpoint),
    }
}

fn inspect(path: &Path) -> Result<(), HarnessError> {
    let ck = Checkpoint::load(path)?;
    let p = &ck.progress;
    println!("network     {}", ck.net.spec.label());
    println!("parameters  {}", ck.net.parameter_count());
    println!("task        {}", ck.config.task.name());
    println!("step        {} (epoch {}, {} into epoch)", p.step, p.epoch, p.step_in_epoch);
    println!("adam t      {}", ck.adam.t);
    if !ck.alphabet.is_empty() {
        println!("alphabet    {} symbols", ck.alphabet.len());
    }
    println!("--- config");
    print!("{}", ck.config.to_text());
    Ok(())
}
