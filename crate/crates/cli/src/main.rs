use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use migs_cli::commands::{self, Candidate, Method};
use migs_cli::{exit_code, ExperimentConfig};
use migs_core::synthdata::Dataset;
use migs_core::{MigsError, Result};

#[derive(Debug, Parser)]
#[command(
    name = "migs",
    version,
    about = "Few-shot scene-graph-to-image generation with meta-learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Meta-train on the training tasks.
    MetaTrain(TrainArgs),
    /// Train jointly on the union of the training tasks.
    BaselineTrain(TrainArgs),
    /// Fine-tune on each test task and write metric reports.
    FinetuneEval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Method label for --checkpoint.
        #[arg(long, default_value = "migs")]
        method: String,
        /// Optional second checkpoint, reported as "baseline".
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Comma-separated shot counts; defaults to the config's.
        #[arg(long, value_delimiter = ',')]
        shots: Vec<usize>,
        /// Dataset directory; regenerated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one scene graph to a PNG.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the config.json of the run that wrote the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug, clap::Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from out/checkpoints/latest.ckpt.
    #[arg(long)]
    resume: bool,
}

fn train(args: &TrainArgs, method: Method) -> Result<()> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let data = commands::load_dataset(&cfg, &args.data)?;
    let outcome = commands::train(&cfg, method, &data, &args.out, args.resume, |p| {
        eprintln!(
            "{} {}: total_g {:.4} total_d {:.4}",
            method.name(),
            p.iteration,
            p.mean.total_g,
            p.mean.total_d
        );
    })?;
    println!("{}", outcome.final_checkpoint.display());
    Ok(())
}

fn dataset(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<Dataset> {
    match dir {
        Some(d) => commands::load_dataset(cfg, d),
        None => Dataset::generate(&cfg.dataset),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            commands::gen_data(&cfg, &out)?;
            println!("{}", out.join("manifest.json").display());
            Ok(())
        }
        Command::MetaTrain(args) => train(&args, Method::Migs),
        Command::BaselineTrain(args) => train(&args, Method::Baseline),
        Command::FinetuneEval {
            config,
            checkpoint,
            method,
            baseline,
            shots,
            data,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let shots = if shots.is_empty() {
                cfg.eval.shots.clone()
            } else {
                shots
            };
            if shots.contains(&0) {
                return Err(MigsError::Config("shot counts must be positive".into()));
            }
            let pipe = commands::pipeline(&cfg)?;
            let mut candidates = vec![Candidate {
                method,
                state: commands::load_model(&checkpoint, &pipe)?.state,
            }];
            if let Some(b) = baseline {
                candidates.push(Candidate {
                    method: Method::Baseline.name().into(),
                    state: commands::load_model(&b, &pipe)?.state,
                });
            }
            let data = dataset(&cfg, data.as_deref())?;
            let report = commands::finetune_eval(
                &cfg,
                &data,
                &candidates,
                &shots,
                commands::num_workers()?,
            )?;
            commands::write_reports(&cfg, &report, &shots, &out)?;
            println!("{}", out.join("report.json").display());
            Ok(())
        }
        Command::Generate {
            checkpoint,
            graph,
            seed,
            out,
            config,
        } => {
            let config = match config {
                Some(c) => c,
                None => commands::find_config(&checkpoint)?,
            };
            let cfg = ExperimentConfig::load(&config)?;
            commands::generate_image(&cfg, &checkpoint, &graph, seed, &out)
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
