use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use triplet_distill::cli::{self, ExperimentConfig, StageOutput};

/// Triplet distillation with teacher-derived dynamic margins.
#[derive(Parser)]
#[command(name = "tdistill", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root directory that holds the stage directories.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Print nothing but warnings and errors.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic hierarchical dataset.
    GenData(Common),
    /// Train the teacher with fixed-margin triplet loss.
    TrainTeacher(Common),
    /// Sample random triplets and report the spread of teacher gaps.
    Calibrate(Common),
    /// Fine-tune a student with fixed or teacher-derived margins.
    Distill(Common),
    /// Verification accuracy and structure correlation of a student or teacher.
    Evaluate(Common),
    /// Tabulate evaluation reports found under the given directories.
    Compare {
        /// Directories searched recursively for report.json files.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Where comparison.csv is written.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Print every config key with its default and description.
    DefaultConfig,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    Ok(cfg)
}

fn run_stage(
    common: &Common,
    name: &str,
    f: fn(&ExperimentConfig, &std::path::Path) -> triplet_distill::Result<StageOutput>,
) -> Result<()> {
    let cfg = load_config(common)?;
    let out = f(&cfg, &common.out).with_context(|| format!("{name} failed"))?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    if !common.quiet {
        for line in &out.summary {
            println!("{line}");
        }
        println!("artifacts in {}", out.dir.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => run_stage(&c, "gen-data", cli::cmd_gen_data),
        Command::TrainTeacher(c) => run_stage(&c, "train-teacher", cli::cmd_train_teacher),
        Command::Calibrate(c) => run_stage(&c, "calibrate", cli::cmd_calibrate),
        Command::Distill(c) => run_stage(&c, "distill", cli::cmd_distill),
        Command::Evaluate(c) => run_stage(&c, "evaluate", cli::cmd_evaluate),
        Command::Compare { runs, out, quiet } => {
            let (rows, path) = cli::cmd_compare(&runs, &out).context("compare failed")?;
            if !quiet {
                print!("{}", cli::format_comparison(&rows));
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::DefaultConfig => {
            print!("{}", ExperimentConfig::documented_defaults());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
