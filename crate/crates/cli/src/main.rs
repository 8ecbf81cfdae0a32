use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use metafit::experiments::{self, ExperimentConfig, CHECKPOINT_FILE};
use metafit::Error;

#[derive(Parser)]
#[command(name = "metafit", version, about = "Adaptive test-time skeleton fitting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the skeleton and seeded train/test/shift task files.
    GenTasks(Common),
    /// Train an initializer and write its checkpoint and training curve.
    Train(Common),
    /// Refine every task from a checkpoint and write trace and summary CSVs.
    Fit(Common),
    /// Run the component grid and the fixed-variance study.
    Ablate(Common),
    /// Report the error increase from the source to the target profile.
    DomainShift(Common),
}

#[derive(Args)]
struct Common {
    /// Flat TOML file of experiment keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides one key, e.g. `--set max_iters=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn config(&self) -> metafit::Result<ExperimentConfig> {
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        ExperimentConfig::load(self.config.as_deref(), &overrides)
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig(_) | Error::InvalidInput(_) => 2,
        Error::InvalidCamera(_)
        | Error::DegenerateShape { .. }
        | Error::NumericOverflow(_)
        | Error::Diverged { .. }
        | Error::TrainingDivergence(_)
        | Error::AlignmentDegenerate
        | Error::UndefinedCorrelation => 3,
        Error::Io { .. } | Error::Json { .. } => 4,
    }
}

fn run(cli: Cli) -> metafit::Result<()> {
    match cli.command {
        Command::GenTasks(c) => {
            let s = experiments::run_gen_tasks(&c.config()?, &c.out)?;
            println!(
                "wrote {} train, {} test and {} shift tasks to {}",
                s.train.len(),
                s.test.len(),
                s.shift.len(),
                c.out.display()
            );
        }
        Command::Train(c) => {
            let curve = experiments::run_train(&c.config()?, &c.out).inspect_err(|_| {
                eprintln!("last good checkpoint: {}", c.out.join(CHECKPOINT_FILE).display());
            })?;
            if let Some(last) = curve.last() {
                println!(
                    "epoch {}: mean final loss {:.6}, held-out mpjpe {:.6}",
                    last.epoch, last.mean_final_loss, last.mean_heldout_mpjpe
                );
            }
        }
        Command::Fit(c) => {
            let records = experiments::run_fit(&c.config()?, &c.out)?;
            let n = records.len() as f64;
            let wall: f64 = records.iter().map(|r| r.wall_time.as_secs_f64()).sum();
            println!(
                "{} tasks: mean mpjpe {:.6}, mean pa-mpjpe {:.6}, {:.3} ms per task",
                records.len(),
                records.iter().map(|r| r.mpjpe).sum::<f64>() / n,
                records.iter().map(|r| r.pa_mpjpe).sum::<f64>() / n,
                1e3 * wall / n
            );
        }
        Command::Ablate(c) => {
            for r in experiments::run_ablation(&c.config()?, &c.out)? {
                println!("{:<10} {:<22} iters {:>2}  median mpjpe {:.6}", r.study, r.variant, r.max_iters, r.median_mpjpe);
            }
        }
        Command::DomainShift(c) => {
            for r in experiments::run_domain_shift(&c.config()?, &c.out)? {
                println!("{:<12} delta mpjpe {:+.6}", r.variant, r.delta_mpjpe);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
