use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use owodlab::harness::{Run, RunConfig};
use owodlab::Result;

/// Open-world object detection laboratory on synthetic shape images.
#[derive(Parser)]
#[command(name = "owodlab", version)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override one value, e.g. `--set train.iterations=500`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    sets: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the train and test images with their annotations.
    Generate,
    /// Precompute selective-search candidates for the training images.
    Proposals,
    /// Train one task (1-based) from the previous task's checkpoint.
    Train {
        #[arg(long, default_value_t = 1)]
        task: usize,
    },
    /// Train the next task, then finetune on the exemplar set.
    Advance,
    /// Score the test split with a task's checkpoint.
    Eval {
        /// Defaults to the last trained task.
        #[arg(long)]
        task: Option<usize>,
        /// Also render the trace and loss plots.
        #[arg(long)]
        plot: bool,
    },
    /// Render SVG plots of the weight trace and loss curves.
    Plot {
        #[arg(long)]
        task: Option<usize>,
    },
}

fn current_task(run: &Run, task: Option<usize>) -> Result<usize> {
    match task {
        Some(t) => Ok(t),
        None => Ok(run.state()?.task),
    }
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), std::env::vars(), &cli.sets)?;
    let run = Run::new(cfg)?;
    match cli.command {
        Command::Generate => run.generate()?,
        Command::Proposals => {
            let n = run.proposals()?;
            println!("proposals for {n} images");
        }
        Command::Train { task } => {
            let out = run.train_task(task)?;
            let window = (out.train.log.len() / 10).clamp(1, 50);
            if let Some((first, last)) = out.train.loss_drop(window) {
                println!("task {task}: loss {first:.4} -> {last:.4}");
            }
        }
        Command::Advance => {
            let out = run.advance()?;
            println!(
                "advanced to task {}: known classes {:?}, finetuned on {} exemplar images",
                out.task,
                out.registry.known(),
                out.finetune_images
            );
        }
        Command::Eval { task, plot } => {
            let task = current_task(&run, task)?;
            let report = run.eval(task)?;
            print!("{}", report.to_table());
            if plot {
                for p in run.plot(task)? {
                    println!("wrote {}", p.display());
                }
            }
        }
        Command::Plot { task } => {
            let task = current_task(&run, task)?;
            for p in run.plot(task)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
