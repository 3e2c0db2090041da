use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cpl_harness::archive::ArchiveFormat;
use cpl_harness::config::RunConfig;
use cpl_harness::experiment::{evaluate_run, prepare, run_experiment, run_sweep, EvalSplit, Outcome, RunOptions};
use cpl_harness::heatmap::{heatmap_rows, write_heatmap};
use cpl_harness::synthetic::{gen_synthetic, SyntheticSpec};
use cpl_harness::{HarnessError, Result};

#[derive(Parser)]
#[command(name = "cpl", version, about = "Counterfactual prompt learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark archive and its sidecars.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = ArchiveFormat::Binary)]
        format: ArchiveFormat,
    },
    /// Train and evaluate one run (or a sweep) into a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the run directory's checkpoint.
        #[arg(long)]
        resume: bool,
        /// Override a config field, e.g. `--set sampler=random`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Run once per value into `<out>/<key>=<value>`, e.g. `--sweep lambda=0,0.5,1,2`.
        #[arg(long, value_name = "KEY=V1,V2,..")]
        sweep: Option<String>,
    },
    /// Re-evaluate a finished run and print its report.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum)]
        split: Option<EvalSplit>,
    },
    /// Write the BERTScore matrix over the training split's prompts.
    Simmat {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Write per-dimension gate weights of a run as CSV.
    Heatmap {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_text(path: &std::path::Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out, format } => {
            let text = std::fs::read_to_string(&spec)
                .map_err(|e| HarnessError::Config(format!("{}: {e}", spec.display())))?;
            let spec: SyntheticSpec =
                serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("synthetic spec: {e}")))?;
            let data = gen_synthetic(&spec)?;
            data.dataset.write(&out, format)?;
            eprintln!(
                "wrote {} records of dim {} to {}",
                data.dataset.archive.records.len(),
                data.dataset.archive.dim,
                out.display()
            );
        }
        Command::Train {
            config,
            out,
            resume,
            overrides,
            sweep,
        } => match sweep {
            Some(sweep) => {
                let (key, values) = sweep
                    .split_once('=')
                    .ok_or_else(|| HarnessError::Config(format!("sweep {sweep:?} is not key=v1,v2")))?;
                let values: Vec<String> = values.split(',').map(str::to_string).collect();
                for (dir, report) in run_sweep(&config, &overrides, key, &values, &out)? {
                    println!("{}\t{}", dir.display(), serde_json::to_string(&report).expect("report json"));
                }
            }
            None => {
                let config = RunConfig::from_file(&config, &overrides)?;
                let options = RunOptions {
                    resume,
                    stop_after: None,
                };
                match run_experiment(&config, &out, &options)? {
                    Outcome::Completed(report) => {
                        println!("{}", serde_json::to_string_pretty(&report).expect("report json"))
                    }
                    Outcome::Stopped { epoch } => eprintln!("stopped after epoch {epoch}"),
                }
            }
        },
        Command::Eval { run, split } => {
            let report = match split {
                Some(s) => evaluate_run(&run, &[s])?,
                None => {
                    let config = RunConfig::from_file(&run.join(cpl_harness::experiment::CONFIG_FILE), &[])?;
                    evaluate_run(&run, EvalSplit::defaults(config.task))?
                }
            };
            println!("{}", serde_json::to_string_pretty(&report).expect("report json"));
        }
        Command::Simmat { config, out, overrides } => {
            let config = RunConfig::from_file(&config, &overrides)?;
            let prep = prepare(&config)?;
            write_text(&out, &prep.similarity_matrix()?.to_csv())?;
        }
        Command::Heatmap { run, out } => {
            let (rows, warning) = heatmap_rows(&run)?;
            if let Some(w) = warning {
                eprintln!("warning: {w}");
            }
            write_heatmap(&rows, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
