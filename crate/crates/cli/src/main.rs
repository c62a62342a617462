use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;
use theftwatch::config::PipelineConfig;
use theftwatch::pipeline::{run_pipeline, Stage};
use theftwatch::synth::{generate, SynthConfig};

#[derive(Parser)]
#[command(name = "theftwatch", version, about = "Hybrid electricity-theft detection pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Resume from this stage, reusing trained models of earlier stages.
        #[arg(long)]
        stage: Option<Stage>,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic multi-state consumption CSV.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        states: usize,
        #[arg(long, default_value_t = 500)]
        records: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::Run { config, stage, out } => {
            let mut cfg = match PipelineConfig::load(&config) {
                Ok(c) => c,
                Err(e) => {
                    error!("{e}");
                    return ExitCode::from(1);
                }
            };
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            match run_pipeline(&cfg, stage) {
                Ok(outcome) => {
                    let m = &outcome.manifest;
                    println!("wrote {}", outcome.output_dir.display());
                    println!("threshold {:.6}", m.threshold.tau);
                    for (model, h) in &m.metrics {
                        println!(
                            "{model:<7} precision {:.3} recall {:.3} f1 {:.3}",
                            h.precision, h.recall, h.f1
                        );
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    error!("{e}");
                    ExitCode::from(e.exit_code() as u8)
                }
            }
        }
        Command::Generate {
            out,
            states,
            records,
            seed,
        } => {
            let d = generate(&SynthConfig {
                states,
                records_per_state: records,
                seed,
                ..SynthConfig::default()
            });
            match d.write_csv(&out, ',') {
                Ok(()) => {
                    println!("wrote {} records to {}", d.len(), out.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    error!("{e}");
                    ExitCode::from(2)
                }
            }
        }
    }
}
