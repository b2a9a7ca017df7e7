use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use segresmamba::config::{ConfigDocument, EmissionsConfig};
use segresmamba::cost::render_text;
use segresmamba::{pipeline, Error};

/// Exit code for usage, configuration and file-format errors.
const EXIT_CONFIG: u8 = 2;
/// Exit code for NaN/Inf during training.
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(
    name = "segresmamba",
    version,
    about = "3D segmentation with convolution/Mamba blocks: cost analysis, training and inference"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Static parameter / MAC / memory / CO2 report.
    Analyze {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
        /// key=value pairs: preset=azure|google|amazon, hours=H, power_kw=P, intensity=I
        #[arg(long, num_args = 1.., value_delimiter = ' ')]
        emissions: Vec<String>,
    },
    /// Train on the synthetic dataset; writes history and a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Overrides train.seed (initialization, shuffling, augmentation).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Argmax label volume for an image volume.
    Infer {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic dataset as image/label volume files.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "data")]
        out: PathBuf,
        /// Overrides data.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load(path: Option<&Path>) -> segresmamba::Result<ConfigDocument> {
    match path {
        Some(p) => ConfigDocument::load(p),
        None => Ok(ConfigDocument::default()),
    }
}

fn run(cli: Cli) -> segresmamba::Result<()> {
    match cli.command {
        Command::Analyze {
            config,
            out,
            emissions,
        } => {
            let doc = load(config.as_deref())?;
            let spec = if emissions.is_empty() {
                None
            } else {
                Some(EmissionsConfig::from_pairs(emissions.iter().map(String::as_str))?.to_spec()?)
            };
            let result = pipeline::analyze(&doc, spec)?;
            pipeline::write_analysis(&result, &out)?;
            print!("{}", render_text(&result.report));
            for c in &result.reference {
                println!(
                    "{:<20} computed {:>12.4}  reference {:>8.2}  ratio {:.3}",
                    c.quantity, c.computed, c.reference, c.ratio
                );
            }
        }
        Command::Train { config, out, seed } => {
            let mut doc = load(config.as_deref())?;
            if let Some(s) = seed {
                doc.train.seed = s;
            }
            let (_, history) = pipeline::train(&doc, &out)?;
            match history.final_eval() {
                Some(e) => println!(
                    "trained {} steps; final mean dice {:.4} {:?}",
                    history.steps.len(),
                    e.mean_dice,
                    e.per_class
                ),
                None => println!("trained 0 steps"),
            }
        }
        Command::Infer {
            config,
            checkpoint,
            input,
            out,
        } => {
            let doc = load(config.as_deref())?;
            let labels = pipeline::infer(&doc, &checkpoint, &input, &out)?;
            info!("wrote {} labels to {}", labels.numel(), out.display());
        }
        Command::Synth { config, out, seed } => {
            let mut doc = load(config.as_deref())?;
            if let Some(s) = seed {
                doc.data.seed = s;
            }
            let n = pipeline::synth(&doc, &out)?;
            println!("wrote {n} samples to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SRM_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Diverged { .. }) | Err(e @ Error::NonFinite { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_NUMERIC)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}
