use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tailgen_core::dataset::DatasetManifest;
use tailgen_core::pipeline::{emit_mix, Pipeline, PipelineConfig};
use tailgen_core::{Error, Result};

/// Synthesizes and mixes training images for the tail classes of a
/// long-tailed dataset.
#[derive(Parser)]
#[command(name = "tailgen", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start a new run in an empty output directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-kind backend override, e.g. `generate_image=http`. Repeatable.
        #[arg(long = "backend", value_name = "KIND=mock|http")]
        backends: Vec<String>,
    },
    /// Continue an interrupted run; a finished run just reprints its summary.
    Resume {
        #[arg(long)]
        out: PathBuf,
    },
    /// Write an extra mixed batch from a run's accepted pool.
    EmitMix {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        num: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Print split statistics for a manifest.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run {
            config,
            manifest,
            out,
            backends,
        } => {
            let mut cfg = PipelineConfig::load(&config)?;
            for spec in &backends {
                cfg.set_backend(spec)?;
            }
            let summary = Pipeline::new(cfg, out)?.run(&manifest)?;
            print!("{}", summary.render());
        }
        Command::Resume { out } => {
            let summary = Pipeline::open(out)?.resume()?;
            print!("{}", summary.render());
        }
        Command::EmitMix { out, num, seed } => {
            let dir = emit_mix(&out, num, seed)?;
            println!("wrote {num} samples to {}", dir.display());
        }
        Command::Stats { manifest } => {
            let file = std::fs::File::open(&manifest).map_err(|e| Error::io(&manifest, e))?;
            let name = manifest
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let m = DatasetManifest::ingest(name, std::io::BufReader::new(file))?;
            let s = m.split_stats();
            println!("classes\t{}", m.num_classes());
            println!("many\t{}", s.many_count);
            println!("medium\t{}", s.medium_count);
            println!("few\t{}", s.few_count);
            println!("imbalance_factor\t{}", s.imbalance_factor);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
