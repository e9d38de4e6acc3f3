use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use diffinfo_cli::{experiments, CliError, ExperimentConfig, Manifest};

#[derive(Parser)]
#[command(name = "diffinfo", version, about = "Information-flow experiments on diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write its outputs and manifest.
    Run {
        config: PathBuf,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; 1 runs everything serially.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Parse and check a config without running it.
    Validate { config: PathBuf },
    /// Verify a manifest's output hashes and print its summary.
    Report { manifest: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run { config, seed, out, threads } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            if let Some(n) = threads {
                if n == 0 {
                    return Err(CliError::Config("`--threads` must be at least 1".into()));
                }
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .map_err(|e| CliError::Config(format!("`--threads`: {e}")))?;
            }
            let manifest = experiments::run(&cfg)?;
            println!(
                "{}: wrote {} outputs to {}",
                cfg.experiment.name(),
                manifest.outputs.len(),
                cfg.out_dir.display()
            );
            Ok(())
        }
        Command::Validate { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            cfg.validate()?;
            println!("{}: ok ({})", config.display(), cfg.experiment.name());
            Ok(())
        }
        Command::Report { manifest } => {
            let m = Manifest::load(&manifest)?;
            let dir = manifest.parent().unwrap_or(Path::new("."));
            let bad = m.verify(dir);
            println!("{} {} / {}", m.tool, m.version, m.config.experiment.name());
            println!("{}", serde_json::to_string_pretty(&m.summary)?);
            if bad.is_empty() {
                println!("{} outputs verified", m.outputs.len());
                Ok(())
            } else {
                let list: Vec<String> = bad.iter().map(|p| p.display().to_string()).collect();
                Err(CliError::Manifest(format!("changed or missing: {}", list.join(", "))))
            }
        }
    }
}
