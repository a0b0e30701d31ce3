//! `pcapsim`: run scenarios, list the bundled ones, or run the acceptance
//! checks.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use pcapsim_core::scenario::{self, Scenario, BUNDLED};
use pcapsim_core::verify;

#[derive(Parser)]
#[command(name = "pcapsim", version, about = "Consistency/latency SLA simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file, or a bundled scenario by name.
    Run {
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: out/<scenario name>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List bundled scenarios.
    ListScenarios,
    /// Run the acceptance checks.
    Verify {
        /// Only these criteria (by number).
        #[arg(long = "only", value_delimiter = ',')]
        only: Vec<u8>,
    },
}

fn load(spec: &str) -> Result<Scenario> {
    let path = Path::new(spec);
    if path.exists() {
        return Scenario::load(path).with_context(|| format!("loading {spec}"));
    }
    scenario::bundled(spec).with_context(|| format!("{spec} is neither a file nor a bundled scenario"))
}

fn run(spec: &str, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let s = load(spec)?;
    let dir = out.unwrap_or_else(|| PathBuf::from("out").join(&s.name));
    let output = scenario::run_scenario(&s, seed).with_context(|| format!("running {}", s.name))?;
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    output.write_to(&dir).with_context(|| format!("writing to {}", dir.display()))?;
    print!("{}", output.files.get("summary.csv").map_or("", |s| s.as_str()));
    eprintln!("wrote {} files to {}", output.files.len(), dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { scenario, seed, out } => run(&scenario, seed, out),
        Command::ListScenarios => {
            for (name, text) in BUNDLED {
                let desc = Scenario::from_toml(text).map(|s| s.description).unwrap_or_default();
                println!("{name:<30} {desc}");
            }
            Ok(())
        }
        Command::Verify { only } => {
            let results: Vec<_> = if only.is_empty() {
                verify::run_all()
            } else {
                only.iter().filter_map(|&id| verify::run_criterion(id)).collect()
            };
            for r in &results {
                println!("{r}");
            }
            if results.iter().all(|r| r.passed) && !results.is_empty() {
                Ok(())
            } else {
                Err(anyhow::anyhow!("some acceptance criteria failed"))
            }
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
