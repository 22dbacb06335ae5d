use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mpe_core::envs::{build_gridworld, GridworldSpec, StartDistribution};
use mpe_core::{ExactDp, FormulaFault};
use mpe_harness::compare::{run_compare, write_bundle};
use mpe_harness::config::ExperimentConfig;
use mpe_harness::synthesize::cmd_synthesize;
use mpe_harness::table::{cmd_table, render_tables};
use mpe_harness::verify::{cmd_verify, Suite};
use mpe_harness::HarnessError;

#[derive(Parser)]
#[command(name = "mpe", version, about = "Multi-policy evaluation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit values from offline data and write the tailored behavior policy,
    /// similarity report and coverage diagnostics.
    Synthesize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit with code 4 if the offline data leaves any target action uncovered.
        #[arg(long)]
        strict_coverage: bool,
    },
    /// Run the estimator comparison and write curves, tables and a plot.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run verification suites; exits with code 3 on any failure.
    Verify {
        #[arg(value_enum, default_value = "all")]
        suite: SuiteArg,
        #[arg(long, value_enum, default_value = "none", hide = true)]
        mutate: FaultArg,
    },
    /// Print the tables of a finished comparison.
    Table {
        /// Directory holding bundle.json.
        dir: PathBuf,
    },
    /// Write a gridworld MDP as JSON.
    GridworldGen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        m: usize,
        #[arg(long, default_value_t = 0.9)]
        slip: f64,
        #[arg(long)]
        seed: Option<u64>,
        /// Start every episode in this cell instead of uniformly.
        #[arg(long)]
        start_cell: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Oracles,
    Optimality,
    Conditions,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    None,
    FlipRHatSign,
    DropNu,
}

fn load(
    config: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<(ExperimentConfig, PathBuf), HarnessError> {
    let mut c = ExperimentConfig::load(config)?;
    if let Some(seed) = seed {
        c.seed = seed;
    }
    let dir = out
        .or_else(|| c.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    c.out = Some(dir.clone());
    Ok((c, dir))
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Synthesize {
            config,
            seed,
            out,
            strict_coverage,
        } => {
            let (config, dir) = load(&config, seed, out)?;
            let result = cmd_synthesize(&config, &dir, strict_coverage)?;
            let report = &result.similarity;
            println!(
                "wrote behavior.json, similarity_report.json, coverage.json to {}",
                dir.display()
            );
            println!(
                "condition holds at {}/{} (k, t, s) cells; {} coverage gap(s)",
                report.variance_reduced.iter().filter(|&&c| c).count(),
                report.variance_reduced.len(),
                result.coverage.gaps.len()
            );
        }
        Command::Compare { config, seed, out } => {
            let (config, dir) = load(&config, seed, out)?;
            let (bundle, reports) = run_compare(&config)?;
            write_bundle(&bundle, &reports, &dir)?;
            print!("{}", render_tables(&bundle));
            println!("results in {}", dir.display());
        }
        Command::Verify { suite, mutate } => {
            let suite = match suite {
                SuiteArg::Oracles => Suite::Oracles,
                SuiteArg::Optimality => Suite::Optimality,
                SuiteArg::Conditions => Suite::Conditions,
                SuiteArg::All => Suite::All,
            };
            let fault = match mutate {
                FaultArg::None => FormulaFault::None,
                FaultArg::FlipRHatSign => FormulaFault::FlipRHatSign,
                FaultArg::DropNu => FormulaFault::DropNu,
            };
            let report = cmd_verify(suite, ExactDp::with_fault(fault));
            print!("{}", report.render());
            if !report.passed() {
                let failed = report.checks.iter().filter(|c| !c.passed).count();
                return Err(HarnessError::Verify(format!("{failed} check(s) failed")));
            }
        }
        Command::Table { dir } => print!("{}", cmd_table(&dir)?),
        Command::GridworldGen {
            config,
            m,
            slip,
            seed,
            start_cell,
            out,
        } => {
            let spec = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| {
                        HarnessError::Config(format!("cannot read {}: {e}", path.display()))
                    })?;
                    let mut spec: GridworldSpec =
                        toml::from_str(&text).map_err(|e| HarnessError::Config(e.to_string()))?;
                    if let Some(seed) = seed {
                        spec.reward_seed = seed;
                    }
                    spec
                }
                None => GridworldSpec {
                    m,
                    slip,
                    reward_seed: seed.unwrap_or(0),
                    start: start_cell.map_or(StartDistribution::Uniform, StartDistribution::Cell),
                },
            };
            spec.validate()
                .map_err(|e| HarnessError::Config(e.to_string()))?;
            let mdp = build_gridworld(&spec)?;
            let dir = out.unwrap_or_else(|| PathBuf::from("out"));
            std::fs::create_dir_all(&dir)?;
            let path = dir.join("mdp.json");
            mdp.write_json(&path)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
