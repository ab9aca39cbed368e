use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sqil_core::checkpoint::read_checkpoint;
use sqil_core::envs::{self, GridNav};
use sqil_core::harness::{self, Column, ExperimentSpec, IdentitySizes, Variant};
use sqil_core::replay::{read_demos, write_demos};
use sqil_core::rng::seeded;
use sqil_core::trainers::TrainConfig;
use sqil_core::{Error, Result};

/// Soft Q imitation learning, behavioral cloning and regularized BC on
/// stochastic gridworlds.
#[derive(Parser)]
#[command(name = "sqil", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct ScenarioArgs {
    /// Scenario file (TOML).
    #[arg(long, value_name = "PATH")]
    scenario: Option<PathBuf>,
    /// Bundled scenario: shifted-start or matched-start.
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
}

impl ScenarioArgs {
    fn load(&self) -> Result<GridNav> {
        match (&self.scenario, &self.preset) {
            (Some(path), _) => envs::load_scenario(path),
            (None, Some(name)) => envs::preset(name),
            (None, None) => unreachable!("clap requires one of --scenario / --preset"),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Solve the expert and record demonstration rollouts from the demo start.
    GenDemos {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Number of rollouts.
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Discount used to solve for the expert.
        #[arg(long, default_value_t = harness::DEFAULT_EXPERT_GAMMA)]
        expert_gamma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Demonstration file to write.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Train one imitation learner on a demonstration file.
    Train {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Demonstration file written by gen-demos.
        #[arg(long, value_name = "FILE")]
        demos: PathBuf,
        /// Training config (TOML). Defaults to the tuned config of the bundled experiments.
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        /// sqil, bc, rbc, lambda0, gamma0 or uniform; overrides the config.
        #[arg(long)]
        algorithm: Option<String>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = harness::DEFAULT_EVAL_EPISODES)]
        eval_episodes: usize,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint's greedy policy from both start distributions.
    Eval {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = harness::DEFAULT_EVAL_EPISODES)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run an algorithm x seed grid (by default the shift experiment with all ablations).
    Ablate {
        /// Experiment spec (TOML).
        #[arg(long, value_name = "FILE", conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Bundled experiment: shifted-start or matched-start.
        #[arg(long, value_name = "NAME")]
        preset: Option<String>,
        /// Comma-separated seeds; overrides the spec.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Output directory; overrides the spec.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Check the RBC / SQIL gradient identity on random tiny instances.
    VerifyIdentity {
        /// Number of random instances.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
    },
    /// Recompute and print the summary table of an experiment directory.
    Report {
        #[arg(value_name = "DIR")]
        dir: PathBuf,
    },
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let file = File::create(path).map_err(|e| Error::File {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(BufWriter::new(file))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::File {
            path: path.to_path_buf(),
            source: e,
        })
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenDemos {
            scenario,
            count,
            expert_gamma,
            seed,
            out,
        } => {
            let env = scenario.load()?;
            let demos = harness::generate_demonstrations(&env, expert_gamma, count, &mut seeded(seed))?;
            write_demos(&demos.rollouts, create(&out)?)?;
            println!(
                "wrote {count} rollouts to {} (expert success {:.2}, return {:.2})",
                out.display(),
                demos.metrics.success_rate,
                demos.metrics.avg_return
            );
        }
        Command::Train {
            scenario,
            demos,
            config,
            algorithm,
            seed,
            eval_episodes,
            out,
        } => {
            let env = scenario.load()?;
            let rollouts = read_demos(open(&demos)?)?;
            let mut cfg = match config {
                Some(path) => {
                    let text = fs::read_to_string(&path).map_err(|e| Error::File { path, source: e })?;
                    TrainConfig::from_toml(&text)?
                }
                None => harness::experiment_preset("shifted-start")?.train,
            };
            if let Some(name) = algorithm {
                cfg = Variant::parse(&name)?.config(&cfg)?;
            }
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let outcome = harness::train_and_evaluate(&env, &rollouts, &cfg, eval_episodes)?;
            let hash = harness::write_run(&out, &env, &cfg, &outcome)?;
            println!(
                "{} steps ({}), config {}",
                outcome.report.steps(),
                outcome.report.halt,
                &hash[..12]
            );
            for column in Column::BOTH {
                if let Some(m) = outcome.best(column) {
                    println!("best {:<10} success {:.2}  return {:.2}", column.name(), m.success_rate, m.avg_return);
                }
            }
        }
        Command::Eval {
            scenario,
            checkpoint,
            episodes,
            seed,
        } => {
            let env = scenario.load()?;
            let q = read_checkpoint(open(&checkpoint)?)?;
            let (demo, train) = harness::evaluate_columns(&q, &env, episodes, seed)?;
            for (column, m) in Column::BOTH.into_iter().zip([demo, train]) {
                println!("{:<10} success {:.2}  return {:.2}  ({} episodes)", column.name(), m.success_rate, m.avg_return, m.episodes);
            }
        }
        Command::Ablate {
            config,
            preset,
            seeds,
            out,
        } => {
            let mut spec = match config {
                Some(path) => ExperimentSpec::load(path)?,
                None => harness::experiment_preset(preset.as_deref().unwrap_or("shifted-start"))?,
            };
            if !seeds.is_empty() {
                spec.seeds = seeds;
            }
            let out = out
                .or_else(|| spec.output_dir.clone())
                .ok_or_else(|| Error::Config("no output directory (use --out)".into()))?;
            let report = harness::run_experiment(&spec, &out)?;
            print!("{}", harness::summary_text(&report.summary));
            let failed: Vec<_> = report.runs.iter().filter(|r| r.outcome.is_err()).collect();
            for r in &failed {
                eprintln!("run {} seed {} failed: {}", r.method, r.seed, r.outcome.as_ref().unwrap_err());
            }
            println!("report written to {}", out.display());
        }
        Command::VerifyIdentity { seeds, first_seed } => {
            let mut failures = 0;
            for seed in first_seed..first_seed + seeds {
                match harness::verify_gradient_identity(seed, IdentitySizes::default()) {
                    Ok(r) => println!(
                        "seed {seed}: ok (analytic {:.1e}, finite-difference {:.1e}, {} params)",
                        r.analytic_discrepancy, r.fd_discrepancy, r.param_count
                    ),
                    Err(e) => {
                        failures += 1;
                        println!("seed {seed}: FAILED {e}");
                    }
                }
            }
            if failures > 0 {
                return Err(Error::Verification(format!("{failures} of {seeds} instances failed")));
            }
        }
        Command::Report { dir } => {
            let summary = harness::recompute_summary(&dir)?;
            print!("{}", harness::summary_text(&summary));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
