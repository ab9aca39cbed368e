//! Expert demonstrations, evaluation, the algorithm × seed experiment grid
//! and the RBC/SQIL gradient identity check.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::approx::{central_differences, max_relative_error, Network};
use crate::checkpoint::write_checkpoint;
use crate::envs::{
    self, GridNav, GridNavConfig, InitDist, Observation, Rollout, State, Termination, Transition,
    ACTION_COUNT,
};
use crate::error::{Error, Result};
use crate::replay::write_demos;
use crate::rng::{seeded, substream, RandomStream};
use crate::softq::{
    argmax, soft_value_iteration, GradientMode, Objective, SoftQFunction, StateKey,
    TabularQ, SVI_TOLERANCE,
};
use crate::trainers::{make_ablation_config, train_with_eval, Ablation, Algorithm, TrainConfig, TrainReport};

/// Discount used to solve for the expert when none is configured.
pub const DEFAULT_EXPERT_GAMMA: f64 = 0.95;
pub const DEFAULT_EVAL_EPISODES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub success_rate: f64,
    pub avg_return: f64,
    pub episodes: usize,
}

/// Undiscounted true return of one episode.
pub fn episode_return(env: &GridNav, rollout: &Rollout) -> f64 {
    rollout.transitions.iter().map(|t| env.reward(t.next_state_id)).sum()
}

/// Run `episodes` episodes of `policy` from `init`.
pub fn evaluate_policy<P: envs::Policy + ?Sized>(
    env: &GridNav,
    policy: &P,
    init: &InitDist,
    episodes: usize,
    rng: &mut RandomStream,
) -> Result<Metrics> {
    if episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let mut successes = 0;
    let mut total = 0.0;
    for _ in 0..episodes {
        let rollout = env.rollout(policy, init, rng)?;
        if rollout.terminated_by == Termination::Goal {
            successes += 1;
        }
        total += episode_return(env, &rollout);
    }
    Ok(Metrics {
        success_rate: successes as f64 / episodes as f64,
        avg_return: total / episodes as f64,
        episodes,
    })
}

fn one_hot(action: usize) -> Vec<f64> {
    let mut probs = vec![0.0; ACTION_COUNT];
    probs[action] = 1.0;
    probs
}

/// Deterministic argmax policy of `q` (lowest action index on ties).
pub fn greedy_policy(q: &SoftQFunction) -> impl Fn(&State, &Observation) -> Vec<f64> + '_ {
    move |s: &State, o: &Observation| {
        let row = q.q_row(StateKey::new(s.cell, o)).expect("Q accepts environment observations");
        one_hot(argmax(&row))
    }
}

/// Stochastic Boltzmann policy of `q`.
pub fn boltzmann(q: &SoftQFunction) -> impl Fn(&State, &Observation) -> Vec<f64> + '_ {
    move |s: &State, o: &Observation| {
        q.policy(StateKey::new(s.cell, o))
            .expect("Q accepts environment observations")
            .probs
    }
}

pub fn uniform_policy(_: &State, _: &Observation) -> Vec<f64> {
    vec![1.0 / ACTION_COUNT as f64; ACTION_COUNT]
}

/// Success rate and return of the deterministic argmax policy of `q`.
pub fn evaluate(
    q: &SoftQFunction,
    env: &GridNav,
    init: &InitDist,
    episodes: usize,
    rng: &mut RandomStream,
) -> Result<Metrics> {
    evaluate_policy(env, &greedy_policy(q), init, episodes, rng)
}

/// Q values of every cell as a table (network outputs are evaluated per cell).
pub fn q_table(env: &GridNav, q: &SoftQFunction) -> Result<TabularQ> {
    let rows = (0..env.cell_count())
        .map(|cell| q.q_row(StateKey::new(cell, &env.observe_cell(cell))))
        .collect::<Result<Vec<_>>>()?;
    TabularQ::from_rows(rows)
}

pub struct Demonstrations {
    pub rollouts: Vec<Rollout>,
    /// Soft-optimal Q for the true reward.
    pub expert: SoftQFunction,
    /// Success of the stochastic expert over the recorded rollouts.
    pub metrics: Metrics,
}

/// Solve the expert by soft value iteration on the true reward and record
/// `n` rollouts of its Boltzmann policy from `demo_init`.
pub fn generate_demonstrations(
    env: &GridNav,
    gamma: f64,
    n: usize,
    rng: &mut RandomStream,
) -> Result<Demonstrations> {
    if n == 0 {
        return Err(Error::Config("demo count must be at least 1".into()));
    }
    let expert = soft_value_iteration(env, gamma, SVI_TOLERANCE)?.into_q();
    let init = &env.config().demo_init;
    let rollouts = {
        let policy = boltzmann(&expert);
        (0..n)
            .map(|_| env.rollout(&policy, init, rng))
            .collect::<Result<Vec<_>>>()?
    };
    let successes = rollouts
        .iter()
        .filter(|r| r.terminated_by == Termination::Goal)
        .count();
    let total: f64 = rollouts.iter().map(|r| episode_return(env, r)).sum();
    let metrics = Metrics {
        success_rate: successes as f64 / n as f64,
        avg_return: total / n as f64,
        episodes: n,
    };
    Ok(Demonstrations {
        rollouts,
        expert,
        metrics,
    })
}

/// One method in the experiment grid: a base algorithm or a SQIL ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Sqil,
    Bc,
    Rbc,
    Lambda0,
    Gamma0,
    Uniform,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Sqil => "sqil",
            Variant::Bc => "bc",
            Variant::Rbc => "rbc",
            Variant::Lambda0 => "lambda0",
            Variant::Gamma0 => "gamma0",
            Variant::Uniform => "uniform",
        }
    }

    pub fn parse(name: &str) -> Result<Variant> {
        match name {
            "sqil" => Ok(Variant::Sqil),
            "bc" => Ok(Variant::Bc),
            "rbc" => Ok(Variant::Rbc),
            "lambda0" => Ok(Variant::Lambda0),
            "gamma0" => Ok(Variant::Gamma0),
            "uniform" => Ok(Variant::Uniform),
            other => Err(Error::Config(format!(
                "unknown algorithm {other:?} (expected sqil, bc, rbc, lambda0, gamma0 or uniform)"
            ))),
        }
    }

    /// Training config for this variant, derived from `base`.
    pub fn config(self, base: &TrainConfig) -> Result<TrainConfig> {
        let sqil = TrainConfig {
            algorithm: Algorithm::Sqil,
            ..base.clone()
        };
        match self {
            Variant::Sqil => Ok(sqil),
            Variant::Bc => Ok(TrainConfig {
                algorithm: Algorithm::Bc,
                ..base.clone()
            }),
            Variant::Rbc => make_ablation_config(&sqil, Ablation::Rbc),
            Variant::Lambda0 => make_ablation_config(&sqil, Ablation::Lambda0),
            Variant::Gamma0 => make_ablation_config(&sqil, Ablation::Gamma0),
            Variant::Uniform => make_ablation_config(&sqil, Ablation::Uniform),
        }
    }
}

/// Resolve a scenario reference: a preset name or a path to a TOML file.
pub fn resolve_scenario(reference: &str) -> Result<GridNav> {
    if envs::PRESET_NAMES.contains(&reference) {
        envs::preset(reference)
    } else {
        envs::load_scenario(reference)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Preset name or scenario file path.
    pub scenario: String,
    pub algorithms: Vec<Variant>,
    pub demo_count: usize,
    pub seeds: Vec<u64>,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    #[serde(default = "default_expert_gamma")]
    pub expert_gamma: f64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_eval_episodes() -> usize {
    DEFAULT_EVAL_EPISODES
}

fn default_expert_gamma() -> f64 {
    DEFAULT_EXPERT_GAMMA
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("an experiment needs at least one seed".into()));
        }
        if self.algorithms.is_empty() {
            return Err(Error::Config("an experiment needs at least one algorithm".into()));
        }
        if self.demo_count == 0 {
            return Err(Error::Config("demo_count must be at least 1".into()));
        }
        if self.eval_episodes == 0 {
            return Err(Error::Config("eval_episodes must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.expert_gamma) {
            return Err(Error::Config(format!("expert_gamma {} outside [0, 1)", self.expert_gamma)));
        }
        self.train.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(text).map_err(|e| Error::parse("experiment spec", e))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment spec serializes")
    }
}

/// Names of the bundled experiment specs.
pub const EXPERIMENT_PRESETS: [&str; 2] = ["shifted-start", "matched-start"];

/// A bundled experiment spec: the shift or no-shift grid on the matching scenario preset.
pub fn experiment_preset(name: &str) -> Result<ExperimentSpec> {
    let text = match name {
        "shifted-start" => include_str!("../experiments/shifted-start.toml"),
        "matched-start" => include_str!("../experiments/matched-start.toml"),
        other => {
            return Err(Error::Config(format!(
                "unknown experiment preset {other:?} (expected one of {EXPERIMENT_PRESETS:?})"
            )))
        }
    };
    ExperimentSpec::from_toml(text)
}

/// Which start distribution an evaluation uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Column {
    DemoInit,
    TrainInit,
}

impl Column {
    pub const BOTH: [Column; 2] = [Column::DemoInit, Column::TrainInit];

    pub fn name(self) -> &'static str {
        match self {
            Column::DemoInit => "demo_init",
            Column::TrainInit => "train_init",
        }
    }

    pub fn init(self, env: &GridNav) -> &InitDist {
        match self {
            Column::DemoInit => &env.config().demo_init,
            Column::TrainInit => &env.config().train_init,
        }
    }
}

// Stream indices derived from each seed.
pub const DEMO_STREAM: u64 = 0;
pub const TRAIN_STREAM: u64 = 1;
pub const EVAL_STREAM: u64 = 2;

/// Evaluation of one checkpoint on both start distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub demo_init: Metrics,
    pub train_init: Metrics,
}

pub struct RunOutcome {
    pub report: TrainReport,
    pub checkpoints: Vec<Checkpoint>,
}

impl RunOutcome {
    /// Best success rate over checkpoints for `column`.
    pub fn best(&self, column: Column) -> Option<Metrics> {
        self.checkpoints
            .iter()
            .map(|c| match column {
                Column::DemoInit => c.demo_init,
                Column::TrainInit => c.train_init,
            })
            .fold(None, |best: Option<Metrics>, m| match best {
                Some(b) if b.success_rate >= m.success_rate => Some(b),
                _ => Some(m),
            })
    }
}

/// Evaluate `q` on both columns. Every call uses the same evaluation stream,
/// so checkpoints and methods are compared on common random numbers.
pub fn evaluate_columns(
    q: &SoftQFunction,
    env: &GridNav,
    episodes: usize,
    eval_seed: u64,
) -> Result<(Metrics, Metrics)> {
    let demo = evaluate(q, env, Column::DemoInit.init(env), episodes, &mut substream(eval_seed, EVAL_STREAM))?;
    let train = evaluate(q, env, Column::TrainInit.init(env), episodes, &mut substream(eval_seed, EVAL_STREAM))?;
    Ok((demo, train))
}

/// Train with `cfg` and evaluate on both start distributions every
/// `cfg.eval_every` steps.
pub fn train_and_evaluate(
    env: &GridNav,
    demos: &[Rollout],
    cfg: &TrainConfig,
    eval_episodes: usize,
) -> Result<RunOutcome> {
    let mut checkpoints = Vec::new();
    let mut rng = substream(cfg.seed, TRAIN_STREAM);
    let report = train_with_eval(env, demos, cfg, &mut rng, |step, q| {
        let (demo_init, train_init) = evaluate_columns(q, env, eval_episodes, cfg.seed)?;
        checkpoints.push(Checkpoint {
            step,
            demo_init,
            train_init,
        });
        Ok(vec![demo_init.success_rate, train_init.success_rate])
    })?;
    Ok(RunOutcome { report, checkpoints })
}

/// Per-step curve: `step,loss,demo_init_success,demo_init_return,train_init_success,train_init_return`,
/// with the evaluation fields empty between checkpoints.
pub fn write_curve_csv<W: std::io::Write>(outcome: &RunOutcome, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "step",
        "loss",
        "demo_init_success",
        "demo_init_return",
        "train_init_success",
        "train_init_return",
    ])?;
    let mut checkpoints = outcome.checkpoints.iter().peekable();
    for (i, loss) in outcome.report.losses.iter().enumerate() {
        let step = i + 1;
        let mut record = vec![step.to_string(), loss.to_string()];
        match checkpoints.peek() {
            Some(c) if c.step == step => {
                record.extend([
                    c.demo_init.success_rate.to_string(),
                    c.demo_init.avg_return.to_string(),
                    c.train_init.success_rate.to_string(),
                    c.train_init.avg_return.to_string(),
                ]);
                checkpoints.next();
            }
            _ => record.extend([String::new(), String::new(), String::new(), String::new()]),
        }
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct TrainSnapshot<'a> {
    train: &'a TrainConfig,
    scenario: &'a GridNavConfig,
}

#[derive(Serialize)]
struct TrainManifest<'a> {
    format: &'static str,
    tool_version: &'static str,
    config_hash: &'a str,
    seed: u64,
    steps: usize,
    halt: String,
}

/// Write the outputs of a single training run to `out_dir`: `config.toml`,
/// `curve.csv`, `q.ckpt`, `q.csv`, `summary.txt` and `manifest.json`.
/// Returns the config hash.
pub fn write_run(out_dir: &Path, env: &GridNav, cfg: &TrainConfig, outcome: &RunOutcome) -> Result<String> {
    fs::create_dir_all(out_dir).map_err(|e| Error::file(out_dir, e))?;
    let snapshot = toml::to_string(&TrainSnapshot {
        train: cfg,
        scenario: env.config(),
    })
    .map_err(|e| Error::parse("config snapshot", e))?;
    let config_hash = hex::encode(Sha256::digest(snapshot.as_bytes()));
    write_file(&out_dir.join("config.toml"), snapshot.as_bytes())?;

    let mut buf = Vec::new();
    write_curve_csv(outcome, &mut buf)?;
    write_file(&out_dir.join("curve.csv"), &buf)?;
    let mut buf = Vec::new();
    write_checkpoint(&outcome.report.q, &mut buf)?;
    write_file(&out_dir.join("q.ckpt"), &buf)?;
    let mut buf = Vec::new();
    q_table(env, &outcome.report.q)?.write_csv(&mut buf)?;
    write_file(&out_dir.join("q.csv"), &buf)?;

    let report = &outcome.report;
    let mut text = format!(
        "steps {}\nhalt {}\nfinal_loss {}\n",
        report.steps(),
        report.halt,
        report.losses.last().copied().unwrap_or(f64::NAN)
    );
    for column in Column::BOTH {
        if let Some(m) = outcome.best(column) {
            let _ = writeln!(
                text,
                "best_{}_success {}\nbest_{}_return {}",
                column.name(),
                m.success_rate,
                column.name(),
                m.avg_return
            );
        }
    }
    write_file(&out_dir.join("summary.txt"), text.as_bytes())?;

    let manifest = TrainManifest {
        format: "sqil-run-manifest v1",
        tool_version: env!("CARGO_PKG_VERSION"),
        config_hash: &config_hash,
        seed: cfg.seed,
        steps: report.steps(),
        halt: report.halt.to_string(),
    };
    let mut json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::parse("manifest", e))?;
    json.push(b'\n');
    write_file(&out_dir.join("manifest.json"), &json)?;
    Ok(config_hash)
}

/// Result of one cell of the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub method: String,
    pub seed: u64,
    /// `Err` carries the training error message; the grid carries on.
    pub outcome: std::result::Result<RunSummary, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub steps: usize,
    pub halt: String,
    pub final_loss: f64,
    pub best_demo_init: Metrics,
    pub best_train_init: Metrics,
}

/// Mean and standard error over seeds of one method in one column.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub column: &'static str,
    pub n: usize,
    pub mean: f64,
    pub stderr: f64,
}

/// Sample mean and standard error of the mean (zero for a single value).
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub struct ExperimentReport {
    pub runs: Vec<RunResult>,
    pub summary: Vec<SummaryRow>,
    pub config_hash: String,
}

impl ExperimentReport {
    pub fn mean(&self, method: &str, column: Column) -> Option<f64> {
        self.summary
            .iter()
            .find(|r| r.method == method && r.column == column.name())
            .map(|r| r.mean)
    }
}

#[derive(Serialize)]
struct Snapshot<'a> {
    experiment: &'a ExperimentSpec,
    scenario: &'a GridNavConfig,
}

#[derive(Serialize)]
struct Manifest<'a> {
    format: &'static str,
    tool_version: &'static str,
    scenario: &'a str,
    config_hash: &'a str,
    seeds: &'a [u64],
    methods: Vec<&'static str>,
    runs: Vec<ManifestRun>,
}

#[derive(Serialize)]
struct ManifestRun {
    method: String,
    seed: u64,
    dir: String,
    status: String,
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::file(path, e))
}

fn run_dir_name(method: &str, seed: u64) -> String {
    format!("{method}-seed{seed}")
}

struct Cell {
    method: Variant,
    seed: u64,
}

struct CellOutput {
    result: RunResult,
    curve: Option<Vec<u8>>,
    checkpoint: Option<Vec<u8>>,
}

fn run_cell(env: &GridNav, spec: &ExperimentSpec, demos: &[Rollout], cell: &Cell) -> CellOutput {
    let attempt = || -> Result<(RunOutcome, Vec<u8>, Vec<u8>)> {
        let cfg = TrainConfig {
            seed: cell.seed,
            ..cell.method.config(&spec.train)?
        };
        let outcome = train_and_evaluate(env, demos, &cfg, spec.eval_episodes)?;
        let mut curve = Vec::new();
        write_curve_csv(&outcome, &mut curve)?;
        let mut checkpoint = Vec::new();
        write_checkpoint(&outcome.report.q, &mut checkpoint)?;
        Ok((outcome, curve, checkpoint))
    };
    let method = cell.method.name().to_string();
    match attempt() {
        Ok((outcome, curve, checkpoint)) => {
            let summary = RunSummary {
                steps: outcome.report.steps(),
                halt: outcome.report.halt.to_string(),
                final_loss: outcome.report.losses.last().copied().unwrap_or(f64::NAN),
                best_demo_init: outcome.best(Column::DemoInit).expect("at least one checkpoint"),
                best_train_init: outcome.best(Column::TrainInit).expect("at least one checkpoint"),
            };
            CellOutput {
                result: RunResult {
                    method,
                    seed: cell.seed,
                    outcome: Ok(summary),
                },
                curve: Some(curve),
                checkpoint: Some(checkpoint),
            }
        }
        Err(e) => CellOutput {
            result: RunResult {
                method,
                seed: cell.seed,
                outcome: Err(e.to_string()),
            },
            curve: None,
            checkpoint: None,
        },
    }
}

#[cfg(feature = "parallel")]
fn run_cells(env: &GridNav, spec: &ExperimentSpec, demos: &[Vec<Rollout>], cells: &[Cell]) -> Vec<CellOutput> {
    use rayon::prelude::*;
    cells
        .par_iter()
        .map(|c| run_cell(env, spec, &demos[seed_index(spec, c.seed)], c))
        .collect()
}

#[cfg(not(feature = "parallel"))]
fn run_cells(env: &GridNav, spec: &ExperimentSpec, demos: &[Vec<Rollout>], cells: &[Cell]) -> Vec<CellOutput> {
    cells
        .iter()
        .map(|c| run_cell(env, spec, &demos[seed_index(spec, c.seed)], c))
        .collect()
}

fn seed_index(spec: &ExperimentSpec, seed: u64) -> usize {
    spec.seeds.iter().position(|&s| s == seed).expect("cell seed comes from the spec")
}

/// Per-seed baselines: the expert's argmax policy and a uniform random policy.
fn baseline_rows(
    env: &GridNav,
    spec: &ExperimentSpec,
    experts: &[SoftQFunction],
) -> Result<Vec<RunResult>> {
    let mut rows = Vec::new();
    for (expert, &seed) in experts.iter().zip(&spec.seeds) {
        let (demo, train) = evaluate_columns(expert, env, spec.eval_episodes, seed)?;
        let mut random = Vec::new();
        for column in Column::BOTH {
            let mut rng = substream(seed, EVAL_STREAM);
            random.push(evaluate_policy(env, &uniform_policy, column.init(env), spec.eval_episodes, &mut rng)?);
        }
        for (method, d, t) in [("expert", demo, train), ("random", random[0], random[1])] {
            rows.push(RunResult {
                method: method.into(),
                seed,
                outcome: Ok(RunSummary {
                    steps: 0,
                    halt: "-".into(),
                    final_loss: f64::NAN,
                    best_demo_init: d,
                    best_train_init: t,
                }),
            });
        }
    }
    Ok(rows)
}

/// Mean ± standard error over seeds per method and column. Failed runs are
/// left out of the statistics.
pub fn summarize(runs: &[RunResult]) -> Vec<SummaryRow> {
    let mut methods: Vec<&str> = Vec::new();
    for r in runs {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let mut rows = Vec::new();
    for method in methods {
        for column in Column::BOTH {
            let values: Vec<f64> = runs
                .iter()
                .filter(|r| r.method == method)
                .filter_map(|r| r.outcome.as_ref().ok())
                .map(|s| match column {
                    Column::DemoInit => s.best_demo_init.success_rate,
                    Column::TrainInit => s.best_train_init.success_rate,
                })
                .collect();
            let (mean, stderr) = mean_and_stderr(&values);
            rows.push(SummaryRow {
                method: method.to_string(),
                column: column.name(),
                n: values.len(),
                mean,
                stderr,
            });
        }
    }
    rows
}

pub const RUNS_CSV_HEADER: [&str; 10] = [
    "method",
    "seed",
    "status",
    "steps",
    "halt",
    "final_loss",
    "best_demo_init_success",
    "best_demo_init_return",
    "best_train_init_success",
    "best_train_init_return",
];

pub fn write_runs_csv<W: std::io::Write>(runs: &[RunResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RUNS_CSV_HEADER)?;
    for r in runs {
        let mut record = vec![r.method.clone(), r.seed.to_string()];
        match &r.outcome {
            Ok(s) => record.extend([
                "ok".to_string(),
                s.steps.to_string(),
                s.halt.clone(),
                s.final_loss.to_string(),
                s.best_demo_init.success_rate.to_string(),
                s.best_demo_init.avg_return.to_string(),
                s.best_train_init.success_rate.to_string(),
                s.best_train_init.avg_return.to_string(),
            ]),
            Err(msg) => {
                record.push(format!("error: {msg}"));
                record.extend(std::iter::repeat_n(String::new(), 7));
            }
        }
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Parse a runs table written by [`write_runs_csv`].
pub fn read_runs_csv<R: std::io::Read>(input: R) -> Result<Vec<RunResult>> {
    let mut reader = csv::Reader::from_reader(input);
    let headers = reader.headers()?.clone();
    if headers.iter().ne(RUNS_CSV_HEADER) {
        return Err(Error::parse("runs table", format!("unexpected header {headers:?}")));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|e| Error::parse("runs table", e));
    let mut runs = Vec::new();
    for record in reader.records() {
        let r = record?;
        let seed = r[1].parse().map_err(|e| Error::parse("runs table seed", e))?;
        let outcome = if &r[2] == "ok" {
            let metrics = |success: &str, ret: &str| -> Result<Metrics> {
                Ok(Metrics {
                    success_rate: num(success)?,
                    avg_return: num(ret)?,
                    episodes: 0,
                })
            };
            Ok(RunSummary {
                steps: r[3].parse().map_err(|e| Error::parse("runs table steps", e))?,
                halt: r[4].to_string(),
                final_loss: num(&r[5])?,
                best_demo_init: metrics(&r[6], &r[7])?,
                best_train_init: metrics(&r[8], &r[9])?,
            })
        } else {
            Err(r[2].trim_start_matches("error: ").to_string())
        };
        runs.push(RunResult {
            method: r[0].to_string(),
            seed,
            outcome,
        });
    }
    Ok(runs)
}

pub fn write_summary_csv<W: std::io::Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "column", "n", "mean_success", "stderr"])?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.column.to_string(),
            r.n.to_string(),
            r.mean.to_string(),
            r.stderr.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Human-readable table: one line per method, one column per start distribution.
pub fn summary_text(rows: &[SummaryRow]) -> String {
    let mut out = format!("{:<10} {:>18} {:>18}\n", "method", "demo_init", "train_init");
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    for method in methods {
        let cell = |column: Column| {
            rows.iter()
                .find(|r| r.method == method && r.column == column.name())
                .map(|r| format!("{:.2} ± {:.2} (n={})", r.mean, r.stderr, r.n))
                .unwrap_or_default()
        };
        let _ = writeln!(
            out,
            "{:<10} {:>18} {:>18}",
            method,
            cell(Column::DemoInit),
            cell(Column::TrainInit)
        );
    }
    out
}

/// Run every method × seed of `spec` and write the report to `out_dir`:
///
/// - `config.toml`: experiment spec and resolved scenario
/// - `manifest.json`: config hash, seeds and per-run status
/// - `demos/seed<k>.txt`: the demonstrations of each seed
/// - `runs/<method>-seed<k>/curve.csv` and `q.ckpt`
/// - `runs.csv`, `summary.csv`, `summary.txt`
pub fn run_experiment(spec: &ExperimentSpec, out_dir: &Path) -> Result<ExperimentReport> {
    spec.validate()?;
    let env = resolve_scenario(&spec.scenario)?;
    fs::create_dir_all(out_dir.join("runs")).map_err(|e| Error::file(out_dir, e))?;
    fs::create_dir_all(out_dir.join("demos")).map_err(|e| Error::file(out_dir, e))?;

    let snapshot = toml::to_string(&Snapshot {
        experiment: spec,
        scenario: env.config(),
    })
    .map_err(|e| Error::parse("config snapshot", e))?;
    let config_hash = hex::encode(Sha256::digest(snapshot.as_bytes()));
    write_file(&out_dir.join("config.toml"), snapshot.as_bytes())?;

    let mut demos = Vec::new();
    let mut experts = Vec::new();
    for &seed in &spec.seeds {
        let d = generate_demonstrations(&env, spec.expert_gamma, spec.demo_count, &mut substream(seed, DEMO_STREAM))?;
        let mut buf = Vec::new();
        write_demos(&d.rollouts, &mut buf)?;
        write_file(&out_dir.join("demos").join(format!("seed{seed}.txt")), &buf)?;
        demos.push(d.rollouts);
        experts.push(d.expert);
    }

    let cells: Vec<Cell> = spec
        .algorithms
        .iter()
        .flat_map(|&method| spec.seeds.iter().map(move |&seed| Cell { method, seed }))
        .collect();
    let outputs = run_cells(&env, spec, &demos, &cells);

    let mut runs = Vec::new();
    let mut manifest_runs = Vec::new();
    for out in outputs {
        let dir_name = run_dir_name(&out.result.method, out.result.seed);
        let dir = out_dir.join("runs").join(&dir_name);
        fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
        if let Some(curve) = &out.curve {
            write_file(&dir.join("curve.csv"), curve)?;
        }
        if let Some(ckpt) = &out.checkpoint {
            write_file(&dir.join("q.ckpt"), ckpt)?;
        }
        manifest_runs.push(ManifestRun {
            method: out.result.method.clone(),
            seed: out.result.seed,
            dir: format!("runs/{dir_name}"),
            status: match &out.result.outcome {
                Ok(_) => "ok".into(),
                Err(e) => format!("error: {e}"),
            },
        });
        runs.push(out.result);
    }
    runs.extend(baseline_rows(&env, spec, &experts)?);

    let summary = summarize(&runs);
    let mut buf = Vec::new();
    write_runs_csv(&runs, &mut buf)?;
    write_file(&out_dir.join("runs.csv"), &buf)?;
    let mut buf = Vec::new();
    write_summary_csv(&summary, &mut buf)?;
    write_file(&out_dir.join("summary.csv"), &buf)?;
    write_file(&out_dir.join("summary.txt"), summary_text(&summary).as_bytes())?;

    let manifest = Manifest {
        format: "sqil-run-manifest v1",
        tool_version: env!("CARGO_PKG_VERSION"),
        scenario: &spec.scenario,
        config_hash: &config_hash,
        seeds: &spec.seeds,
        methods: spec.algorithms.iter().map(|m| m.name()).collect(),
        runs: manifest_runs,
    };
    let mut json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::parse("manifest", e))?;
    json.push(b'\n');
    write_file(&out_dir.join("manifest.json"), &json)?;

    Ok(ExperimentReport {
        runs,
        summary,
        config_hash,
    })
}

/// Recompute the summary table of an experiment directory from its `runs.csv`.
pub fn recompute_summary(out_dir: &Path) -> Result<Vec<SummaryRow>> {
    let path = out_dir.join("runs.csv");
    let file = fs::File::open(&path).map_err(|e| Error::file(&path, e))?;
    Ok(summarize(&read_runs_csv(file)?))
}

/// Shape of a random identity-check instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IdentitySizes {
    pub obs_dim: usize,
    pub hidden: usize,
    pub actions: usize,
    pub demo_rollouts: usize,
    /// Longest demonstration rollout (at least 1).
    pub max_rollout_len: usize,
    pub samp_transitions: usize,
}

impl Default for IdentitySizes {
    fn default() -> Self {
        // 2*3+3 + 3*2+2 = 17 parameters
        Self {
            obs_dim: 2,
            hidden: 3,
            actions: 2,
            demo_rollouts: 3,
            max_rollout_len: 5,
            samp_transitions: 4,
        }
    }
}

pub const IDENTITY_ANALYTIC_TOLERANCE: f64 = 1e-6;
pub const IDENTITY_FD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct IdentityReport {
    pub seed: u64,
    pub param_count: usize,
    pub demo_transitions: usize,
    pub lambda_demo: f64,
    pub lambda_samp: f64,
    /// Max relative difference between the analytic gradients of both sides.
    pub analytic_discrepancy: f64,
    /// Max relative difference between finite differences of the RBC loss
    /// and the analytic gradient of the rewritten form.
    pub fd_discrepancy: f64,
    /// The two sides also differ in value by exactly `|D_demo| / (4 lambda_demo)`;
    /// this is the error in that offset.
    pub value_offset_error: f64,
    /// Largest components of the analytic gradients, for the failure report.
    pub worst_component: usize,
    pub lhs_gradient: Vec<f64>,
    pub rhs_gradient: Vec<f64>,
}

impl IdentityReport {
    pub fn passed(&self) -> bool {
        self.analytic_discrepancy <= IDENTITY_ANALYTIC_TOLERANCE
            && self.fd_discrepancy <= IDENTITY_FD_TOLERANCE
    }
}

fn random_obs(dim: usize, rng: &mut RandomStream) -> Observation {
    Observation::new((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// The RBC loss with sum-form penalties and undiscounted targets, and its
/// rewritten form `N_demo V(s0) + lambda_demo delta^2(demo, 1/(2 lambda_demo))
/// + lambda_samp delta^2(samp, 0)`.
fn identity_objectives<'a>(
    demo: &[&'a Transition],
    samp: &[&'a Transition],
    s0: StateKey<'a>,
    rollouts: usize,
    lambda_demo: f64,
    lambda_samp: f64,
) -> (Objective<'a>, Objective<'a>) {
    let mut lhs = Objective::new();
    lhs.add_neg_log_lik(demo, 1.0);
    lhs.add_bellman(demo, 0.0, 1.0, lambda_demo);
    lhs.add_bellman(samp, 0.0, 1.0, lambda_samp);

    let mut rhs = Objective::new();
    rhs.add_soft_value(s0, rollouts as f64);
    rhs.add_bellman(demo, 1.0 / (2.0 * lambda_demo), 1.0, lambda_demo);
    rhs.add_bellman(samp, 0.0, 1.0, lambda_samp);
    (lhs, rhs)
}

/// Check the telescoping identity between the RBC gradient and the SQIL-like
/// rewritten gradient on a random network and random demonstrations that
/// share a start state and end in absorbing transitions, with `gamma = 1`,
/// `lambda_demo = 1/2` and full gradients through the targets.
pub fn verify_gradient_identity(seed: u64, sizes: IdentitySizes) -> Result<IdentityReport> {
    if sizes.demo_rollouts == 0 || sizes.max_rollout_len == 0 || sizes.actions == 0 {
        return Err(Error::Config("identity instances need at least one demo transition".into()));
    }
    let mut rng = seeded(seed);
    let net = Network::new(&[sizes.obs_dim, sizes.hidden, sizes.actions], &mut rng)?;
    let q = SoftQFunction::Approx(net);
    if q.param_count() > 20 {
        return Err(Error::Config(format!(
            "identity instances are limited to 20 parameters, got {}",
            q.param_count()
        )));
    }

    let s0 = random_obs(sizes.obs_dim, &mut rng);
    let mut next_id = 1;
    let mut demo = Vec::new();
    for _ in 0..sizes.demo_rollouts {
        let len = rng.gen_range(1..=sizes.max_rollout_len);
        let (mut id, mut obs) = (0, s0.clone());
        for t in 0..len {
            let (nid, nobs) = (next_id, random_obs(sizes.obs_dim, &mut rng));
            next_id += 1;
            demo.push(Transition {
                state_id: id,
                obs,
                action: rng.gen_range(0..sizes.actions),
                next_state_id: nid,
                next_obs: nobs.clone(),
                absorbing: t + 1 == len,
            });
            (id, obs) = (nid, nobs);
        }
    }
    let samp: Vec<Transition> = (0..sizes.samp_transitions)
        .map(|i| Transition {
            state_id: 1000 + 2 * i,
            obs: random_obs(sizes.obs_dim, &mut rng),
            action: rng.gen_range(0..sizes.actions),
            next_state_id: 1001 + 2 * i,
            next_obs: random_obs(sizes.obs_dim, &mut rng),
            absorbing: rng.gen_bool(0.3),
        })
        .collect();

    let lambda_demo = 0.5;
    let lambda_samp = rng.gen_range(0.1..2.0);
    let demo_refs: Vec<&Transition> = demo.iter().collect();
    let samp_refs: Vec<&Transition> = samp.iter().collect();
    let key0 = StateKey::new(0, &s0);
    let (lhs, rhs) = identity_objectives(&demo_refs, &samp_refs, key0, sizes.demo_rollouts, lambda_demo, lambda_samp);

    let (lhs_value, lhs_gradient) = lhs.value_and_gradient(&q, GradientMode::Full)?;
    let (rhs_value, rhs_gradient) = rhs.value_and_gradient(&q, GradientMode::Full)?;
    let numeric = central_differences(q.params(), 1e-6, |p| {
        let mut probe = q.clone();
        probe.params_mut().copy_from_slice(p);
        lhs.value(&probe)
    })?;

    let offset = demo.len() as f64 / (4.0 * lambda_demo);
    let worst_component = lhs_gradient
        .iter()
        .zip(&rhs_gradient)
        .enumerate()
        .map(|(i, (a, b))| (i, (a - b).abs()))
        .fold((0, 0.0), |best, cur| if cur.1 > best.1 { cur } else { best })
        .0;
    let report = IdentityReport {
        seed,
        param_count: q.param_count(),
        demo_transitions: demo.len(),
        lambda_demo,
        lambda_samp,
        analytic_discrepancy: max_relative_error(&lhs_gradient, &rhs_gradient),
        fd_discrepancy: max_relative_error(&rhs_gradient, &numeric),
        value_offset_error: ((rhs_value - lhs_value) - offset).abs(),
        worst_component,
        lhs_gradient,
        rhs_gradient,
    };
    if !report.passed() {
        let i = report.worst_component;
        return Err(Error::Verification(format!(
            "seed {seed}: analytic discrepancy {:e}, finite-difference discrepancy {:e}; \
             worst component {i}: lhs {} vs rhs {}",
            report.analytic_discrepancy, report.fd_discrepancy, report.lhs_gradient[i], report.rhs_gradient[i]
        )));
    }
    Ok(report)
}
