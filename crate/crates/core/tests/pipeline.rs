use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use sqil_core::checkpoint::read_checkpoint;
use sqil_core::envs::GridNav;
use sqil_core::harness::{self, Column, ExperimentSpec, Variant};
use sqil_core::replay::read_demos;
use sqil_core::trainers::TrainConfig;

fn small_spec() -> ExperimentSpec {
    let mut spec = harness::experiment_preset("shifted-start").unwrap();
    spec.algorithms = vec![Variant::Sqil, Variant::Bc];
    spec.seeds = vec![3, 4];
    spec.demo_count = 20;
    spec.eval_episodes = 20;
    spec.train.max_gradient_steps = 600;
    spec.train.eval_every = 200;
    spec
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn experiment_outputs_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec();
    let report = harness::run_experiment(&spec, dir.path()).unwrap();
    let p = dir.path();

    // summary files agree with a recomputation from runs.csv
    let recomputed = harness::recompute_summary(p).unwrap();
    assert_eq!(recomputed, report.summary);
    let mut csv = Vec::new();
    harness::write_summary_csv(&recomputed, &mut csv).unwrap();
    assert_eq!(read(p, "summary.csv").as_bytes(), csv.as_slice());
    assert_eq!(read(p, "summary.txt"), harness::summary_text(&recomputed));

    // 2 methods x 2 seeds plus expert and random baselines
    assert_eq!(report.runs.len(), 8);
    assert_eq!(read(p, "runs.csv").lines().count(), 9);

    let config = read(p, "config.toml");
    assert_eq!(report.config_hash, hex::encode(Sha256::digest(config.as_bytes())));
    let manifest: serde_json::Value = serde_json::from_str(&read(p, "manifest.json")).unwrap();
    assert_eq!(manifest["config_hash"], report.config_hash.as_str());
    assert_eq!(manifest["seeds"], serde_json::json!([3, 4]));
    assert_eq!(manifest["runs"].as_array().unwrap().len(), 4);
}

#[test]
fn stored_demos_and_checkpoint_reproduce_a_cell() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec();
    let report = harness::run_experiment(&spec, dir.path()).unwrap();
    let env = harness::resolve_scenario(&spec.scenario).unwrap();

    let demos = read_demos(fs::File::open(dir.path().join("demos/seed4.txt")).map(std::io::BufReader::new).unwrap()).unwrap();
    assert_eq!(demos.len(), spec.demo_count);
    assert!(demos.iter().all(|r| r.start_cell() == Some(0)));

    let cfg = TrainConfig {
        seed: 4,
        ..Variant::Sqil.config(&spec.train).unwrap()
    };
    let outcome = harness::train_and_evaluate(&env, &demos, &cfg, spec.eval_episodes).unwrap();
    let row = report.runs.iter().find(|r| r.method == "sqil" && r.seed == 4).unwrap();
    let stored = row.outcome.as_ref().unwrap();
    assert_eq!(stored.best_train_init, outcome.best(Column::TrainInit).unwrap());
    assert_eq!(stored.steps, outcome.report.steps());

    let ckpt_dir = dir.path().join("runs").join("sqil-seed4");
    let q = read_checkpoint(std::io::BufReader::new(fs::File::open(ckpt_dir.join("q.ckpt")).unwrap())).unwrap();
    assert_eq!(q, outcome.report.q);
}

#[test]
fn single_run_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let env: GridNav = harness::resolve_scenario("matched-start").unwrap();
    let demos = harness::generate_demonstrations(&env, 0.95, 10, &mut sqil_core::rng::seeded(0)).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.01,
        max_gradient_steps: 300,
        eval_every: 100,
        seed: 9,
        ..TrainConfig::default()
    };
    let outcome = harness::train_and_evaluate(&env, &demos.rollouts, &cfg, 10).unwrap();
    let hash = harness::write_run(dir.path(), &env, &cfg, &outcome).unwrap();
    let p = dir.path();

    let q = read_checkpoint(read(p, "q.ckpt").as_bytes()).unwrap();
    assert_eq!(q, outcome.report.q);
    // header plus one row per cell
    assert_eq!(read(p, "q.csv").lines().count(), 1 + env.cell_count());
    let curve = read(p, "curve.csv");
    assert_eq!(curve.lines().count(), 1 + outcome.report.steps());
    let manifest: serde_json::Value = serde_json::from_str(&read(p, "manifest.json")).unwrap();
    assert_eq!(manifest["config_hash"], hash.as_str());
    assert_eq!(manifest["seed"], 9);
    let snapshot: toml::Table = toml::from_str(&read(p, "config.toml")).unwrap();
    let saved = TrainConfig::from_toml(&snapshot["train"].as_table().unwrap().to_string()).unwrap();
    assert_eq!(saved, cfg);
}

#[test]
fn seeds_change_the_metrics() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let spec = small_spec();
    let other = ExperimentSpec {
        seeds: vec![5, 6],
        ..spec.clone()
    };
    harness::run_experiment(&spec, a.path()).unwrap();
    harness::run_experiment(&other, b.path()).unwrap();
    assert_ne!(read(a.path(), "runs.csv"), read(b.path(), "runs.csv"));
}
