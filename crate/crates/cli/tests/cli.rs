use std::path::Path;
use std::process::{Command, Output};

fn sqil(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sqil"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn sqil")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["bogus"][..],
        &[],
        &["gen-demos", "--out", "d.txt"],
        &["gen-demos", "--preset", "shifted-start", "--scenario", "x.toml", "--out", "d.txt"],
        &["verify-identity", "--seeds", "many"],
    ] {
        let o = sqil(dir.path(), args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn missing_scenario_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = sqil(dir.path(), &["gen-demos", "--scenario", "no-such.toml", "--out", "d.txt"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no-such.toml"), "{}", stderr(&o));
}

#[test]
fn unknown_preset_and_algorithm_are_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = sqil(dir.path(), &["gen-demos", "--preset", "nowhere", "--out", "d.txt"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:"));

    assert!(sqil(dir.path(), &["gen-demos", "--preset", "matched-start", "--count", "5", "--out", "d.txt"])
        .status
        .success());
    let o = sqil(
        dir.path(),
        &["train", "--preset", "matched-start", "--demos", "d.txt", "--algorithm", "dagger", "--out", "r"],
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gen_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = sqil(p, &["gen-demos", "--preset", "shifted-start", "--count", "20", "--seed", "3", "--out", "demos.txt"]);
    assert!(o.status.success(), "{}", stderr(&o));

    std::fs::write(
        p.join("train.toml"),
        "algorithm = \"bc\"\nmodel = \"tabular\"\nlearning_rate = 0.01\nmax_gradient_steps = 300\neval_every = 100\n",
    )
    .unwrap();
    let o = sqil(
        p,
        &[
            "train", "--preset", "shifted-start", "--demos", "demos.txt", "--config", "train.toml", "--seed", "1",
            "--eval-episodes", "10", "--out", "run",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["config.toml", "curve.csv", "q.ckpt", "q.csv", "summary.txt", "manifest.json"] {
        assert!(p.join("run").join(f).is_file(), "missing {f}");
    }
    let manifest = std::fs::read_to_string(p.join("run/manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 1"), "{manifest}");
    assert!(manifest.contains("config_hash"));

    let o = sqil(p, &["eval", "--preset", "shifted-start", "--checkpoint", "run/q.ckpt", "--episodes", "10"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("demo_init") && out.contains("train_init"), "{out}");
}

#[test]
fn verify_identity_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = sqil(dir.path(), &["verify-identity", "--seeds", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).matches(": ok").count(), 4);
}

#[test]
fn ablate_then_report_agree() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(
        p.join("exp.toml"),
        "scenario = \"matched-start\"\nalgorithms = [\"sqil\", \"bc\"]\ndemo_count = 10\nseeds = [0, 1]\n\
         eval_episodes = 10\n\n[train]\nlearning_rate = 0.01\nmax_gradient_steps = 200\neval_every = 100\n",
    )
    .unwrap();
    let o = sqil(p, &["ablate", "--config", "exp.toml", "--out", "abl"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    let o = sqil(p, &["report", "abl"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(table.starts_with(&stdout(&o)), "{table}\n---\n{}", stdout(&o));
    assert!(p.join("abl/summary.csv").is_file());
}
