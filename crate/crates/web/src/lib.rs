//! WebAssembly entry points for the static demo page in `www/`.
//!
//! Every export takes plain values and returns a JSON string; the `*_json`
//! functions hold the logic and are callable (and tested) natively.

use serde_json::{json, Value};
use sqil_core::envs::{self, Action, CellKind, GridNav};
use sqil_core::harness::{self, Column, IdentitySizes, Variant, DEMO_STREAM};
use sqil_core::rng::substream;
use sqil_core::softq::{argmax, soft_value, soft_value_iteration, SoftQFunction, StateKey, SVI_TOLERANCE};
use sqil_core::{Error, Result};
use wasm_bindgen::prelude::*;

/// Cap on training length so the page stays responsive.
pub const MAX_WEB_STEPS: usize = 20_000;

fn load(scenario_toml: &str) -> Result<GridNav> {
    GridNav::new(envs::parse_scenario(scenario_toml)?)
}

fn kind_name(kind: CellKind) -> &'static str {
    match kind {
        CellKind::Open => "open",
        CellKind::Wall => "wall",
        CellKind::Goal => "goal",
        CellKind::Hazard => "hazard",
    }
}

fn layout(env: &GridNav) -> Value {
    let cfg = env.config();
    let starts = |init: &envs::InitDist| init.support.iter().map(|(c, _)| *c).collect::<Vec<_>>();
    json!({
        "width": env.width(),
        "height": env.height(),
        "kinds": (0..env.cell_count()).map(|c| kind_name(env.cell_kind(c))).collect::<Vec<_>>(),
        "demo_init": starts(&cfg.demo_init),
        "train_init": starts(&cfg.train_init),
    })
}

/// Greedy arrow and soft value per cell; absorbing cells get neither.
type PolicyMap = (Vec<Option<char>>, Vec<Option<f64>>);

fn policy_map(env: &GridNav, q: &SoftQFunction) -> Result<PolicyMap> {
    let mut arrows = Vec::new();
    let mut values = Vec::new();
    for cell in 0..env.cell_count() {
        if env.is_absorbing_cell(cell) {
            arrows.push(None);
            values.push(None);
            continue;
        }
        let obs = env.observe_cell(cell);
        let row = q.q_row(StateKey::new(cell, &obs))?;
        arrows.push(Action::from_index(argmax(&row)).map(Action::arrow));
        values.push(Some(soft_value(&row)?));
    }
    Ok((arrows, values))
}

fn metrics(m: &harness::Metrics) -> Value {
    json!({ "success": m.success_rate, "return": m.avg_return })
}

pub fn preset_toml(name: &str) -> Result<String> {
    envs::scenario_to_string(envs::preset(name)?.config())
}

pub fn solve_expert_json(scenario_toml: &str, gamma: f64, episodes: usize, seed: u64) -> Result<Value> {
    let env = load(scenario_toml)?;
    let expert = soft_value_iteration(&env, gamma, SVI_TOLERANCE)?.into_q();
    let (arrows, values) = policy_map(&env, &expert)?;
    let (demo, train) = harness::evaluate_columns(&expert, &env, episodes, seed)?;
    Ok(json!({
        "layout": layout(&env),
        "arrows": arrows,
        "values": values,
        "demo_init": metrics(&demo),
        "train_init": metrics(&train),
    }))
}

/// Generate demonstrations, then train each method in `methods`
/// (comma-separated variant names) with the tuned experiment config.
pub fn train_compare_json(
    scenario_toml: &str,
    methods: &str,
    seed: u64,
    demo_count: usize,
    steps: usize,
) -> Result<Value> {
    if steps == 0 || steps > MAX_WEB_STEPS {
        return Err(Error::Config(format!("steps must be in 1..={MAX_WEB_STEPS}, got {steps}")));
    }
    let env = load(scenario_toml)?;
    let spec = harness::experiment_preset("shifted-start")?;
    let demos = harness::generate_demonstrations(
        &env,
        spec.expert_gamma,
        demo_count,
        &mut substream(seed, DEMO_STREAM),
    )?;
    let mut base = spec.train;
    base.seed = seed;
    base.max_gradient_steps = steps;
    let mut results = Vec::new();
    for name in methods.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let cfg = Variant::parse(name)?.config(&base)?;
        let outcome = harness::train_and_evaluate(&env, &demos.rollouts, &cfg, spec.eval_episodes)?;
        let (arrows, values) = policy_map(&env, &outcome.report.q)?;
        let best = |c: Column| outcome.best(c).map(|m| metrics(&m));
        results.push(json!({
            "method": name,
            "steps": outcome.report.steps(),
            "final_loss": outcome.report.losses.last(),
            "arrows": arrows,
            "values": values,
            "demo_init": best(Column::DemoInit),
            "train_init": best(Column::TrainInit),
            "curve": outcome.checkpoints.iter().map(|c| {
                json!([c.step, c.demo_init.success_rate, c.train_init.success_rate])
            }).collect::<Vec<_>>(),
        }));
    }
    Ok(json!({
        "layout": layout(&env),
        "expert": metrics(&demos.metrics),
        "visited": demos.rollouts.iter().flat_map(|r| r.transitions.iter().map(|t| t.state_id)).collect::<std::collections::BTreeSet<_>>(),
        "methods": results,
    }))
}

pub fn verify_identity_json(seed: u64) -> Result<Value> {
    let r = harness::verify_gradient_identity(seed, IdentitySizes::default())?;
    Ok(json!({
        "seed": r.seed,
        "params": r.param_count,
        "demo_transitions": r.demo_transitions,
        "analytic_discrepancy": r.analytic_discrepancy,
        "fd_discrepancy": r.fd_discrepancy,
        "value_offset_error": r.value_offset_error,
        "lhs": r.lhs_gradient,
        "rhs": r.rhs_gradient,
    }))
}

fn js(result: Result<Value>) -> std::result::Result<String, JsError> {
    result.map(|v| v.to_string()).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn preset(name: &str) -> std::result::Result<String, JsError> {
    preset_toml(name).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = solveExpert)]
pub fn solve_expert(scenario_toml: &str, gamma: f64, episodes: usize, seed: u64) -> std::result::Result<String, JsError> {
    js(solve_expert_json(scenario_toml, gamma, episodes, seed))
}

#[wasm_bindgen(js_name = trainCompare)]
pub fn train_compare(
    scenario_toml: &str,
    methods: &str,
    seed: u64,
    demo_count: usize,
    steps: usize,
) -> std::result::Result<String, JsError> {
    js(train_compare_json(scenario_toml, methods, seed, demo_count, steps))
}

#[wasm_bindgen(js_name = verifyIdentity)]
pub fn verify_identity(seed: u64) -> std::result::Result<String, JsError> {
    js(verify_identity_json(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_toml() {
        for name in envs::PRESET_NAMES {
            let text = preset_toml(name).unwrap();
            assert_eq!(load(&text).unwrap().config(), envs::preset(name).unwrap().config());
        }
    }

    #[test]
    fn expert_map_covers_the_grid() {
        let v = solve_expert_json(&preset_toml("shifted-start").unwrap(), 0.95, 50, 0).unwrap();
        let kinds = v["layout"]["kinds"].as_array().unwrap();
        assert_eq!(kinds.len(), 25);
        let arrows = v["arrows"].as_array().unwrap();
        assert_eq!(arrows.len(), 25);
        // absorbing cells have no arrow
        for (k, a) in kinds.iter().zip(arrows) {
            assert_eq!(k == "goal" || k == "hazard" || k == "wall", a.is_null());
        }
        assert!(v["demo_init"]["success"].as_f64().unwrap() > 0.8);
    }

    #[test]
    fn sqil_beats_bc_from_the_shifted_start() {
        let text = preset_toml("shifted-start").unwrap();
        let v = train_compare_json(&text, "sqil, bc", 0, 100, 10_000).unwrap();
        let methods = v["methods"].as_array().unwrap();
        assert_eq!(methods.len(), 2);
        let train = |i: usize| methods[i]["train_init"]["success"].as_f64().unwrap();
        assert!(train(0) > train(1) + 0.3, "sqil {} bc {}", train(0), train(1));
    }

    #[test]
    fn bad_inputs_are_errors() {
        assert!(solve_expert_json("width = 0", 0.9, 10, 0).is_err());
        let text = preset_toml("matched-start").unwrap();
        assert!(train_compare_json(&text, "sqil", 0, 10, 0).is_err());
        assert!(train_compare_json(&text, "dagger", 0, 10, 100).is_err());
    }

    #[test]
    fn identity_holds() {
        let v = verify_identity_json(3).unwrap();
        assert!(v["analytic_discrepancy"].as_f64().unwrap() < 1e-6);
        assert_eq!(v["params"], 17);
    }
}
