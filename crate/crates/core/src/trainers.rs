//! SQIL, behavioral cloning and regularized behavioral cloning on a shared
//! soft-Q substrate, plus the ablation variants of SQIL.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::approx::{AdamState, Network, DEFAULT_HIDDEN};
use crate::envs::{GridNav, InitDist, Rollout, State, Transition, ACTION_COUNT};
use crate::error::{Error, Result};
use crate::replay::{ReplayBuffer, DEFAULT_SAMP_CAPACITY};
use crate::rng::RandomStream;
use crate::softq::{GradientMode, Objective, SoftQFunction, StateKey, TabularQ};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Sqil,
    Bc,
    Rbc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// One Q row per cell.
    Tabular,
    /// `tanh` network over observation features.
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingPolicy {
    /// Boltzmann policy of the current Q function.
    Imitation,
    /// Uniformly random actions.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub model: ModelKind,
    /// Hidden layer widths for [`ModelKind::Mlp`].
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub lambda_samp: f64,
    /// Weight of the demonstration penalty in RBC.
    pub lambda_demo: f64,
    pub demo_reward: f64,
    pub samp_reward: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_gradient_steps: usize,
    pub env_steps_per_gradient_step: usize,
    pub sampling_policy: SamplingPolicy,
    pub samp_capacity: usize,
    /// Refresh a frozen copy of Q for the bootstrap targets every this many
    /// gradient steps; 0 bootstraps from the online Q.
    pub target_update_every: usize,
    pub eval_every: usize,
    pub convergence_window: usize,
    pub convergence_tolerance: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Sqil,
            model: ModelKind::Tabular,
            hidden: DEFAULT_HIDDEN.to_vec(),
            gamma: 0.9,
            lambda_samp: 1.0,
            lambda_demo: 0.5,
            demo_reward: 1.0,
            samp_reward: 0.0,
            batch_size: 64,
            learning_rate: 1e-3,
            max_gradient_steps: 5_000,
            env_steps_per_gradient_step: 1,
            sampling_policy: SamplingPolicy::Imitation,
            samp_capacity: DEFAULT_SAMP_CAPACITY,
            target_update_every: 0,
            eval_every: 250,
            convergence_window: 200,
            convergence_tolerance: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&self.gamma) {
            return fail(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if !(self.lambda_samp >= 0.0 && self.lambda_samp.is_finite()) {
            return fail(format!("lambda_samp {} must be >= 0", self.lambda_samp));
        }
        if !(self.lambda_demo >= 0.0 && self.lambda_demo.is_finite()) {
            return fail(format!("lambda_demo {} must be >= 0", self.lambda_demo));
        }
        if !self.demo_reward.is_finite() || !self.samp_reward.is_finite() {
            return fail("rewards must be finite".into());
        }
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return fail(format!("batch_size {} must be even and >= 2", self.batch_size));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate {} must be >= 0", self.learning_rate));
        }
        if self.max_gradient_steps == 0 {
            return fail("max_gradient_steps must be positive".into());
        }
        if self.samp_capacity == 0 {
            return fail("samp_capacity must be positive".into());
        }
        if self.convergence_window < 2 {
            return fail("convergence_window must be at least 2".into());
        }
        if !(self.convergence_tolerance >= 0.0) {
            return fail("convergence_tolerance must be >= 0".into());
        }
        if self.model == ModelKind::Mlp && self.hidden.contains(&0) {
            return fail("hidden layer widths must be positive".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::parse("train config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }
}

/// The SQIL ablations: each changes exactly one field of a SQIL config.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// `lambda_samp = 0`: ignore the agent's own transitions.
    Lambda0,
    /// `gamma = 0`: no bootstrapping, a plain penalty on Q magnitudes.
    Gamma0,
    /// Agent transitions come from a uniformly random policy.
    Uniform,
    /// Optimize the regularized BC loss instead.
    Rbc,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Lambda0, Ablation::Gamma0, Ablation::Uniform, Ablation::Rbc];
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Lambda0 => "lambda0",
            Ablation::Gamma0 => "gamma0",
            Ablation::Uniform => "uniform",
            Ablation::Rbc => "rbc",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda0" => Ok(Ablation::Lambda0),
            "gamma0" => Ok(Ablation::Gamma0),
            "uniform" => Ok(Ablation::Uniform),
            "rbc" => Ok(Ablation::Rbc),
            other => Err(Error::Config(format!(
                "unknown ablation {other:?} (expected lambda0, gamma0, uniform or rbc)"
            ))),
        }
    }
}

pub fn make_ablation_config(base: &TrainConfig, variant: Ablation) -> Result<TrainConfig> {
    if base.algorithm != Algorithm::Sqil {
        return Err(Error::Config(format!(
            "ablations start from a SQIL config, not {:?}",
            base.algorithm
        )));
    }
    base.validate()?;
    let mut cfg = base.clone();
    match variant {
        Ablation::Lambda0 => cfg.lambda_samp = 0.0,
        Ablation::Gamma0 => cfg.gamma = 0.0,
        Ablation::Uniform => cfg.sampling_policy = SamplingPolicy::Uniform,
        Ablation::Rbc => cfg.algorithm = Algorithm::Rbc,
    }
    Ok(cfg)
}

fn require_demos(demo_batch: &[&Transition]) -> Result<()> {
    if demo_batch.is_empty() {
        return Err(Error::Contract("empty demonstration batch".into()));
    }
    Ok(())
}

fn mean_weight(batch: &[&Transition]) -> f64 {
    1.0 / batch.len() as f64
}

/// `delta^2(demo, demo_reward) + lambda_samp * delta^2(samp, samp_reward)`
/// with mean-normalized squared soft Bellman errors. The agent term is left
/// out while `samp_batch` is empty.
pub fn sqil_objective<'a>(
    demo_batch: &[&'a Transition],
    samp_batch: &[&'a Transition],
    cfg: &TrainConfig,
) -> Result<Objective<'a>> {
    require_demos(demo_batch)?;
    let mut objective = Objective::new();
    objective.add_bellman(demo_batch, cfg.demo_reward, cfg.gamma, mean_weight(demo_batch));
    if !samp_batch.is_empty() {
        objective.add_bellman(
            samp_batch,
            cfg.samp_reward,
            cfg.gamma,
            cfg.lambda_samp * mean_weight(samp_batch),
        );
    }
    Ok(objective)
}

/// Summed negative log-likelihood of the demonstrated actions under the
/// Boltzmann policy of Q.
pub fn bc_objective<'a>(demo_batch: &[&'a Transition]) -> Result<Objective<'a>> {
    require_demos(demo_batch)?;
    let mut objective = Objective::new();
    objective.add_neg_log_lik(demo_batch, 1.0);
    Ok(objective)
}

/// BC plus `lambda_demo * delta^2(demo, 0) + lambda_samp * delta^2(samp, 0)`.
pub fn rbc_objective<'a>(
    demo_batch: &[&'a Transition],
    samp_batch: &[&'a Transition],
    cfg: &TrainConfig,
) -> Result<Objective<'a>> {
    let mut objective = bc_objective(demo_batch)?;
    objective.add_bellman(demo_batch, 0.0, cfg.gamma, cfg.lambda_demo * mean_weight(demo_batch));
    if !samp_batch.is_empty() {
        objective.add_bellman(samp_batch, 0.0, cfg.gamma, cfg.lambda_samp * mean_weight(samp_batch));
    }
    Ok(objective)
}

pub fn sqil_loss(
    q: &SoftQFunction,
    demo_batch: &[&Transition],
    samp_batch: &[&Transition],
    cfg: &TrainConfig,
) -> Result<f64> {
    sqil_objective(demo_batch, samp_batch, cfg)?.value(q)
}

pub fn bc_loss(q: &SoftQFunction, demo_batch: &[&Transition]) -> Result<f64> {
    bc_objective(demo_batch)?.value(q)
}

pub fn rbc_loss(
    q: &SoftQFunction,
    demo_batch: &[&Transition],
    samp_batch: &[&Transition],
    cfg: &TrainConfig,
) -> Result<f64> {
    rbc_objective(demo_batch, samp_batch, cfg)?.value(q)
}

/// The training objective for `cfg.algorithm` on one balanced batch.
pub fn training_objective<'a>(
    demo_batch: &[&'a Transition],
    samp_batch: &[&'a Transition],
    cfg: &TrainConfig,
) -> Result<Objective<'a>> {
    match cfg.algorithm {
        Algorithm::Sqil => sqil_objective(demo_batch, samp_batch, cfg),
        Algorithm::Bc => bc_objective(demo_batch),
        Algorithm::Rbc => rbc_objective(demo_batch, samp_batch, cfg),
    }
}

/// Fresh Q function for `env` as configured.
pub fn init_q(env: &GridNav, cfg: &TrainConfig, rng: &mut RandomStream) -> Result<SoftQFunction> {
    Ok(match cfg.model {
        ModelKind::Tabular => SoftQFunction::Tabular(TabularQ::zeros(env.cell_count(), ACTION_COUNT)),
        ModelKind::Mlp => {
            let mut sizes = vec![env.obs_len()];
            sizes.extend(&cfg.hidden);
            sizes.push(ACTION_COUNT);
            SoftQFunction::Approx(Network::new(&sizes, rng)?)
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HaltReason {
    Converged,
    StepCap,
}

impl fmt::Display for HaltReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HaltReason::Converged => "converged",
            HaltReason::StepCap => "step_cap",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    /// Gradient steps taken when the evaluation ran.
    pub step: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Loss of each gradient step, in order.
    pub losses: Vec<f64>,
    /// Evaluation results every `eval_every` steps and after the last step.
    pub evals: Vec<EvalRecord>,
    pub halt: HaltReason,
    pub q: SoftQFunction,
}

impl TrainReport {
    pub fn steps(&self) -> usize {
        self.losses.len()
    }
}

fn has_converged(losses: &[f64], window: usize, tolerance: f64) -> bool {
    if losses.len() < window {
        return false;
    }
    let tail = &losses[losses.len() - window..];
    let (min, max) = tail
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let mean = tail.iter().sum::<f64>() / window as f64;
    max - min <= tolerance * (1.0 + mean.abs())
}

/// Train without periodic evaluation.
pub fn train(
    env: &GridNav,
    demos: &[Rollout],
    cfg: &TrainConfig,
    rng: &mut RandomStream,
) -> Result<TrainReport> {
    train_with_eval(env, demos, cfg, rng, |_, _| Ok(Vec::new()))
}

/// Run the configured algorithm. Each gradient step optimizes the loss on a
/// balanced batch; SQIL and RBC then take `env_steps_per_gradient_step`
/// environment steps from `train_init` (resetting after absorbing
/// transitions) and store them. BC never touches the environment.
///
/// `evaluate` is called with the step count and current Q every
/// `cfg.eval_every` steps (if non-zero) and once more when training halts.
pub fn train_with_eval<F>(
    env: &GridNav,
    demos: &[Rollout],
    cfg: &TrainConfig,
    rng: &mut RandomStream,
    mut evaluate: F,
) -> Result<TrainReport>
where
    F: FnMut(usize, &SoftQFunction) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    let mut buffer = ReplayBuffer::init_with_demos(demos, cfg.samp_capacity)?;
    let mut q = init_q(env, cfg, rng)?;
    let mut target = (cfg.target_update_every > 0).then(|| q.clone());
    let mut adam = AdamState::new(q.param_count(), cfg.learning_rate);
    let train_init: &InitDist = &env.config().train_init;
    let mut state = env.reset(train_init, rng);

    let mut losses = Vec::with_capacity(cfg.max_gradient_steps);
    let mut evals = Vec::new();
    let mut halt = HaltReason::StepCap;

    for step in 1..=cfg.max_gradient_steps {
        let (loss, grad) = {
            let batch = buffer.sample_balanced(cfg.batch_size, rng)?;
            let samp: &[&Transition] = if cfg.algorithm == Algorithm::Bc { &[] } else { &batch.samp };
            let objective = training_objective(&batch.demo, samp, cfg)?;
            let frozen = objective.freeze_targets(target.as_ref().unwrap_or(&q))?;
            frozen
                .value_and_gradient(&q, GradientMode::Full)
                .map_err(|e| Error::Divergence {
                    step,
                    reason: e.to_string(),
                })?
        };
        adam.step(q.params_mut(), &grad).map_err(|e| Error::Divergence {
            step,
            reason: e.to_string(),
        })?;
        losses.push(loss);

        if let Some(t) = target.as_mut() {
            if step % cfg.target_update_every == 0 {
                t.params_mut().copy_from_slice(q.params());
            }
        }

        if cfg.algorithm != Algorithm::Bc {
            for _ in 0..cfg.env_steps_per_gradient_step {
                state = interact(env, &q, cfg.sampling_policy, state, &mut buffer, rng)?;
            }
        }

        let converged = has_converged(&losses, cfg.convergence_window, cfg.convergence_tolerance);
        let last = converged || step == cfg.max_gradient_steps;
        if (cfg.eval_every > 0 && step % cfg.eval_every == 0) || last {
            evals.push(EvalRecord {
                step,
                values: evaluate(step, &q)?,
            });
        }
        if converged {
            halt = HaltReason::Converged;
            break;
        }
    }

    Ok(TrainReport {
        losses,
        evals,
        halt,
        q,
    })
}

/// Take one environment step from `state`, store the transition, and return
/// the state to continue from.
fn interact(
    env: &GridNav,
    q: &SoftQFunction,
    policy: SamplingPolicy,
    state: State,
    buffer: &mut ReplayBuffer,
    rng: &mut RandomStream,
) -> Result<State> {
    let obs = env.observe(&state);
    let action = match policy {
        SamplingPolicy::Imitation => q.policy(StateKey::new(state.cell, &obs))?.sample(rng)?,
        SamplingPolicy::Uniform => {
            use rand::Rng;
            rng.gen_range(0..ACTION_COUNT)
        }
    };
    let (next, absorbing) = env.step(&state, action, rng)?;
    buffer.append(Transition {
        state_id: state.cell,
        obs,
        action,
        next_state_id: next.cell,
        next_obs: env.observe(&next),
        absorbing,
    });
    Ok(if absorbing {
        env.reset(&env.config().train_init, rng)
    } else {
        next
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::Observation;
    use crate::rng::seeded;
    use crate::softq::squared_soft_bellman_error;

    fn t(s: usize, a: usize, s2: usize, absorbing: bool) -> Transition {
        Transition {
            state_id: s,
            obs: Observation::new(vec![s as f64 * 0.3 - 0.5, (s % 2) as f64]),
            action: a,
            next_state_id: s2,
            next_obs: Observation::new(vec![s2 as f64 * 0.3 - 0.5, (s2 % 2) as f64]),
            absorbing,
        }
    }

    fn zero_q(states: usize, actions: usize) -> SoftQFunction {
        SoftQFunction::Tabular(TabularQ::zeros(states, actions))
    }

    #[test]
    fn lambda_zero_reduces_to_the_demo_term() {
        let demo = [t(0, 1, 1, false), t(1, 0, 2, true)];
        let samp = [t(2, 1, 0, false)];
        let q = SoftQFunction::Tabular(
            TabularQ::from_rows(vec![vec![0.2, -0.1], vec![1.0, 0.4], vec![-0.3, 0.7]]).unwrap(),
        );
        let cfg = TrainConfig {
            lambda_samp: 0.0,
            ..TrainConfig::default()
        };
        let demo_refs: Vec<&Transition> = demo.iter().collect();
        let samp_refs: Vec<&Transition> = samp.iter().collect();
        let loss = sqil_loss(&q, &demo_refs, &samp_refs, &cfg).unwrap();
        let expected = squared_soft_bellman_error(&q, &demo, 1.0, cfg.gamma).unwrap();
        assert_eq!(loss, expected);
    }

    #[test]
    fn sqil_hand_case() {
        let demo = [t(0, 1, 1, false)];
        let cfg = TrainConfig::default();
        let loss = sqil_loss(&zero_q(2, 2), &[&demo[0]], &[], &cfg).unwrap();
        assert!((loss - (1.0 + 0.9 * 2f64.ln()).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn gamma_zero_is_a_plain_penalty() {
        let rows = vec![vec![0.2, -0.1], vec![1.0, 0.4], vec![-0.3, 0.7]];
        let q = SoftQFunction::Tabular(TabularQ::from_rows(rows.clone()).unwrap());
        let demo = [t(0, 1, 1, false), t(1, 0, 2, false)];
        let samp = [t(2, 1, 0, false)];
        let cfg = TrainConfig {
            gamma: 0.0,
            lambda_samp: 1.0,
            ..TrainConfig::default()
        };
        let loss = sqil_loss(&q, &[&demo[0], &demo[1]], &[&samp[0]], &cfg).unwrap();
        let expected = ((rows[0][1] - 1.0).powi(2) + (rows[1][0] - 1.0).powi(2)) / 2.0 + rows[2][1].powi(2);
        assert!((loss - expected).abs() < 1e-15);
    }

    #[test]
    fn empty_demo_batch_is_rejected() {
        let cfg = TrainConfig::default();
        let q = zero_q(2, 2);
        assert!(matches!(sqil_loss(&q, &[], &[], &cfg), Err(Error::Contract(_))));
        assert!(matches!(bc_loss(&q, &[]), Err(Error::Contract(_))));
        assert!(matches!(rbc_loss(&q, &[], &[], &cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn bc_examples() {
        let demo = t(0, 2, 1, false);
        let loss = bc_loss(&zero_q(2, 4), &[&demo]).unwrap();
        assert!((loss - 4f64.ln()).abs() <= 1e-12);

        let mut rows = vec![vec![0.0; 4]; 2];
        rows[0][2] = 50.0;
        let q = SoftQFunction::Tabular(TabularQ::from_rows(rows.clone()).unwrap());
        assert!(bc_loss(&q, &[&demo]).unwrap() <= 1e-20);

        for r in rows.iter_mut() {
            for v in r.iter_mut() {
                *v += 7.5;
            }
        }
        let shifted = SoftQFunction::Tabular(TabularQ::from_rows(rows).unwrap());
        assert!((bc_loss(&shifted, &[&demo]).unwrap() - bc_loss(&q, &[&demo]).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn rbc_reduces_to_bc_without_penalty() {
        let demo = [t(0, 1, 1, false), t(1, 0, 2, true)];
        let samp = [t(2, 1, 0, false)];
        let q = SoftQFunction::Tabular(
            TabularQ::from_rows(vec![vec![0.2, -0.1], vec![1.0, 0.4], vec![-0.3, 0.7]]).unwrap(),
        );
        let cfg = TrainConfig {
            lambda_demo: 0.0,
            lambda_samp: 0.0,
            ..TrainConfig::default()
        };
        let demo_refs: Vec<&Transition> = demo.iter().collect();
        let rbc = rbc_loss(&q, &demo_refs, &[&samp[0]], &cfg).unwrap();
        assert_eq!(rbc, bc_loss(&q, &demo_refs).unwrap());
    }

    #[test]
    fn rbc_hand_case() {
        let demo = t(0, 3, 1, false);
        let cfg = TrainConfig {
            gamma: 0.0,
            lambda_demo: 1.0,
            ..TrainConfig::default()
        };
        let loss = rbc_loss(&zero_q(2, 4), &[&demo], &[], &cfg).unwrap();
        assert!((loss - 1.386294).abs() < 1e-6);
        assert!((loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn rbc_matches_single_lambda_form_on_the_union() {
        // with equal lambdas and equal batch sizes, the split penalty equals
        // lambda * delta^2 over the union scaled by 2 (mean over half as many)
        let q = SoftQFunction::Tabular(
            TabularQ::from_rows(vec![vec![0.2, -0.1], vec![1.0, 0.4], vec![-0.3, 0.7]]).unwrap(),
        );
        let demo = [t(0, 1, 1, false), t(1, 0, 2, true)];
        let samp = [t(2, 1, 0, false), t(1, 1, 2, false)];
        let lambda = 0.8;
        let cfg = TrainConfig {
            lambda_demo: lambda,
            lambda_samp: lambda,
            ..TrainConfig::default()
        };
        let demo_refs: Vec<&Transition> = demo.iter().collect();
        let samp_refs: Vec<&Transition> = samp.iter().collect();
        let split = rbc_loss(&q, &demo_refs, &samp_refs, &cfg).unwrap();
        let union: Vec<Transition> = demo.iter().chain(&samp).cloned().collect();
        let combined = bc_loss(&q, &demo_refs).unwrap()
            + 2.0 * lambda * squared_soft_bellman_error(&q, &union, 0.0, cfg.gamma).unwrap();
        assert!((split - combined).abs() < 1e-12, "{split} vs {combined}");
    }

    #[test]
    fn loss_gradients_pass_finite_differences() {
        use rand::Rng;
        let mut rng = seeded(5);
        for trial in 0..20 {
            let net = Network::new(&[2, 6, 3], &mut rng).unwrap();
            let q = SoftQFunction::Approx(net);
            let demo: Vec<Transition> = (0..4)
                .map(|i| t(i, rng.gen_range(0..3), i + 1, rng.gen_bool(0.3)))
                .collect();
            let samp: Vec<Transition> = (0..4)
                .map(|i| t(i + 3, rng.gen_range(0..3), i, rng.gen_bool(0.3)))
                .collect();
            let d: Vec<&Transition> = demo.iter().collect();
            let s: Vec<&Transition> = samp.iter().collect();
            let cfg = TrainConfig {
                gamma: rng.gen_range(0.0..1.0),
                lambda_samp: rng.gen_range(0.0..2.0),
                lambda_demo: rng.gen_range(0.0..2.0),
                ..TrainConfig::default()
            };
            for objective in [
                sqil_objective(&d, &s, &cfg).unwrap(),
                bc_objective(&d).unwrap(),
                rbc_objective(&d, &s, &cfg).unwrap(),
            ] {
                let err = objective.finite_diff_check(&q, GradientMode::Semi, 1e-5).unwrap();
                assert!(err <= 1e-4, "trial {trial}: {err}");
            }
        }
    }

    #[test]
    fn ablation_configs_change_one_field() {
        let base = TrainConfig::default();
        let lambda0 = make_ablation_config(&base, Ablation::Lambda0).unwrap();
        assert_eq!(lambda0, TrainConfig { lambda_samp: 0.0, ..base.clone() });
        let gamma0 = make_ablation_config(&base, Ablation::Gamma0).unwrap();
        assert_eq!(gamma0, TrainConfig { gamma: 0.0, ..base.clone() });
        let uniform = make_ablation_config(&base, Ablation::Uniform).unwrap();
        assert_eq!(
            uniform,
            TrainConfig {
                sampling_policy: SamplingPolicy::Uniform,
                ..base.clone()
            }
        );
        let rbc = make_ablation_config(&base, Ablation::Rbc).unwrap();
        assert_eq!(rbc, TrainConfig { algorithm: Algorithm::Rbc, ..base.clone() });
        // demo reward constant 1 / (2 lambda_demo) equals SQIL's +1
        assert_eq!(1.0 / (2.0 * rbc.lambda_demo), 1.0);
    }

    #[test]
    fn ablations_need_a_sqil_base_and_known_names() {
        let bc = TrainConfig {
            algorithm: Algorithm::Bc,
            ..TrainConfig::default()
        };
        assert!(make_ablation_config(&bc, Ablation::Gamma0).is_err());
        assert!("lambda0".parse::<Ablation>().is_ok());
        assert!("dropout".parse::<Ablation>().is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = TrainConfig {
            algorithm: Algorithm::Rbc,
            model: ModelKind::Mlp,
            seed: 42,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(TrainConfig::from_toml("gamma = 2.0").is_err());
        assert!(TrainConfig::from_toml("batch_size = 3").is_err());
        assert!(TrainConfig::from_toml("not_a_field = 1").is_err());
    }

    #[test]
    fn convergence_detector() {
        assert!(!has_converged(&[1.0; 10], 20, 1e-3));
        assert!(has_converged(&[1.0; 20], 20, 1e-3));
        let mut noisy = vec![1.0; 19];
        noisy.push(1.5);
        assert!(!has_converged(&noisy, 20, 1e-3));
    }
}
