//! Maximum-entropy building blocks: soft values, Boltzmann policies, the
//! squared soft Bellman error, implied rewards and exact soft value iteration.

use std::io::Write;

use rand::Rng;

use crate::approx::Network;
use crate::envs::{FiniteMdp, Observation, Transition};
use crate::error::{Error, Result};

/// Default stopping tolerance for [`soft_value_iteration`].
pub const SVI_TOLERANCE: f64 = 1e-10;
/// Sweep cap for [`soft_value_iteration`].
pub const SVI_MAX_SWEEPS: usize = 100_000;

/// `log(sum(exp(q)))` with the max shifted out. `q` must be non-empty.
pub(crate) fn logsumexp(q: &[f64]) -> f64 {
    let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::INFINITY {
        return max;
    }
    max + q.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax(q: &[f64]) -> Vec<f64> {
    let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = q.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Soft value `log sum_a exp(q_a)` of one row of Q values.
pub fn soft_value(q_row: &[f64]) -> Result<f64> {
    if q_row.is_empty() {
        return Err(Error::Contract("soft value of an empty row".into()));
    }
    if q_row.iter().any(|q| !q.is_finite()) {
        return Err(Error::Contract(format!("non-finite Q row {q_row:?}")));
    }
    Ok(logsumexp(q_row))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActionDistribution {
    pub probs: Vec<f64>,
}

impl ActionDistribution {
    /// Most likely action, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<usize> {
        crate::envs::sample_action(&self.probs, rng)
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Boltzmann distribution `exp(q_a - V)` over the actions of one row.
pub fn boltzmann_policy(q_row: &[f64]) -> Result<ActionDistribution> {
    soft_value(q_row)?;
    Ok(ActionDistribution {
        probs: softmax(q_row),
    })
}

/// Identifies the state a Q row is evaluated at: the cell index for tabular
/// models and the feature vector for networks.
#[derive(Clone, Copy, Debug)]
pub struct StateKey<'a> {
    pub id: usize,
    pub features: &'a [f64],
}

impl<'a> StateKey<'a> {
    pub fn new(id: usize, obs: &'a Observation) -> Self {
        Self {
            id,
            features: &obs.features,
        }
    }

    pub fn current(t: &'a Transition) -> Self {
        Self::new(t.state_id, &t.obs)
    }

    pub fn next(t: &'a Transition) -> Self {
        Self::new(t.next_state_id, &t.next_obs)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TabularQ {
    states: usize,
    actions: usize,
    values: Vec<f64>,
}

impl TabularQ {
    pub fn zeros(states: usize, actions: usize) -> Self {
        Self {
            states,
            actions,
            values: vec![0.0; states * actions],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let actions = rows.first().map_or(0, Vec::len);
        if actions == 0 || rows.iter().any(|r| r.len() != actions) {
            return Err(Error::Config("tabular Q rows must be non-empty and equal length".into()));
        }
        let states = rows.len();
        Self::from_flat(states, actions, rows.into_iter().flatten().collect())
    }

    pub fn from_flat(states: usize, actions: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != states * actions {
            return Err(Error::Shape {
                what: "tabular Q values",
                expected: states * actions,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite tabular Q value".into()));
        }
        Ok(Self {
            states,
            actions,
            values,
        })
    }

    pub fn state_count(&self) -> usize {
        self.states
    }

    pub fn action_count(&self) -> usize {
        self.actions
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.values[state * self.actions..(state + 1) * self.actions]
    }

    pub fn get(&self, state: usize, action: usize) -> f64 {
        self.values[state * self.actions + action]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// CSV with header `state,a0,a1,...`, one row per state.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(writer);
        let mut header = vec!["state".to_string()];
        header.extend((0..self.actions).map(|a| format!("a{a}")));
        csv.write_record(&header)?;
        for s in 0..self.states {
            let mut record = vec![s.to_string()];
            record.extend(self.row(s).iter().map(|v| v.to_string()));
            csv.write_record(&record)?;
        }
        csv.flush()?;
        Ok(())
    }
}

/// A soft Q function, either a table over cells or a network over observations.
#[derive(Clone, Debug, PartialEq)]
pub enum SoftQFunction {
    Tabular(TabularQ),
    Approx(Network),
}

impl SoftQFunction {
    pub fn action_count(&self) -> usize {
        match self {
            SoftQFunction::Tabular(t) => t.actions,
            SoftQFunction::Approx(n) => n.output_size(),
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            SoftQFunction::Tabular(t) => &t.values,
            SoftQFunction::Approx(n) => n.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            SoftQFunction::Tabular(t) => &mut t.values,
            SoftQFunction::Approx(n) => n.params_mut(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().len()
    }

    pub fn q_row(&self, key: StateKey<'_>) -> Result<Vec<f64>> {
        match self {
            SoftQFunction::Tabular(t) => {
                if key.id >= t.states {
                    return Err(Error::Shape {
                        what: "tabular state index",
                        expected: t.states,
                        got: key.id,
                    });
                }
                Ok(t.row(key.id).to_vec())
            }
            SoftQFunction::Approx(n) => n.forward(key.features),
        }
    }

    pub fn policy(&self, key: StateKey<'_>) -> Result<ActionDistribution> {
        boltzmann_policy(&self.q_row(key)?)
    }

    pub fn greedy_action(&self, key: StateKey<'_>) -> Result<usize> {
        Ok(argmax(&self.q_row(key)?))
    }

    /// Analytic gradient of a loss over the Q rows at `keys`; see
    /// [`Network::loss_gradient`] for the `loss_fn` contract.
    pub fn loss_gradient<F>(&self, keys: &[StateKey<'_>], loss_fn: F) -> Result<(f64, Vec<f64>)>
    where
        F: FnOnce(&[Vec<f64>]) -> (f64, Vec<Vec<f64>>),
    {
        match self {
            SoftQFunction::Approx(net) => {
                let inputs: Vec<&[f64]> = keys.iter().map(|k| k.features).collect();
                net.loss_gradient(&inputs, loss_fn)
            }
            SoftQFunction::Tabular(table) => {
                let rows = keys
                    .iter()
                    .map(|&k| self.q_row(k))
                    .collect::<Result<Vec<_>>>()?;
                let (loss, row_grads) = loss_fn(&rows);
                if row_grads.len() != keys.len() {
                    return Err(Error::Shape {
                        what: "output gradients",
                        expected: keys.len(),
                        got: row_grads.len(),
                    });
                }
                let mut grad = vec![0.0; table.values.len()];
                for (key, g) in keys.iter().zip(&row_grads) {
                    let start = key.id * table.actions;
                    for (dst, src) in grad[start..start + table.actions].iter_mut().zip(g) {
                        *dst += src;
                    }
                }
                if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Numerical(format!(
                        "non-finite loss or gradient (loss = {loss})"
                    )));
                }
                Ok((loss, grad))
            }
        }
    }

    fn with_params(&self, params: &[f64]) -> SoftQFunction {
        let mut q = self.clone();
        q.params_mut().copy_from_slice(params);
        q
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradientMode {
    /// Bootstrap targets are treated as constants.
    Semi,
    /// Gradients also flow through `V(s')` in the targets.
    Full,
}

#[derive(Clone, Debug)]
enum Term {
    /// `weight * (Q(row, action) - reward - gamma * V(next))^2`, with `V = 0`
    /// when there is no next row (absorbing successor).
    Bellman {
        weight: f64,
        row: usize,
        action: usize,
        next: Option<usize>,
        reward: f64,
        gamma: f64,
    },
    /// `weight * (V(row) - Q(row, action))`, the negative log-likelihood of
    /// `action` under the Boltzmann policy.
    NegLogLik { weight: f64, row: usize, action: usize },
    /// `weight * V(row)`.
    SoftValue { weight: f64, row: usize },
}

/// A loss written as a weighted sum of Bellman, likelihood and soft-value
/// terms over a set of Q rows. Every trainer loss is built from one of these.
#[derive(Clone, Debug, Default)]
pub struct Objective<'a> {
    keys: Vec<StateKey<'a>>,
    terms: Vec<Term>,
}

impl<'a> Objective<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    fn push_key(&mut self, key: StateKey<'a>) -> usize {
        self.keys.push(key);
        self.keys.len() - 1
    }

    /// Add `weight * sum_t (Q(s,a) - (reward + gamma V(s')))^2` over `batch`.
    pub fn add_bellman(&mut self, batch: &[&'a Transition], reward: f64, gamma: f64, weight: f64) {
        for t in batch {
            let row = self.push_key(StateKey::current(t));
            let next = (!t.absorbing).then(|| self.push_key(StateKey::next(t)));
            self.terms.push(Term::Bellman {
                weight,
                row,
                action: t.action,
                next,
                reward,
                gamma,
            });
        }
    }

    /// Add `weight * sum_t (V(s) - Q(s,a))` over `batch`.
    pub fn add_neg_log_lik(&mut self, batch: &[&'a Transition], weight: f64) {
        for t in batch {
            let row = self.push_key(StateKey::current(t));
            self.terms.push(Term::NegLogLik {
                weight,
                row,
                action: t.action,
            });
        }
    }

    pub fn add_soft_value(&mut self, key: StateKey<'a>, weight: f64) {
        let row = self.push_key(key);
        self.terms.push(Term::SoftValue { weight, row });
    }

    fn evaluate(&self, rows: &[Vec<f64>], mode: Option<GradientMode>) -> (f64, Vec<Vec<f64>>) {
        let mut loss = 0.0;
        let mut grads: Vec<Vec<f64>> = match mode {
            Some(_) => rows.iter().map(|r| vec![0.0; r.len()]).collect(),
            None => Vec::new(),
        };
        for term in &self.terms {
            match *term {
                Term::Bellman {
                    weight,
                    row,
                    action,
                    next,
                    reward,
                    gamma,
                } => {
                    let next_value = next.map_or(0.0, |n| logsumexp(&rows[n]));
                    let diff = rows[row][action] - reward - gamma * next_value;
                    loss += weight * diff * diff;
                    if let Some(mode) = mode {
                        grads[row][action] += 2.0 * weight * diff;
                        if let (GradientMode::Full, Some(n)) = (mode, next) {
                            let scale = -2.0 * weight * diff * gamma;
                            for (g, p) in grads[n].iter_mut().zip(softmax(&rows[n])) {
                                *g += scale * p;
                            }
                        }
                    }
                }
                Term::NegLogLik {
                    weight,
                    row,
                    action,
                } => {
                    loss += weight * (logsumexp(&rows[row]) - rows[row][action]);
                    if mode.is_some() {
                        for (g, p) in grads[row].iter_mut().zip(softmax(&rows[row])) {
                            *g += weight * p;
                        }
                        grads[row][action] -= weight;
                    }
                }
                Term::SoftValue { weight, row } => {
                    loss += weight * logsumexp(&rows[row]);
                    if mode.is_some() {
                        for (g, p) in grads[row].iter_mut().zip(softmax(&rows[row])) {
                            *g += weight * p;
                        }
                    }
                }
            }
        }
        (loss, grads)
    }

    pub fn value(&self, q: &SoftQFunction) -> Result<f64> {
        let rows = self
            .keys
            .iter()
            .map(|&k| q.q_row(k))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.evaluate(&rows, None).0)
    }

    pub fn value_and_gradient(&self, q: &SoftQFunction, mode: GradientMode) -> Result<(f64, Vec<f64>)> {
        q.loss_gradient(&self.keys, |rows| self.evaluate(rows, Some(mode)))
    }

    /// Replace every bootstrap target with its current value under `target`.
    /// The full gradient of the result is the semi-gradient of `self`.
    pub fn freeze_targets(&self, target: &SoftQFunction) -> Result<Objective<'a>> {
        let mut frozen = Objective::new();
        for term in &self.terms {
            match *term {
                Term::Bellman {
                    weight,
                    row,
                    action,
                    next,
                    reward,
                    gamma,
                } => {
                    let bootstrap = match next {
                        Some(n) => gamma * logsumexp(&target.q_row(self.keys[n])?),
                        None => 0.0,
                    };
                    let row = frozen.push_key(self.keys[row]);
                    frozen.terms.push(Term::Bellman {
                        weight,
                        row,
                        action,
                        next: None,
                        reward: reward + bootstrap,
                        gamma: 0.0,
                    });
                }
                Term::NegLogLik {
                    weight,
                    row,
                    action,
                } => {
                    let row = frozen.push_key(self.keys[row]);
                    frozen.terms.push(Term::NegLogLik {
                        weight,
                        row,
                        action,
                    });
                }
                Term::SoftValue { weight, row } => {
                    let row = frozen.push_key(self.keys[row]);
                    frozen.terms.push(Term::SoftValue { weight, row });
                }
            }
        }
        Ok(frozen)
    }

    /// Central-difference gradient of [`Objective::value`] around `q`'s parameters.
    pub fn numeric_gradient(&self, q: &SoftQFunction, epsilon: f64) -> Result<Vec<f64>> {
        crate::approx::central_differences(q.params(), epsilon, |p| self.value(&q.with_params(p)))
    }

    /// Max relative error between the analytic gradient in `mode` and central
    /// differences. For [`GradientMode::Semi`] the targets are frozen first, so
    /// the finite differences see them as constants too.
    pub fn finite_diff_check(&self, q: &SoftQFunction, mode: GradientMode, epsilon: f64) -> Result<f64> {
        let (_, analytic) = self.value_and_gradient(q, mode)?;
        let numeric = match mode {
            GradientMode::Full => self.numeric_gradient(q, epsilon)?,
            GradientMode::Semi => self.freeze_targets(q)?.numeric_gradient(q, epsilon)?,
        };
        Ok(crate::approx::max_relative_error(&analytic, &numeric))
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Contract(format!("gamma {gamma} outside [0, 1]")));
    }
    Ok(())
}

/// Mean squared soft Bellman error of `batch` under a constant reward `r`.
pub fn squared_soft_bellman_error(
    q: &SoftQFunction,
    batch: &[Transition],
    r: f64,
    gamma: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("squared soft Bellman error of an empty batch".into()));
    }
    check_gamma(gamma)?;
    let refs: Vec<&Transition> = batch.iter().collect();
    let mut objective = Objective::new();
    objective.add_bellman(&refs, r, gamma, 1.0 / batch.len() as f64);
    objective.value(q)
}

/// Reward implied by `q` for one observed transition: `Q(s,a) - gamma V(s')`,
/// with `V(s') = 0` for absorbing successors.
pub fn implied_reward(q: &SoftQFunction, t: &Transition, gamma: f64) -> Result<f64> {
    let q_sa = q.q_row(StateKey::current(t))?[t.action];
    if t.absorbing {
        return Ok(q_sa);
    }
    Ok(q_sa - gamma * soft_value(&q.q_row(StateKey::next(t))?)?)
}

#[derive(Clone, Debug)]
pub struct SoftValueSolution {
    pub q: TabularQ,
    /// Sup-norm change of Q in each sweep.
    pub residuals: Vec<f64>,
}

impl SoftValueSolution {
    pub fn into_q(self) -> SoftQFunction {
        SoftQFunction::Tabular(self.q)
    }
}

/// Solve the soft Bellman equation of `mdp` by synchronous sweeps
/// `Q <- R + gamma E[V(s')]`, stopping once a sweep changes Q by at most `tol`.
pub fn soft_value_iteration<M: FiniteMdp + ?Sized>(
    mdp: &M,
    gamma: f64,
    tol: f64,
) -> Result<SoftValueSolution> {
    soft_value_iteration_capped(mdp, gamma, tol, SVI_MAX_SWEEPS)
}

pub fn soft_value_iteration_capped<M: FiniteMdp + ?Sized>(
    mdp: &M,
    gamma: f64,
    tol: f64,
    max_sweeps: usize,
) -> Result<SoftValueSolution> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Contract(format!("soft value iteration needs gamma in [0, 1), got {gamma}")));
    }
    if !(tol > 0.0) {
        return Err(Error::Contract(format!("tolerance must be positive, got {tol}")));
    }
    let n_s = mdp.state_count();
    let n_a = mdp.action_count();
    if n_s == 0 || n_a == 0 {
        return Err(Error::Contract("MDP has no states or no actions".into()));
    }

    let rewards: Vec<f64> = (0..n_s)
        .flat_map(|s| (0..n_a).map(move |a| (s, a)))
        .map(|(s, a)| mdp.reward(s, a))
        .collect();
    let transitions: Vec<Vec<(usize, f64)>> = (0..n_s)
        .flat_map(|s| (0..n_a).map(move |a| (s, a)))
        .map(|(s, a)| {
            if mdp.is_terminal(s) {
                Vec::new()
            } else {
                mdp.transition_probs(s, a)
            }
        })
        .collect();

    let mut q = rewards.clone();
    let mut values = vec![0.0; n_s];
    let mut residuals = Vec::new();
    let mut residual = f64::INFINITY;
    for _ in 0..max_sweeps {
        for (s, v) in values.iter_mut().enumerate() {
            *v = if mdp.is_terminal(s) {
                0.0
            } else {
                logsumexp(&q[s * n_a..(s + 1) * n_a])
            };
        }
        residual = 0.0;
        for i in 0..n_s * n_a {
            let expected: f64 = transitions[i].iter().map(|&(s2, p)| p * values[s2]).sum();
            let updated = rewards[i] + gamma * expected;
            residual = f64::max(residual, (updated - q[i]).abs());
            q[i] = updated;
        }
        if !residual.is_finite() {
            return Err(Error::Numerical("soft value iteration produced a non-finite value".into()));
        }
        residuals.push(residual);
        if residual <= tol {
            return Ok(SoftValueSolution {
                q: TabularQ::from_flat(n_s, n_a, q)?,
                residuals,
            });
        }
    }
    Err(Error::NonConvergence {
        sweeps: max_sweeps,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{preset, GridNav, GridNavConfig, InitDist, ExplicitMdp, State};
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn obs(v: &[f64]) -> Observation {
        Observation::new(v.to_vec())
    }

    fn transition(s: usize, a: usize, s2: usize, absorbing: bool) -> Transition {
        Transition {
            state_id: s,
            obs: obs(&[s as f64]),
            action: a,
            next_state_id: s2,
            next_obs: obs(&[s2 as f64]),
            absorbing,
        }
    }

    #[test]
    fn soft_value_examples() {
        assert!((soft_value(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(soft_value(&[3.25]).unwrap(), 3.25);
        let big = soft_value(&[1000.0, 1000.0]).unwrap();
        assert!((big - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!(matches!(soft_value(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn boltzmann_examples() {
        assert_eq!(boltzmann_policy(&[1.0, 1.0]).unwrap().probs, vec![0.5, 0.5]);
        let p = boltzmann_policy(&[2f64.ln(), 0.0]).unwrap().probs;
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn bellman_error_hand_case() {
        let q = SoftQFunction::Tabular(TabularQ::zeros(2, 2));
        let batch = [transition(0, 1, 1, false)];
        let err = squared_soft_bellman_error(&q, &batch, 1.0, 0.9).unwrap();
        let expected = (1.0 + 0.9 * 2f64.ln()).powi(2);
        assert!((err - expected).abs() <= 1e-12);
        assert!((err - 2.63683).abs() < 1e-5);

        let absorbing = [transition(0, 0, 1, true)];
        assert_eq!(squared_soft_bellman_error(&q, &absorbing, 0.0, 0.9).unwrap(), 0.0);
        assert!(squared_soft_bellman_error(&q, &[], 0.0, 0.9).is_err());
        assert!(squared_soft_bellman_error(&q, &batch, 0.0, 1.5).is_err());
    }

    #[test]
    fn implied_reward_examples() {
        let q = SoftQFunction::Tabular(TabularQ::zeros(2, 2));
        let t = transition(0, 0, 1, false);
        assert_eq!(implied_reward(&q, &t, 0.0).unwrap(), 0.0);
        // a zero table still has V(s') = ln 2
        let r = implied_reward(&q, &t, 0.9).unwrap();
        assert!((r + 0.9 * 2f64.ln()).abs() < 1e-15);
        let q = SoftQFunction::Tabular(TabularQ::from_rows(vec![vec![1.5, -2.0], vec![0.3, 0.1]]).unwrap());
        assert_eq!(implied_reward(&q, &t, 0.0).unwrap(), 1.5);
        assert_eq!(implied_reward(&q, &transition(0, 1, 1, true), 0.9).unwrap(), -2.0);
    }

    #[test]
    fn implied_reward_of_zero_q_on_absorbing_is_zero() {
        let q = SoftQFunction::Tabular(TabularQ::zeros(2, 2));
        assert_eq!(implied_reward(&q, &transition(0, 0, 1, true), 0.9).unwrap(), 0.0);
    }

    fn self_loop(reward: f64) -> ExplicitMdp {
        ExplicitMdp {
            rewards: vec![vec![reward]],
            transitions: vec![vec![vec![(0, 1.0)]]],
            terminal: vec![false],
        }
    }

    #[test]
    fn single_state_fixed_point() {
        for r in [1.0, -0.5, 3.0] {
            let sol = soft_value_iteration(&self_loop(r), 0.9, SVI_TOLERANCE).unwrap();
            assert!((sol.q.get(0, 0) - 10.0 * r).abs() <= 1e-8, "{}", sol.q.get(0, 0));
        }
    }

    #[test]
    fn gamma_zero_returns_rewards() {
        let env = preset("shifted-start").unwrap();
        let sol = soft_value_iteration(&env, 0.0, SVI_TOLERANCE).unwrap();
        for s in 0..env.state_count() {
            for a in 0..5 {
                assert_eq!(sol.q.get(s, a), FiniteMdp::reward(&env, s, a));
            }
        }
    }

    #[test]
    fn invalid_solver_inputs() {
        let mdp = self_loop(1.0);
        assert!(soft_value_iteration(&mdp, 1.0, 1e-10).is_err());
        assert!(soft_value_iteration(&mdp, 0.5, 0.0).is_err());
        assert!(matches!(
            soft_value_iteration_capped(&mdp, 0.99, 1e-12, 5),
            Err(Error::NonConvergence { sweeps: 5, .. })
        ));
    }

    #[test]
    fn residuals_contract_on_the_preset() {
        let env = preset("shifted-start").unwrap();
        let gamma = 0.95;
        let sol = soft_value_iteration(&env, gamma, SVI_TOLERANCE).unwrap();
        assert!(*sol.residuals.last().unwrap() <= SVI_TOLERANCE);
        let scale = sol.q.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for w in sol.residuals.windows(2) {
            assert!(w[1] < w[0]);
            assert!(w[1] <= gamma * w[0] + 8.0 * f64::EPSILON * scale, "{} vs {}", w[1], w[0]);
        }
    }

    fn deterministic_env() -> GridNav {
        GridNav::new(GridNavConfig {
            name: "det".into(),
            width: 4,
            height: 3,
            goal_cells: vec![11],
            hazard_cells: vec![5],
            walls: vec![6],
            slip_prob: 0.0,
            step_limit: 50,
            goal_reward: 5.0,
            step_reward: -0.5,
            hazard_reward: -5.0,
            demo_init: InitDist::single(0),
            train_init: InitDist::single(0),
        })
        .unwrap()
    }

    /// Every (state, action) of a deterministic grid, as one transition each.
    fn all_transitions(env: &GridNav) -> Vec<Transition> {
        let mut rng = seeded(0);
        let mut out = Vec::new();
        for cell in env.reachable_cells().filter(|&c| !env.is_absorbing_cell(c)) {
            for a in 0..5 {
                let s = State { cell, steps_elapsed: 0 };
                let (next, _) = env.step(&s, a, &mut rng).unwrap();
                out.push(Transition {
                    state_id: cell,
                    obs: env.observe(&s),
                    action: a,
                    next_state_id: next.cell,
                    next_obs: env.observe(&next),
                    absorbing: env.is_absorbing_cell(next.cell),
                });
            }
        }
        out
    }

    #[test]
    fn exact_solution_has_zero_bellman_error_and_recovers_rewards() {
        let env = deterministic_env();
        let gamma = 0.9;
        let q = soft_value_iteration(&env, gamma, SVI_TOLERANCE).unwrap().into_q();
        let transitions = all_transitions(&env);
        for t in &transitions {
            let r = env.reward(t.next_state_id);
            let implied = implied_reward(&q, t, gamma).unwrap();
            assert!((implied - r).abs() <= 1e-10, "{implied} vs {r}");
        }
        // plain moves all carry the step reward
        let plain: Vec<Transition> = transitions
            .into_iter()
            .filter(|t| !t.absorbing)
            .collect();
        let err = squared_soft_bellman_error(&q, &plain, -0.5, gamma).unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn tabular_q_csv_has_header_and_rows() {
        let q = TabularQ::from_rows(vec![vec![0.5, -1.0], vec![2.0, 0.25]]).unwrap();
        let mut out = Vec::new();
        q.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "state,a0,a1\n0,0.5,-1\n1,2,0.25\n");
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        let mut rng = seeded(17);
        let net = Network::new(&[1, 4, 2], &mut rng).unwrap();
        let q = SoftQFunction::Approx(net);
        let batch: Vec<Transition> = (0..4).map(|i| transition(i, i % 2, i + 1, i == 3)).collect();
        let refs: Vec<&Transition> = batch.iter().collect();
        let mut objective = Objective::new();
        objective.add_bellman(&refs, 1.0, 0.9, 0.25);
        objective.add_neg_log_lik(&refs, 1.0);
        objective.add_soft_value(StateKey::current(&batch[0]), 2.0);
        for mode in [GradientMode::Semi, GradientMode::Full] {
            let err = objective.finite_diff_check(&q, mode, 1e-5).unwrap();
            assert!(err <= 1e-6, "{mode:?}: {err}");
        }
    }

    proptest! {
        #[test]
        fn soft_value_shifts_with_constants(
            q in proptest::collection::vec(-50.0f64..50.0, 1..8),
            c in -100.0f64..100.0,
        ) {
            let shifted: Vec<f64> = q.iter().map(|v| v + c).collect();
            let a = soft_value(&q).unwrap();
            let b = soft_value(&shifted).unwrap();
            prop_assert!((b - (a + c)).abs() <= 1e-9);
        }

        #[test]
        fn soft_value_bounds(q in proptest::collection::vec(-50.0f64..50.0, 1..8)) {
            let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let v = soft_value(&q).unwrap();
            prop_assert!(v >= max);
            prop_assert!(v <= max + (q.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn boltzmann_is_shift_invariant_and_normalized(
            q in proptest::collection::vec(-20.0f64..20.0, 1..8),
            c in -50.0f64..50.0,
        ) {
            let p = boltzmann_policy(&q).unwrap();
            let shifted: Vec<f64> = q.iter().map(|v| v + c).collect();
            let p2 = boltzmann_policy(&shifted).unwrap();
            prop_assert!((p.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            for (a, b) in p.probs.iter().zip(&p2.probs) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            prop_assert_eq!(p.argmax(), argmax(&q));
        }

        #[test]
        fn bellman_error_is_nonnegative(
            values in proptest::collection::vec(-5.0f64..5.0, 6),
            r in -2.0f64..2.0,
            gamma in 0.0f64..=1.0,
        ) {
            let q = SoftQFunction::Tabular(TabularQ::from_flat(3, 2, values).unwrap());
            let batch = [transition(0, 1, 1, false), transition(1, 0, 2, true)];
            prop_assert!(squared_soft_bellman_error(&q, &batch, r, gamma).unwrap() >= 0.0);
        }
    }
}
