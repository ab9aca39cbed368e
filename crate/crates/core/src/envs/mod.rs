//! Stochastic gridworld navigation with absorbing terminals.
//!
//! Cells are indexed row-major from the bottom-left corner:
//! `cell = y * width + x`, with `y = 0` the bottom row. "Up" increases `y`.
//! Demonstrations and training episodes draw their start cell from two
//! independently configured [`InitDist`]s, which is how train/demo
//! distribution shift is produced.

mod scenario;

use std::fmt;
use std::sync::Arc;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use scenario::{load_scenario, parse_scenario, preset, scenario_to_string, PRESET_NAMES};

/// Number of actions in every gridworld: four moves plus "stay".
pub const ACTION_COUNT: usize = 5;

/// Tolerance used when checking that a probability vector sums to one.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Up,
    Right,
    Down,
    Left,
    Stay,
}

impl Action {
    pub const ALL: [Action; ACTION_COUNT] = [
        Action::Up,
        Action::Right,
        Action::Down,
        Action::Left,
        Action::Stay,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Action> {
        Self::ALL.get(index).copied()
    }

    fn delta(self) -> (i64, i64) {
        match self {
            Action::Up => (0, 1),
            Action::Right => (1, 0),
            Action::Down => (0, -1),
            Action::Left => (-1, 0),
            Action::Stay => (0, 0),
        }
    }

    /// The two moves a slip can turn this action into. Slips never reverse
    /// direction, and "stay" never slips.
    fn perpendicular(self) -> Option<[Action; 2]> {
        match self {
            Action::Up | Action::Down => Some([Action::Left, Action::Right]),
            Action::Left | Action::Right => Some([Action::Up, Action::Down]),
            Action::Stay => None,
        }
    }

    pub fn arrow(self) -> char {
        match self {
            Action::Up => '^',
            Action::Right => '>',
            Action::Down => 'v',
            Action::Left => '<',
            Action::Stay => 'o',
        }
    }
}

/// Distribution over start cells, stored as `(cell, probability)` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InitDist {
    pub support: Vec<(usize, f64)>,
}

impl InitDist {
    pub fn new(support: Vec<(usize, f64)>) -> Self {
        Self { support }
    }

    pub fn single(cell: usize) -> Self {
        Self::new(vec![(cell, 1.0)])
    }

    pub fn uniform(cells: &[usize]) -> Self {
        let p = 1.0 / cells.len() as f64;
        Self::new(cells.iter().map(|&c| (c, p)).collect())
    }

    pub fn contains(&self, cell: usize) -> bool {
        self.support.iter().any(|&(c, p)| c == cell && p > 0.0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        // validated non-empty with positive mass at construction of GridNav
        let weights = WeightedIndex::new(self.support.iter().map(|&(_, p)| p))
            .expect("validated init distribution");
        self.support[weights.sample(rng)].0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridNavConfig {
    #[serde(default)]
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub goal_cells: Vec<usize>,
    #[serde(default)]
    pub hazard_cells: Vec<usize>,
    #[serde(default)]
    pub walls: Vec<usize>,
    pub slip_prob: f64,
    pub step_limit: usize,
    pub goal_reward: f64,
    pub step_reward: f64,
    pub hazard_reward: f64,
    pub demo_init: InitDist,
    pub train_init: InitDist,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Open,
    Wall,
    Goal,
    Hazard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct State {
    pub cell: usize,
    pub steps_elapsed: usize,
}

/// Feature vector for a cell: a one-hot block over all cells followed by the
/// cell's `(x, y)` coordinates scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub features: Arc<[f64]>,
}

impl Observation {
    pub fn new(features: Vec<f64>) -> Self {
        Self {
            features: features.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state_id: usize,
    pub obs: Observation,
    pub action: usize,
    pub next_state_id: usize,
    pub next_obs: Observation,
    pub absorbing: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Goal,
    Hazard,
    StepLimit,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Termination::Goal => "goal",
            Termination::Hazard => "hazard",
            Termination::StepLimit => "step_limit",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub transitions: Vec<Transition>,
    pub terminated_by: Termination,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn start_cell(&self) -> Option<usize> {
        self.transitions.first().map(|t| t.state_id)
    }
}

/// Anything that maps a state to a distribution over the [`ACTION_COUNT`] actions.
pub trait Policy {
    fn action_probs(&self, state: &State, obs: &Observation) -> Vec<f64>;
}

impl<F> Policy for F
where
    F: Fn(&State, &Observation) -> Vec<f64>,
{
    fn action_probs(&self, state: &State, obs: &Observation) -> Vec<f64> {
        self(state, obs)
    }
}

/// A finite MDP with enumerable states and exact transition probabilities.
///
/// Terminal states are absorbing: their soft value is zero, and they are never
/// stepped from.
pub trait FiniteMdp {
    fn state_count(&self) -> usize;
    fn action_count(&self) -> usize;
    fn is_terminal(&self, state: usize) -> bool;
    /// Next-state distribution as `(state, probability)` pairs.
    fn transition_probs(&self, state: usize, action: usize) -> Vec<(usize, f64)>;
    /// Expected immediate reward.
    fn reward(&self, state: usize, action: usize) -> f64;
}

/// Explicitly tabulated MDP, mostly useful for tests and small examples.
#[derive(Clone, Debug)]
pub struct ExplicitMdp {
    pub rewards: Vec<Vec<f64>>,
    pub transitions: Vec<Vec<Vec<(usize, f64)>>>,
    pub terminal: Vec<bool>,
}

impl FiniteMdp for ExplicitMdp {
    fn state_count(&self) -> usize {
        self.rewards.len()
    }

    fn action_count(&self) -> usize {
        self.rewards.first().map_or(0, Vec::len)
    }

    fn is_terminal(&self, state: usize) -> bool {
        self.terminal[state]
    }

    fn transition_probs(&self, state: usize, action: usize) -> Vec<(usize, f64)> {
        self.transitions[state][action].clone()
    }

    fn reward(&self, state: usize, action: usize) -> f64 {
        self.rewards[state][action]
    }
}

#[derive(Clone, Debug)]
pub struct GridNav {
    config: GridNavConfig,
    kinds: Vec<CellKind>,
    observations: Vec<Observation>,
}

/// Validate `config` and build the environment.
pub fn make_gridnav(config: GridNavConfig) -> Result<GridNav> {
    GridNav::new(config)
}

impl GridNav {
    pub fn new(config: GridNavConfig) -> Result<Self> {
        if config.width == 0 || config.height == 0 {
            return Err(Error::Config("grid dimensions must be positive".into()));
        }
        if config.step_limit == 0 {
            return Err(Error::Config("step_limit must be positive".into()));
        }
        if !(0.0..=1.0).contains(&config.slip_prob) {
            return Err(Error::Config(format!(
                "slip_prob {} outside [0, 1]",
                config.slip_prob
            )));
        }
        for (name, v) in [
            ("goal_reward", config.goal_reward),
            ("step_reward", config.step_reward),
            ("hazard_reward", config.hazard_reward),
        ] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite")));
            }
        }

        let n = config.width * config.height;
        let mut kinds = vec![CellKind::Open; n];
        for (name, cells, kind) in [
            ("walls", &config.walls, CellKind::Wall),
            ("goal_cells", &config.goal_cells, CellKind::Goal),
            ("hazard_cells", &config.hazard_cells, CellKind::Hazard),
        ] {
            for &cell in cells {
                if cell >= n {
                    return Err(Error::Config(format!(
                        "{name} contains cell {cell} outside a {}x{} grid",
                        config.width, config.height
                    )));
                }
                match kinds[cell] {
                    CellKind::Open => kinds[cell] = kind,
                    existing if existing == kind => {}
                    existing => {
                        return Err(Error::Config(format!(
                            "cell {cell} is listed in {name} but is already {existing:?}"
                        )))
                    }
                }
            }
        }

        for (name, init) in [("demo_init", &config.demo_init), ("train_init", &config.train_init)] {
            if init.support.is_empty() {
                return Err(Error::Config(format!("{name} has empty support")));
            }
            let mut total = 0.0;
            for &(cell, p) in &init.support {
                if cell >= n {
                    return Err(Error::Config(format!("{name} cell {cell} out of bounds")));
                }
                if kinds[cell] != CellKind::Open {
                    return Err(Error::Config(format!(
                        "{name} cell {cell} is a {:?} cell",
                        kinds[cell]
                    )));
                }
                if !(p >= 0.0 && p.is_finite()) {
                    return Err(Error::Config(format!("{name} probability {p} is invalid")));
                }
                total += p;
            }
            if (total - 1.0).abs() > 1e-12 {
                return Err(Error::Config(format!(
                    "{name} probabilities sum to {total}, not 1"
                )));
            }
        }

        let observations = (0..n)
            .map(|cell| encode_cell(cell, config.width, config.height))
            .collect();

        Ok(Self {
            config,
            kinds,
            observations,
        })
    }

    pub fn config(&self) -> &GridNavConfig {
        &self.config
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn height(&self) -> usize {
        self.config.height
    }

    pub fn cell_count(&self) -> usize {
        self.kinds.len()
    }

    pub fn obs_len(&self) -> usize {
        self.cell_count() + 2
    }

    pub fn cell_kind(&self, cell: usize) -> CellKind {
        self.kinds[cell]
    }

    pub fn is_absorbing_cell(&self, cell: usize) -> bool {
        matches!(self.kinds[cell], CellKind::Goal | CellKind::Hazard)
    }

    /// Cells an agent can occupy (everything except walls).
    pub fn reachable_cells(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.cell_count()).filter(|&c| self.kinds[c] != CellKind::Wall)
    }

    pub fn coords(&self, cell: usize) -> (usize, usize) {
        (cell % self.config.width, cell / self.config.width)
    }

    pub fn cell_at(&self, x: usize, y: usize) -> usize {
        y * self.config.width + x
    }

    /// Cell reached by moving exactly as `action` says. Off-grid and wall moves
    /// leave the agent where it is.
    fn move_target(&self, cell: usize, action: Action) -> usize {
        let (x, y) = self.coords(cell);
        let (dx, dy) = action.delta();
        let nx = x as i64 + dx;
        let ny = y as i64 + dy;
        if nx < 0 || ny < 0 || nx >= self.config.width as i64 || ny >= self.config.height as i64 {
            return cell;
        }
        let target = self.cell_at(nx as usize, ny as usize);
        if self.kinds[target] == CellKind::Wall {
            cell
        } else {
            target
        }
    }

    /// Exact next-cell distribution for `(cell, action)`, merged and sorted by cell.
    pub fn transition_probs(&self, cell: usize, action: usize) -> Vec<(usize, f64)> {
        let action = Action::from_index(action).expect("action index in range");
        let slip = self.config.slip_prob;
        let mut row: Vec<(usize, f64)> = Vec::with_capacity(3);
        let mut add = |c: usize, p: f64| {
            if p <= 0.0 {
                return;
            }
            match row.iter_mut().find(|(existing, _)| *existing == c) {
                Some(entry) => entry.1 += p,
                None => row.push((c, p)),
            }
        };
        match action.perpendicular() {
            Some(sides) => {
                add(self.move_target(cell, action), 1.0 - slip);
                for side in sides {
                    add(self.move_target(cell, side), slip / 2.0);
                }
            }
            None => add(cell, 1.0),
        }
        row.sort_by_key(|&(c, _)| c);
        row
    }

    /// Realized reward for one move. Used only to train and score the expert.
    pub fn reward(&self, next_cell: usize) -> f64 {
        self.config.step_reward
            + match self.kinds[next_cell] {
                CellKind::Goal => self.config.goal_reward,
                CellKind::Hazard => self.config.hazard_reward,
                _ => 0.0,
            }
    }

    pub fn observe(&self, state: &State) -> Observation {
        self.observations[state.cell].clone()
    }

    pub fn observe_cell(&self, cell: usize) -> Observation {
        self.observations[cell].clone()
    }

    pub fn reset<R: Rng + ?Sized>(&self, init: &InitDist, rng: &mut R) -> State {
        State {
            cell: init.sample(rng),
            steps_elapsed: 0,
        }
    }

    /// Sample a successor of `state` under `action`. The flag is true when the
    /// successor is a goal or hazard or the step limit has been reached.
    pub fn step<R: Rng + ?Sized>(
        &self,
        state: &State,
        action: usize,
        rng: &mut R,
    ) -> Result<(State, bool)> {
        if action >= ACTION_COUNT {
            return Err(Error::Usage(format!("action index {action} out of range")));
        }
        if state.cell >= self.cell_count() || self.kinds[state.cell] == CellKind::Wall {
            return Err(Error::Usage(format!("cell {} is not a valid state", state.cell)));
        }
        if self.is_absorbing_cell(state.cell) {
            return Err(Error::Usage(format!(
                "cannot step from absorbing cell {}",
                state.cell
            )));
        }
        if state.steps_elapsed >= self.config.step_limit {
            return Err(Error::Usage(format!(
                "step limit {} already reached",
                self.config.step_limit
            )));
        }
        let row = self.transition_probs(state.cell, action);
        let next_cell = if row.len() == 1 {
            row[0].0
        } else {
            let weights = WeightedIndex::new(row.iter().map(|&(_, p)| p))
                .map_err(|e| Error::Numerical(e.to_string()))?;
            row[weights.sample(rng)].0
        };
        let next = State {
            cell: next_cell,
            steps_elapsed: state.steps_elapsed + 1,
        };
        let absorbing =
            self.is_absorbing_cell(next_cell) || next.steps_elapsed >= self.config.step_limit;
        Ok((next, absorbing))
    }

    /// Run one episode from `init` until an absorbing transition.
    pub fn rollout<P, R>(&self, policy: &P, init: &InitDist, rng: &mut R) -> Result<Rollout>
    where
        P: Policy + ?Sized,
        R: Rng + ?Sized,
    {
        let mut state = self.reset(init, rng);
        let mut obs = self.observe(&state);
        let mut transitions = Vec::new();
        loop {
            let probs = policy.action_probs(&state, &obs);
            check_distribution(&probs, ACTION_COUNT)?;
            let action = sample_action(&probs, rng)?;
            let (next, absorbing) = self.step(&state, action, rng)?;
            let next_obs = self.observe(&next);
            transitions.push(Transition {
                state_id: state.cell,
                obs,
                action,
                next_state_id: next.cell,
                next_obs: next_obs.clone(),
                absorbing,
            });
            if absorbing {
                let terminated_by = match self.kinds[next.cell] {
                    CellKind::Goal => Termination::Goal,
                    CellKind::Hazard => Termination::Hazard,
                    _ => Termination::StepLimit,
                };
                return Ok(Rollout {
                    transitions,
                    terminated_by,
                });
            }
            state = next;
            obs = next_obs;
        }
    }

    /// Draw the grid as text, top row first. `marks` overrides individual cells.
    pub fn render(&self, marks: &[(usize, char)]) -> String {
        let mut out = String::new();
        for y in (0..self.height()).rev() {
            for x in 0..self.width() {
                let cell = self.cell_at(x, y);
                let ch = marks
                    .iter()
                    .rev()
                    .find(|(c, _)| *c == cell)
                    .map(|&(_, ch)| ch)
                    .unwrap_or_else(|| match self.kinds[cell] {
                        CellKind::Open if self.config.demo_init.contains(cell) => 'D',
                        CellKind::Open if self.config.train_init.contains(cell) => 'T',
                        CellKind::Open => '.',
                        CellKind::Wall => '#',
                        CellKind::Goal => 'G',
                        CellKind::Hazard => 'X',
                    });
                out.push(ch);
                if x + 1 < self.width() {
                    out.push(' ');
                }
            }
            out.push('\n');
        }
        out
    }
}

impl FiniteMdp for GridNav {
    fn state_count(&self) -> usize {
        self.cell_count()
    }

    fn action_count(&self) -> usize {
        ACTION_COUNT
    }

    fn is_terminal(&self, state: usize) -> bool {
        // walls are unreachable; treating them as terminal pins their Q rows at zero
        self.kinds[state] != CellKind::Open
    }

    fn transition_probs(&self, state: usize, action: usize) -> Vec<(usize, f64)> {
        GridNav::transition_probs(self, state, action)
    }

    fn reward(&self, state: usize, action: usize) -> f64 {
        if self.is_terminal(state) {
            return 0.0;
        }
        self.transition_probs(state, action)
            .into_iter()
            .map(|(next, p)| p * GridNav::reward(self, next))
            .sum()
    }
}

fn encode_cell(cell: usize, width: usize, height: usize) -> Observation {
    let n = width * height;
    let mut features = vec![0.0; n + 2];
    features[cell] = 1.0;
    let scale = |v: usize, extent: usize| {
        if extent > 1 {
            v as f64 / (extent - 1) as f64
        } else {
            0.0
        }
    };
    features[n] = scale(cell % width, width);
    features[n + 1] = scale(cell / width, height);
    Observation::new(features)
}

/// Check that `probs` is a probability vector over `n` outcomes.
pub fn check_distribution(probs: &[f64], n: usize) -> Result<()> {
    if probs.len() != n {
        return Err(Error::Contract(format!(
            "policy returned {} probabilities for {n} actions",
            probs.len()
        )));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Contract(format!(
            "policy returned invalid probabilities {probs:?}"
        )));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(Error::Contract(format!(
            "policy probabilities sum to {total}, not 1"
        )));
    }
    Ok(())
}

pub(crate) fn sample_action<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> Result<usize> {
    let weights = WeightedIndex::new(probs).map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(weights.sample(rng))
}
