//! Experiment environments: the parametric toy MDP, the three-room
//! gridworld and random layered MDPs.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::TabularMdp;
use crate::posterior::{
    BeliefMdp, Binding, BoundValue, DirichletPosterior, ParametricScalarPosterior, RewardPosterior,
    TruncatedGaussian,
};
use crate::rng;

/// Symbolic transition probability of the toy MDP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyProb {
    X,
    OneMinusX,
    Beta,
    OneMinusBeta,
    Constant(f64),
}

impl ToyProb {
    /// `(constant, coefficient of X, coefficient of β)`.
    fn coefficients(self) -> (f64, f64, f64) {
        match self {
            ToyProb::X => (0.0, 1.0, 0.0),
            ToyProb::OneMinusX => (1.0, -1.0, 0.0),
            ToyProb::Beta => (0.0, 0.0, 1.0),
            ToyProb::OneMinusBeta => (1.0, 0.0, -1.0),
            ToyProb::Constant(c) => (c, 0.0, 0.0),
        }
    }

    pub fn eval(self, x: f64, beta: f64) -> f64 {
        let (c, cx, cb) = self.coefficients();
        c + cx * x + cb * beta
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyEdge {
    pub from: usize,
    pub to: usize,
    pub prob: ToyProb,
}

/// Single-action MDP whose edges are affine in the uncertain scalar `X` and
/// the deterministic cycle weight `β`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyMdpSpec {
    pub beta: f64,
    pub discount: f64,
    /// Mixture of truncated Gaussians that `X` is drawn from.
    pub posterior_family: Vec<TruncatedGaussian>,
    pub num_states: usize,
    pub terminal_state: usize,
    pub edges: Vec<ToyEdge>,
    /// Reward of the single action in each state.
    pub rewards: Vec<f64>,
}

/// Named posterior families for `X`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyFamily {
    /// `N̄(0.4, 0.1)`.
    Figure,
    /// `N̄(0.5, 0.1)`: a Gaussian-looking value distribution.
    Gaussian,
    /// `0.5 N̄(0.3, 0.03) + 0.5 N̄(0.6, 0.05)`: bimodal.
    Bimodal,
    /// `0.5 N̄(0.3, 0.03) + 0.5 N̄(0.5, 0.15)`: heavy-tailed.
    HeavyTailed,
}

impl ToyFamily {
    pub const ALL: [ToyFamily; 4] = [
        ToyFamily::Figure,
        ToyFamily::Gaussian,
        ToyFamily::Bimodal,
        ToyFamily::HeavyTailed,
    ];

    pub fn components(self) -> Vec<TruncatedGaussian> {
        match self {
            ToyFamily::Figure => vec![TruncatedGaussian::new(0.4, 0.1, 1.0)],
            ToyFamily::Gaussian => vec![TruncatedGaussian::new(0.5, 0.1, 1.0)],
            ToyFamily::Bimodal => vec![
                TruncatedGaussian::new(0.3, 0.03, 0.5),
                TruncatedGaussian::new(0.6, 0.05, 0.5),
            ],
            ToyFamily::HeavyTailed => vec![
                TruncatedGaussian::new(0.3, 0.03, 0.5),
                TruncatedGaussian::new(0.5, 0.15, 0.5),
            ],
        }
    }
}

pub const TOY_S0: usize = 0;
pub const TOY_S1: usize = 1;
pub const TOY_S2: usize = 2;
pub const TOY_TERMINAL: usize = 3;

impl ToyMdpSpec {
    /// s₀ →X s₁, s₀ →(1−X) s₂, s₁ → terminal (reward 1),
    /// s₂ →β s₀, s₂ →(1−β) terminal (reward `r2`).
    pub fn default_topology(beta: f64, family: ToyFamily, r2: f64) -> Self {
        ToyMdpSpec {
            beta,
            discount: 0.9,
            posterior_family: family.components(),
            num_states: 4,
            terminal_state: TOY_TERMINAL,
            edges: vec![
                ToyEdge { from: TOY_S0, to: TOY_S1, prob: ToyProb::X },
                ToyEdge { from: TOY_S0, to: TOY_S2, prob: ToyProb::OneMinusX },
                ToyEdge { from: TOY_S1, to: TOY_TERMINAL, prob: ToyProb::Constant(1.0) },
                ToyEdge { from: TOY_S2, to: TOY_S0, prob: ToyProb::Beta },
                ToyEdge { from: TOY_S2, to: TOY_TERMINAL, prob: ToyProb::OneMinusBeta },
                ToyEdge { from: TOY_TERMINAL, to: TOY_TERMINAL, prob: ToyProb::Constant(1.0) },
            ],
            rewards: vec![0.0, 1.0, r2, 0.0],
        }
    }

    pub fn with_family(beta: f64, family: ToyFamily) -> Self {
        Self::default_topology(beta, family, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta {} outside [0, 1]", self.beta)));
        }
        if self.rewards.len() != self.num_states || self.terminal_state >= self.num_states {
            return Err(Error::Config("toy MDP rewards/terminal do not match num_states".into()));
        }
        for s in 0..self.num_states {
            let (mut c, mut cx, mut cb) = (0.0, 0.0, 0.0);
            for edge in self.edges.iter().filter(|e| e.from == s) {
                if edge.to >= self.num_states {
                    return Err(Error::Config(format!("toy edge to unknown state {}", edge.to)));
                }
                let (a, b, d) = edge.prob.coefficients();
                c += a;
                cx += b;
                cb += d;
            }
            if (c - 1.0).abs() > 1e-12 || cx.abs() > 1e-12 || cb.abs() > 1e-12 {
                return Err(Error::Config(format!(
                    "toy row {s} sums to {c} + {cx}·X + {cb}·β, not identically 1"
                )));
            }
        }
        ParametricScalarPosterior::new(self.posterior_family.clone(), self.bindings())?;
        let acyclic = Self {
            beta: 0.0,
            ..self.clone()
        };
        if !acyclic.build(0.5)?.is_acyclic() {
            return Err(Error::Config("toy topology is cyclic at beta = 0".into()));
        }
        Ok(())
    }

    fn bindings(&self) -> Vec<Binding> {
        self.edges
            .iter()
            .filter_map(|e| {
                let value = match e.prob {
                    ToyProb::X => BoundValue::X,
                    ToyProb::OneMinusX => BoundValue::OneMinusX,
                    _ => return None,
                };
                Some(Binding {
                    state: e.from,
                    action: 0,
                    next: e.to,
                    value,
                })
            })
            .collect()
    }

    /// Posterior over the MDP: `X` from the configured mixture written into
    /// every `X` / `1 − X` edge.
    pub fn posterior(&self) -> Result<ParametricScalarPosterior> {
        ParametricScalarPosterior::new(self.posterior_family.clone(), self.bindings())
    }

    fn build(&self, x: f64) -> Result<TabularMdp> {
        let n = self.num_states;
        let mut transition = vec![0.0; n * n];
        for e in &self.edges {
            transition[e.from * n + e.to] += e.prob.eval(x, self.beta);
        }
        TabularMdp::new(n, 1, self.terminal_state, self.discount, transition, self.rewards.clone())
    }
}

/// Concrete toy MDP at `X = x_value`.
pub fn build_toy_mdp(spec: &ToyMdpSpec, x_value: f64) -> Result<TabularMdp> {
    if !(0.0..=1.0).contains(&x_value) {
        return Err(Error::Config(format!("x {x_value} outside [0, 1]")));
    }
    spec.validate()?;
    spec.build(x_value)
}

pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const LEFT: usize = 2;
pub const RIGHT: usize = 3;

/// Rooms side by side along x, each `room_size × room_size`, joined by
/// single-cell doors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridworldSpec {
    pub rooms: usize,
    pub room_size: usize,
    /// Row of the door in each shared wall; `None` puts it in the middle.
    pub doors: Option<Vec<usize>>,
    pub success_prob: f64,
    pub goal_reward: f64,
    pub step_reward: f64,
    pub discount: f64,
    /// `(room, x, y)`.
    pub start: [usize; 3],
    /// `None` is the far corner of the last room.
    pub goal: Option<[usize; 3]>,
}

impl Default for GridworldSpec {
    fn default() -> Self {
        GridworldSpec {
            rooms: 3,
            room_size: 5,
            doors: None,
            success_prob: 0.95,
            goal_reward: 1.0,
            step_reward: 0.0,
            discount: 0.99,
            start: [0, 0, 0],
            goal: None,
        }
    }
}

impl GridworldSpec {
    pub fn door_rows(&self) -> Vec<usize> {
        self.doors
            .clone()
            .unwrap_or_else(|| vec![self.room_size / 2; self.rooms.saturating_sub(1)])
    }

    pub fn goal_cell(&self) -> [usize; 3] {
        self.goal
            .unwrap_or([self.rooms - 1, self.room_size - 1, self.room_size - 1])
    }

    /// Same spec with every default written out.
    pub fn resolved(&self) -> Self {
        GridworldSpec {
            doors: Some(self.door_rows()),
            goal: Some(self.goal_cell()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let size = self.room_size;
        if self.rooms == 0 || size == 0 {
            return Err(Error::Config("gridworld needs at least one room of positive size".into()));
        }
        if !(0.0..=1.0).contains(&self.success_prob) || !(0.0..1.0).contains(&self.discount) {
            return Err(Error::Config("gridworld probabilities out of range".into()));
        }
        let doors = self.door_rows();
        if doors.len() + 1 != self.rooms || doors.iter().any(|&d| d >= size) {
            return Err(Error::Config(format!("need {} door rows below {size}", self.rooms - 1)));
        }
        for [r, x, y] in [self.start, self.goal_cell()] {
            if r >= self.rooms || x >= size || y >= size {
                return Err(Error::Config(format!("cell ({r}, {x}, {y}) outside the grid")));
            }
        }
        if !self.step_reward.is_finite() || !self.goal_reward.is_finite() {
            return Err(Error::Config("non-finite gridworld reward".into()));
        }
        Ok(())
    }
}

/// A built gridworld: the MDP plus its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Gridworld {
    pub spec: GridworldSpec,
    pub mdp: TabularMdp,
    pub start_state: usize,
    pub goal_state: usize,
}

impl Gridworld {
    pub fn num_cells(&self) -> usize {
        self.spec.rooms * self.spec.room_size * self.spec.room_size
    }

    pub fn cell_index(&self, [room, x, y]: [usize; 3]) -> usize {
        cell_index(self.spec.room_size, room, x, y)
    }

    pub fn cell_of(&self, state: usize) -> Option<[usize; 3]> {
        let size = self.spec.room_size;
        (state < self.num_cells()).then(|| {
            let room = state / (size * size);
            let rest = state % (size * size);
            [room, rest % size, rest / size]
        })
    }

    /// Cells from which some action crosses into a different room.
    pub fn door_cells(&self) -> Vec<usize> {
        (0..self.num_cells())
            .filter(|&s| {
                let [room, ..] = self.cell_of(s).unwrap();
                (0..4).any(|a| {
                    let next = step(&self.spec, &self.spec.door_rows(), self.cell_of(s).unwrap(), a);
                    next[0] != room
                })
            })
            .collect()
    }

    /// Breadth-first distance in moves from the start to the goal cell.
    pub fn shortest_path_len(&self) -> Option<usize> {
        let doors = self.spec.door_rows();
        let mut dist = vec![usize::MAX; self.num_cells()];
        let mut queue = VecDeque::from([self.start_state]);
        dist[self.start_state] = 0;
        while let Some(s) = queue.pop_front() {
            if s == self.goal_state {
                return Some(dist[s]);
            }
            let cell = self.cell_of(s).unwrap();
            for a in 0..4 {
                let next = self.cell_index(step(&self.spec, &doors, cell, a));
                if dist[next] == usize::MAX {
                    dist[next] = dist[s] + 1;
                    queue.push_back(next);
                }
            }
        }
        None
    }
}

impl Gridworld {
    /// Dirichlet prior that puts `alpha0` on every cell reachable in one move
    /// by any action, plus staying put. The goal and terminal rows are known.
    pub fn neighbourhood_prior(&self, alpha0: f64) -> Result<DirichletPosterior> {
        let n = self.mdp.num_states();
        let terminal = self.mdp.terminal_state();
        let doors = self.spec.door_rows();
        let mut alpha = vec![0.0; n * 4 * n];
        for s in 0..n {
            for a in 0..4 {
                let row = &mut alpha[(s * 4 + a) * n..(s * 4 + a + 1) * n];
                if s == terminal || s == self.goal_state {
                    row[terminal] = alpha0;
                    continue;
                }
                let cell = self.cell_of(s).unwrap();
                row[s] = alpha0;
                for b in 0..4 {
                    row[self.cell_index(step(&self.spec, &doors, cell, b))] = alpha0;
                }
            }
        }
        DirichletPosterior::new(n, 4, alpha)
    }

    /// Neighbourhood transition prior; rewards are known.
    pub fn belief_prior(&self, alpha0: f64) -> Result<BeliefMdp> {
        Ok(BeliefMdp {
            transitions: self.neighbourhood_prior(alpha0)?,
            rewards: RewardPosterior::known(&self.mdp),
        })
    }
}

fn cell_index(size: usize, room: usize, x: usize, y: usize) -> usize {
    room * size * size + y * size + x
}

/// Deterministic effect of an action; blocked moves stay put.
fn step(spec: &GridworldSpec, doors: &[usize], [room, x, y]: [usize; 3], action: usize) -> [usize; 3] {
    let last = spec.room_size - 1;
    match action {
        UP if y > 0 => [room, x, y - 1],
        DOWN if y < last => [room, x, y + 1],
        LEFT if x > 0 => [room, x - 1, y],
        LEFT if room > 0 && doors[room - 1] == y => [room - 1, last, y],
        RIGHT if x < last => [room, x + 1, y],
        RIGHT if room + 1 < spec.rooms && doors[room] == y => [room + 1, 0, y],
        _ => [room, x, y],
    }
}

pub fn build_gridworld(spec: &GridworldSpec) -> Result<Gridworld> {
    spec.validate()?;
    let size = spec.room_size;
    let doors = spec.door_rows();
    let cells = spec.rooms * size * size;
    let n = cells + 1;
    let terminal = cells;
    let [gr, gx, gy] = spec.goal_cell();
    let goal = cell_index(size, gr, gx, gy);
    let mut transition = vec![0.0; n * 4 * n];
    let mut reward = vec![0.0; n * 4];
    for s in 0..n {
        for a in 0..4 {
            let row = &mut transition[(s * 4 + a) * n..(s * 4 + a + 1) * n];
            if s == terminal || s == goal {
                row[terminal] = 1.0;
                reward[s * 4 + a] = if s == goal { spec.goal_reward } else { 0.0 };
                continue;
            }
            let cell = [s / (size * size), (s % (size * size)) % size, (s % (size * size)) / size];
            let [nr, nx, ny] = step(spec, &doors, cell, a);
            let next = cell_index(size, nr, nx, ny);
            row[next] += spec.success_prob;
            row[s] += 1.0 - spec.success_prob;
            reward[s * 4 + a] = spec.step_reward;
        }
    }
    let [sr, sx, sy] = spec.start;
    let world = Gridworld {
        spec: spec.clone(),
        mdp: TabularMdp::new(n, 4, terminal, spec.discount, transition, reward)?,
        start_state: cell_index(size, sr, sx, sy),
        goal_state: goal,
    };
    if world.shortest_path_len().is_none() {
        return Err(Error::Config("goal is unreachable from the start cell".into()));
    }
    Ok(world)
}

/// Layered MDP: `num_layers × states_per_layer` states plus a terminal
/// (last index). Layer `k` transitions only into layer `k + 1`; the last
/// layer goes to the terminal.
pub fn random_acyclic_mdp(
    num_layers: usize,
    states_per_layer: usize,
    num_actions: usize,
    reward_range: (f64, f64),
    discount: f64,
    seed: u64,
) -> Result<TabularMdp> {
    if num_layers == 0 || states_per_layer == 0 || num_actions == 0 {
        return Err(Error::Config("random acyclic MDP needs positive sizes".into()));
    }
    let mut rng = rng::stream(seed, &[]);
    let inner = num_layers * states_per_layer;
    let n = inner + 1;
    let mut transition = vec![0.0; n * num_actions * n];
    let mut reward = vec![0.0; n * num_actions];
    for s in 0..n {
        let layer = s / states_per_layer;
        for a in 0..num_actions {
            let row = &mut transition[(s * num_actions + a) * n..(s * num_actions + a + 1) * n];
            if s == inner || layer + 1 == num_layers {
                row[inner] = 1.0;
            } else {
                let next = (layer + 1) * states_per_layer;
                let weights: Vec<f64> = (0..states_per_layer).map(|_| rng.random_range(0.05..1.0)).collect();
                let total: f64 = weights.iter().sum();
                for (k, w) in weights.iter().enumerate() {
                    row[next + k] = w / total;
                }
            }
            if s != inner {
                reward[s * num_actions + a] = rng.random_range(reward_range.0..=reward_range.1);
            }
        }
    }
    TabularMdp::new(n, num_actions, inner, discount, transition, reward)
}

/// Dense MDP with cycles everywhere; every non-terminal row leaks some mass
/// into the terminal (last index).
pub fn random_cyclic_mdp(
    num_states: usize,
    num_actions: usize,
    reward_range: (f64, f64),
    discount: f64,
    seed: u64,
) -> Result<TabularMdp> {
    if num_states < 2 || num_actions == 0 {
        return Err(Error::Config("random cyclic MDP needs at least two states".into()));
    }
    let mut rng = rng::stream(seed, &[]);
    let n = num_states;
    let terminal = n - 1;
    let mut transition = vec![0.0; n * num_actions * n];
    let mut reward = vec![0.0; n * num_actions];
    for s in 0..n {
        for a in 0..num_actions {
            let row = &mut transition[(s * num_actions + a) * n..(s * num_actions + a + 1) * n];
            if s == terminal {
                row[terminal] = 1.0;
                continue;
            }
            let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
            let total: f64 = weights.iter().sum();
            row.iter_mut().zip(&weights).for_each(|(p, w)| *p = w / total);
            reward[s * num_actions + a] = rng.random_range(reward_range.0..=reward_range.1);
        }
    }
    TabularMdp::new(n, num_actions, terminal, discount, transition, reward)
}
