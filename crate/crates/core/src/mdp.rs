//! Finite MDPs, policies, the Markov reward processes they induce, exact
//! policy evaluation and acyclic unrolling.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-sum tolerance for every stochastic row in the crate.
pub const ROW_TOLERANCE: f64 = 1e-12;

/// Maximum accepted residual `‖(I − γP)v − r‖∞` of an exact solve.
pub const SOLVE_TOLERANCE: f64 = 1e-10;

/// A finite MDP with an explicit absorbing terminal state.
///
/// Transitions are stored flat in `(s, a, s')` order and rewards in `(s, a)`
/// order. Instances are validated on construction and immutable afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpDocument", into = "MdpDocument")]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    terminal_state: usize,
    discount: f64,
    transition: Vec<f64>,
    reward: Vec<f64>,
}

/// JSON layout of an MDP: nested arrays, validated on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MdpDocument {
    pub num_states: usize,
    pub num_actions: usize,
    pub terminal_state: usize,
    pub discount: f64,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<Vec<f64>>,
}

impl TryFrom<MdpDocument> for TabularMdp {
    type Error = Error;

    fn try_from(doc: MdpDocument) -> Result<Self> {
        if doc.transition.len() != doc.num_states || doc.reward.len() != doc.num_states {
            return Err(Error::Dimension(format!(
                "expected {} state rows in transition and reward",
                doc.num_states
            )));
        }
        let mut transition = Vec::with_capacity(doc.num_states * doc.num_actions * doc.num_states);
        for (s, per_action) in doc.transition.iter().enumerate() {
            if per_action.len() != doc.num_actions {
                return Err(Error::Dimension(format!(
                    "transition[{s}] has {} actions, expected {}",
                    per_action.len(),
                    doc.num_actions
                )));
            }
            for (a, row) in per_action.iter().enumerate() {
                if row.len() != doc.num_states {
                    return Err(Error::Dimension(format!(
                        "transition[{s}][{a}] has {} entries, expected {}",
                        row.len(),
                        doc.num_states
                    )));
                }
                transition.extend_from_slice(row);
            }
        }
        let mut reward = Vec::with_capacity(doc.num_states * doc.num_actions);
        for (s, row) in doc.reward.iter().enumerate() {
            if row.len() != doc.num_actions {
                return Err(Error::Dimension(format!(
                    "reward[{s}] has {} entries, expected {}",
                    row.len(),
                    doc.num_actions
                )));
            }
            reward.extend_from_slice(row);
        }
        TabularMdp::new(
            doc.num_states,
            doc.num_actions,
            doc.terminal_state,
            doc.discount,
            transition,
            reward,
        )
    }
}

impl From<TabularMdp> for MdpDocument {
    fn from(mdp: TabularMdp) -> Self {
        let (n, na) = (mdp.num_states, mdp.num_actions);
        MdpDocument {
            num_states: n,
            num_actions: na,
            terminal_state: mdp.terminal_state,
            discount: mdp.discount,
            transition: (0..n)
                .map(|s| (0..na).map(|a| mdp.row(s, a).to_vec()).collect())
                .collect(),
            reward: (0..n)
                .map(|s| mdp.reward[s * na..(s + 1) * na].to_vec())
                .collect(),
        }
    }
}

impl TabularMdp {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        terminal_state: usize,
        discount: f64,
        transition: Vec<f64>,
        reward: Vec<f64>,
    ) -> Result<Self> {
        let mdp = TabularMdp {
            num_states,
            num_actions,
            terminal_state,
            discount,
            transition,
            reward,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    fn validate(&self) -> Result<()> {
        let (n, na) = (self.num_states, self.num_actions);
        if n == 0 || na == 0 {
            return Err(Error::InvalidModel("need at least one state and one action".into()));
        }
        if self.terminal_state >= n {
            return Err(Error::InvalidModel(format!(
                "terminal state {} out of range for {n} states",
                self.terminal_state
            )));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(Error::InvalidModel(format!(
                "discount {} outside [0, 1)",
                self.discount
            )));
        }
        if self.transition.len() != n * na * n || self.reward.len() != n * na {
            return Err(Error::Dimension(format!(
                "transition needs {} entries and reward {} for {n} states x {na} actions",
                n * na * n,
                n * na
            )));
        }
        for s in 0..n {
            for a in 0..na {
                let row = self.row(s, a);
                for (next, &value) in row.iter().enumerate() {
                    if !(0.0..=1.0).contains(&value) {
                        return Err(Error::Probability {
                            state: s,
                            action: a,
                            next,
                            value,
                        });
                    }
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_TOLERANCE {
                    return Err(Error::RowSum {
                        state: s,
                        action: a,
                        sum,
                    });
                }
                let r = self.reward(s, a);
                if !r.is_finite() {
                    return Err(Error::InvalidModel(format!("reward at ({s}, {a}) is {r}")));
                }
            }
        }
        let t = self.terminal_state;
        for a in 0..na {
            if self.reward(t, a) != 0.0 || self.p(t, a, t) != 1.0 {
                return Err(Error::InvalidModel(format!(
                    "terminal state {t} must be absorbing with zero reward (action {a})"
                )));
            }
        }
        Ok(())
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn terminal_state(&self) -> usize {
        self.terminal_state
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    #[inline]
    pub fn p(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition[(s * self.num_actions + a) * self.num_states + next]
    }

    #[inline]
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.num_actions + a) * self.num_states;
        &self.transition[start..start + self.num_states]
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.num_actions + a]
    }

    pub fn transitions(&self) -> &[f64] {
        &self.transition
    }

    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }

    /// Smallest and largest reward over all `(s, a)`.
    pub fn reward_range(&self) -> (f64, f64) {
        self.reward
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| {
                (lo.min(r), hi.max(r))
            })
    }

    pub fn with_transitions(&self, transition: Vec<f64>) -> Result<Self> {
        TabularMdp::new(
            self.num_states,
            self.num_actions,
            self.terminal_state,
            self.discount,
            transition,
            self.reward.clone(),
        )
    }

    pub fn with_rewards(&self, reward: Vec<f64>) -> Result<Self> {
        TabularMdp::new(
            self.num_states,
            self.num_actions,
            self.terminal_state,
            self.discount,
            self.transition.clone(),
            reward,
        )
    }

    pub fn with_discount(&self, discount: f64) -> Result<Self> {
        TabularMdp::new(
            self.num_states,
            self.num_actions,
            self.terminal_state,
            discount,
            self.transition.clone(),
            self.reward.clone(),
        )
    }

    /// States in topological order of the transition graph, ignoring the
    /// terminal self-loop. `None` when the graph has a cycle.
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let n = self.num_states;
        let mut successors = vec![Vec::new(); n];
        let mut in_degree = vec![0usize; n];
        for s in 0..n {
            for next in 0..n {
                if s == self.terminal_state && next == self.terminal_state {
                    continue;
                }
                if (0..self.num_actions).any(|a| self.p(s, a, next) > 0.0) {
                    successors[s].push(next);
                    in_degree[next] += 1;
                }
            }
        }
        let mut queue: VecDeque<usize> = (0..n).filter(|&s| in_degree[s] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(s) = queue.pop_front() {
            order.push(s);
            for &next in &successors[s] {
                in_degree[next] -= 1;
                if in_degree[next] == 0 {
                    queue.push_back(next);
                }
            }
        }
        (order.len() == n).then_some(order)
    }

    pub fn is_acyclic(&self) -> bool {
        self.topological_order().is_some()
    }
}

/// Stochastic policy `π(a | s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Policy {
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

impl TryFrom<Vec<Vec<f64>>> for Policy {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        let num_states = rows.len();
        let num_actions = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != num_actions) {
            return Err(Error::Dimension("ragged policy table".into()));
        }
        Policy::new(num_states, num_actions, rows.concat())
    }
}

impl From<Policy> for Vec<Vec<f64>> {
    fn from(policy: Policy) -> Self {
        policy
            .probs
            .chunks(policy.num_actions)
            .map(<[f64]>::to_vec)
            .collect()
    }
}

impl Policy {
    pub fn new(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if num_states == 0 || num_actions == 0 || probs.len() != num_states * num_actions {
            return Err(Error::Dimension(format!(
                "policy needs {num_states} x {num_actions} probabilities, got {}",
                probs.len()
            )));
        }
        for (s, row) in probs.chunks(num_actions).enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::InvalidModel(format!("policy row {s} has entries outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOLERANCE {
                return Err(Error::InvalidModel(format!("policy row {s} sums to {sum}")));
            }
        }
        Ok(Policy {
            num_states,
            num_actions,
            probs,
        })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        let p = 1.0 / num_actions as f64;
        Policy {
            num_states,
            num_actions,
            probs: vec![p; num_states * num_actions],
        }
    }

    /// Deterministic policy taking `actions[s]` in state `s`.
    pub fn deterministic(actions: &[usize], num_actions: usize) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * num_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= num_actions {
                return Err(Error::Dimension(format!(
                    "action {a} at state {s} out of range for {num_actions} actions"
                )));
            }
            probs[s * num_actions + a] = 1.0;
        }
        Policy::new(actions.len(), num_actions, probs)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.num_actions + a]
    }

    /// Most probable action per state (lowest index on ties).
    pub fn greedy_actions(&self) -> Vec<usize> {
        self.probs
            .chunks(self.num_actions)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (a, &p)| {
                        if p > best.1 {
                            (a, p)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect()
    }
}

/// Markov reward process induced by a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Mrp {
    num_states: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    discount: f64,
}

impl Mrp {
    pub fn new(transition: Vec<f64>, reward: Vec<f64>, discount: f64) -> Result<Self> {
        let n = reward.len();
        if transition.len() != n * n {
            return Err(Error::Dimension(format!(
                "MRP with {n} states needs {} transition entries, got {}",
                n * n,
                transition.len()
            )));
        }
        for (s, row) in transition.chunks(n).enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOLERANCE {
                return Err(Error::RowSum {
                    state: s,
                    action: 0,
                    sum,
                });
            }
        }
        Ok(Mrp {
            num_states: n,
            transition,
            reward,
            discount,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    #[inline]
    pub fn p(&self, s: usize, next: usize) -> f64 {
        self.transition[s * self.num_states + next]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.transition[s * self.num_states..(s + 1) * self.num_states]
    }

    pub fn reward(&self) -> &[f64] {
        &self.reward
    }

    /// Nonzero `(next, probability)` pairs of each row.
    pub fn successors(&self) -> Vec<Vec<(usize, f64)>> {
        (0..self.num_states)
            .map(|s| {
                self.row(s)
                    .iter()
                    .enumerate()
                    .filter(|(_, &p)| p > 0.0)
                    .map(|(next, &p)| (next, p))
                    .collect()
            })
            .collect()
    }

    /// `r + γ P v`.
    pub fn backup(&self, values: &[f64]) -> Vec<f64> {
        (0..self.num_states)
            .map(|s| {
                let next: f64 = self.row(s).iter().zip(values).map(|(p, v)| p * v).sum();
                self.reward[s] + self.discount * next
            })
            .collect()
    }

    /// `‖(I − γP)v − r‖∞`.
    pub fn residual(&self, values: &[f64]) -> f64 {
        self.backup(values)
            .iter()
            .zip(values)
            .map(|(b, v)| (b - v).abs())
            .fold(0.0, f64::max)
    }
}

/// `p^π(s'|s) = Σ_a π(a|s) p(s'|s,a)` and `r^π(s) = Σ_a π(a|s) r(s,a)`.
pub fn induce_mrp(mdp: &TabularMdp, policy: &Policy) -> Result<Mrp> {
    if mdp.num_states != policy.num_states || mdp.num_actions != policy.num_actions {
        return Err(Error::Dimension(format!(
            "policy is {}x{}, MDP is {}x{}",
            policy.num_states, policy.num_actions, mdp.num_states, mdp.num_actions
        )));
    }
    let n = mdp.num_states;
    let mut transition = vec![0.0; n * n];
    let mut reward = vec![0.0; n];
    for s in 0..n {
        let out = &mut transition[s * n..(s + 1) * n];
        for a in 0..mdp.num_actions {
            let pi = policy.prob(s, a);
            if pi == 0.0 {
                continue;
            }
            reward[s] += pi * mdp.reward(s, a);
            for (o, p) in out.iter_mut().zip(mdp.row(s, a)) {
                *o += pi * p;
            }
        }
    }
    Mrp::new(transition, reward, mdp.discount)
}

/// Solves `(I − γP) v = r` by LU decomposition with one round of iterative
/// refinement.
pub fn solve_value(mrp: &Mrp) -> Result<Vec<f64>> {
    let n = mrp.num_states;
    let gamma = mrp.discount;
    let system = DMatrix::from_fn(n, n, |i, j| {
        let identity = if i == j { 1.0 } else { 0.0 };
        identity - gamma * mrp.p(i, j)
    });
    let lu = system.clone().lu();
    let rhs = DVector::from_column_slice(&mrp.reward);
    let mut v = lu
        .solve(&rhs)
        .ok_or(Error::Solve { residual: f64::INFINITY })?;
    let correction = lu.solve(&(&rhs - &system * &v));
    if let Some(c) = correction {
        v += c;
    }
    let values: Vec<f64> = v.iter().copied().collect();
    let residual = mrp.residual(&values);
    if !(residual <= SOLVE_TOLERANCE) {
        return Err(Error::Solve { residual });
    }
    Ok(values)
}

/// Exact value of `policy` in `mdp`.
pub fn policy_value(mdp: &TabularMdp, policy: &Policy) -> Result<Vec<f64>> {
    solve_value(&induce_mrp(mdp, policy)?)
}

/// A time-indexed copy of an MDP truncated after `horizon` steps.
///
/// State `(s, k)` lives at index `s + k * base_states`; the single absorbing
/// terminal is the last index, `horizon * base_states`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnrolledMdp {
    pub mdp: TabularMdp,
    pub horizon: usize,
    pub base_states: usize,
}

impl UnrolledMdp {
    pub fn state(&self, s: usize, layer: usize) -> usize {
        s + layer * self.base_states
    }

    pub fn layer_of(&self, index: usize) -> Option<usize> {
        (index < self.horizon * self.base_states).then(|| index / self.base_states)
    }
}

pub fn unroll(mdp: &TabularMdp, horizon: usize) -> Result<UnrolledMdp> {
    if horizon == 0 {
        return Err(Error::InvalidModel("unroll horizon must be at least 1".into()));
    }
    let n = mdp.num_states;
    let na = mdp.num_actions;
    let total = horizon * n + 1;
    let terminal = horizon * n;
    let mut transition = vec![0.0; total * na * total];
    let mut reward = vec![0.0; total * na];
    for k in 0..horizon {
        for s in 0..n {
            let from = s + k * n;
            for a in 0..na {
                reward[from * na + a] = mdp.reward(s, a);
                let base = (from * na + a) * total;
                if k + 1 == horizon {
                    transition[base + terminal] = 1.0;
                } else {
                    for (next, &p) in mdp.row(s, a).iter().enumerate() {
                        transition[base + next + (k + 1) * n] = p;
                    }
                }
            }
        }
    }
    for a in 0..na {
        transition[(terminal * na + a) * total + terminal] = 1.0;
    }
    Ok(UnrolledMdp {
        mdp: TabularMdp::new(total, na, terminal, mdp.discount, transition, reward)?,
        horizon,
        base_states: n,
    })
}
