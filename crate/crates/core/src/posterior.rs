//! Bayesian beliefs over MDP dynamics and rewards.
//!
//! Every posterior samples each `(s, a)` row from its own RNG stream keyed by
//! `(seed, s, a)`, so rows are independent by construction and a sample is a
//! pure function of `(posterior, base, seed)`.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::mdp::TabularMdp;
use crate::rng;

const TRANSITION_STREAM: u64 = 1;
const REWARD_STREAM: u64 = 2;
const SCALAR_STREAM: u64 = 3;

/// A distribution over transition (and possibly reward) functions that can
/// draw concrete MDPs sharing the shape of a base MDP.
pub trait MdpPosterior: Send + Sync {
    fn sample_mdp(&self, base: &TabularMdp, seed: u64) -> Result<TabularMdp>;

    /// MDP under the posterior mean `p̄` (and mean rewards, when uncertain).
    fn mean_mdp(&self, base: &TabularMdp) -> Result<TabularMdp>;
}

/// The degenerate posterior that always returns the base MDP.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PointMass;

impl MdpPosterior for PointMass {
    fn sample_mdp(&self, base: &TabularMdp, _seed: u64) -> Result<TabularMdp> {
        Ok(base.clone())
    }

    fn mean_mdp(&self, base: &TabularMdp) -> Result<TabularMdp> {
        Ok(base.clone())
    }
}

/// Observed transitions and rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionDataset {
    num_states: usize,
    num_actions: usize,
    counts: Vec<u64>,
    reward_sums: Vec<f64>,
    reward_sq_sums: Vec<f64>,
}

impl TransitionDataset {
    pub fn empty(num_states: usize, num_actions: usize) -> Self {
        TransitionDataset {
            num_states,
            num_actions,
            counts: vec![0; num_states * num_actions * num_states],
            reward_sums: vec![0.0; num_states * num_actions],
            reward_sq_sums: vec![0.0; num_states * num_actions],
        }
    }

    pub fn record(&mut self, s: usize, a: usize, reward: f64, next: usize) {
        let sa = s * self.num_actions + a;
        self.counts[sa * self.num_states + next] += 1;
        self.reward_sums[sa] += reward;
        self.reward_sq_sums[sa] += reward * reward;
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn count(&self, s: usize, a: usize, next: usize) -> u64 {
        self.counts[(s * self.num_actions + a) * self.num_states + next]
    }

    /// Number of observations of `(s, a)`.
    pub fn visits(&self, s: usize, a: usize) -> u64 {
        let start = (s * self.num_actions + a) * self.num_states;
        self.counts[start..start + self.num_states].iter().sum()
    }

    pub fn reward_sum(&self, s: usize, a: usize) -> f64 {
        self.reward_sums[s * self.num_actions + a]
    }

    pub fn reward_sq_sum(&self, s: usize, a: usize) -> f64 {
        self.reward_sq_sums[s * self.num_actions + a]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    pub fn merge(&mut self, other: &TransitionDataset) -> Result<()> {
        if other.num_states != self.num_states || other.num_actions != self.num_actions {
            return Err(Error::Dimension("datasets have different shapes".into()));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        self.reward_sums.iter_mut().zip(&other.reward_sums).for_each(|(a, b)| *a += b);
        self.reward_sq_sums
            .iter_mut()
            .zip(&other.reward_sq_sums)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }
}

/// Independent Dirichlet beliefs over every row `P(· | s, a)`.
///
/// A zero concentration marks a next state outside the row's support; such
/// entries are never sampled. The terminal row of the base MDP is always
/// kept absorbing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletPosterior {
    num_states: usize,
    num_actions: usize,
    alpha: Vec<f64>,
}

impl DirichletPosterior {
    pub fn new(num_states: usize, num_actions: usize, alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() != num_states * num_actions * num_states {
            return Err(Error::Dimension(format!(
                "alpha needs {} entries, got {}",
                num_states * num_actions * num_states,
                alpha.len()
            )));
        }
        let posterior = DirichletPosterior {
            num_states,
            num_actions,
            alpha,
        };
        posterior.validate()?;
        Ok(posterior)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_states;
        if n == 0 || self.num_actions == 0 || self.alpha.len() != n * self.num_actions * n {
            return Err(Error::Dimension("Dirichlet concentration table has the wrong shape".into()));
        }
        for (row_index, row) in self.alpha.chunks(n).enumerate() {
            if row.iter().any(|a| !(a.is_finite() && *a >= 0.0)) || row.iter().all(|&a| a == 0.0) {
                return Err(Error::InvalidModel(format!(
                    "Dirichlet row (s={}, a={}) needs non-negative concentrations with non-empty support",
                    row_index / self.num_actions,
                    row_index % self.num_actions
                )));
            }
        }
        Ok(())
    }

    /// Concentration `alpha0` on every next state of every row.
    pub fn full(num_states: usize, num_actions: usize, alpha0: f64) -> Result<Self> {
        Self::new(num_states, num_actions, vec![alpha0; num_states * num_actions * num_states])
    }

    /// Concentration `alpha0` on the support `{s' : p(s'|s,a) > 0}` of a
    /// reference MDP.
    pub fn on_support_of(mdp: &TabularMdp, alpha0: f64) -> Result<Self> {
        let alpha = mdp
            .transitions()
            .iter()
            .map(|&p| if p > 0.0 { alpha0 } else { 0.0 })
            .collect();
        Self::new(mdp.num_states(), mdp.num_actions(), alpha)
    }

    pub fn alpha(&self, s: usize, a: usize, next: usize) -> f64 {
        self.alpha[(s * self.num_actions + a) * self.num_states + next]
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.num_actions + a) * self.num_states;
        &self.alpha[start..start + self.num_states]
    }

    /// Conjugate update: `alpha + counts`.
    pub fn update(&self, data: &TransitionDataset) -> Result<Self> {
        if data.num_states != self.num_states || data.num_actions != self.num_actions {
            return Err(Error::Dimension(format!(
                "dataset is {}x{}, posterior is {}x{}",
                data.num_states, data.num_actions, self.num_states, self.num_actions
            )));
        }
        let alpha = self
            .alpha
            .iter()
            .zip(&data.counts)
            .map(|(a, &c)| a + c as f64)
            .collect();
        Self::new(self.num_states, self.num_actions, alpha)
    }

    /// Sum of the marginal variances of `P(· | s, a)`.
    pub fn row_variance(&self, s: usize, a: usize) -> f64 {
        let row = self.row(s, a);
        let total: f64 = row.iter().sum();
        row.iter()
            .map(|&x| x * (total - x) / (total * total * (total + 1.0)))
            .sum()
    }

    fn sample_row(&self, s: usize, a: usize, seed: u64, out: &mut [f64]) {
        let mut rng = rng::stream(seed, &[TRANSITION_STREAM, s as u64, a as u64]);
        let row = self.row(s, a);
        let mut total = 0.0;
        for (o, &alpha) in out.iter_mut().zip(row) {
            *o = if alpha > 0.0 {
                Gamma::new(alpha, 1.0).expect("positive shape").sample(&mut rng)
            } else {
                0.0
            };
            total += *o;
        }
        if total > 0.0 {
            out.iter_mut().for_each(|o| *o /= total);
        } else {
            // every gamma draw underflowed; fall back to the largest concentration
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (k, &x)| if x > row[best] { k } else { best });
            out.iter_mut().for_each(|o| *o = 0.0);
            out[best] = 1.0;
        }
    }

    fn check_base(&self, base: &TabularMdp) -> Result<()> {
        if base.num_states() != self.num_states || base.num_actions() != self.num_actions {
            return Err(Error::Dimension(format!(
                "base MDP is {}x{}, posterior is {}x{}",
                base.num_states(),
                base.num_actions(),
                self.num_states,
                self.num_actions
            )));
        }
        Ok(())
    }

    fn sampled_transitions(&self, base: &TabularMdp, seed: u64) -> Result<Vec<f64>> {
        self.check_base(base)?;
        let n = self.num_states;
        let mut transition = vec![0.0; n * self.num_actions * n];
        for s in 0..n {
            for a in 0..self.num_actions {
                let start = (s * self.num_actions + a) * n;
                let out = &mut transition[start..start + n];
                if s == base.terminal_state() {
                    out[s] = 1.0;
                } else {
                    self.sample_row(s, a, seed, out);
                }
            }
        }
        Ok(transition)
    }

    fn mean_transitions(&self, base: &TabularMdp) -> Result<Vec<f64>> {
        self.check_base(base)?;
        let n = self.num_states;
        let mut transition = Vec::with_capacity(self.alpha.len());
        for s in 0..n {
            for a in 0..self.num_actions {
                if s == base.terminal_state() {
                    transition.extend((0..n).map(|k| if k == s { 1.0 } else { 0.0 }));
                } else {
                    let row = self.row(s, a);
                    let total: f64 = row.iter().sum();
                    transition.extend(row.iter().map(|x| x / total));
                }
            }
        }
        Ok(transition)
    }
}

impl MdpPosterior for DirichletPosterior {
    fn sample_mdp(&self, base: &TabularMdp, seed: u64) -> Result<TabularMdp> {
        base.with_transitions(self.sampled_transitions(base, seed)?)
    }

    fn mean_mdp(&self, base: &TabularMdp) -> Result<TabularMdp> {
        base.with_transitions(self.mean_transitions(base)?)
    }
}

/// Gaussian beliefs over each reward `r(s, a)` with known observation noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardPosterior {
    num_states: usize,
    num_actions: usize,
    /// Posterior mean per `(s, a)`.
    mean: Vec<f64>,
    /// Number of observations folded in per `(s, a)`.
    precision_count: Vec<f64>,
    pub prior_mean: f64,
    pub prior_std: f64,
    pub noise_std: f64,
}

impl RewardPosterior {
    /// Standard Gaussian prior with unit observation noise.
    pub fn standard(num_states: usize, num_actions: usize) -> Self {
        RewardPosterior {
            num_states,
            num_actions,
            mean: vec![0.0; num_states * num_actions],
            precision_count: vec![0.0; num_states * num_actions],
            prior_mean: 0.0,
            prior_std: 1.0,
            noise_std: 1.0,
        }
    }

    /// Rewards known exactly: a zero-width prior at `mdp`'s reward table.
    pub fn known(mdp: &TabularMdp) -> Self {
        RewardPosterior {
            num_states: mdp.num_states(),
            num_actions: mdp.num_actions(),
            mean: mdp.rewards().to_vec(),
            precision_count: vec![0.0; mdp.rewards().len()],
            prior_mean: 0.0,
            prior_std: 0.0,
            noise_std: 1.0,
        }
    }

    pub fn is_known(&self) -> bool {
        self.prior_std == 0.0
    }

    /// Posterior given all of `data` (counts replace, not add to, the current state).
    pub fn posterior(&self, data: &TransitionDataset) -> Result<Self> {
        if data.num_states != self.num_states || data.num_actions != self.num_actions {
            return Err(Error::Dimension("dataset and reward posterior disagree".into()));
        }
        if self.is_known() {
            return Ok(self.clone());
        }
        let prior_precision = 1.0 / (self.prior_std * self.prior_std);
        let noise_precision = 1.0 / (self.noise_std * self.noise_std);
        let mut mean = Vec::with_capacity(self.mean.len());
        let mut precision_count = Vec::with_capacity(self.mean.len());
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                let n = data.visits(s, a) as f64;
                let precision = prior_precision + n * noise_precision;
                mean.push(
                    (self.prior_mean * prior_precision + data.reward_sum(s, a) * noise_precision)
                        / precision,
                );
                precision_count.push(n);
            }
        }
        Ok(RewardPosterior {
            mean,
            precision_count,
            ..self.clone()
        })
    }

    pub fn mean(&self, s: usize, a: usize) -> f64 {
        self.mean[s * self.num_actions + a]
    }

    pub fn observations(&self, s: usize, a: usize) -> f64 {
        self.precision_count[s * self.num_actions + a]
    }

    pub fn std(&self, s: usize, a: usize) -> f64 {
        if self.is_known() {
            return 0.0;
        }
        let precision = 1.0 / (self.prior_std * self.prior_std)
            + self.observations(s, a) / (self.noise_std * self.noise_std);
        precision.recip().sqrt()
    }

    pub fn means(&self) -> &[f64] {
        &self.mean
    }

    /// Draws one reward table, each `(s, a)` from its own stream.
    pub fn sample_reward_table(&self, seed: u64) -> Vec<f64> {
        let mut table = Vec::with_capacity(self.mean.len());
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                let std = self.std(s, a);
                if std == 0.0 {
                    table.push(self.mean(s, a));
                    continue;
                }
                let mut rng = rng::stream(seed, &[REWARD_STREAM, s as u64, a as u64]);
                let z: f64 = StandardNormal.sample(&mut rng);
                table.push(self.mean(s, a) + std * z);
            }
        }
        table
    }
}

/// Joint belief over transitions and rewards, with the terminal reward
/// pinned to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefMdp {
    pub transitions: DirichletPosterior,
    pub rewards: RewardPosterior,
}

impl BeliefMdp {
    pub fn update(&self, data: &TransitionDataset) -> Result<Self> {
        Ok(BeliefMdp {
            transitions: self.transitions.update(data)?,
            rewards: self.rewards.posterior(data)?,
        })
    }

    fn pin_terminal(base: &TabularMdp, mut table: Vec<f64>) -> Vec<f64> {
        let t = base.terminal_state();
        let na = base.num_actions();
        table[t * na..(t + 1) * na].iter_mut().for_each(|r| *r = 0.0);
        table
    }
}

impl MdpPosterior for BeliefMdp {
    fn sample_mdp(&self, base: &TabularMdp, seed: u64) -> Result<TabularMdp> {
        let transition = self.transitions.sampled_transitions(base, seed)?;
        let reward = Self::pin_terminal(base, self.rewards.sample_reward_table(seed));
        TabularMdp::new(
            base.num_states(),
            base.num_actions(),
            base.terminal_state(),
            base.discount(),
            transition,
            reward,
        )
    }

    fn mean_mdp(&self, base: &TabularMdp) -> Result<TabularMdp> {
        let transition = self.transitions.mean_transitions(base)?;
        let reward = Self::pin_terminal(base, self.rewards.means().to_vec());
        TabularMdp::new(
            base.num_states(),
            base.num_actions(),
            base.terminal_state(),
            base.discount(),
            transition,
            reward,
        )
    }
}

/// Gaussian truncated to `[lower, upper] ⊆ [0, 1]`, one mixture component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncatedGaussian {
    pub mean: f64,
    pub std: f64,
    #[serde(default = "unit_weight")]
    pub weight: f64,
    #[serde(default = "unit_interval")]
    pub truncation: [f64; 2],
}

fn unit_weight() -> f64 {
    1.0
}

fn unit_interval() -> [f64; 2] {
    [0.0, 1.0]
}

impl TruncatedGaussian {
    pub fn new(mean: f64, std: f64, weight: f64) -> Self {
        TruncatedGaussian {
            mean,
            std,
            weight,
            truncation: unit_interval(),
        }
    }

    fn standardized_bounds(&self) -> (f64, f64) {
        (
            (self.truncation[0] - self.mean) / self.std,
            (self.truncation[1] - self.mean) / self.std,
        )
    }

    /// Inverse CDF of the truncated law at `u ∈ [0, 1]`.
    pub fn quantile(&self, u: f64) -> f64 {
        let normal = Normal::standard();
        let (lo, hi) = self.standardized_bounds();
        // work in whichever tail keeps the CDF values away from 1
        let z = if lo > 0.0 {
            let (slo, shi) = (normal.cdf(-hi), normal.cdf(-lo));
            -normal.inverse_cdf(shi - u * (shi - slo))
        } else {
            let (clo, chi) = (normal.cdf(lo), normal.cdf(hi));
            normal.inverse_cdf(clo + u * (chi - clo))
        };
        (self.mean + self.std * z).clamp(self.truncation[0], self.truncation[1])
    }

    pub fn truncated_mean(&self) -> f64 {
        let normal = Normal::standard();
        let (lo, hi) = self.standardized_bounds();
        let mass = if lo > 0.0 {
            normal.cdf(-lo) - normal.cdf(-hi)
        } else {
            normal.cdf(hi) - normal.cdf(lo)
        };
        self.mean + self.std * (normal.pdf(lo) - normal.pdf(hi)) / mass
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let normal = Normal::standard();
        let (lo, hi) = self.standardized_bounds();
        let z = ((x - self.mean) / self.std).clamp(lo, hi);
        (normal.cdf(z) - normal.cdf(lo)) / (normal.cdf(hi) - normal.cdf(lo))
    }
}

/// What a bound transition entry evaluates to given the scalar `X`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundValue {
    X,
    OneMinusX,
    Constant(f64),
}

impl BoundValue {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            BoundValue::X => x,
            BoundValue::OneMinusX => 1.0 - x,
            BoundValue::Constant(c) => c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Binding {
    pub state: usize,
    pub action: usize,
    pub next: usize,
    pub value: BoundValue,
}

/// One uncertain scalar `X` drawn from a mixture of truncated Gaussians and
/// written into selected transition entries.
///
/// Within a row touched by a binding, whatever mass the bound entries leave
/// over is spread over the row's unbound entries in proportion to the base
/// MDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParametricScalarPosterior {
    pub components: Vec<TruncatedGaussian>,
    pub bindings: Vec<Binding>,
}

impl ParametricScalarPosterior {
    pub fn new(components: Vec<TruncatedGaussian>, bindings: Vec<Binding>) -> Result<Self> {
        let posterior = ParametricScalarPosterior {
            components,
            bindings,
        };
        posterior.validate()?;
        Ok(posterior)
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::InvalidModel("no mixture components".into()));
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidModel(format!("component weights sum to {total}")));
        }
        for c in &self.components {
            let [lo, hi] = c.truncation;
            if !(c.std > 0.0) || !(c.weight > 0.0) || !(0.0..hi).contains(&lo) || hi > 1.0 {
                return Err(Error::InvalidModel(format!("invalid component {c:?}")));
            }
        }
        Ok(())
    }

    /// Draws `X` from the mixture by inverse CDF of the chosen component.
    pub fn sample_x(&self, rng: &mut impl Rng) -> f64 {
        let pick: f64 = rng.random();
        let u: f64 = rng.random();
        let mut cumulative = 0.0;
        let last = self.components.len() - 1;
        for (k, c) in self.components.iter().enumerate() {
            cumulative += c.weight;
            if pick < cumulative || k == last {
                return c.quantile(u);
            }
        }
        unreachable!()
    }

    pub fn sample_x_seeded(&self, seed: u64) -> f64 {
        self.sample_x(&mut rng::stream(seed, &[SCALAR_STREAM]))
    }

    pub fn mean_x(&self) -> f64 {
        self.components
            .iter()
            .map(|c| c.weight * c.truncated_mean())
            .sum()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.components.iter().map(|c| c.weight * c.cdf(x)).sum()
    }

    /// Writes `X = x` into the bound entries of `base`.
    pub fn apply(&self, base: &TabularMdp, x: f64) -> Result<TabularMdp> {
        let n = base.num_states();
        let na = base.num_actions();
        let mut transition = base.transitions().to_vec();
        let mut rows: Vec<(usize, usize)> = self.bindings.iter().map(|b| (b.state, b.action)).collect();
        rows.sort_unstable();
        rows.dedup();
        for (s, a) in rows {
            if s >= n || a >= na {
                return Err(Error::Dimension(format!("binding row ({s}, {a}) out of range")));
            }
            let start = (s * na + a) * n;
            let mut bound = vec![None; n];
            for b in self.bindings.iter().filter(|b| b.state == s && b.action == a) {
                if b.next >= n {
                    return Err(Error::Dimension(format!("binding target {} out of range", b.next)));
                }
                bound[b.next] = Some(b.value.eval(x));
            }
            let bound_mass: f64 = bound.iter().flatten().sum();
            let free_mass: f64 = (0..n)
                .filter(|&k| bound[k].is_none())
                .map(|k| base.p(s, a, k))
                .sum();
            let remaining = 1.0 - bound_mass;
            if remaining < -1e-12 || (free_mass == 0.0 && remaining.abs() > 1e-12) {
                return Err(Error::InvalidModel(format!(
                    "binding of row (s={s}, a={a}) leaves mass {remaining} at X={x}"
                )));
            }
            for k in 0..n {
                transition[start + k] = match bound[k] {
                    Some(v) => v,
                    None if free_mass > 0.0 => base.p(s, a, k) / free_mass * remaining.max(0.0),
                    None => 0.0,
                };
            }
        }
        base.with_transitions(transition)
    }
}

impl MdpPosterior for ParametricScalarPosterior {
    fn sample_mdp(&self, base: &TabularMdp, seed: u64) -> Result<TabularMdp> {
        self.apply(base, self.sample_x_seeded(seed))
    }

    fn mean_mdp(&self, base: &TabularMdp) -> Result<TabularMdp> {
        self.apply(base, self.mean_x())
    }
}

/// Serialisable choice of posterior family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Posterior {
    PointMass,
    Dirichlet(DirichletPosterior),
    Parametric(ParametricScalarPosterior),
    Belief(BeliefMdp),
}

impl MdpPosterior for Posterior {
    fn sample_mdp(&self, base: &TabularMdp, seed: u64) -> Result<TabularMdp> {
        match self {
            Posterior::PointMass => PointMass.sample_mdp(base, seed),
            Posterior::Dirichlet(p) => p.sample_mdp(base, seed),
            Posterior::Parametric(p) => p.sample_mdp(base, seed),
            Posterior::Belief(p) => p.sample_mdp(base, seed),
        }
    }

    fn mean_mdp(&self, base: &TabularMdp) -> Result<TabularMdp> {
        match self {
            Posterior::PointMass => PointMass.mean_mdp(base),
            Posterior::Dirichlet(p) => p.mean_mdp(base),
            Posterior::Parametric(p) => p.mean_mdp(base),
            Posterior::Belief(p) => p.mean_mdp(base),
        }
    }
}
