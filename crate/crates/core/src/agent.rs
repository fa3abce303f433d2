//! Posterior-sampling RL for tabular MDPs and simulated data collection.

use std::io::Write;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{policy_value, Policy, TabularMdp};
use crate::posterior::{BeliefMdp, MdpPosterior, TransitionDataset};
use crate::rng;

const PSRL_MODEL_STREAM: u64 = 30;
const PSRL_ROLLOUT_STREAM: u64 = 31;
const COLLECT_STREAM: u64 = 32;

/// An action must beat the incumbent by this much to replace it.
const IMPROVEMENT_EPS: f64 = 1e-10;
const MAX_POLICY_ITERATIONS: usize = 10_000;

/// `Q(s, a) = r(s, a) + γ Σ p(s'|s,a) v(s')`.
pub fn action_values(mdp: &TabularMdp, values: &[f64]) -> Vec<f64> {
    let na = mdp.num_actions();
    let mut q = vec![0.0; mdp.num_states() * na];
    for s in 0..mdp.num_states() {
        for a in 0..na {
            let next: f64 = mdp.row(s, a).iter().zip(values).map(|(p, v)| p * v).sum();
            q[s * na + a] = mdp.reward(s, a) + mdp.discount() * next;
        }
    }
    q
}

/// Howard policy iteration from the all-zeros action choice. Returns the
/// deterministic optimal policy and its value.
pub fn policy_iteration(mdp: &TabularMdp) -> Result<(Policy, Vec<f64>)> {
    let na = mdp.num_actions();
    let mut actions = vec![0usize; mdp.num_states()];
    for _ in 0..MAX_POLICY_ITERATIONS {
        let policy = Policy::deterministic(&actions, na)?;
        let values = policy_value(mdp, &policy)?;
        let q = action_values(mdp, &values);
        let mut changed = false;
        for (s, current) in actions.iter_mut().enumerate() {
            let row = &q[s * na..(s + 1) * na];
            let (best, best_q) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (a, &v)| if v > acc.1 { (a, v) } else { acc });
            if best_q > row[*current] + IMPROVEMENT_EPS * (1.0 + row[*current].abs()) {
                *current = best;
                changed = true;
            }
        }
        if !changed {
            return Ok((policy, values));
        }
    }
    Err(Error::Invariant("policy iteration did not terminate".into()))
}

fn sample_action(policy: &Policy, s: usize, r: &mut rng::Rng) -> usize {
    let u: f64 = r.random();
    let mut cumulative = 0.0;
    for a in 0..policy.num_actions() {
        cumulative += policy.prob(s, a);
        if u < cumulative {
            return a;
        }
    }
    // rounding left `u` above the last cumulative sum
    (0..policy.num_actions()).rev().find(|&a| policy.prob(s, a) > 0.0).unwrap_or(0)
}

fn sample_next(row: &[f64], r: &mut rng::Rng) -> usize {
    let u: f64 = r.random();
    let mut cumulative = 0.0;
    for (next, &p) in row.iter().enumerate() {
        cumulative += p;
        if u < cumulative {
            return next;
        }
    }
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

/// Rolls out at most `horizon` steps, stopping once the terminal is entered.
/// Returns the undiscounted return.
fn simulate_episode(
    env: &TabularMdp,
    policy: &Policy,
    start: usize,
    horizon: usize,
    r: &mut rng::Rng,
    data: &mut TransitionDataset,
) -> f64 {
    let mut s = start;
    let mut total = 0.0;
    for _ in 0..horizon {
        if s == env.terminal_state() {
            break;
        }
        let a = sample_action(policy, s, r);
        let next = sample_next(env.row(s, a), r);
        let reward = env.reward(s, a);
        data.record(s, a, reward, next);
        total += reward;
        s = next;
    }
    total
}

/// One dataset per episode, each episode on its own random stream.
pub fn collect_episodes(
    env: &TabularMdp,
    policy: &Policy,
    start: usize,
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Vec<TransitionDataset> {
    (0..episodes)
        .map(|e| {
            let mut data = TransitionDataset::empty(env.num_states(), env.num_actions());
            let mut r = rng::stream(seed, &[COLLECT_STREAM, e as u64]);
            simulate_episode(env, policy, start, horizon, &mut r, &mut data);
            data
        })
        .collect()
}

/// All transitions of `episodes` simulated rollouts under the true `env`.
pub fn collect_with_policy(
    env: &TabularMdp,
    policy: &Policy,
    start: usize,
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<TransitionDataset> {
    let mut total = TransitionDataset::empty(env.num_states(), env.num_actions());
    for data in collect_episodes(env, policy, start, episodes, horizon, seed) {
        total.merge(&data)?;
    }
    Ok(total)
}

/// Union of the first `k` datasets.
pub fn accumulate(history: &[TransitionDataset], k: usize) -> Result<TransitionDataset> {
    let first = history
        .first()
        .ok_or_else(|| Error::Config("empty dataset history".into()))?;
    let mut total = TransitionDataset::empty(first.num_states(), first.num_actions());
    for data in &history[..k.min(history.len())] {
        total.merge(data)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsrlConfig {
    pub num_episodes: usize,
    pub episode_horizon: usize,
    pub seed: u64,
}

impl Default for PsrlConfig {
    fn default() -> Self {
        PsrlConfig {
            num_episodes: 100,
            episode_horizon: 100,
            seed: 0,
        }
    }
}

impl PsrlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episode_horizon == 0 {
            return Err(Error::Config("psrl.episode_horizon must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    #[serde(rename = "return")]
    pub episode_return: f64,
    /// Transitions observed so far, this episode included.
    pub dataset_size: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsrlOutcome {
    /// Optimal policy of the posterior-mean MDP after the last episode.
    pub policy: Policy,
    /// Transitions of each episode, in order.
    pub history: Vec<TransitionDataset>,
    pub log: Vec<EpisodeLog>,
}

impl PsrlOutcome {
    pub fn write_log_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        for row in &self.log {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_policy_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, &self.policy)?;
        Ok(())
    }
}

/// Posterior sampling: each episode samples one MDP from the current belief,
/// acts greedily for it in the true `env`, then conditions on the new data.
pub fn psrl_train(
    prior: &BeliefMdp,
    env: &TabularMdp,
    start: usize,
    config: &PsrlConfig,
) -> Result<PsrlOutcome> {
    config.validate()?;
    let mut data = TransitionDataset::empty(env.num_states(), env.num_actions());
    let mut belief = prior.clone();
    let mut history = Vec::with_capacity(config.num_episodes);
    let mut log = Vec::with_capacity(config.num_episodes);
    for e in 0..config.num_episodes {
        let model = belief.sample_mdp(env, rng::derive_seed(config.seed, &[PSRL_MODEL_STREAM, e as u64]))?;
        let (policy, _) = policy_iteration(&model)?;
        let mut episode = TransitionDataset::empty(env.num_states(), env.num_actions());
        let mut r = rng::stream(config.seed, &[PSRL_ROLLOUT_STREAM, e as u64]);
        let episode_return = simulate_episode(env, &policy, start, config.episode_horizon, &mut r, &mut episode);
        data.merge(&episode)?;
        belief = prior.update(&data)?;
        log.push(EpisodeLog {
            episode: e + 1,
            episode_return,
            dataset_size: data.total(),
        });
        history.push(episode);
    }
    let (policy, _) = policy_iteration(&belief.mean_mdp(env)?)?;
    Ok(PsrlOutcome { policy, history, log })
}
