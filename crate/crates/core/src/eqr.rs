//! Epistemic quantile regression: learn the per-state quantiles of the value
//! distribution from a stream of posterior model samples.

use std::io::Write;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{induce_mrp, Mrp, Policy, TabularMdp};
use crate::posterior::MdpPosterior;
use crate::quantdist::{tau_hat, tau_hats, w1_sorted_uniform, QuantileValueFunction};
use crate::rng;

const MODEL_STREAM: u64 = 10;
const INIT_STREAM: u64 = 11;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    Constant,
    InverseT,
    #[default]
    InverseSqrtT,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Initialization {
    #[default]
    Zeros,
    /// Independent uniform atoms in `[low, high]`, sorted per state.
    Uniform { low: f64, high: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EqrConfig {
    pub m: usize,
    pub step_size: f64,
    pub schedule: StepSchedule,
    pub max_steps: usize,
    /// Trace interval in steps; the final step is always recorded.
    pub eval_every: usize,
    pub seed: u64,
    pub init: Initialization,
}

impl Default for EqrConfig {
    fn default() -> Self {
        EqrConfig {
            m: 10,
            step_size: 0.1,
            schedule: StepSchedule::InverseSqrtT,
            max_steps: 10_000,
            eval_every: 100,
            seed: 0,
            init: Initialization::Zeros,
        }
    }
}

impl EqrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("eqr.m must be at least 1".into()));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::Config(format!("eqr.step_size must be positive, got {}", self.step_size)));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eqr.eval_every must be at least 1".into()));
        }
        if let Initialization::Uniform { low, high } = self.init {
            if !(low <= high) || !low.is_finite() || !high.is_finite() {
                return Err(Error::Config(format!("eqr.init range [{low}, {high}] is empty")));
            }
        }
        Ok(())
    }

    /// Step size used at 1-based step `t`.
    pub fn alpha(&self, t: usize) -> f64 {
        let t = t.max(1) as f64;
        match self.schedule {
            StepSchedule::Constant => self.step_size,
            StepSchedule::InverseT => self.step_size / t,
            StepSchedule::InverseSqrtT => self.step_size / t.sqrt(),
        }
    }
}

/// Snapshot of the learner after `step` updates.
#[derive(Debug, Clone, PartialEq)]
pub struct TracePoint {
    pub step: usize,
    pub value: QuantileValueFunction,
    /// `q_i(s) − reference_i(s)`, flattened like the value function.
    pub error: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EqrTrace {
    pub points: Vec<TracePoint>,
}

impl EqrTrace {
    /// Per-quantile errors at `state`, one row per trace point.
    pub fn errors_at(&self, state: usize) -> Vec<Vec<f64>> {
        self.points
            .iter()
            .filter_map(|p| {
                let m = p.value.m();
                p.error.as_ref().map(|e| e[state * m..(state + 1) * m].to_vec())
            })
            .collect()
    }

    /// `w₁` to the reference at `state`, one entry per trace point.
    pub fn w1_at(&self, state: usize, reference: &QuantileValueFunction) -> Vec<(usize, f64)> {
        self.points
            .iter()
            .map(|p| (p.step, w1_sorted_uniform(p.value.state(state), reference.state(state))))
            .collect()
    }

    /// Long format: `step,state,tau_hat,q_value,error`; `error` is empty
    /// without a reference.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["step", "state", "tau_hat", "q_value", "error"])?;
        for p in &self.points {
            let m = p.value.m();
            for s in 0..p.value.num_states() {
                for (i, q) in p.value.state(s).iter().enumerate() {
                    let error = p
                        .error
                        .as_ref()
                        .map(|e| e[s * m + i].to_string())
                        .unwrap_or_default();
                    out.write_record([
                        p.step.to_string(),
                        s.to_string(),
                        tau_hat(i + 1, m).to_string(),
                        q.to_string(),
                        error,
                    ])?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// In-place Jacobi sweep driven by one induced MRP.
fn update_from_mrp(
    q: &QuantileValueFunction,
    mrp: &Mrp,
    terminal: usize,
    taus: &[f64],
    alpha: f64,
    out: &mut QuantileValueFunction,
) {
    let m = q.m();
    let gamma = mrp.discount();
    let mut targets = vec![0.0; m];
    for (s, succ) in mrp.successors().iter().enumerate() {
        let row = out.state_mut(s);
        if s == terminal {
            row.fill(0.0);
            continue;
        }
        let r = mrp.reward()[s];
        for (j, t) in targets.iter_mut().enumerate() {
            *t = r + gamma * succ.iter().map(|&(n, p)| p * q.state(n)[j]).sum::<f64>();
        }
        targets.sort_by(f64::total_cmp);
        for (i, (atom, &tau)) in row.iter_mut().zip(taus).enumerate() {
            let old = q.state(s)[i];
            let below = targets.partition_point(|&t| t < old);
            *atom = old + alpha * (tau - below as f64 / m as f64);
        }
        row.sort_by(f64::total_cmp);
    }
}

/// One simultaneous update of every state's quantiles from a sampled model:
/// `q_i(s) += α·(τ̂_i − #{j : t_j(s) < q_i(s)} / m)` with bootstrap targets
/// `t_j(s) = r(s) + γ Σ p(s'|s) q_j(s')`.
pub fn eqr_update(
    q: &QuantileValueFunction,
    sampled_mdp: &TabularMdp,
    policy: &Policy,
    alpha: f64,
) -> Result<QuantileValueFunction> {
    if q.num_states() != sampled_mdp.num_states() {
        return Err(Error::Dimension(format!(
            "quantile function has {} states, MDP has {}",
            q.num_states(),
            sampled_mdp.num_states()
        )));
    }
    let mrp = induce_mrp(sampled_mdp, policy)?;
    let mut out = q.clone();
    update_from_mrp(q, &mrp, sampled_mdp.terminal_state(), &tau_hats(q.m()), alpha, &mut out);
    Ok(out)
}

pub fn initial_quantiles(num_states: usize, terminal: usize, config: &EqrConfig) -> QuantileValueFunction {
    let m = config.m;
    match config.init {
        Initialization::Zeros => QuantileValueFunction::zeros(num_states, m),
        Initialization::Uniform { low, high } => {
            let mut r = rng::stream(config.seed, &[INIT_STREAM]);
            let mut atoms: Vec<f64> = (0..num_states * m).map(|_| r.random_range(low..=high)).collect();
            atoms.chunks_mut(m).for_each(|c| c.sort_by(f64::total_cmp));
            atoms[terminal * m..(terminal + 1) * m].fill(0.0);
            QuantileValueFunction::new(num_states, m, atoms).expect("sorted finite atoms")
        }
    }
}

/// Runs `max_steps` updates, each from a fresh posterior sample, recording
/// the learner every `eval_every` steps and at the end.
pub fn run_eqr(
    posterior: &dyn MdpPosterior,
    base: &TabularMdp,
    policy: &Policy,
    config: &EqrConfig,
    reference: Option<&QuantileValueFunction>,
) -> Result<(QuantileValueFunction, EqrTrace)> {
    config.validate()?;
    if let Some(r) = reference {
        if r.num_states() != base.num_states() || r.m() != config.m {
            return Err(Error::Dimension("reference quantiles do not match the learner".into()));
        }
    }
    let taus = tau_hats(config.m);
    let terminal = base.terminal_state();
    let mut q = initial_quantiles(base.num_states(), terminal, config);
    let mut next = q.clone();
    let mut trace = EqrTrace::default();
    let snapshot = |step: usize, q: &QuantileValueFunction| TracePoint {
        step,
        value: q.clone(),
        error: reference.map(|r| q.atoms().iter().zip(r.atoms()).map(|(a, b)| a - b).collect()),
    };
    for t in 1..=config.max_steps {
        let model = posterior.sample_mdp(base, rng::derive_seed(config.seed, &[MODEL_STREAM, t as u64]))?;
        let mrp = induce_mrp(&model, policy)?;
        update_from_mrp(&q, &mrp, terminal, &taus, config.alpha(t), &mut next);
        std::mem::swap(&mut q, &mut next);
        if t % config.eval_every == 0 || t == config.max_steps {
            trace.points.push(snapshot(t, &q));
        }
    }
    Ok((q, trace))
}
