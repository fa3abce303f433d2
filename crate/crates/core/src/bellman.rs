//! The value-distributional Bellman operator over a finite ensemble of
//! transition models, in exact-atom and quantile-projected form.
//!
//! Next states are coupled comonotonically: every successor is read at the
//! same quantile level, so a state's output is a mixture over models of
//! `r(s) + γ Σ p(s'|s) F⁻¹_{s'}(u)` for `u ~ U(0, 1)`.

use std::io::Write;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{induce_mrp, Policy, TabularMdp};
use crate::posterior::MdpPosterior;
use crate::quantdist::{
    project_quantiles, sup_w1, sup_wasserstein, AtomDistribution, QuantileValueFunction,
};
use crate::rng;

/// Successive-iterate distance at which iteration stops.
pub const CONVERGENCE_TOLERANCE: f64 = 1e-9;
pub const MAX_ITERATIONS: usize = 1000;
/// Relative slack above 1 tolerated in a contraction ratio.
pub const CONTRACTION_SLACK: f64 = 1e-9;

/// Breakpoints closer than this are treated as one.
const BREAKPOINT_EPS: f64 = 1e-12;

/// Weighted transition models sharing one state/action shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEnsemble {
    models: Vec<(TabularMdp, f64)>,
}

impl ModelEnsemble {
    pub fn new(models: Vec<(TabularMdp, f64)>) -> Result<Self> {
        let first = models
            .first()
            .ok_or_else(|| Error::InvalidModel("ensemble needs at least one model".into()))?;
        let shape = (
            first.0.num_states(),
            first.0.num_actions(),
            first.0.terminal_state(),
            first.0.discount(),
        );
        let mut total = 0.0;
        for (mdp, w) in &models {
            let other = (mdp.num_states(), mdp.num_actions(), mdp.terminal_state(), mdp.discount());
            if other != shape {
                return Err(Error::InvalidModel("ensemble members differ in shape".into()));
            }
            if !(*w > 0.0) || !w.is_finite() {
                return Err(Error::InvalidModel(format!("ensemble weight {w}")));
            }
            total += w;
        }
        if (total - 1.0).abs() > 1e-12 * models.len() as f64 {
            return Err(Error::InvalidModel(format!("ensemble weights sum to {total}")));
        }
        Ok(ModelEnsemble { models })
    }

    pub fn single(mdp: TabularMdp) -> Self {
        ModelEnsemble {
            models: vec![(mdp, 1.0)],
        }
    }

    /// `k` equally weighted posterior draws; draw `i` uses seed `(seed, i)`.
    pub fn sample(
        posterior: &dyn MdpPosterior,
        base: &TabularMdp,
        k: usize,
        seed: u64,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("ensemble size must be positive".into()));
        }
        let models = (0..k as u64)
            .into_par_iter()
            .map(|i| posterior.sample_mdp(base, rng::derive_seed(seed, &[i])))
            .collect::<Result<Vec<_>>>()?;
        let w = 1.0 / k as f64;
        Self::new(models.into_iter().map(|m| (m, w)).collect())
    }

    pub fn models(&self) -> &[(TabularMdp, f64)] {
        &self.models
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn num_states(&self) -> usize {
        self.models[0].0.num_states()
    }

    pub fn terminal_state(&self) -> usize {
        self.models[0].0.terminal_state()
    }

    pub fn discount(&self) -> f64 {
        self.models[0].0.discount()
    }

    /// Weighted average of the transition tensors.
    pub fn mean_mdp(&self) -> Result<TabularMdp> {
        let base = &self.models[0].0;
        let mut transition = vec![0.0; base.transitions().len()];
        let mut reward = vec![0.0; base.rewards().len()];
        for (mdp, w) in &self.models {
            transition.iter_mut().zip(mdp.transitions()).for_each(|(t, p)| *t += w * p);
            reward.iter_mut().zip(mdp.rewards()).for_each(|(r, x)| *r += w * x);
        }
        base.with_transitions(transition)?.with_rewards(reward)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    #[default]
    Comonotone,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OperatorConfig {
    pub coupling: Coupling,
    /// Largest atom count the exact operator may produce at one state.
    pub max_atoms: usize,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        OperatorConfig {
            coupling: Coupling::Comonotone,
            max_atoms: 1_000_000,
        }
    }
}

/// One ensemble member after policy induction.
struct InducedModel {
    weight: f64,
    reward: Vec<f64>,
    successors: Vec<Vec<(usize, f64)>>,
}

struct Induced {
    members: Vec<InducedModel>,
    discount: f64,
    terminal: usize,
    num_states: usize,
}

impl Induced {
    fn new(ensemble: &ModelEnsemble, policy: &Policy) -> Result<Self> {
        let members = ensemble
            .models
            .iter()
            .map(|(mdp, weight)| {
                let mrp = induce_mrp(mdp, policy)?;
                Ok(InducedModel {
                    weight: *weight,
                    reward: mrp.reward().to_vec(),
                    successors: mrp.successors(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Induced {
            members,
            discount: ensemble.discount(),
            terminal: ensemble.terminal_state(),
            num_states: ensemble.num_states(),
        })
    }
}

/// Union of the cumulative weights of `dists`, sorted, ending at exactly 1.
fn merged_breakpoints(dists: &[&AtomDistribution]) -> Vec<f64> {
    let mut points: Vec<f64> = dists
        .iter()
        .flat_map(|d| {
            d.weights().iter().scan(0.0, |c, w| {
                *c += w;
                Some(*c)
            })
        })
        .filter(|&c| c < 1.0 - BREAKPOINT_EPS)
        .collect();
    points.sort_by(f64::total_cmp);
    points.dedup_by(|b, a| *b - *a <= BREAKPOINT_EPS);
    points.push(1.0);
    points
}

/// Comonotone pushforward of one member at one state, appended to `out`.
fn push_member_atoms(
    mu: &[AtomDistribution],
    member: &InducedModel,
    s: usize,
    discount: f64,
    out: &mut Vec<(f64, f64)>,
) {
    let succ = &member.successors[s];
    let dists: Vec<&AtomDistribution> = succ.iter().map(|&(n, _)| &mu[n]).collect();
    let breakpoints = merged_breakpoints(&dists);
    // per successor: current atom index and its cumulative weight
    let mut cursor: Vec<(usize, f64)> = dists.iter().map(|d| (0, d.weights()[0])).collect();
    let mut left = 0.0;
    for &right in &breakpoints {
        let mid = 0.5 * (left + right);
        let mut next_value = 0.0;
        for ((&(_, p), d), (k, cum)) in succ.iter().zip(&dists).zip(cursor.iter_mut()) {
            while *cum < mid && *k + 1 < d.len() {
                *k += 1;
                *cum += d.weights()[*k];
            }
            next_value += p * d.values()[*k];
        }
        let weight = member.weight * (right - left);
        if weight > 0.0 {
            out.push((member.reward[s] + discount * next_value, weight));
        }
        left = right;
    }
}

fn atom_count(mu: &[AtomDistribution], induced: &Induced, s: usize) -> usize {
    induced
        .members
        .iter()
        .map(|m| {
            let dists: Vec<&AtomDistribution> = m.successors[s].iter().map(|&(n, _)| &mu[n]).collect();
            merged_breakpoints(&dists).len()
        })
        .sum()
}

fn exact_with(
    mu: &[AtomDistribution],
    induced: &Induced,
    config: &OperatorConfig,
) -> Result<Vec<AtomDistribution>> {
    if mu.len() != induced.num_states {
        return Err(Error::Dimension(format!(
            "value distribution has {} states, ensemble has {}",
            mu.len(),
            induced.num_states
        )));
    }
    (0..induced.num_states)
        .into_par_iter()
        .map(|s| {
            if s == induced.terminal {
                return Ok(AtomDistribution::point(0.0));
            }
            let needed = atom_count(mu, induced, s);
            if needed > config.max_atoms {
                return Err(Error::AtomBlowUp {
                    state: s,
                    needed,
                    cap: config.max_atoms,
                });
            }
            let mut atoms = Vec::with_capacity(needed);
            for member in &induced.members {
                push_member_atoms(mu, member, s, induced.discount, &mut atoms);
            }
            Ok(AtomDistribution::from_positive(atoms))
        })
        .collect()
}

/// Exact application of the operator. The terminal state maps to `δ₀`.
pub fn apply_operator_exact(
    mu: &[AtomDistribution],
    ensemble: &ModelEnsemble,
    policy: &Policy,
    config: &OperatorConfig,
) -> Result<Vec<AtomDistribution>> {
    exact_with(mu, &Induced::new(ensemble, policy)?, config)
}

fn projected_with(mu: &QuantileValueFunction, induced: &Induced) -> Result<QuantileValueFunction> {
    if mu.num_states() != induced.num_states {
        return Err(Error::Dimension(format!(
            "quantile function has {} states, ensemble has {}",
            mu.num_states(),
            induced.num_states
        )));
    }
    let m = mu.m();
    let gamma = induced.discount;
    let states = (0..induced.num_states)
        .into_par_iter()
        .map(|s| {
            if s == induced.terminal {
                return Ok(vec![0.0; m]);
            }
            // uniform inputs share breakpoints j/m, so atom j of every successor pairs up
            let mut targets = Vec::with_capacity(m * induced.members.len());
            for member in &induced.members {
                let w = member.weight / m as f64;
                for j in 0..m {
                    let next: f64 = member.successors[s].iter().map(|&(n, p)| p * mu.state(n)[j]).sum();
                    targets.push((member.reward[s] + gamma * next, w));
                }
            }
            let projected = project_quantiles(&AtomDistribution::from_positive(targets), m)?;
            Ok(projected.atoms().to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    QuantileValueFunction::new(induced.num_states, m, states.concat())
}

/// Operator followed by the quantile projection onto `mu.m()` atoms.
pub fn apply_operator_projected(
    mu: &QuantileValueFunction,
    ensemble: &ModelEnsemble,
    policy: &Policy,
) -> Result<QuantileValueFunction> {
    projected_with(mu, &Induced::new(ensemble, policy)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedIteration {
    pub value: QuantileValueFunction,
    /// `w̄₁` between consecutive iterates, one entry per application.
    pub deltas: Vec<f64>,
    pub converged: bool,
}

impl ProjectedIteration {
    pub fn iterations(&self) -> usize {
        self.deltas.len()
    }
}

/// Iterates the projected operator until successive iterates are within
/// `tolerance` in `w̄₁` or `max_iterations` applications have run.
pub fn iterate_projected(
    mu0: &QuantileValueFunction,
    ensemble: &ModelEnsemble,
    policy: &Policy,
    tolerance: f64,
    max_iterations: usize,
) -> Result<ProjectedIteration> {
    let induced = Induced::new(ensemble, policy)?;
    let mut current = mu0.clone();
    let mut deltas = Vec::new();
    let mut converged = false;
    for _ in 0..max_iterations {
        let next = projected_with(&current, &induced)?;
        let delta = sup_w1(&next, &current)?;
        deltas.push(delta);
        current = next;
        if delta <= tolerance {
            converged = true;
            break;
        }
    }
    Ok(ProjectedIteration {
        value: current,
        deltas,
        converged,
    })
}

/// `iterations` applications of the exact operator.
pub fn iterate_exact(
    mu0: &[AtomDistribution],
    ensemble: &ModelEnsemble,
    policy: &Policy,
    config: &OperatorConfig,
    iterations: usize,
) -> Result<Vec<AtomDistribution>> {
    let induced = Induced::new(ensemble, policy)?;
    let mut current = mu0.to_vec();
    for _ in 0..iterations {
        current = exact_with(&current, &induced, config)?;
    }
    Ok(current)
}

/// One row of a contraction certificate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContractionTrial {
    pub trial: usize,
    pub state_space_size: usize,
    pub gamma: f64,
    /// `w̄_p(μ, μ′)`.
    pub w_pre: f64,
    /// `w̄_p(Tμ, Tμ′)`.
    pub w_post: f64,
    /// `w_post / (γ·w_pre)`, or 0 when both sides vanish.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub p_order: f64,
    pub trials: Vec<ContractionTrial>,
}

impl ContractionReport {
    pub fn max_ratio(&self) -> f64 {
        self.trials.iter().map(|t| t.ratio).fold(0.0, f64::max)
    }

    pub fn violated(&self) -> bool {
        self.max_ratio() > 1.0 + CONTRACTION_SLACK
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        for t in &self.trials {
            out.serialize(t)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Contraction ratio with the degenerate cases pinned: equal inputs or a
/// zero discount give 0.
pub fn contraction_ratio(gamma: f64, w_pre: f64, w_post: f64) -> f64 {
    let bound = gamma * w_pre;
    if bound > 0.0 {
        w_post / bound
    } else if w_post == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Random per-state atom function with 1 to `max_atoms` atoms in `[-scale, scale]`.
pub fn random_atom_function(
    num_states: usize,
    max_atoms: usize,
    scale: f64,
    rng: &mut rng::Rng,
) -> Vec<AtomDistribution> {
    (0..num_states)
        .map(|_| {
            let n = rng.random_range(1..=max_atoms.max(1));
            let raw: Vec<(f64, f64)> = (0..n)
                .map(|_| (rng.random_range(-scale..=scale), rng.random_range(0.05..1.0)))
                .collect();
            AtomDistribution::from_positive(raw)
        })
        .collect()
}

/// Draws `trials` random input pairs and measures `w̄_p` before and after one
/// exact application. Violations are reported, not raised.
pub fn certify_contraction(
    ensemble: &ModelEnsemble,
    policy: &Policy,
    p_order: f64,
    trials: usize,
    seed: u64,
) -> Result<ContractionReport> {
    let induced = Induced::new(ensemble, policy)?;
    let config = OperatorConfig::default();
    let n = ensemble.num_states();
    let gamma = ensemble.discount();
    let reward_bound = ensemble
        .models()
        .iter()
        .map(|(m, _)| {
            let (lo, hi) = m.reward_range();
            lo.abs().max(hi.abs())
        })
        .fold(0.0, f64::max);
    let scale = (reward_bound / (1.0 - gamma)).max(1.0);
    let rows = (0..trials)
        .map(|trial| {
            let mut r = rng::stream(seed, &[trial as u64]);
            let mu = random_atom_function(n, 5, scale, &mut r);
            let nu = random_atom_function(n, 5, scale, &mut r);
            let w_pre = sup_wasserstein(p_order, &mu, &nu)?;
            let w_post = sup_wasserstein(
                p_order,
                &exact_with(&mu, &induced, &config)?,
                &exact_with(&nu, &induced, &config)?,
            )?;
            Ok(ContractionTrial {
                trial,
                state_space_size: n,
                gamma,
                w_pre,
                w_post,
                ratio: contraction_ratio(gamma, w_pre, w_post),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ContractionReport {
        p_order,
        trials: rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::random_acyclic_mdp;
    use crate::mdp::{policy_value, solve_value};
    use crate::posterior::DirichletPosterior;
    use crate::quantdist::wasserstein;

    fn ensemble_on(mdp: &TabularMdp, k: usize, seed: u64) -> ModelEnsemble {
        let posterior = DirichletPosterior::on_support_of(mdp, 1.0).unwrap();
        ModelEnsemble::sample(&posterior, mdp, k, seed).unwrap()
    }

    fn points(values: &[f64]) -> Vec<AtomDistribution> {
        values.iter().map(|&v| AtomDistribution::point(v)).collect()
    }

    #[test]
    fn true_values_are_a_fixed_point_of_a_single_model() {
        let mdp = random_acyclic_mdp(3, 2, 2, (-1.0, 1.0), 0.9, 4).unwrap();
        let policy = Policy::uniform(mdp.num_states(), 2);
        let v = policy_value(&mdp, &policy).unwrap();
        let out = apply_operator_exact(
            &points(&v),
            &ModelEnsemble::single(mdp),
            &policy,
            &OperatorConfig::default(),
        )
        .unwrap();
        for (d, value) in out.iter().zip(&v) {
            assert_eq!(d.len(), 1);
            assert!((d.values()[0] - value).abs() < 1e-12);
        }
    }

    #[test]
    fn repeated_application_matches_finite_horizon_values() {
        let mdp = crate::mdp::tests::random_mdp(4, 1, 0.8, 11);
        let policy = Policy::uniform(4, 1);
        let mrp = induce_mrp(&mdp, &policy).unwrap();
        let ensemble = ModelEnsemble::single(mdp);
        let mut expected = vec![0.0; 4];
        let mut mu = points(&[0.0; 4]);
        for _ in 0..6 {
            mu = apply_operator_exact(&mu, &ensemble, &policy, &OperatorConfig::default()).unwrap();
            expected = mrp.backup(&expected);
            expected[3] = 0.0;
            for (d, e) in mu.iter().zip(&expected) {
                assert_eq!(d.len(), 1);
                assert!((d.values()[0] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_models_give_two_atoms_by_hand() {
        // state 0 goes to states 1 or 2, which are absorbed by the terminal 3
        let row = |a: f64| vec![0.0, a, 1.0 - a, 0.0];
        let build = |a: f64| {
            let mut t = row(a);
            t.extend([0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
            TabularMdp::new(4, 1, 3, 0.5, t, vec![1.0, 2.0, 4.0, 0.0]).unwrap()
        };
        let ensemble = ModelEnsemble::new(vec![(build(0.25), 0.4), (build(0.75), 0.6)]).unwrap();
        let mu = points(&[0.0, 10.0, 20.0, 0.0]);
        let out =
            apply_operator_exact(&mu, &ensemble, &Policy::uniform(4, 1), &OperatorConfig::default())
                .unwrap();
        // 1 + 0.5·(0.25·10 + 0.75·20) = 9.75 and 1 + 0.5·(0.75·10 + 0.25·20) = 7.25
        assert_eq!(out[0].values(), &[7.25, 9.75]);
        assert!((out[0].weights()[0] - 0.6).abs() < 1e-15);
        assert_eq!(out[1].values(), &[2.0]);
        assert_eq!(out[3].values(), &[0.0]);
    }

    #[test]
    fn comonotone_coupling_pairs_equal_levels() {
        let t = vec![
            0.0, 0.5, 0.5, 0.0, //
            0.0, 0.0, 0.0, 1.0, //
            0.0, 0.0, 0.0, 1.0, //
            0.0, 0.0, 0.0, 1.0,
        ];
        let mdp = TabularMdp::new(4, 1, 3, 1.0 - 1e-9, t, vec![0.0; 4]).unwrap();
        let mu = vec![
            AtomDistribution::point(0.0),
            AtomDistribution::new(vec![(0.0, 0.5), (2.0, 0.5)]).unwrap(),
            AtomDistribution::new(vec![(0.0, 0.25), (4.0, 0.75)]).unwrap(),
            AtomDistribution::point(0.0),
        ];
        let out = apply_operator_exact(
            &mu,
            &ModelEnsemble::single(mdp),
            &Policy::uniform(4, 1),
            &OperatorConfig::default(),
        )
        .unwrap();
        // levels (0, .25], (.25, .5], (.5, 1] read (0,0), (0,4), (2,4)
        let g = 1.0 - 1e-9;
        let expected = [(0.0, 0.25), (2.0 * g, 0.25), (3.0 * g, 0.5)];
        assert_eq!(out[0].len(), 3);
        for ((v, w), (ev, ew)) in out[0].iter().zip(expected) {
            assert!((v - ev).abs() < 1e-12 && (w - ew).abs() < 1e-12);
        }
    }

    #[test]
    fn atom_cap_is_an_error() {
        let mdp = random_acyclic_mdp(3, 2, 1, (0.0, 1.0), 0.9, 1).unwrap();
        let ensemble = ensemble_on(&mdp, 8, 2);
        let mu = points(&vec![0.0; mdp.num_states()]);
        let config = OperatorConfig {
            max_atoms: 4,
            ..Default::default()
        };
        let policy = Policy::uniform(mdp.num_states(), 1);
        let first = apply_operator_exact(&mu, &ensemble, &policy, &OperatorConfig::default()).unwrap();
        let err = apply_operator_exact(&first, &ensemble, &policy, &config).unwrap_err();
        assert!(matches!(err, Error::AtomBlowUp { cap: 4, .. }));
    }

    #[test]
    fn projection_of_small_outputs_is_lossless() {
        let mdp = random_acyclic_mdp(2, 2, 1, (-1.0, 1.0), 0.9, 3).unwrap();
        let n = mdp.num_states();
        let policy = Policy::uniform(n, 1);
        let ensemble = ensemble_on(&mdp, 2, 9);
        // point inputs give at most K = 2 atoms per state
        let mu = QuantileValueFunction::zeros(n, 4);
        let exact = apply_operator_exact(&points(&vec![0.0; n]), &ensemble, &policy, &OperatorConfig::default())
            .unwrap();
        let projected = apply_operator_projected(&mu, &ensemble, &policy).unwrap();
        for s in 0..n {
            assert!(exact[s].len() <= 2);
            assert!(wasserstein(1.0, &exact[s], &projected.distribution(s)) < 1e-12);
        }
    }

    #[test]
    fn projected_operator_matches_projected_exact_operator() {
        let mdp = random_acyclic_mdp(3, 2, 2, (-1.0, 1.0), 0.9, 5).unwrap();
        let n = mdp.num_states();
        let policy = Policy::uniform(n, 2);
        let ensemble = ensemble_on(&mdp, 5, 1);
        let mut r = rng::stream(3, &[]);
        let m = 7;
        let mut atoms: Vec<f64> = (0..n * m).map(|_| r.random_range(-3.0..3.0)).collect();
        atoms.chunks_mut(m).for_each(|c| c.sort_by(f64::total_cmp));
        atoms[(n - 1) * m..].fill(0.0);
        let mu = QuantileValueFunction::new(n, m, atoms).unwrap();
        let as_atoms: Vec<AtomDistribution> = (0..n)
            .map(|s| AtomDistribution::from_samples(mu.state(s)).unwrap())
            .collect();
        let exact = apply_operator_exact(&as_atoms, &ensemble, &policy, &OperatorConfig::default()).unwrap();
        let projected = apply_operator_projected(&mu, &ensemble, &policy).unwrap();
        for s in 0..n {
            let reference = project_quantiles(&exact[s], m).unwrap();
            for (a, b) in reference.atoms().iter().zip(projected.state(s)) {
                assert!((a - b).abs() < 1e-12, "state {s}: {a} vs {b}");
            }
        }
        assert!(projected.state(n - 1).iter().all(|&q| q == 0.0));
    }

    #[test]
    fn projected_iteration_reaches_true_values_for_one_model() {
        let mdp = random_acyclic_mdp(4, 3, 2, (-1.0, 1.0), 0.95, 8).unwrap();
        let n = mdp.num_states();
        let policy = Policy::uniform(n, 2);
        let v = solve_value(&induce_mrp(&mdp, &policy).unwrap()).unwrap();
        let result = iterate_projected(
            &QuantileValueFunction::zeros(n, 10),
            &ModelEnsemble::single(mdp),
            &policy,
            0.0,
            200,
        )
        .unwrap();
        for s in 0..n {
            for q in result.value.state(s) {
                assert!((q - v[s]).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn mean_commutes_with_one_application() {
        let mdp = random_acyclic_mdp(3, 3, 2, (-1.0, 2.0), 0.9, 21).unwrap();
        let n = mdp.num_states();
        let policy = Policy::uniform(n, 2);
        let ensemble = ensemble_on(&mdp, 4, 6);
        let mut r = rng::stream(8, &[]);
        let mu = random_atom_function(n, 5, 5.0, &mut r);
        let out = apply_operator_exact(&mu, &ensemble, &policy, &OperatorConfig::default()).unwrap();
        let mean_mrp = induce_mrp(&ensemble.mean_mdp().unwrap(), &policy).unwrap();
        let means: Vec<f64> = mu.iter().map(AtomDistribution::mean).collect();
        let backup = mean_mrp.backup(&means);
        for s in 0..n - 1 {
            assert!((out[s].mean() - backup[s]).abs() < 1e-12);
        }
    }

    #[test]
    fn bounded_support_is_preserved() {
        let mdp = random_acyclic_mdp(3, 2, 2, (-1.0, 1.0), 0.8, 2).unwrap();
        let n = mdp.num_states();
        let policy = Policy::uniform(n, 2);
        let ensemble = ensemble_on(&mdp, 3, 4);
        let (lo, hi) = (-1.0 / 0.2, 1.0 / 0.2);
        let mut r = rng::stream(5, &[]);
        let mu = random_atom_function(n, 5, hi, &mut r);
        let out = apply_operator_exact(&mu, &ensemble, &policy, &OperatorConfig::default()).unwrap();
        for d in &out {
            assert!(d.min() >= lo - 1e-12 && d.max() <= hi + 1e-12);
        }
    }

    #[test]
    fn contraction_degenerate_cases() {
        assert_eq!(contraction_ratio(0.9, 0.0, 0.0), 0.0);
        assert_eq!(contraction_ratio(0.0, 1.0, 0.0), 0.0);
        let mdp = random_acyclic_mdp(2, 2, 1, (-1.0, 1.0), 0.0, 3).unwrap();
        let n = mdp.num_states();
        let report =
            certify_contraction(&ensemble_on(&mdp, 2, 1), &Policy::uniform(n, 1), 1.0, 10, 0).unwrap();
        assert!(report.trials.iter().all(|t| t.w_post == 0.0 && t.ratio == 0.0));
    }

    #[test]
    fn contraction_holds_on_random_acyclic_instances() {
        for seed in 0..10 {
            let mdp = random_acyclic_mdp(2, 2, 2, (-1.0, 1.0), 0.9, seed).unwrap();
            let n = mdp.num_states();
            let report =
                certify_contraction(&ensemble_on(&mdp, 3, seed), &Policy::uniform(n, 2), 1.0, 10, seed)
                    .unwrap();
            assert!(!report.violated(), "max ratio {}", report.max_ratio());
        }
    }

    #[test]
    fn contraction_report_csv_header() {
        let mdp = random_acyclic_mdp(1, 1, 1, (0.0, 1.0), 0.5, 3).unwrap();
        let report = certify_contraction(&ModelEnsemble::single(mdp), &Policy::uniform(2, 1), 2.0, 2, 0).unwrap();
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("trial,state_space_size,gamma,w_pre,w_post,ratio\n"));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn ensemble_rejects_bad_weights() {
        let mdp = random_acyclic_mdp(1, 1, 1, (0.0, 1.0), 0.5, 3).unwrap();
        assert!(ModelEnsemble::new(vec![]).is_err());
        assert!(ModelEnsemble::new(vec![(mdp.clone(), 0.5)]).is_err());
        assert!(ModelEnsemble::new(vec![(mdp.clone(), 1.5), (mdp, -0.5)]).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn one_application_keeps_support_and_commutes_with_the_mean(
                layers in 1usize..4, width in 1usize..3, k in 1usize..4, gamma in 0.1f64..0.95, seed in any::<u64>(),
            ) {
                let mdp = random_acyclic_mdp(layers, width, 2, (-1.0, 1.0), gamma, seed).unwrap();
                let n = mdp.num_states();
                let policy = Policy::uniform(n, 2);
                let ensemble = ensemble_on(&mdp, k, seed ^ 7);
                let bound = 1.0 / (1.0 - gamma);
                let mut r = rng::stream(seed, &[99]);
                let mu = random_atom_function(n, 5, bound, &mut r);
                let out = apply_operator_exact(&mu, &ensemble, &policy, &OperatorConfig::default()).unwrap();
                let mean_mrp = induce_mrp(&ensemble.mean_mdp().unwrap(), &policy).unwrap();
                let means: Vec<f64> = mu.iter().map(AtomDistribution::mean).collect();
                let backup = mean_mrp.backup(&means);
                for s in 0..n - 1 {
                    prop_assert!(out[s].min() >= -bound - 1e-12 && out[s].max() <= bound + 1e-12);
                    prop_assert!((out[s].mean() - backup[s]).abs() < 1e-10);
                }
            }

            #[test]
            fn contraction_ratio_stays_below_one(
                width in 1usize..3, k in 1usize..4, gamma in 0.3f64..0.99, p in 1.0f64..3.0, seed in any::<u64>(),
            ) {
                let mdp = random_acyclic_mdp(2, width, 2, (-1.0, 1.0), gamma, seed).unwrap();
                let n = mdp.num_states();
                let report = certify_contraction(&ensemble_on(&mdp, k, seed), &Policy::uniform(n, 2), p, 4, seed).unwrap();
                prop_assert!(report.max_ratio() <= 1.0 + CONTRACTION_SLACK, "{}", report.max_ratio());
            }
        }
    }
}
