//! Declarative experiment runs: one JSON config in, a directory of CSV/JSON
//! artifacts out.
//!
//! Output layout under `output_dir`:
//! - `resolved_config.json`: the config with every default written out
//! - `seed_<n>/…`: per-seed result files
//! - aggregate CSVs and `summary.json` (means and standard errors across seeds)
//! - `run_metadata.json`: wall-clock data, the only non-deterministic file
//!
//! Every file is written to a temporary sibling and renamed into place.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::agent::{accumulate, collect_episodes, policy_iteration, psrl_train, PsrlConfig};
use crate::bellman::{certify_contraction, iterate_projected, ModelEnsemble, CONTRACTION_SLACK};
use crate::envs::{
    build_gridworld, build_toy_mdp, random_acyclic_mdp, GridworldSpec, ToyEdge, ToyFamily, ToyMdpSpec,
    TOY_S0,
};
use crate::eqr::{run_eqr, EqrConfig};
use crate::mdp::{policy_value, Policy, TabularMdp};
use crate::oracle::{mean_identity_report, oracle_quantiles, sample_value_distribution, ValueSampleSet};
use crate::posterior::{
    BeliefMdp, DirichletPosterior, MdpPosterior, PointMass, RewardPosterior, TruncatedGaussian,
};
use crate::quantdist::{tau_hats, w1_sorted_uniform, QuantileValueFunction};
use crate::rng::derive_seed;
use crate::{Error, Result};

const ENSEMBLE_STREAM: u64 = 40;
const INSTANCE_STREAM: u64 = 41;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    ToyConvergence,
    BetaSweep,
    Gridworld,
    Contraction,
    OperatorIterate,
    OracleOnly,
}

/// Toy chain; unset topology fields fall back to the default topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyEnvironment {
    pub beta: f64,
    pub family: ToyFamily,
    /// Reward on leaving the cycle state.
    pub r2: f64,
    pub discount: f64,
    /// Overrides `family`.
    pub posterior_family: Option<Vec<TruncatedGaussian>>,
    pub num_states: Option<usize>,
    pub terminal_state: Option<usize>,
    pub edges: Option<Vec<ToyEdge>>,
    pub rewards: Option<Vec<f64>>,
}

impl Default for ToyEnvironment {
    fn default() -> Self {
        ToyEnvironment {
            beta: 0.0,
            family: ToyFamily::Figure,
            r2: 0.0,
            discount: 0.9,
            posterior_family: None,
            num_states: None,
            terminal_state: None,
            edges: None,
            rewards: None,
        }
    }
}

impl ToyEnvironment {
    pub fn spec(&self) -> ToyMdpSpec {
        let base = ToyMdpSpec::default_topology(self.beta, self.family, self.r2);
        ToyMdpSpec {
            beta: self.beta,
            discount: self.discount,
            posterior_family: self.posterior_family.clone().unwrap_or(base.posterior_family),
            num_states: self.num_states.unwrap_or(base.num_states),
            terminal_state: self.terminal_state.unwrap_or(base.terminal_state),
            edges: self.edges.clone().unwrap_or(base.edges),
            rewards: self.rewards.clone().unwrap_or(base.rewards),
        }
    }

    fn resolved(&self) -> Self {
        let spec = self.spec();
        ToyEnvironment {
            posterior_family: Some(spec.posterior_family),
            num_states: Some(spec.num_states),
            terminal_state: Some(spec.terminal_state),
            edges: Some(spec.edges),
            rewards: Some(spec.rewards),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomAcyclicEnvironment {
    pub num_layers: usize,
    pub states_per_layer: usize,
    #[serde(default = "one")]
    pub num_actions: usize,
    #[serde(default = "unit_range")]
    pub reward_range: [f64; 2],
    #[serde(default = "default_discount")]
    pub discount: f64,
    /// Instance seed; combined with the run seed.
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

fn unit_range() -> [f64; 2] {
    [0.0, 1.0]
}

fn default_discount() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EnvironmentSpec {
    Toy(ToyEnvironment),
    Gridworld(GridworldSpec),
    RandomAcyclic(RandomAcyclicEnvironment),
    /// An explicit MDP document; rows are validated on load.
    Tabular { mdp: TabularMdp },
}

/// Which transitions a Dirichlet prior may place mass on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionSupport {
    /// Every next state.
    Full,
    /// The nonzero entries of the environment's own rows.
    #[default]
    TrueSupport,
    /// Gridworld only: every cell one move away, plus staying put.
    Neighbourhood,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PosteriorSpec {
    /// Parametric for the toy chain, Dirichlet on the true support otherwise.
    #[default]
    Auto,
    PointMass,
    /// The toy chain's scalar mixture.
    Parametric,
    Dirichlet {
        alpha0: f64,
        #[serde(default)]
        support: TransitionSupport,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PolicySpec {
    #[default]
    Uniform,
    /// One action per state.
    Deterministic { actions: Vec<usize> },
    /// Optimal for the posterior-mean MDP.
    MeanOptimal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSettings {
    pub num_samples: usize,
    pub histogram_bins: usize,
}

impl Default for OracleSettings {
    fn default() -> Self {
        OracleSettings {
            num_samples: 10_000,
            histogram_bins: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorSettings {
    /// Posterior draws forming the fixed mixture.
    pub ensemble_size: usize,
    pub m: usize,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for OperatorSettings {
    fn default() -> Self {
        OperatorSettings {
            ensemble_size: 32,
            m: 100,
            tolerance: 1e-9,
            max_iterations: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub betas: Vec<f64>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            betas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridworldSettings {
    /// PSRL training; its seed is replaced by the run seed.
    pub psrl: PsrlConfig,
    /// Episodes collected with the trained policy before each snapshot.
    pub snapshots: Vec<usize>,
    pub episode_horizon: usize,
}

impl Default for GridworldSettings {
    fn default() -> Self {
        GridworldSettings {
            psrl: PsrlConfig::default(),
            snapshots: vec![1, 10, 100],
            episode_horizon: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContractionSettings {
    /// Random MDP instances per seed and per discount.
    pub instances: usize,
    pub trials_per_instance: usize,
    pub discounts: Vec<f64>,
    pub p_orders: Vec<f64>,
    pub ensemble_size: usize,
}

impl Default for ContractionSettings {
    fn default() -> Self {
        ContractionSettings {
            instances: 12,
            trials_per_instance: 3,
            discounts: vec![0.5, 0.9, 0.99],
            p_orders: vec![1.0, 2.0],
            ensemble_size: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub environment: EnvironmentSpec,
    #[serde(default)]
    pub posterior: PosteriorSpec,
    #[serde(default)]
    pub policy: PolicySpec,
    /// Its seed is replaced by the run seed.
    #[serde(default)]
    pub eqr: EqrConfig,
    #[serde(default)]
    pub operator: OperatorSettings,
    #[serde(default)]
    pub oracle: OracleSettings,
    #[serde(default)]
    pub sweep: SweepSettings,
    #[serde(default)]
    pub gridworld: GridworldSettings,
    #[serde(default)]
    pub contraction: ContractionSettings,
    /// State whose distribution is reported; defaults to the start state.
    #[serde(default)]
    pub report_state: Option<usize>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

/// An environment ready to run: the base MDP, the posterior and the policy.
struct Prepared {
    base: TabularMdp,
    posterior: Box<dyn MdpPosterior>,
    policy: Policy,
    report_state: usize,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Replaces the seed list and/or the output directory.
    pub fn with_overrides(mut self, seed: Option<u64>, output_dir: Option<PathBuf>) -> Self {
        if let Some(seed) = seed {
            self.seeds = vec![seed];
        }
        if let Some(dir) = output_dir {
            self.output_dir = dir;
        }
        self
    }

    /// Same config with every default written out.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        out.environment = match &self.environment {
            EnvironmentSpec::Toy(toy) => EnvironmentSpec::Toy(toy.resolved()),
            EnvironmentSpec::Gridworld(spec) => EnvironmentSpec::Gridworld(spec.resolved()),
            other => other.clone(),
        };
        out.posterior = self.effective_posterior();
        out.report_state = Some(self.report_state_or_default());
        out
    }

    fn effective_posterior(&self) -> PosteriorSpec {
        match (self.posterior, &self.environment) {
            (PosteriorSpec::Auto, EnvironmentSpec::Toy(_)) => PosteriorSpec::Parametric,
            (PosteriorSpec::Auto, EnvironmentSpec::Gridworld(_)) => PosteriorSpec::Dirichlet {
                alpha0: 0.1,
                support: TransitionSupport::TrueSupport,
            },
            (PosteriorSpec::Auto, _) => PosteriorSpec::Dirichlet {
                alpha0: 1.0,
                support: TransitionSupport::TrueSupport,
            },
            (spec, _) => spec,
        }
    }

    fn report_state_or_default(&self) -> usize {
        self.report_state.unwrap_or(match &self.environment {
            EnvironmentSpec::Toy(_) => TOY_S0,
            EnvironmentSpec::Gridworld(spec) => {
                let size = spec.room_size;
                let [room, x, y] = spec.start;
                room * size * size + y * size + x
            }
            _ => 0,
        })
    }

    /// Structural checks only; nothing is sampled or solved beyond building
    /// the environment once.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        self.eqr.validate()?;
        if self.oracle.num_samples == 0 || self.oracle.histogram_bins == 0 {
            return Err(Error::Config("oracle.num_samples and oracle.histogram_bins must be positive".into()));
        }
        let op = &self.operator;
        if op.ensemble_size == 0 || op.m == 0 || op.max_iterations == 0 || !(op.tolerance >= 0.0) {
            return Err(Error::Config("operator settings must be positive".into()));
        }
        match (self.kind, &self.environment) {
            (ExperimentKind::ToyConvergence | ExperimentKind::BetaSweep, EnvironmentSpec::Toy(_)) => {}
            (ExperimentKind::ToyConvergence | ExperimentKind::BetaSweep, _) => {
                return Err(Error::Config(format!("{:?} needs a toy environment", self.kind)));
            }
            (ExperimentKind::Gridworld, EnvironmentSpec::Gridworld(_)) => {}
            (ExperimentKind::Gridworld, _) => {
                return Err(Error::Config("gridworld experiment needs a gridworld environment".into()));
            }
            (ExperimentKind::Contraction, EnvironmentSpec::RandomAcyclic(_)) => {}
            (ExperimentKind::Contraction, _) => {
                return Err(Error::Config("contraction experiment needs a random_acyclic environment".into()));
            }
            _ => {}
        }
        if self.kind == ExperimentKind::BetaSweep {
            if self.sweep.betas.is_empty() {
                return Err(Error::Config("sweep.betas must not be empty".into()));
            }
            if let Some(b) = self.sweep.betas.iter().find(|b| !(0.0..=1.0).contains(*b)) {
                return Err(Error::Config(format!("beta {b} outside [0, 1]")));
            }
        }
        if self.kind == ExperimentKind::Gridworld {
            let g = &self.gridworld;
            g.psrl.validate()?;
            if g.snapshots.is_empty() || g.snapshots.contains(&0) || g.episode_horizon == 0 {
                return Err(Error::Config("gridworld snapshots and horizon must be positive".into()));
            }
        }
        if self.kind == ExperimentKind::Contraction {
            let c = &self.contraction;
            if c.instances == 0 || c.trials_per_instance == 0 || c.ensemble_size == 0 {
                return Err(Error::Config("contraction counts must be positive".into()));
            }
            if c.discounts.iter().any(|g| !(0.0..1.0).contains(g)) || c.discounts.is_empty() {
                return Err(Error::Config("contraction.discounts must lie in [0, 1)".into()));
            }
            if c.p_orders.iter().any(|p| !(*p >= 1.0)) || c.p_orders.is_empty() {
                return Err(Error::Config("contraction.p_orders must be at least 1".into()));
            }
        }
        let prepared = self.prepare(self.seeds[0])?;
        if prepared.report_state >= prepared.base.num_states() {
            return Err(Error::Config(format!("report_state {} out of range", prepared.report_state)));
        }
        Ok(())
    }

    fn toy_spec(&self, beta: Option<f64>) -> Result<ToyMdpSpec> {
        let EnvironmentSpec::Toy(toy) = &self.environment else {
            return Err(Error::Config("not a toy environment".into()));
        };
        let spec = ToyMdpSpec {
            beta: beta.unwrap_or(toy.beta),
            ..toy.spec()
        };
        spec.validate()?;
        Ok(spec)
    }

    fn prepare(&self, seed: u64) -> Result<Prepared> {
        self.prepare_with_beta(seed, None)
    }

    fn prepare_with_beta(&self, seed: u64, beta: Option<f64>) -> Result<Prepared> {
        let spec = self.effective_posterior();
        let report_state = self.report_state_or_default();
        let (base, posterior): (TabularMdp, Box<dyn MdpPosterior>) = match &self.environment {
            EnvironmentSpec::Toy(_) => {
                let toy = self.toy_spec(beta)?;
                let base = build_toy_mdp(&toy, 0.5)?;
                let posterior: Box<dyn MdpPosterior> = match spec {
                    PosteriorSpec::Parametric => Box::new(toy.posterior()?),
                    other => dirichlet_or_point(other, &base, None)?,
                };
                (base, posterior)
            }
            EnvironmentSpec::Gridworld(grid) => {
                let world = build_gridworld(grid)?;
                let posterior = dirichlet_or_point(spec, &world.mdp, Some(&world))?;
                (world.mdp, posterior)
            }
            EnvironmentSpec::RandomAcyclic(r) => {
                let base = random_acyclic_mdp(
                    r.num_layers,
                    r.states_per_layer,
                    r.num_actions,
                    (r.reward_range[0], r.reward_range[1]),
                    r.discount,
                    derive_seed(r.seed, &[INSTANCE_STREAM, seed]),
                )?;
                let posterior = dirichlet_or_point(spec, &base, None)?;
                (base, posterior)
            }
            EnvironmentSpec::Tabular { mdp } => {
                let posterior = dirichlet_or_point(spec, mdp, None)?;
                (mdp.clone(), posterior)
            }
        };
        let policy = match &self.policy {
            PolicySpec::Uniform => Policy::uniform(base.num_states(), base.num_actions()),
            PolicySpec::Deterministic { actions } => {
                if actions.len() != base.num_states() {
                    return Err(Error::Config(format!(
                        "policy lists {} actions for {} states",
                        actions.len(),
                        base.num_states()
                    )));
                }
                Policy::deterministic(actions, base.num_actions())?
            }
            PolicySpec::MeanOptimal => policy_iteration(&posterior.mean_mdp(&base)?)?.0,
        };
        Ok(Prepared {
            base,
            posterior,
            policy,
            report_state,
        })
    }
}

/// Builds a Dirichlet belief (rewards known) or the point mass.
fn dirichlet_or_point(
    spec: PosteriorSpec,
    base: &TabularMdp,
    world: Option<&crate::envs::Gridworld>,
) -> Result<Box<dyn MdpPosterior>> {
    match spec {
        PosteriorSpec::PointMass => Ok(Box::new(PointMass)),
        PosteriorSpec::Dirichlet { alpha0, support } => {
            if !(alpha0 > 0.0) {
                return Err(Error::Config(format!("dirichlet alpha0 must be positive, got {alpha0}")));
            }
            let transitions = match (support, world) {
                (TransitionSupport::Full, _) => {
                    DirichletPosterior::full(base.num_states(), base.num_actions(), alpha0)?
                }
                (TransitionSupport::TrueSupport, _) => DirichletPosterior::on_support_of(base, alpha0)?,
                (TransitionSupport::Neighbourhood, Some(w)) => w.neighbourhood_prior(alpha0)?,
                (TransitionSupport::Neighbourhood, None) => {
                    return Err(Error::Config("neighbourhood support needs a gridworld".into()));
                }
            };
            Ok(Box::new(BeliefMdp {
                transitions,
                rewards: RewardPosterior::known(base),
            }))
        }
        PosteriorSpec::Parametric => Err(Error::Config("parametric posterior needs a toy environment".into())),
        PosteriorSpec::Auto => unreachable!("resolved before use"),
    }
}

/// Mean and standard error of per-seed values; the error is `None` for a
/// single seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedStat {
    pub mean: f64,
    pub std_error: Option<f64>,
    pub n: usize,
}

impl SeedStat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std_error = (n > 1).then(|| {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        });
        SeedStat { mean, std_error, n }
    }
}

/// Outcome of a completed run. Non-empty `violations` means the artifacts were
/// written but a result invariant failed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub summary: Value,
    pub violations: Vec<String>,
}

impl Error {
    /// Process exit status: 2 for bad input, 3 for a violated result
    /// invariant, 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Invariant(_) => 3,
            Error::Dimension(_)
            | Error::RowSum { .. }
            | Error::Probability { .. }
            | Error::InvalidModel(_)
            | Error::InvalidDistribution(_)
            | Error::Config(_)
            | Error::Json(_) => 2,
            _ => 1,
        }
    }
}

/// Writes `path` via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, fill: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut writer = BufWriter::new(fs::File::create(&tmp)?);
        fill(&mut writer)?;
        writer.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)?;
        Ok(())
    })
}

fn write_rows<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    write_atomic(path, |w| {
        let mut out = csv::Writer::from_writer(w);
        for row in rows {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    })
}

fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed_{seed}"))
}

/// Runs the experiment and writes every artifact. Returns `Err` only when the
/// run could not complete; invariant failures are reported in the result.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    config.validate()?;
    let started = Instant::now();
    let resolved = config.resolved();
    let root = resolved.output_dir.clone();
    fs::create_dir_all(&root)?;
    write_json(&root.join("resolved_config.json"), &resolved)?;
    let (summary, mut violations) = match resolved.kind {
        ExperimentKind::ToyConvergence => run_toy_convergence(&resolved, &root)?,
        ExperimentKind::BetaSweep => run_beta_sweep(&resolved, &root)?,
        ExperimentKind::Gridworld => run_gridworld(&resolved, &root)?,
        ExperimentKind::Contraction => run_contraction(&resolved, &root)?,
        ExperimentKind::OperatorIterate => run_operator_iterate(&resolved, &root)?,
        ExperimentKind::OracleOnly => run_oracle_only(&resolved, &root)?,
    };
    if !all_finite(&summary) {
        violations.push("summary contains non-finite values".into());
    }
    let summary = json!({
        "kind": resolved.kind,
        "seeds": resolved.seeds,
        "results": summary,
        "violations": violations,
    });
    write_json(&root.join("summary.json"), &summary)?;
    let timestamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    write_json(
        &root.join("run_metadata.json"),
        &json!({
            "finished_unix_seconds": timestamp,
            "elapsed_seconds": started.elapsed().as_secs_f64(),
            "version": env!("CARGO_PKG_VERSION"),
            "threads": rayon::current_num_threads(),
        }),
    )?;
    Ok(RunReport {
        output_dir: root,
        summary,
        violations,
    })
}

fn all_finite(value: &Value) -> bool {
    match value {
        Value::Number(n) => n.as_f64().is_none_or(f64::is_finite),
        Value::Array(items) => items.iter().all(all_finite),
        Value::Object(map) => map.values().all(all_finite),
        _ => true,
    }
}

fn eqr_for_seed(config: &ExperimentConfig, seed: u64) -> EqrConfig {
    EqrConfig { seed, ..config.eqr }
}

fn oracle_for(prepared: &Prepared, config: &ExperimentConfig, seed: u64) -> Result<ValueSampleSet> {
    sample_value_distribution(
        prepared.posterior.as_ref(),
        &prepared.base,
        &prepared.policy,
        config.oracle.num_samples,
        seed,
    )
}

#[derive(Serialize)]
struct StepDistance {
    step: usize,
    w1: f64,
}

#[derive(Serialize)]
struct AggregateDistance {
    step: usize,
    mean_w1: f64,
    std_error: Option<f64>,
}

struct ToyRun {
    final_w1: f64,
    value_range: f64,
    w1_trace: Vec<(usize, f64)>,
}

fn toy_seed(config: &ExperimentConfig, seed: u64, beta: Option<f64>, dir: Option<&Path>) -> Result<ToyRun> {
    let prepared = config.prepare_with_beta(seed, beta)?;
    let s = prepared.report_state;
    let samples = oracle_for(&prepared, config, seed)?;
    let reference = oracle_quantiles(&samples, config.eqr.m)?;
    let (_, trace) = run_eqr(
        prepared.posterior.as_ref(),
        &prepared.base,
        &prepared.policy,
        &eqr_for_seed(config, seed),
        Some(&reference),
    )?;
    let w1_trace = trace.w1_at(s, &reference);
    if let Some(dir) = dir {
        write_atomic(&dir.join("trace.csv"), |w| trace.write_csv(w))?;
        write_atomic(&dir.join("oracle_quantiles.csv"), |w| reference.write_csv(w))?;
        let rows: Vec<StepDistance> = w1_trace.iter().map(|&(step, w1)| StepDistance { step, w1 }).collect();
        write_rows(&dir.join("w1.csv"), &rows)?;
    }
    Ok(ToyRun {
        final_w1: w1_trace.last().map_or(f64::NAN, |p| p.1),
        value_range: samples.max(s) - samples.min(s),
        w1_trace,
    })
}

fn run_toy_convergence(config: &ExperimentConfig, root: &Path) -> Result<(Value, Vec<String>)> {
    let runs = config
        .seeds
        .par_iter()
        .map(|&seed| toy_seed(config, seed, None, Some(&seed_dir(root, seed))))
        .collect::<Result<Vec<_>>>()?;
    let steps: Vec<usize> = runs[0].w1_trace.iter().map(|p| p.0).collect();
    let aggregate: Vec<AggregateDistance> = steps
        .iter()
        .enumerate()
        .map(|(i, &step)| {
            let stat = SeedStat::of(&runs.iter().map(|r| r.w1_trace[i].1).collect::<Vec<_>>());
            AggregateDistance {
                step,
                mean_w1: stat.mean,
                std_error: stat.std_error,
            }
        })
        .collect();
    write_rows(&root.join("w1_trace.csv"), &aggregate)?;
    let finals: Vec<f64> = runs.iter().map(|r| r.final_w1).collect();
    let ranges: Vec<f64> = runs.iter().map(|r| r.value_range).collect();
    Ok((
        json!({
            "report_state": config.report_state_or_default(),
            "final_w1": SeedStat::of(&finals),
            "value_range": SeedStat::of(&ranges),
        }),
        Vec::new(),
    ))
}

#[derive(Serialize)]
struct SweepRow {
    beta: f64,
    final_w1: f64,
    value_range: f64,
}

#[derive(Serialize)]
struct SweepAggregate {
    beta: f64,
    mean_w1: f64,
    std_error: Option<f64>,
}

fn run_beta_sweep(config: &ExperimentConfig, root: &Path) -> Result<(Value, Vec<String>)> {
    let per_seed = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let rows = config
                .sweep
                .betas
                .iter()
                .map(|&beta| {
                    let run = toy_seed(config, seed, Some(beta), None)?;
                    Ok(SweepRow {
                        beta,
                        final_w1: run.final_w1,
                        value_range: run.value_range,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            write_rows(&seed_dir(root, seed).join("beta_sweep.csv"), &rows)?;
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    let aggregate: Vec<SweepAggregate> = config
        .sweep
        .betas
        .iter()
        .enumerate()
        .map(|(i, &beta)| {
            let stat = SeedStat::of(&per_seed.iter().map(|rows| rows[i].final_w1).collect::<Vec<_>>());
            SweepAggregate {
                beta,
                mean_w1: stat.mean,
                std_error: stat.std_error,
            }
        })
        .collect();
    write_rows(&root.join("beta_sweep.csv"), &aggregate)?;
    Ok((json!({ "final_w1_by_beta": aggregate_json(&aggregate) }), Vec::new()))
}

fn aggregate_json(rows: &[SweepAggregate]) -> Value {
    rows.iter()
        .map(|r| json!({ "beta": r.beta, "mean_w1": r.mean_w1, "std_error": r.std_error }))
        .collect()
}

#[derive(Serialize)]
struct HistogramRow {
    snapshot: usize,
    bin_left: f64,
    bin_right: f64,
    count: u64,
    density: f64,
}

#[derive(Serialize)]
struct QuantileRow {
    snapshot: usize,
    tau_hat: f64,
    eqr_quantile: f64,
    oracle_quantile: f64,
}

#[derive(Serialize, Clone, Copy)]
struct SnapshotRow {
    snapshot: usize,
    oracle_mean: f64,
    oracle_spread: f64,
    w1: f64,
}

/// Per-snapshot oracle and EQR quantiles of the start-state value.
pub struct GridworldSnapshot {
    pub episodes: usize,
    pub oracle: QuantileValueFunction,
    pub eqr: QuantileValueFunction,
    pub samples: ValueSampleSet,
}

/// PSRL training, data collection with the learned policy, then for each
/// snapshot the posterior oracle and an EQR run against it.
pub fn gridworld_pipeline(config: &ExperimentConfig, seed: u64, dir: Option<&Path>) -> Result<Vec<GridworldSnapshot>> {
    let EnvironmentSpec::Gridworld(grid) = &config.environment else {
        return Err(Error::Config("gridworld experiment needs a gridworld environment".into()));
    };
    let world = build_gridworld(grid)?;
    let prior = match config.effective_posterior() {
        PosteriorSpec::Dirichlet { alpha0, support } => BeliefMdp {
            transitions: match support {
                TransitionSupport::Full => DirichletPosterior::full(world.mdp.num_states(), 4, alpha0)?,
                TransitionSupport::TrueSupport => DirichletPosterior::on_support_of(&world.mdp, alpha0)?,
                TransitionSupport::Neighbourhood => world.neighbourhood_prior(alpha0)?,
            },
            rewards: RewardPosterior::known(&world.mdp),
        },
        _ => return Err(Error::Config("gridworld experiment needs a dirichlet posterior".into())),
    };
    let settings = &config.gridworld;
    let psrl = psrl_train(&prior, &world.mdp, world.start_state, &PsrlConfig { seed, ..settings.psrl })?;
    let last = settings.snapshots.iter().copied().max().unwrap_or(1);
    let history = collect_episodes(&world.mdp, &psrl.policy, world.start_state, last, settings.episode_horizon, seed);
    if let Some(dir) = dir {
        write_atomic(&dir.join("psrl_log.csv"), |w| psrl.write_log_csv(w))?;
        write_atomic(&dir.join("policy.json"), |w| psrl.write_policy_json(w))?;
    }
    let mut snapshots = Vec::new();
    for &episodes in &settings.snapshots {
        let belief = prior.update(&accumulate(&history, episodes)?)?;
        let samples = sample_value_distribution(&belief, &world.mdp, &psrl.policy, config.oracle.num_samples, seed)?;
        let oracle = oracle_quantiles(&samples, config.eqr.m)?;
        let (eqr, _) = run_eqr(&belief, &world.mdp, &psrl.policy, &eqr_for_seed(config, seed), None)?;
        snapshots.push(GridworldSnapshot {
            episodes,
            oracle,
            eqr,
            samples,
        });
    }
    Ok(snapshots)
}

fn run_gridworld(config: &ExperimentConfig, root: &Path) -> Result<(Value, Vec<String>)> {
    let s = config.report_state_or_default();
    let per_seed = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let dir = seed_dir(root, seed);
            let snapshots = gridworld_pipeline(config, seed, Some(&dir))?;
            let mut hist_rows = Vec::new();
            let mut quantile_rows = Vec::new();
            let mut rows = Vec::new();
            for snap in &snapshots {
                let h = crate::oracle::Histogram::of(s, snap.samples.samples(s), config.oracle.histogram_bins);
                for b in 0..h.counts.len() {
                    hist_rows.push(HistogramRow {
                        snapshot: snap.episodes,
                        bin_left: h.edges[b],
                        bin_right: h.edges[b + 1],
                        count: h.counts[b],
                        density: h.density[b],
                    });
                }
                let (eqr, oracle) = (snap.eqr.state(s), snap.oracle.state(s));
                for (i, tau) in tau_hats(oracle.len()).into_iter().enumerate() {
                    quantile_rows.push(QuantileRow {
                        snapshot: snap.episodes,
                        tau_hat: tau,
                        eqr_quantile: eqr[i],
                        oracle_quantile: oracle[i],
                    });
                }
                rows.push(SnapshotRow {
                    snapshot: snap.episodes,
                    oracle_mean: snap.samples.mean(s),
                    oracle_spread: oracle[oracle.len() - 1] - oracle[0],
                    w1: w1_sorted_uniform(eqr, oracle),
                });
            }
            write_rows(&dir.join("oracle_histogram.csv"), &hist_rows)?;
            write_rows(&dir.join("eqr_quantiles.csv"), &quantile_rows)?;
            write_rows(&dir.join("snapshots.csv"), &rows)?;
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    let by_snapshot: Vec<Value> = config
        .gridworld
        .snapshots
        .iter()
        .enumerate()
        .map(|(i, &episodes)| {
            let pick = |f: fn(&SnapshotRow) -> f64| SeedStat::of(&per_seed.iter().map(|r| f(&r[i])).collect::<Vec<_>>());
            json!({
                "snapshot": episodes,
                "oracle_spread": pick(|r| r.oracle_spread),
                "w1": pick(|r| r.w1),
            })
        })
        .collect();
    Ok((json!({ "report_state": s, "snapshots": by_snapshot }), Vec::new()))
}

#[derive(Serialize)]
struct ContractionRow {
    trial: usize,
    state_space_size: usize,
    gamma: f64,
    w_pre: f64,
    w_post: f64,
    ratio: f64,
}

fn run_contraction(config: &ExperimentConfig, root: &Path) -> Result<(Value, Vec<String>)> {
    let EnvironmentSpec::RandomAcyclic(env) = &config.environment else {
        return Err(Error::Config("contraction experiment needs a random_acyclic environment".into()));
    };
    let settings = &config.contraction;
    let per_seed = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let mut worst: Vec<f64> = vec![0.0; settings.p_orders.len()];
            let mut tables: Vec<Vec<ContractionRow>> = settings.p_orders.iter().map(|_| Vec::new()).collect();
            for (gi, &gamma) in settings.discounts.iter().enumerate() {
                for instance in 0..settings.instances {
                    let path = [INSTANCE_STREAM, gi as u64, instance as u64];
                    let instance_seed = derive_seed(derive_seed(env.seed, &[seed]), &path);
                    let base = random_acyclic_mdp(
                        env.num_layers,
                        env.states_per_layer,
                        env.num_actions,
                        (env.reward_range[0], env.reward_range[1]),
                        gamma,
                        instance_seed,
                    )?;
                    let posterior = dirichlet_or_point(config.effective_posterior(), &base, None)?;
                    let ensemble = ModelEnsemble::sample(
                        posterior.as_ref(),
                        &base,
                        settings.ensemble_size,
                        derive_seed(instance_seed, &[ENSEMBLE_STREAM]),
                    )?;
                    let policy = Policy::uniform(base.num_states(), base.num_actions());
                    for (pi, &p) in settings.p_orders.iter().enumerate() {
                        let report =
                            certify_contraction(&ensemble, &policy, p, settings.trials_per_instance, instance_seed)?;
                        worst[pi] = worst[pi].max(report.max_ratio());
                        let table = &mut tables[pi];
                        for t in report.trials {
                            table.push(ContractionRow {
                                trial: table.len(),
                                state_space_size: t.state_space_size,
                                gamma: t.gamma,
                                w_pre: t.w_pre,
                                w_post: t.w_post,
                                ratio: t.ratio,
                            });
                        }
                    }
                }
            }
            for (pi, p) in settings.p_orders.iter().enumerate() {
                write_rows(&seed_dir(root, seed).join(format!("contraction_p{p}.csv")), &tables[pi])?;
            }
            Ok(worst)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut violations = Vec::new();
    let mut by_order = Vec::new();
    for (pi, &p) in settings.p_orders.iter().enumerate() {
        let max_ratio = per_seed.iter().map(|w| w[pi]).fold(0.0, f64::max);
        if max_ratio > 1.0 + CONTRACTION_SLACK {
            violations.push(format!("contraction ratio {max_ratio} exceeds 1 for p = {p}"));
        }
        by_order.push(json!({ "p_order": p, "max_ratio": max_ratio }));
    }
    let trials = settings.discounts.len() * settings.instances * settings.trials_per_instance;
    Ok((json!({ "trials_per_seed": trials, "by_order": by_order }), violations))
}

#[derive(Serialize)]
struct DeltaRow {
    iteration: usize,
    delta: f64,
}

fn run_operator_iterate(config: &ExperimentConfig, root: &Path) -> Result<(Value, Vec<String>)> {
    let op = config.operator;
    let per_seed = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let prepared = config.prepare(seed)?;
            let ensemble = ModelEnsemble::sample(
                prepared.posterior.as_ref(),
                &prepared.base,
                op.ensemble_size,
                derive_seed(seed, &[ENSEMBLE_STREAM]),
            )?;
            let mu0 = QuantileValueFunction::zeros(prepared.base.num_states(), op.m);
            let result = iterate_projected(&mu0, &ensemble, &prepared.policy, op.tolerance, op.max_iterations)?;
            let dir = seed_dir(root, seed);
            let rows: Vec<DeltaRow> = result
                .deltas
                .iter()
                .enumerate()
                .map(|(i, &delta)| DeltaRow { iteration: i + 1, delta })
                .collect();
            write_rows(&dir.join("deltas.csv"), &rows)?;
            write_atomic(&dir.join("quantiles.csv"), |w| result.value.write_csv(w))?;
            let mean_values = policy_value(&ensemble.mean_mdp()?, &prepared.policy)?;
            let s = prepared.report_state;
            Ok((
                seed,
                result.iterations(),
                result.converged,
                result.value.distribution(s).mean() - mean_values[s],
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let violations = per_seed
        .iter()
        .filter(|r| !r.2)
        .map(|r| format!("seed {} did not converge in {} iterations", r.0, op.max_iterations))
        .collect();
    let iterations: Vec<f64> = per_seed.iter().map(|r| r.1 as f64).collect();
    let mean_gaps: Vec<f64> = per_seed.iter().map(|r| r.3).collect();
    Ok((
        json!({
            "iterations": SeedStat::of(&iterations),
            "report_state_mean_minus_mean_model_value": SeedStat::of(&mean_gaps),
        }),
        violations,
    ))
}

#[derive(Serialize)]
struct MeanGapRow {
    state: usize,
    sample_mean: f64,
    mean_model_value: f64,
    gap: f64,
    std_error: f64,
    flagged: bool,
}

fn run_oracle_only(config: &ExperimentConfig, root: &Path) -> Result<(Value, Vec<String>)> {
    let per_seed = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let prepared = config.prepare(seed)?;
            let samples = oracle_for(&prepared, config, seed)?;
            let dir = seed_dir(root, seed);
            write_atomic(&dir.join("samples.csv"), |w| samples.write_csv(w))?;
            write_atomic(&dir.join("histogram.json"), |w| {
                samples.write_histogram_json(&mut *w, config.oracle.histogram_bins)?;
                writeln!(w)?;
                Ok(())
            })?;
            write_atomic(&dir.join("quantiles.csv"), |w| {
                oracle_quantiles(&samples, config.eqr.m)?.write_csv(w)
            })?;
            let mean_values = policy_value(&prepared.posterior.mean_mdp(&prepared.base)?, &prepared.policy)?;
            let report = mean_identity_report(&samples, &mean_values);
            let rows: Vec<MeanGapRow> = report
                .states
                .iter()
                .map(|g| MeanGapRow {
                    state: g.state,
                    sample_mean: g.sample_mean,
                    mean_model_value: g.mean_model_value,
                    gap: g.gap,
                    std_error: g.std_error,
                    flagged: g.flagged,
                })
                .collect();
            write_rows(&dir.join("mean_identity.csv"), &rows)?;
            let s = prepared.report_state;
            Ok((samples.mean(s), samples.std(s), report.flagged_states().len()))
        })
        .collect::<Result<Vec<_>>>()?;
    let means: Vec<f64> = per_seed.iter().map(|r| r.0).collect();
    let stds: Vec<f64> = per_seed.iter().map(|r| r.1).collect();
    let flagged: usize = per_seed.iter().map(|r| r.2).sum();
    Ok((
        json!({
            "report_state": config.report_state_or_default(),
            "mean": SeedStat::of(&means),
            "std": SeedStat::of(&stds),
            "mean_identity_flags": flagged,
        }),
        Vec::new(),
    ))
}
