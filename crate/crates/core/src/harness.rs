//! Episodic simulation loop, regret accounting and result export.
//!
//! Every episode the agent plans, one trajectory is sampled from the true
//! model, and the regret term `V*_1(x_1) - V^{pi_t}_1(x_1)` is computed exactly
//! by policy evaluation.

use std::fmt::{self, Write as _};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::divergence::{divergence_unchecked, DivergenceKind};
use crate::error::{Error, Result};
use crate::linear::{
    generate_onehot_factored, generate_random_factored, FactoredLinearMdp, LinearAgent, LinearAgentConfig,
    LinearBonus,
};
use crate::mdp::{
    evaluate_policy, occupancy_of_policy, sample_episode, solve_bellman_optimality, PolicyTable, TabularMdp,
    Transition,
};
use crate::tabular::{make_tabular_agent, BonusRoute, ReferenceModel, TabularAgent, WidthSchedule};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "OPTIMIST_THREADS";

pub const CSV_HEADER: [&str; 9] =
    ["episode", "seed", "alg", "vstar", "vpi", "return", "cum_regret", "cum_bonus", "feasible"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AlgorithmId {
    #[serde(rename = "tv")]
    Tv,
    #[serde(rename = "bernstein")]
    Bernstein,
    #[serde(rename = "kl")]
    Kl,
    #[serde(rename = "kl-exact")]
    KlExact,
    #[serde(rename = "rkl")]
    Rkl,
    #[serde(rename = "chi2")]
    Chi2,
    #[serde(rename = "lsvi")]
    Lsvi,
    #[serde(rename = "global")]
    Global,
    #[serde(rename = "oracle")]
    Oracle,
    #[serde(rename = "uniform")]
    Uniform,
}

impl AlgorithmId {
    pub const ALL: [AlgorithmId; 10] = [
        Self::Tv,
        Self::Bernstein,
        Self::Kl,
        Self::KlExact,
        Self::Rkl,
        Self::Chi2,
        Self::Lsvi,
        Self::Global,
        Self::Oracle,
        Self::Uniform,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Tv => "tv",
            Self::Bernstein => "bernstein",
            Self::Kl => "kl",
            Self::KlExact => "kl-exact",
            Self::Rkl => "rkl",
            Self::Chi2 => "chi2",
            Self::Lsvi => "lsvi",
            Self::Global => "global",
            Self::Oracle => "oracle",
            Self::Uniform => "uniform",
        }
    }

    pub fn divergence(self) -> Option<DivergenceKind> {
        match self {
            Self::Tv => Some(DivergenceKind::Tv),
            Self::Bernstein => Some(DivergenceKind::VarWeightedLinf),
            Self::Kl | Self::KlExact => Some(DivergenceKind::ForwardKl),
            Self::Rkl => Some(DivergenceKind::ReverseKl),
            Self::Chi2 => Some(DivergenceKind::Chi2),
            _ => None,
        }
    }

    pub fn is_linear(self) -> bool {
        matches!(self, Self::Lsvi | Self::Global)
    }

    /// Bonus multiplier used when the configuration does not set one, tuned
    /// on the 6-state chain with H = 20 and K = 5000. Tabular agents scale
    /// their widths and `2SH/N` terms, linear agents their `alpha` or `eps`.
    pub fn default_alpha_scale(self) -> f64 {
        match self {
            Self::Tv => 0.3,
            Self::Bernstein => 0.003,
            Self::Kl | Self::KlExact => 0.01,
            Self::Rkl => 0.002,
            Self::Chi2 => 0.003,
            Self::Lsvi => 0.007,
            Self::Global => 0.01,
            Self::Oracle | Self::Uniform => 1.0,
        }
    }
}

impl fmt::Display for AlgorithmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AlgorithmId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::UnknownId { kind: "algorithm", id: s.to_string() })
    }
}

/// Where the true MDP comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum EnvironmentSpec {
    Chain { states: usize, horizon: usize },
    Random { states: usize, actions: usize, horizon: usize, seed: u64 },
    Json { path: PathBuf },
}

impl EnvironmentSpec {
    /// Parses a built-in id such as `chain` or `random` with the given sizes.
    pub fn builtin(name: &str, states: usize, actions: usize, horizon: usize, seed: u64) -> Result<Self> {
        match name {
            "chain" => Ok(Self::Chain { states, horizon }),
            "random" => Ok(Self::Random { states, actions, horizon, seed }),
            other => Err(Error::UnknownId { kind: "environment", id: other.to_string() }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    /// Identity features on the environment's states.
    #[default]
    Onehot,
    /// A random factored MDP with `dim` features replaces the environment's
    /// dynamics, keeping its S, A and H.
    Random,
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "onehot" => Ok(Self::Onehot),
            "random" => Ok(Self::Random),
            other => Err(Error::UnknownId { kind: "feature map", id: other.to_string() }),
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_lambda() -> f64 {
    1.0
}

fn default_global_samples() -> usize {
    32
}

fn default_reverse_kl_constant() -> f64 {
    18.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub environment: EnvironmentSpec,
    #[serde(rename = "alg")]
    pub algorithm: AlgorithmId,
    /// Number of episodes `K`.
    pub episodes: u64,
    pub delta: f64,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// `None` selects [`AlgorithmId::default_alpha_scale`].
    #[serde(default)]
    pub alpha_scale: Option<f64>,
    #[serde(default)]
    pub features: FeatureKind,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default = "default_true")]
    pub monitor_feasibility: bool,
    #[serde(default = "default_true")]
    pub log_bonus: bool,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_global_samples")]
    pub global_samples: usize,
    #[serde(default = "default_reverse_kl_constant")]
    pub reverse_kl_constant: f64,
}

impl ExperimentConfig {
    pub fn new(environment: EnvironmentSpec, algorithm: AlgorithmId, episodes: u64, delta: f64, seeds: Vec<u64>) -> Self {
        Self {
            environment,
            algorithm,
            episodes,
            delta,
            seeds,
            output: None,
            alpha_scale: None,
            features: FeatureKind::Onehot,
            dim: None,
            monitor_feasibility: true,
            log_bonus: true,
            lambda: 1.0,
            global_samples: default_global_samples(),
            reverse_kl_constant: 18.0,
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::Config("episodes K must be at least 1".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("delta = {} must lie in (0, 1)", self.delta)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if let Some(s) = self.alpha_scale {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("alpha scale {s} must be finite and nonnegative")));
            }
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda = {} must be positive", self.lambda)));
        }
        if self.global_samples == 0 {
            return Err(Error::Config("global bonus search needs at least one sample".into()));
        }
        if self.dim == Some(0) {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        Ok(())
    }

    pub fn alpha_scale(&self) -> f64 {
        self.alpha_scale.unwrap_or_else(|| self.algorithm.default_alpha_scale())
    }

    /// Same experiment with another algorithm; the bonus scale falls back to
    /// that algorithm's default.
    pub fn with_algorithm(&self, algorithm: AlgorithmId) -> Self {
        Self { algorithm, alpha_scale: None, ..self.clone() }
    }
}

/// True dynamics in tabular and factored form.
#[derive(Debug, Clone)]
pub struct Environment {
    pub tabular: TabularMdp,
    pub linear: FactoredLinearMdp,
}

pub fn build_environment(spec: &EnvironmentSpec, features: FeatureKind, dim: Option<usize>) -> Result<Environment> {
    let base = match spec {
        EnvironmentSpec::Chain { states, horizon } => TabularMdp::chain(*states, *horizon)?,
        EnvironmentSpec::Random { states, actions, horizon, seed } => {
            TabularMdp::random(*states, *actions, *horizon, *seed)?
        }
        EnvironmentSpec::Json { path } => TabularMdp::from_json_file(path)?,
    };
    match features {
        FeatureKind::Onehot => {
            if let Some(d) = dim.filter(|&d| d != base.states()) {
                return Err(Error::Config(format!("one-hot features have d = S = {}, not {d}", base.states())));
            }
            let linear = generate_onehot_factored(&base);
            Ok(Environment { tabular: base, linear })
        }
        FeatureKind::Random => {
            let seed = match spec {
                EnvironmentSpec::Random { seed, .. } => *seed,
                _ => 0,
            };
            let d = dim.unwrap_or(base.states());
            let linear = generate_random_factored(base.states(), base.actions(), base.horizon(), d, seed)?;
            let tabular = linear.to_tabular()?;
            Ok(Environment { tabular, linear })
        }
    }
}

/// What an agent commits to for one episode.
#[derive(Debug, Clone)]
pub struct AgentPlan {
    pub policy: PolicyTable,
    /// Optimistic value `V_1(x_1)`, when the agent computes one.
    pub optimistic_value: Option<f64>,
    /// Bonus `CB_h(x, a)`, shape (H, S, A).
    pub bonus: Option<Array3<f64>>,
    /// Whether the true model lies in the agent's confidence set.
    pub feasible: Option<bool>,
}

pub trait Agent {
    /// `truth` is used only to audit the plan, never to build it.
    fn plan(&mut self, truth: &TabularMdp) -> Result<AgentPlan>;
    fn observe(&mut self, trajectory: &[Transition]) -> Result<()>;
}

/// Whether `D(P_h(x,a,.), ref) <= eps_h(x,a)` for every `(h, x, a)`, with the
/// reference the divergence is centred on.
pub fn monitor_feasibility(truth: &TabularMdp, reference: &ReferenceModel, kind: DivergenceKind, widths: &Array3<f64>) -> bool {
    let (big_h, s, n_a) = reference.dims();
    (0..big_h).all(|h| {
        (0..s).all(|x| {
            (0..n_a).all(|a| {
                let p = truth.row(h, x, a);
                let centre = reference.centre(kind, h, x, a);
                let d = divergence_unchecked(
                    kind,
                    p.as_slice().expect("contiguous transition row"),
                    centre.as_slice().expect("contiguous reference row"),
                );
                d <= widths[[h, x, a]] + 1e-12
            })
        })
    })
}

/// Optimistic tabular agent with feasibility monitoring and the pigeonhole
/// check on visited counts.
#[derive(Debug, Clone)]
pub struct TabularLearner {
    agent: TabularAgent,
    monitor: bool,
    total_rounds_seen: u64,
    inverse_sqrt_sum: f64,
    last_counts: Option<Array3<f64>>,
}

impl TabularLearner {
    pub fn new(agent: TabularAgent, monitor: bool) -> Self {
        Self { agent, monitor, total_rounds_seen: 0, inverse_sqrt_sum: 0.0, last_counts: None }
    }

    pub fn agent(&self) -> &TabularAgent {
        &self.agent
    }

    /// `sum_t sum_h 1 / sqrt(N_h(x_h, a_h))` over the visited pairs so far.
    pub fn inverse_sqrt_sum(&self) -> f64 {
        self.inverse_sqrt_sum
    }
}

impl Agent for TabularLearner {
    fn plan(&mut self, truth: &TabularMdp) -> Result<AgentPlan> {
        let plan = self.agent.plan()?;
        let big_h = truth.horizon();
        for h in 0..=big_h {
            let cap = (big_h - h) as f64;
            if let Some(v) = plan.table.v.row(h).iter().find(|v| !(0.0..=cap).contains(*v)) {
                return Err(Error::Invariant(format!("optimistic value {v} at stage {h} outside [0, {cap}]")));
            }
        }
        let feasible =
            self.monitor.then(|| monitor_feasibility(truth, &plan.reference, self.agent.kind(), &plan.widths));
        let (_, s, n_a) = plan.reference.dims();
        self.last_counts = Some(Array3::from_shape_fn((big_h, s, n_a), |(h, x, a)| plan.reference.count(h, x, a)));
        Ok(AgentPlan {
            policy: plan.table.policy(),
            optimistic_value: Some(plan.table.v[[0, truth.initial_state()]]),
            bonus: Some(plan.table.cb),
            feasible,
        })
    }

    fn observe(&mut self, trajectory: &[Transition]) -> Result<()> {
        if let Some(n) = &self.last_counts {
            for t in trajectory {
                if let Some(c) = n.get([t.stage, t.state, t.action]) {
                    self.inverse_sqrt_sum += 1.0 / c.sqrt();
                }
            }
        }
        self.agent.observe(trajectory)?;
        self.total_rounds_seen += trajectory.len() as u64;
        let (big_h, s, n_a) = self.agent.counts().dims();
        let ceiling = 2.0 * ((big_h * s * n_a) as f64 * self.total_rounds_seen as f64).sqrt();
        if self.inverse_sqrt_sum > ceiling * (1.0 + 1e-12) {
            return Err(Error::Invariant(format!(
                "pigeonhole sum {} exceeds 2 sqrt(HSAT) = {ceiling}",
                self.inverse_sqrt_sum
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LinearLearner {
    agent: LinearAgent,
    monitor: bool,
}

impl LinearLearner {
    pub fn new(agent: LinearAgent, monitor: bool) -> Self {
        Self { agent, monitor }
    }

    pub fn agent(&self) -> &LinearAgent {
        &self.agent
    }
}

impl Agent for LinearLearner {
    fn plan(&mut self, truth: &TabularMdp) -> Result<AgentPlan> {
        let ep = self.agent.plan()?;
        let feasible = self.monitor.then(|| self.agent.feasible(&ep.plan));
        Ok(AgentPlan {
            policy: ep.plan.policy(),
            optimistic_value: Some(ep.plan.v[[0, truth.initial_state()]]),
            bonus: Some(ep.plan.cb),
            feasible,
        })
    }

    fn observe(&mut self, trajectory: &[Transition]) -> Result<()> {
        self.agent.observe(trajectory)
    }
}

/// Plays a fixed policy (the optimal one, or uniformly random actions).
#[derive(Debug, Clone)]
pub struct FixedPolicyAgent {
    policy: PolicyTable,
}

impl FixedPolicyAgent {
    pub fn new(policy: PolicyTable) -> Self {
        Self { policy }
    }
}

impl Agent for FixedPolicyAgent {
    fn plan(&mut self, _truth: &TabularMdp) -> Result<AgentPlan> {
        Ok(AgentPlan { policy: self.policy.clone(), optimistic_value: None, bonus: None, feasible: None })
    }

    fn observe(&mut self, _trajectory: &[Transition]) -> Result<()> {
        Ok(())
    }
}

/// Builds the agent selected by `config` for one seed.
pub fn make_agent(config: &ExperimentConfig, env: &Environment, seed: u64) -> Result<Box<dyn Agent + Send>> {
    let mdp = &env.tabular;
    let total_rounds = config.episodes * mdp.horizon() as u64;
    let agent: Box<dyn Agent + Send> = match config.algorithm {
        AlgorithmId::Oracle => Box::new(FixedPolicyAgent::new(solve_bellman_optimality(mdp).1)),
        AlgorithmId::Uniform => {
            Box::new(FixedPolicyAgent::new(PolicyTable::uniform(mdp.horizon(), mdp.states(), mdp.actions())))
        }
        AlgorithmId::Lsvi | AlgorithmId::Global => {
            let bonus = match config.algorithm {
                AlgorithmId::Lsvi => LinearBonus::Local,
                _ => LinearBonus::Global { n_samples: config.global_samples },
            };
            let cfg = LinearAgentConfig {
                bonus,
                lambda: config.lambda,
                delta: config.delta,
                episodes: config.episodes,
                alpha_scale: config.alpha_scale(),
                seed: seed ^ 0x9e37_79b9_7f4a_7c15,
            };
            Box::new(LinearLearner::new(LinearAgent::new(env.linear.clone(), cfg)?, config.monitor_feasibility))
        }
        alg => {
            let kind = alg.divergence().expect("tabular algorithm");
            let route = if alg == AlgorithmId::KlExact { BonusRoute::ExactKl } else { BonusRoute::Inflated };
            let schedule = WidthSchedule {
                delta: config.delta,
                total_rounds,
                scale: config.alpha_scale(),
                reverse_kl_constant: config.reverse_kl_constant,
            };
            let agent = make_tabular_agent(kind, mdp.reward().clone(), mdp.horizon(), schedule, route);
            Box::new(TabularLearner::new(agent, config.monitor_feasibility))
        }
    };
    Ok(agent)
}

/// One row of the regret log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    /// 1-based episode index.
    pub episode: u64,
    pub vstar: f64,
    pub vpi: f64,
    /// Realised return of the sampled trajectory.
    #[serde(rename = "return")]
    pub realized_return: f64,
    pub cum_regret: f64,
    /// Sum of the bonuses `CB_h(x_h, a_h)` along the sampled trajectories.
    pub cum_bonus: f64,
    pub feasible: Option<bool>,
    pub optimistic_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegretLog {
    pub seed: u64,
    pub algorithm: AlgorithmId,
    pub horizon: usize,
    /// `T = K H`.
    pub total_rounds: u64,
    pub delta: f64,
    pub records: Vec<EpisodeRecord>,
    /// Feasible episodes whose optimistic value fell below `V*_1(x_1)`.
    pub optimism_violations: u64,
    /// Episodes of an all-feasible prefix on which
    /// `cum_regret > 2 cum_bonus + 4H sqrt(2t log(1/delta))`.
    pub regret_bound_violations: u64,
}

impl RegretLog {
    pub fn final_regret(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.cum_regret)
    }

    /// Cumulative regret after `episode` episodes (1-based).
    pub fn regret_at(&self, episode: u64) -> Option<f64> {
        self.records.get(episode.checked_sub(1)? as usize).map(|r| r.cum_regret)
    }

    pub fn infeasible_episodes(&self) -> usize {
        self.records.iter().filter(|r| r.feasible == Some(false)).count()
    }
}

/// Runs one seed of `config` against `env`.
pub fn run_single(config: &ExperimentConfig, env: &Environment, seed: u64) -> Result<RegretLog> {
    config.validate()?;
    let mdp = &env.tabular;
    let x1 = mdp.initial_state();
    let big_h = mdp.horizon();
    let (v_star, _) = solve_bellman_optimality(mdp);
    let vstar = v_star[[0, x1]];
    let mut agent = make_agent(config, env, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(config.episodes as usize);
    let (mut cum_regret, mut cum_bonus) = (0.0, 0.0);
    let mut optimism_violations = 0;
    let mut regret_bound_violations = 0;
    let mut all_feasible = true;
    let log_term = (1.0 / config.delta).ln();
    for episode in 1..=config.episodes {
        let plan = agent.plan(mdp)?;
        let occupancy = occupancy_of_policy(mdp, &plan.policy)?;
        let norm_err = occupancy.normalization_error();
        if norm_err > 1e-12 {
            return Err(Error::Invariant(format!("occupancy stage mass off by {norm_err}")));
        }
        let vpi = evaluate_policy(mdp, &plan.policy)?[[0, x1]];
        let gap = vstar - vpi;
        if gap < -1e-9 {
            return Err(Error::Invariant(format!("policy value {vpi} exceeds the optimum {vstar}")));
        }
        let trajectory = sample_episode(mdp, &plan.policy, &mut rng)?;
        if config.log_bonus {
            if let Some(b) = &plan.bonus {
                cum_bonus += trajectory.iter().map(|t| b[[t.stage, t.state, t.action]]).sum::<f64>();
            }
        }
        cum_regret += gap;
        if plan.feasible == Some(true) {
            if let Some(v) = plan.optimistic_value {
                if v < vstar - 1e-9 {
                    optimism_violations += 1;
                }
            }
        }
        all_feasible &= plan.feasible != Some(false);
        if all_feasible && plan.feasible.is_some() {
            let t = (episode * big_h as u64) as f64;
            if cum_regret > 2.0 * cum_bonus + 4.0 * big_h as f64 * (2.0 * t * log_term).sqrt() {
                regret_bound_violations += 1;
            }
        }
        records.push(EpisodeRecord {
            episode,
            vstar,
            vpi,
            realized_return: trajectory.iter().map(|t| t.reward).sum(),
            cum_regret,
            cum_bonus,
            feasible: plan.feasible,
            optimistic_value: plan.optimistic_value,
        });
        agent.observe(&trajectory)?;
    }
    Ok(RegretLog {
        seed,
        algorithm: config.algorithm,
        horizon: big_h,
        total_rounds: config.episodes * big_h as u64,
        delta: config.delta,
        records,
        optimism_violations,
        regret_bound_violations,
    })
}

/// Thread pool honouring `OPTIMIST_THREADS`.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize =
            v.trim().parse().map_err(|_| Error::Config(format!("{THREADS_ENV} = `{v}` is not a thread count")))?;
        if n > 0 {
            builder = builder.num_threads(n);
        }
    }
    builder.build().map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))
}

/// Runs every seed of `config`; logs come back in ascending seed order.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RegretLog>> {
    run_sweep(config, &[config.algorithm])
}

/// Runs each algorithm on every seed of `config`, in parallel across
/// (algorithm, seed) jobs. Algorithms other than the configured one use
/// their default bonus scale.
pub fn run_sweep(config: &ExperimentConfig, algorithms: &[AlgorithmId]) -> Result<Vec<RegretLog>> {
    config.validate()?;
    let env = build_environment(&config.environment, config.features, config.dim)?;
    let mut seeds = config.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();
    let jobs: Vec<(ExperimentConfig, u64)> = algorithms
        .iter()
        .flat_map(|&alg| {
            let cfg = if alg == config.algorithm { config.clone() } else { config.with_algorithm(alg) };
            seeds.iter().map(move |&s| (cfg.clone(), s))
        })
        .collect();
    let pool = thread_pool()?;
    pool.install(|| jobs.par_iter().map(|(cfg, seed)| run_single(cfg, &env, *seed)).collect())
}

fn fmt_feasible(f: Option<bool>) -> &'static str {
    match f {
        Some(true) => "true",
        Some(false) => "false",
        None => "",
    }
}

/// Writes the logs as CSV, ordered by algorithm and then seed.
pub fn write_csv<W: Write>(logs: &[RegretLog], writer: W) -> Result<()> {
    let mut sorted: Vec<&RegretLog> = logs.iter().collect();
    sorted.sort_by_key(|l| (l.algorithm, l.seed));
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for log in sorted {
        for r in &log.records {
            w.write_record([
                r.episode.to_string(),
                log.seed.to_string(),
                log.algorithm.to_string(),
                r.vstar.to_string(),
                r.vpi.to_string(),
                r.realized_return.to_string(),
                r.cum_regret.to_string(),
                r.cum_bonus.to_string(),
                fmt_feasible(r.feasible).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn export_results(logs: &[RegretLog], path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(logs, std::io::BufWriter::new(file))
}

/// One parsed CSV row.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct CsvRow {
    pub episode: u64,
    pub seed: u64,
    pub alg: String,
    pub vstar: f64,
    pub vpi: f64,
    #[serde(rename = "return")]
    pub realized_return: f64,
    pub cum_regret: f64,
    pub cum_bonus: f64,
    pub feasible: Option<bool>,
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<CsvRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.iter().ne(CSV_HEADER) {
        return Err(Error::Config(format!("unexpected CSV header {headers:?}")));
    }
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Final-regret statistics of one algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub algorithm: AlgorithmId,
    pub seeds: usize,
    pub episodes: u64,
    pub mean_final_regret: f64,
    pub stderr_final_regret: f64,
    /// Mean regret after `K/2` episodes.
    pub mean_half_regret: f64,
    pub infeasible_fraction: f64,
}

impl SummaryRow {
    /// `Reg(K) / Reg(K/2)`; close to `sqrt(2)` for square-root growth.
    pub fn growth_ratio(&self) -> f64 {
        self.mean_final_regret / self.mean_half_regret
    }
}

pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Per-algorithm summary, in algorithm order.
pub fn summarize(logs: &[RegretLog]) -> Vec<SummaryRow> {
    let mut algs: Vec<AlgorithmId> = logs.iter().map(|l| l.algorithm).collect();
    algs.sort_unstable();
    algs.dedup();
    algs.into_iter()
        .map(|alg| {
            let group: Vec<&RegretLog> = logs.iter().filter(|l| l.algorithm == alg).collect();
            let finals: Vec<f64> = group.iter().map(|l| l.final_regret()).collect();
            let (mean, stderr) = mean_and_stderr(&finals);
            let episodes = group.iter().map(|l| l.records.len() as u64).min().unwrap_or(0);
            let half = (episodes / 2).max(1);
            let halves: Vec<f64> = group.iter().filter_map(|l| l.regret_at(half)).collect();
            let monitored: usize = group.iter().map(|l| l.records.iter().filter(|r| r.feasible.is_some()).count()).sum();
            let infeasible: usize = group.iter().map(|l| l.infeasible_episodes()).sum();
            SummaryRow {
                algorithm: alg,
                seeds: group.len(),
                episodes,
                mean_final_regret: mean,
                stderr_final_regret: stderr,
                mean_half_regret: mean_and_stderr(&halves).0,
                infeasible_fraction: if monitored == 0 { 0.0 } else { infeasible as f64 / monitored as f64 },
            }
        })
        .collect()
}

/// Plain-text table of [`summarize`].
pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:>5} {:>7} {:>14} {:>10} {:>12} {:>11}",
        "alg", "seeds", "K", "final_regret", "stderr", "growth", "infeasible"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<10} {:>5} {:>7} {:>14.4} {:>10.4} {:>12.4} {:>11.4}",
            r.algorithm.as_str(),
            r.seeds,
            r.episodes,
            r.mean_final_regret,
            r.stderr_final_regret,
            r.growth_ratio(),
            r.infeasible_fraction
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain_config(alg: AlgorithmId, episodes: u64) -> ExperimentConfig {
        ExperimentConfig::new(EnvironmentSpec::Chain { states: 4, horizon: 5 }, alg, episodes, 0.1, vec![3, 1])
    }

    #[test]
    fn zero_episodes_rejected() {
        assert!(matches!(chain_config(AlgorithmId::Tv, 0).validate(), Err(Error::Config(_))));
        let mut cfg = chain_config(AlgorithmId::Tv, 1);
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
        cfg.seeds.push(0);
        cfg.delta = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn one_episode_one_row() {
        let logs = run_experiment(&chain_config(AlgorithmId::Tv, 1)).unwrap();
        assert_eq!(logs.len(), 2);
        assert!(logs.iter().all(|l| l.records.len() == 1));
        assert_eq!(logs[0].seed, 1);
        assert_eq!(logs[0].total_rounds, 5);
    }

    #[test]
    fn oracle_has_no_regret() {
        let logs = run_experiment(&chain_config(AlgorithmId::Oracle, 30)).unwrap();
        for log in &logs {
            assert!(log.records.iter().all(|r| r.cum_regret == 0.0));
        }
    }

    #[test]
    fn unknown_ids_are_reported() {
        assert!(matches!("ucrl".parse::<AlgorithmId>(), Err(Error::UnknownId { kind: "algorithm", .. })));
        assert!(matches!(EnvironmentSpec::builtin("maze", 2, 2, 2, 0), Err(Error::UnknownId { .. })));
        assert!(ExperimentConfig::from_json_str(r#"{"environment":{"name":"chain","states":3,"horizon":2},"alg":"dqn","episodes":1,"delta":0.1,"seeds":[0]}"#).is_err());
        for alg in AlgorithmId::ALL {
            assert_eq!(alg.as_str().parse::<AlgorithmId>().unwrap(), alg);
        }
    }

    #[test]
    fn config_json_round_trip() {
        let text = r#"{"environment":{"name":"random","states":3,"actions":2,"horizon":2,"seed":4},
                       "alg":"kl-exact","episodes":7,"delta":0.05,"seeds":[2],"alpha_scale":0.5}"#;
        let cfg = ExperimentConfig::from_json_str(text).unwrap();
        assert_eq!(cfg.algorithm, AlgorithmId::KlExact);
        assert_eq!(cfg.alpha_scale(), 0.5);
        assert!(cfg.monitor_feasibility);
        let back = ExperimentConfig::from_json_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn exact_reference_is_feasible_for_tv() {
        let mdp = TabularMdp::random(3, 2, 2, 8).unwrap();
        let mut counts = crate::tabular::VisitCounts::new(2, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let policy = PolicyTable::uniform(2, 3, 2);
        for _ in 0..20 {
            counts.update(&sample_episode(&mdp, &policy, &mut rng).unwrap()).unwrap();
        }
        let reference = crate::tabular::reference_model(&counts);
        let widths = Array3::from_elem((2, 3, 2), 2.0);
        assert!(monitor_feasibility(&mdp, &reference, DivergenceKind::Tv, &widths));
        let widths = Array3::zeros((2, 3, 2));
        assert!(!monitor_feasibility(&mdp, &reference, DivergenceKind::Tv, &widths));
    }

    #[test]
    fn csv_is_header_only_for_no_logs() {
        let mut buf = Vec::new();
        write_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), CSV_HEADER.join(",") + "\n");
    }

    #[test]
    fn seeds_are_merged_in_ascending_order() {
        let logs = run_experiment(&chain_config(AlgorithmId::Uniform, 3)).unwrap();
        let mut reversed = logs.clone();
        reversed.reverse();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        write_csv(&logs, &mut a).unwrap();
        write_csv(&reversed, &mut b).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        let seeds: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
        assert_eq!(seeds, ["1", "1", "1", "3", "3", "3"]);
    }

    #[test]
    fn summary_statistics() {
        let (m, se) = mean_and_stderr(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((se - 1.0).abs() < 1e-12);
        let logs = run_sweep(&chain_config(AlgorithmId::Tv, 10), &[AlgorithmId::Tv, AlgorithmId::Uniform]).unwrap();
        let rows = summarize(&logs);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].seeds, 2);
        assert!(format_summary(&rows).contains("uniform"));
    }
}
