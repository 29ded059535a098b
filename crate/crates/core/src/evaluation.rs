//! Closed-loop episodes, flocking metrics, parameter sweeps and transfer
//! scenarios.

use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controllers::{GlobalPolicy, LocalPolicy, PotentialParams, FEATURE_DIM};
use crate::dynamics::{
    assign_leaders, init_flock_disc, init_flock_grid, sample_stochastic_ts, saturate, scaled_policy, step,
    ActionMatrix, Policy, SimConfig,
};
use crate::error::{invalid, FlockError, Result};
use crate::geometry::Vec2;
use crate::gnn::{FeatureOptions, GnnPolicy};
use crate::nn::{check_architecture, MlpParams};
use crate::rng::{stream, Purpose, SimRng};
use crate::swarm::{build_comm_graph, FlockState};

/// `Σ_j ‖v_j − v̄‖²` at one state.
pub fn velocity_deviation(state: &FlockState) -> f64 {
    let mean = state.mean_velocity();
    state.velocities.iter().map(|&v| (v - mean).norm_sq()).sum()
}

/// Mean of `‖v_i − v_j‖` over unordered pairs.
pub fn mean_pairwise_velocity_difference(state: &FlockState) -> f64 {
    let n = state.n_agents();
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            total += (state.velocities[i] - state.velocities[j]).norm();
        }
    }
    total / (n * (n - 1) / 2) as f64
}

/// Per-agent nearest-neighbor distance with its mean and minimum.
#[derive(Debug, Clone, PartialEq)]
pub struct MinDistances {
    pub per_agent: Vec<f64>,
    pub mean: f64,
    pub min: f64,
}

pub fn min_neighbor_distance(state: &FlockState) -> MinDistances {
    let n = state.n_agents();
    let mut best = vec![f64::INFINITY; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d2 = (state.positions[j] - state.positions[i]).norm_sq();
            best[i] = best[i].min(d2);
            best[j] = best[j].min(d2);
        }
    }
    let per_agent: Vec<f64> = best.into_iter().map(f64::sqrt).collect();
    let mean = per_agent.iter().sum::<f64>() / n as f64;
    let min = per_agent.iter().copied().fold(f64::INFINITY, f64::min);
    MinDistances { per_agent, mean, min }
}

/// Communication-graph facts logged at each step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphSummary {
    pub n_edges: usize,
    pub min_degree: usize,
    pub min_distance: f64,
    pub mean_min_distance: f64,
}

/// Everything recorded during one closed-loop episode.
///
/// `actions[n]` and `graphs[n]` belong to the state the action was computed
/// from; `states[n]` is the state reached after applying it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub initial: FlockState,
    pub states: Vec<FlockState>,
    pub actions: Vec<ActionMatrix>,
    pub graphs: Vec<GraphSummary>,
    pub timesteps: Vec<f64>,
}

impl TrajectoryLog {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn n_agents(&self) -> usize {
        self.initial.n_agents()
    }

    /// Fraction of steps whose graph had an isolated agent.
    pub fn disconnect_rate(&self) -> f64 {
        if self.graphs.is_empty() {
            return 0.0;
        }
        self.graphs.iter().filter(|g| g.min_degree == 0).count() as f64 / self.graphs.len() as f64
    }

    /// Mean over steps of the mean nearest-neighbor distance.
    pub fn mean_min_distance(&self) -> f64 {
        if self.graphs.is_empty() {
            return 0.0;
        }
        self.graphs.iter().map(|g| g.mean_min_distance).sum::<f64>() / self.graphs.len() as f64
    }

    /// Mean nearest-neighbor distance at the end minus at the start.
    pub fn min_distance_growth(&self) -> f64 {
        let last = self.states.last().unwrap_or(&self.initial);
        min_neighbor_distance(last).mean - min_neighbor_distance(&self.initial).mean
    }
}

/// Velocity-variance cost `C = (1/N) Σ_n Σ_j ‖v_{j,n} − v̄_n‖²` over the
/// logged post-step states.
pub fn velocity_variance_cost(log: &TrajectoryLog) -> f64 {
    let n = log.n_agents() as f64;
    log.states.iter().map(velocity_deviation).sum::<f64>() / n
}

/// Which controller drives an episode.
#[derive(Debug, Clone)]
pub enum ControllerSpec {
    Global,
    Local,
    Gnn(Arc<MlpParams>),
}

impl ControllerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Global => "global",
            Self::Local => "local",
            Self::Gnn(_) => "gnn",
        }
    }

    pub fn history_depth(&self) -> Option<usize> {
        match self {
            Self::Gnn(p) => Some(p.architecture().history_depth),
            _ => None,
        }
    }

    /// Human-readable label, e.g. `gnn(K=3)`.
    pub fn label(&self) -> String {
        match self.history_depth() {
            Some(k) => format!("gnn(K={k})"),
            None => self.name().to_string(),
        }
    }
}

/// Knobs for closed-loop rollouts beyond the simulation config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeOptions {
    pub features: FeatureOptions,
    /// Run the message-passing protocol beside the centralized aggregation
    /// and fail on any disagreement.
    pub verify_distributed: bool,
    /// Evaluate every controller as `l · π(x / l)`.
    pub policy_scale: f64,
}

impl Default for EpisodeOptions {
    fn default() -> Self {
        Self {
            features: FeatureOptions::default(),
            verify_distributed: false,
            policy_scale: 1.0,
        }
    }
}

fn build_policy(controller: &ControllerSpec, cfg: &SimConfig, opts: &EpisodeOptions) -> Result<Box<dyn Policy>> {
    let params = PotentialParams::new(cfg.potential_radius, opts.features.epsilon_dist)?;
    let inner: Box<dyn Policy> = match controller {
        ControllerSpec::Global => Box::new(GlobalPolicy { params }),
        ControllerSpec::Local => Box::new(LocalPolicy {
            params,
            comm_radius: cfg.comm_radius,
        }),
        ControllerSpec::Gnn(model) => {
            check_architecture(model, model.architecture().history_depth, FEATURE_DIM)?;
            Box::new(
                GnnPolicy::new((**model).clone(), cfg.comm_radius, opts.features)?
                    .with_verification(opts.verify_distributed),
            )
        }
    };
    Ok(Box::new(scaled_policy(inner, opts.policy_scale)?))
}

/// Rolls `traj_len` closed-loop steps: act, saturate, integrate.
///
/// `rng` is only drawn from when the stochastic-timestep option is on.
pub fn run_episode<R: Rng + ?Sized>(
    initial: &FlockState,
    controller: &ControllerSpec,
    cfg: &SimConfig,
    traj_len: usize,
    opts: &EpisodeOptions,
    rng: &mut R,
) -> Result<TrajectoryLog> {
    initial.validate()?;
    let mut policy = build_policy(controller, cfg, opts)?;
    policy.reset();
    let mut log = TrajectoryLog {
        initial: initial.clone(),
        states: Vec::with_capacity(traj_len),
        actions: Vec::with_capacity(traj_len),
        graphs: Vec::with_capacity(traj_len),
        timesteps: Vec::with_capacity(traj_len),
    };
    let mut state = initial.clone();
    for _ in 0..traj_len {
        let graph = build_comm_graph(&state, cfg.comm_radius)?;
        let dists = min_neighbor_distance(&state);
        log.graphs.push(GraphSummary {
            n_edges: graph.n_pairs() / 2,
            min_degree: graph.min_degree(),
            min_distance: dists.min,
            mean_min_distance: dists.mean,
        });
        let actions = saturate(&policy.act(&state)?, cfg.accel_limit);
        actions.check_finite(state.step_index)?;
        let ts = if cfg.stochastic_timestep {
            sample_stochastic_ts(rng)
        } else {
            cfg.sample_time
        };
        state = step(&state, &actions, ts)?;
        log.actions.push(actions);
        log.states.push(state.clone());
        log.timesteps.push(ts);
    }
    Ok(log)
}

/// Initial-condition family for an episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Scenario {
    /// Uniform disc with random velocities plus a flock bias.
    Disc,
    /// Disc start with some agents turned into constant-velocity leaders.
    Leaders { n_leaders: usize, velocity: Vec2 },
    /// Lattice with velocities pointing at the centroid.
    Grid { spacing: f64, speed_scale: f64 },
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Disc => "disc",
            Self::Leaders { .. } => "leaders",
            Self::Grid { .. } => "grid",
        }
    }

    pub fn initial_state<R: Rng + ?Sized>(&self, cfg: &SimConfig, rng: &mut R) -> Result<FlockState> {
        match *self {
            Self::Disc => init_flock_disc(cfg, rng),
            Self::Leaders { n_leaders, velocity } => {
                let s = init_flock_disc(cfg, rng)?;
                assign_leaders(&s, n_leaders, velocity, rng)
            }
            Self::Grid { spacing, speed_scale } => init_flock_grid(cfg.n_agents, spacing, speed_scale),
        }
    }
}

/// Random stream of episode `index` under root `seed`; the initial state is
/// drawn first, then any stochastic timesteps.
pub fn episode_rng(seed: u64, index: usize) -> SimRng {
    stream(seed, Purpose::Episode, index as u64)
}

/// One row per (controller, episode).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeRow {
    pub controller: String,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub episode: usize,
    pub seed: u64,
    pub cost: f64,
    pub disconnect_rate: f64,
    pub mean_min_dist: f64,
    pub min_dist_growth: f64,
    pub runtime_s: f64,
}

/// Aggregate results of one controller over a set of episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub controller: String,
    pub k: Option<usize>,
    pub costs: Vec<f64>,
    pub mean_cost: f64,
    pub std_cost: f64,
    pub disconnect_rate: f64,
    pub mean_min_dist: f64,
    pub mean_min_dist_growth: f64,
    pub runtime_s: f64,
    pub episodes: Vec<EpisodeRow>,
}

impl EvalReport {
    fn from_rows(controller: &ControllerSpec, rows: Vec<EpisodeRow>) -> Self {
        let costs: Vec<f64> = rows.iter().map(|r| r.cost).collect();
        let m = rows.len().max(1) as f64;
        let mean_cost = costs.iter().sum::<f64>() / m;
        let std_cost = if costs.len() > 1 {
            (costs.iter().map(|c| (c - mean_cost).powi(2)).sum::<f64>() / (costs.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self {
            controller: controller.name().to_string(),
            k: controller.history_depth(),
            mean_cost,
            std_cost,
            disconnect_rate: rows.iter().map(|r| r.disconnect_rate).sum::<f64>() / m,
            mean_min_dist: rows.iter().map(|r| r.mean_min_dist).sum::<f64>() / m,
            mean_min_dist_growth: rows.iter().map(|r| r.min_dist_growth).sum::<f64>() / m,
            runtime_s: rows.iter().map(|r| r.runtime_s).sum(),
            costs,
            episodes: rows,
        }
    }
}

/// Runs `n_episodes` episodes of every controller from shared initial
/// states. Episodes are independent; `jobs` bounds the worker count and
/// does not change results.
pub fn evaluate_controllers(
    controllers: &[ControllerSpec],
    scenario: &Scenario,
    cfg: &SimConfig,
    traj_len: usize,
    n_episodes: usize,
    opts: &EpisodeOptions,
    jobs: usize,
) -> Result<Vec<EvalReport>> {
    cfg.validate()?;
    let tasks: Vec<(usize, usize)> = (0..controllers.len())
        .flat_map(|c| (0..n_episodes).map(move |e| (c, e)))
        .collect();
    let rows = run_parallel(jobs, &tasks, |&(c, e)| {
        let controller = &controllers[c];
        let mut rng = episode_rng(cfg.rng_seed, e);
        let initial = scenario.initial_state(cfg, &mut rng)?;
        let started = Instant::now();
        let log = run_episode(&initial, controller, cfg, traj_len, opts, &mut rng)?;
        Ok(EpisodeRow {
            controller: controller.name().to_string(),
            k: controller.history_depth(),
            episode: e,
            seed: cfg.rng_seed,
            cost: velocity_variance_cost(&log),
            disconnect_rate: log.disconnect_rate(),
            mean_min_dist: log.mean_min_distance(),
            min_dist_growth: log.min_distance_growth(),
            runtime_s: started.elapsed().as_secs_f64(),
        })
    })?;
    let mut rows = rows.into_iter();
    Ok(controllers
        .iter()
        .map(|c| EvalReport::from_rows(c, rows.by_ref().take(n_episodes).collect()))
        .collect())
}

/// Maps `f` over `tasks` on at most `jobs` threads, keeping task order.
pub fn run_parallel<T, U, F>(jobs: usize, tasks: &[T], f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync + Send,
{
    if jobs <= 1 {
        return tasks.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| invalid("jobs", e.to_string()))?;
    pool.install(|| tasks.par_iter().map(f).collect())
}

/// Swept parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    VInit,
    Radius,
    NAgents,
    Architecture,
}

impl Experiment {
    pub const ALL: [Experiment; 4] = [Self::VInit, Self::Radius, Self::NAgents, Self::Architecture];

    pub fn name(&self) -> &'static str {
        match self {
            Self::VInit => "v_init",
            Self::Radius => "radius",
            Self::NAgents => "n_agents",
            Self::Architecture => "architecture",
        }
    }

    /// The simulation config at one grid point.
    pub fn apply(&self, base: &SimConfig, value: f64) -> Result<SimConfig> {
        let mut cfg = base.clone();
        match self {
            Self::VInit => cfg.v_init = value,
            Self::Radius => {
                // The baseline keeps the potential cutoff tied to the radius.
                cfg.comm_radius = value;
                cfg.potential_radius = value.max(1.0);
            }
            Self::NAgents => {
                if value.fract() != 0.0 || value < 2.0 {
                    return Err(invalid("n_agents", format!("sweep value {value} is not an agent count")));
                }
                cfg.n_agents = value as usize;
            }
            Self::Architecture => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl std::str::FromStr for Experiment {
    type Err = FlockError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|e| e.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(Experiment::name).collect();
                invalid("experiment", format!("unknown experiment `{s}`; valid: {}", names.join(", ")))
            })
    }
}

/// Trained networks available to a sweep.
#[derive(Debug, Clone, Default)]
pub struct ModelBank {
    models: Vec<Arc<MlpParams>>,
}

impl ModelBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, params: MlpParams) {
        self.models.push(Arc::new(params));
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    /// First model with history depth `k`.
    pub fn by_k(&self, k: usize) -> Result<Arc<MlpParams>> {
        self.models
            .iter()
            .find(|m| m.architecture().history_depth == k)
            .cloned()
            .ok_or(FlockError::MissingModel {
                k,
                detail: String::new(),
            })
    }

    /// Model with history depth `k` whose hidden layers all have `width` units.
    pub fn by_width(&self, k: usize, width: usize) -> Result<Arc<MlpParams>> {
        self.models
            .iter()
            .find(|m| {
                let a = m.architecture();
                a.history_depth == k && !a.hidden.is_empty() && a.hidden.iter().all(|&h| h == width)
            })
            .cloned()
            .ok_or(FlockError::MissingModel {
                k,
                detail: format!(" with hidden width {width}"),
            })
    }
}

/// A sweep over one parameter.
#[derive(Debug, Clone)]
pub struct SweepPlan {
    pub experiment: Experiment,
    pub values: Vec<f64>,
    pub include_global: bool,
    pub include_local: bool,
    /// History depths of the GNN controllers to run.
    pub gnn_ks: Vec<usize>,
    pub n_seeds: usize,
    pub traj_len: usize,
    pub base: SimConfig,
    pub options: EpisodeOptions,
}

/// One CSV row per (grid point, controller, seed).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub experiment: String,
    pub param_value: f64,
    pub controller: String,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub seed: usize,
    pub cost: f64,
    pub disconnect_rate: f64,
    pub mean_min_dist: f64,
    pub runtime_s: f64,
}

pub fn sweep(plan: &SweepPlan, models: &ModelBank, jobs: usize) -> Result<Vec<SweepRow>> {
    if plan.n_seeds == 0 || plan.traj_len == 0 {
        return Err(invalid("n_seeds", "sweep needs at least one seed and one step"));
    }
    // Resolve every (grid point, controller) up front so a missing model
    // fails before any episode runs.
    let mut points = Vec::new();
    for &value in &plan.values {
        let cfg = plan.experiment.apply(&plan.base, value)?;
        let mut controllers = Vec::new();
        if plan.include_global {
            controllers.push(ControllerSpec::Global);
        }
        if plan.include_local {
            controllers.push(ControllerSpec::Local);
        }
        for &k in &plan.gnn_ks {
            let model = match plan.experiment {
                Experiment::Architecture => models.by_width(k, value as usize)?,
                _ => models.by_k(k)?,
            };
            controllers.push(ControllerSpec::Gnn(model));
        }
        points.push((value, cfg, controllers));
    }
    let tasks: Vec<(usize, usize, usize)> = points
        .iter()
        .enumerate()
        .flat_map(|(p, (_, _, ctrls))| {
            (0..ctrls.len()).flat_map(move |c| (0..plan.n_seeds).map(move |s| (p, c, s)))
        })
        .collect();
    run_parallel(jobs, &tasks, |&(p, c, s)| {
        let (value, cfg, ctrls) = &points[p];
        let controller = &ctrls[c];
        let mut rng = episode_rng(cfg.rng_seed, s);
        let initial = Scenario::Disc.initial_state(cfg, &mut rng)?;
        let started = Instant::now();
        let log = run_episode(&initial, controller, cfg, plan.traj_len, &plan.options, &mut rng)?;
        Ok(SweepRow {
            experiment: plan.experiment.name().to_string(),
            param_value: *value,
            controller: controller.name().to_string(),
            k: controller.history_depth(),
            seed: s,
            cost: velocity_variance_cost(&log),
            disconnect_rate: log.disconnect_rate(),
            mean_min_dist: log.mean_min_distance(),
            runtime_s: started.elapsed().as_secs_f64(),
        })
    })
}

/// Evaluates a frozen model on a scenario it was not trained on.
pub fn transfer_eval(
    model: Arc<MlpParams>,
    scenario: &Scenario,
    cfg: &SimConfig,
    traj_len: usize,
    n_seeds: usize,
    opts: &EpisodeOptions,
) -> Result<EvalReport> {
    let mut reports = evaluate_controllers(&[ControllerSpec::Gnn(model)], scenario, cfg, traj_len, n_seeds, opts, 1)?;
    Ok(reports.remove(0))
}

pub fn write_csv<W: std::io::Write, T: Serialize>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-step flock summary for plotting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    /// `(1/N) Σ_j ‖v_j − v̄‖²`.
    pub velocity_deviation_from_mean: f64,
    /// Mean `‖v_i − v_j‖` over pairs.
    pub mean_pairwise_velocity_diff: f64,
    pub mean_min_dist: f64,
    pub min_dist: f64,
    pub n_edges: usize,
    pub min_degree: usize,
}

pub fn step_metrics(log: &TrajectoryLog) -> Vec<StepMetrics> {
    log.states
        .iter()
        .zip(&log.graphs)
        .enumerate()
        .map(|(n, (s, g))| StepMetrics {
            step: n + 1,
            velocity_deviation_from_mean: velocity_deviation(s) / s.n_agents() as f64,
            mean_pairwise_velocity_diff: mean_pairwise_velocity_difference(s),
            mean_min_dist: g.mean_min_distance,
            min_dist: g.min_distance,
            n_edges: g.n_edges,
            min_degree: g.min_degree,
        })
        .collect()
}

/// Per-step per-agent trace row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub agent: usize,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub is_leader: u8,
}

/// One row per agent for each post-step state.
pub fn trace_rows(log: &TrajectoryLog) -> Vec<TraceRow> {
    log.states
        .iter()
        .flat_map(|s| {
            (0..s.n_agents()).map(move |i| TraceRow {
                step: s.step_index,
                agent: i,
                x: s.positions[i].x,
                y: s.positions[i].y,
                vx: s.velocities[i].x,
                vy: s.velocities[i].y,
                is_leader: u8::from(s.leader_mask[i]),
            })
        })
        .collect()
}
