//! DAgger data collection and the imitation training loop.
//!
//! Each training trajectory is rolled under a per-step mixture: with
//! probability `β` the whole flock executes the expert's (saturated) action,
//! otherwise the learner's. Either way every agent's aggregation sequence is
//! stored with the expert's action as its label, and the dataset only grows.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::controllers::{global_controller, PotentialParams, FEATURE_DIM};
use crate::aggregation::AggregationState;
use crate::dynamics::{init_flock_disc, sample_stochastic_ts, saturate, step, ActionMatrix, SimConfig};
use crate::error::{invalid, FlockError, Result};
use crate::evaluation::velocity_deviation;
use crate::geometry::Vec2;
use crate::gnn::{observe, FeatureOptions};
use crate::nn::{check_architecture, init_params, AdamConfig, AdamState, Architecture, MlpParams, Workspace};
use crate::rng::{stream, Purpose};
use crate::swarm::FlockState;

/// Probability of executing the expert, decayed geometrically per trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DaggerSchedule {
    pub beta: f64,
    pub decay: f64,
    pub floor: f64,
    /// Decays applied so far.
    #[serde(skip)]
    pub rounds: u32,
    /// `beta` before the first decay; `None` until the schedule advances.
    #[serde(skip)]
    pub start: Option<f64>,
}

impl Default for DaggerSchedule {
    fn default() -> Self {
        Self {
            beta: 1.0,
            decay: 0.993,
            floor: 0.5,
            rounds: 0,
            start: None,
        }
    }
}

impl DaggerSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.floor) || !(self.floor <= self.beta && self.beta <= 1.0) {
            return Err(invalid(
                "beta",
                format!("need 0 <= floor <= beta <= 1 (floor {}, beta {})", self.floor, self.beta),
            ));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(invalid("decay", format!("must lie in (0, 1], got {}", self.decay)));
        }
        Ok(())
    }

    /// `β` after `rounds` decays from `self`, in closed form.
    pub fn beta_after(&self, rounds: usize) -> f64 {
        (self.beta * self.decay.powi(rounds as i32)).max(self.floor)
    }
}

/// Decays `beta` once. The new value is evaluated from the starting `beta`
/// so that repeated calls do not accumulate rounding.
pub fn advance_schedule(schedule: &DaggerSchedule) -> DaggerSchedule {
    let start = schedule.start.unwrap_or(schedule.beta);
    let rounds = schedule.rounds + 1;
    DaggerSchedule {
        beta: (start * schedule.decay.powi(rounds as i32)).max(schedule.floor),
        rounds,
        start: Some(start),
        ..*schedule
    }
}

/// Where a sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub trajectory: u32,
    pub step: u32,
    pub agent: u32,
}

/// Aggregation sequences paired with expert actions.
#[derive(Debug, Clone, Default)]
pub struct ImitationDataset {
    input_dim: usize,
    inputs: Vec<f64>,
    labels: Vec<Vec2>,
    provenance: Vec<Provenance>,
    /// Flock states indexed by `(trajectory, step)`, kept only on request.
    states: Vec<((u32, u32), FlockState)>,
}

impl ImitationDataset {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn input(&self, idx: usize) -> &[f64] {
        &self.inputs[idx * self.input_dim..(idx + 1) * self.input_dim]
    }

    pub fn label(&self, idx: usize) -> Vec2 {
        self.labels[idx]
    }

    pub fn provenance(&self, idx: usize) -> Provenance {
        self.provenance[idx]
    }

    /// The recorded state a sample was taken from, when states were kept.
    pub fn state_of(&self, idx: usize) -> Option<&FlockState> {
        let p = self.provenance[idx];
        let key = (p.trajectory, p.step);
        self.states
            .binary_search_by_key(&key, |(k, _)| *k)
            .ok()
            .map(|i| &self.states[i].1)
    }

    fn push(&mut self, input: &[f64], label: Vec2, prov: Provenance) {
        debug_assert_eq!(input.len(), self.input_dim);
        self.inputs.extend_from_slice(input);
        self.labels.push(label);
        self.provenance.push(prov);
    }

    /// Appends every sample of `shard`. Existing samples are never dropped.
    pub fn append(&mut self, mut shard: ImitationDataset) -> Result<()> {
        if shard.input_dim != self.input_dim {
            return Err(FlockError::Dimension(format!(
                "shard has input width {}, dataset {}",
                shard.input_dim, self.input_dim
            )));
        }
        self.inputs.append(&mut shard.inputs);
        self.labels.append(&mut shard.labels);
        self.provenance.append(&mut shard.provenance);
        self.states.append(&mut shard.states);
        self.states.sort_by_key(|(k, _)| *k);
        Ok(())
    }

    /// Debug dump: `trajectory,step,agent,z0..z{Kp-1},u_x,u_y`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["trajectory".to_string(), "step".into(), "agent".into()];
        header.extend((0..self.input_dim).map(|i| format!("z{i}")));
        header.extend(["u_x".to_string(), "u_y".into()]);
        w.write_record(&header)?;
        for idx in 0..self.len() {
            let p = self.provenance[idx];
            let mut rec = vec![p.trajectory.to_string(), p.step.to_string(), p.agent.to_string()];
            rec.extend(self.input(idx).iter().map(|v| v.to_string()));
            rec.push(self.labels[idx].x.to_string());
            rec.push(self.labels[idx].y.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Summary of one collected trajectory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryStats {
    pub trajectory: usize,
    pub beta: f64,
    pub expert_steps: usize,
    pub learner_steps: usize,
    /// Velocity-variance cost of the executed rollout.
    pub cost: f64,
    pub disconnected_steps: usize,
}

/// Everything a single collection rollout needs besides its random stream.
#[derive(Debug, Clone, Copy)]
pub struct CollectSpec<'a> {
    pub sim: &'a SimConfig,
    pub features: &'a FeatureOptions,
    pub history_depth: usize,
    pub traj_len: usize,
    pub trajectory_id: usize,
    pub record_states: bool,
}

/// Rolls one trajectory under the `β` mixture and labels every
/// (agent, step) with the saturated expert action.
///
/// The initial state is drawn from `rng`, followed by one Bernoulli draw per
/// step (and one timestep draw per step under the stochastic-timestep
/// option). Without a learner every step executes the expert.
pub fn collect_trajectory<R: Rng + ?Sized>(
    spec: &CollectSpec<'_>,
    learner: Option<&MlpParams>,
    schedule: &DaggerSchedule,
    rng: &mut R,
) -> Result<(ImitationDataset, TrajectoryStats)> {
    let initial = init_flock_disc(spec.sim, rng)?;
    collect_from(spec, initial, learner, schedule, rng)
}

/// [`collect_trajectory`] from a given initial state.
pub fn collect_from<R: Rng + ?Sized>(
    spec: &CollectSpec<'_>,
    initial: FlockState,
    learner: Option<&MlpParams>,
    schedule: &DaggerSchedule,
    rng: &mut R,
) -> Result<(ImitationDataset, TrajectoryStats)> {
    let sim = spec.sim;
    let n = initial.n_agents();
    let k = spec.history_depth;
    let potential = PotentialParams::new(sim.potential_radius, spec.features.epsilon_dist)?;
    if let Some(p) = learner {
        check_architecture(p, k, FEATURE_DIM)?;
    }
    let mut agg = AggregationState::new(n, FEATURE_DIM, k)?;
    let mut ws = learner.map(|p| Workspace::new(p.architecture()));

    let mut shard = ImitationDataset::new(k * FEATURE_DIM);
    let mut stats = TrajectoryStats {
        trajectory: spec.trajectory_id,
        beta: schedule.beta,
        expert_steps: 0,
        learner_steps: 0,
        cost: 0.0,
        disconnected_steps: 0,
    };
    let mut input = vec![0.0; k * FEATURE_DIM];
    let mut state = initial;
    for t in 0..spec.traj_len {
        let obs = observe(&state, sim.comm_radius, spec.features).map_err(|e| aborted(e, spec.trajectory_id))?;
        if obs.graph.has_isolated_agent() {
            stats.disconnected_steps += 1;
        }
        agg.update(&obs.shift, &obs.features)?;
        let expert = saturate(&global_controller(&state, &potential), sim.accel_limit);
        expert.check_finite(t).map_err(|e| aborted(e, spec.trajectory_id))?;

        let use_expert = rng.random::<f64>() < schedule.beta || learner.is_none();
        let mut learned = Vec::with_capacity(if use_expert { 0 } else { n });
        for i in 0..n {
            agg.write_sequence(i, &mut input);
            shard.push(
                &input,
                expert.0[i],
                Provenance {
                    trajectory: spec.trajectory_id as u32,
                    step: t as u32,
                    agent: i as u32,
                },
            );
            if let (false, Some(p), Some(ws)) = (use_expert, learner, ws.as_mut()) {
                let y = p.forward_into(&input, ws);
                learned.push(Vec2::new(y[0], y[1]));
            }
        }
        if spec.record_states {
            shard
                .states
                .push(((spec.trajectory_id as u32, t as u32), state.clone()));
        }

        let executed = if use_expert {
            stats.expert_steps += 1;
            expert
        } else {
            stats.learner_steps += 1;
            saturate(&ActionMatrix(learned), sim.accel_limit)
        };
        let ts = if sim.stochastic_timestep {
            sample_stochastic_ts(rng)
        } else {
            sim.sample_time
        };
        state = step(&state, &executed, ts).map_err(|e| aborted(e, spec.trajectory_id))?;
        stats.cost += velocity_deviation(&state);
    }
    stats.cost /= n as f64;
    Ok((shard, stats))
}

fn aborted(e: FlockError, trajectory: usize) -> FlockError {
    match e {
        FlockError::NonFinite { .. } => FlockError::TrajectoryAborted {
            trajectory,
            source: Box::new(e),
        },
        other => other,
    }
}

/// Training run parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_train_trajectories: usize,
    pub traj_len: usize,
    pub n_test_trajectories: usize,
    pub batch_size: usize,
    pub epochs_per_round: usize,
    /// History depth `K`.
    pub history_depth: usize,
    pub hidden: Vec<usize>,
    pub rng_seed: u64,
    pub adam: AdamConfig,
    pub dagger: DaggerSchedule,
    #[serde(skip)]
    pub features: FeatureOptions,
    /// Keep flock states for label spot checks.
    pub record_states: bool,
    #[serde(skip)]
    pub sim: SimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_train_trajectories: 400,
            traj_len: 200,
            n_test_trajectories: 20,
            batch_size: 256,
            epochs_per_round: 1,
            history_depth: 3,
            hidden: vec![32, 32],
            rng_seed: 0,
            adam: AdamConfig::default(),
            dagger: DaggerSchedule::default(),
            features: FeatureOptions::default(),
            record_states: false,
            sim: SimConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.dagger.validate()?;
        self.features.validate()?;
        for (field, v) in [
            ("traj_len", self.traj_len),
            ("n_test_trajectories", self.n_test_trajectories),
            ("batch_size", self.batch_size),
            ("epochs_per_round", self.epochs_per_round),
        ] {
            if v == 0 {
                return Err(invalid(field, "must be positive"));
            }
        }
        if self.history_depth == 0 {
            return Err(invalid("K", "history depth must be at least 1"));
        }
        if self.hidden.contains(&0) {
            return Err(invalid("hidden", "hidden layers must have at least one unit"));
        }
        let a = &self.adam;
        if !(a.learning_rate > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
            return Err(invalid("adam", "need lr > 0, beta1/beta2 in [0,1), epsilon > 0"));
        }
        Ok(())
    }

    pub fn architecture(&self) -> Result<Architecture> {
        Architecture::flocking(self.history_depth, self.hidden.clone())
    }
}

/// Per-round training record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: usize,
    /// `β` used while collecting this round's trajectory.
    pub beta: f64,
    pub dataset_size: usize,
    pub mean_loss: f64,
    pub adam_steps: u64,
    pub trajectory_cost: f64,
    pub expert_steps: usize,
    pub learner_steps: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingReport {
    pub rounds: Vec<RoundReport>,
}

impl TrainingReport {
    pub fn betas(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.beta).collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rounds {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Result of [`train_with_dataset`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: MlpParams,
    pub report: TrainingReport,
    pub dataset: ImitationDataset,
}

/// DAgger training. Deterministic for a given config.
pub fn train(config: &TrainConfig) -> Result<(MlpParams, TrainingReport)> {
    let out = train_with_dataset(config, |_| {})?;
    Ok((out.params, out.report))
}

/// [`train`], also returning the aggregate dataset and reporting each round
/// to `on_round` as it finishes.
pub fn train_with_dataset(
    config: &TrainConfig,
    mut on_round: impl FnMut(&RoundReport),
) -> Result<TrainOutcome> {
    config.validate()?;
    let arch = config.architecture()?;
    let seed = config.rng_seed;
    let mut params = init_params(&arch, &mut stream(seed, Purpose::ParamInit, 0))?;
    let mut adam = AdamState::new(&params, config.adam);
    let mut schedule = config.dagger;
    let mut dataset = ImitationDataset::new(arch.input_dim());
    let mut report = TrainingReport::default();
    let mut grad = params.zeros_like();
    let mut ws = Workspace::new(&arch);
    let mut order: Vec<usize> = Vec::new();

    for round in 0..config.n_train_trajectories {
        let started = Instant::now();
        let spec = CollectSpec {
            sim: &config.sim,
            features: &config.features,
            history_depth: config.history_depth,
            traj_len: config.traj_len,
            trajectory_id: round,
            record_states: config.record_states,
        };
        let mut rng = stream(seed, Purpose::Collect, round as u64);
        let (shard, stats) = collect_trajectory(&spec, Some(&params), &schedule, &mut rng)?;
        dataset.append(shard)?;
        let beta_used = schedule.beta;
        schedule = advance_schedule(&schedule);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for epoch in 0..config.epochs_per_round {
            let mut shuffle = stream(seed, Purpose::Shuffle, (round * config.epochs_per_round + epoch) as u64);
            order.clear();
            order.extend(0..dataset.len());
            order.shuffle(&mut shuffle);
            for chunk in order.chunks(config.batch_size) {
                grad.as_mut_slice().fill(0.0);
                let scale = 1.0 / chunk.len() as f64;
                let mut batch_loss = 0.0;
                let mut target = [0.0; 2];
                for &idx in chunk {
                    let u = dataset.label(idx);
                    target[0] = u.x;
                    target[1] = u.y;
                    batch_loss += params.accumulate_gradient(dataset.input(idx), &target, scale, &mut grad, &mut ws);
                }
                batch_loss *= scale;
                if !batch_loss.is_finite() {
                    return Err(FlockError::Diverged { round, loss: batch_loss });
                }
                adam.step(&mut params, &grad)?;
                loss_sum += batch_loss;
                batches += 1;
            }
        }
        if !params.is_finite() {
            return Err(FlockError::Diverged { round, loss: f64::NAN });
        }
        let row = RoundReport {
            round,
            beta: beta_used,
            dataset_size: dataset.len(),
            mean_loss: if batches > 0 { loss_sum / batches as f64 } else { 0.0 },
            adam_steps: adam.steps(),
            trajectory_cost: stats.cost,
            expert_steps: stats.expert_steps,
            learner_steps: stats.learner_steps,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_round(&row);
        report.rounds.push(row);
    }
    Ok(TrainOutcome {
        params,
        report,
        dataset,
    })
}
