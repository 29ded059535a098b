//! Point-mass double-integrator dynamics and scenario initialization.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, FlockError, Result};
use crate::geometry::Vec2;
use crate::swarm::FlockState;

/// Simulation parameters shared by training and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_agents: usize,
    /// Communication radius `R` (m).
    pub comm_radius: f64,
    /// Potential cutoff `ρ` (m).
    pub potential_radius: f64,
    /// Sample time `T_s` (s).
    pub sample_time: f64,
    /// Bound on initial per-component velocities and on the flock bias (m/s).
    pub v_init: f64,
    /// Symmetric acceleration saturation (m/s²).
    pub accel_limit: f64,
    pub min_spawn_separation: f64,
    pub min_spawn_neighbors: usize,
    pub max_spawn_attempts: usize,
    /// Draw each step's `T_s` from the stochastic-timestep surrogate instead
    /// of using `sample_time`.
    pub stochastic_timestep: bool,
    pub rng_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_agents: 100,
            comm_radius: 1.0,
            potential_radius: 1.0,
            sample_time: 0.01,
            v_init: 3.0,
            accel_limit: 100.0,
            min_spawn_separation: 0.1,
            min_spawn_neighbors: 2,
            max_spawn_attempts: 1000,
            stochastic_timestep: false,
            rng_seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents < 2 {
            return Err(invalid("n_agents", format!("must be at least 2, got {}", self.n_agents)));
        }
        positive("comm_radius", self.comm_radius)?;
        if !(self.potential_radius >= 1.0) || !self.potential_radius.is_finite() {
            return Err(invalid(
                "potential_radius",
                format!("must be at least 1, got {}", self.potential_radius),
            ));
        }
        positive("sample_time", self.sample_time)?;
        positive("accel_limit", self.accel_limit)?;
        if !(self.v_init >= 0.0) || !self.v_init.is_finite() {
            return Err(invalid("v_init", format!("must be non-negative, got {}", self.v_init)));
        }
        if !(self.min_spawn_separation >= 0.0) {
            return Err(invalid(
                "min_spawn_separation",
                format!("must be non-negative, got {}", self.min_spawn_separation),
            ));
        }
        if self.min_spawn_neighbors >= self.n_agents {
            return Err(invalid(
                "min_spawn_neighbors",
                format!(
                    "{} neighbors is impossible with {} agents",
                    self.min_spawn_neighbors, self.n_agents
                ),
            ));
        }
        if self.max_spawn_attempts == 0 {
            return Err(invalid("max_spawn_attempts", "must be positive"));
        }
        Ok(())
    }
}

fn positive(field: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, format!("must be positive, got {v}")))
    }
}

/// Per-agent accelerations for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionMatrix(pub Vec<Vec2>);

impl ActionMatrix {
    pub fn zeros(n_agents: usize) -> Self {
        Self(vec![Vec2::ZERO; n_agents])
    }

    #[inline]
    pub fn n_agents(&self) -> usize {
        self.0.len()
    }

    pub fn check_finite(&self, step: usize) -> Result<()> {
        match self.0.iter().position(|u| !u.is_finite()) {
            Some(agent) => Err(FlockError::NonFinite {
                what: "action",
                step,
                agent,
            }),
            None => Ok(()),
        }
    }

    pub fn sum(&self) -> Vec2 {
        self.0.iter().fold(Vec2::ZERO, |acc, &u| acc + u)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a.x - b.x).abs().max((a.y - b.y).abs()))
            .fold(0.0, f64::max)
    }
}

/// Clamps each acceleration component to `[-limit, limit]`.
pub fn saturate(actions: &ActionMatrix, limit: f64) -> ActionMatrix {
    ActionMatrix(actions.0.iter().map(|u| u.clamp(limit)).collect())
}

/// Advances the flock by one zero-order-hold step of length `sample_time`.
///
/// Followers: `v' = v + u·T`, `r' = r + v·T + ½·u·T²`. Leaders ignore `u`.
/// Actions are not saturated here; callers apply [`saturate`] first.
pub fn step(state: &FlockState, actions: &ActionMatrix, sample_time: f64) -> Result<FlockState> {
    let n = state.n_agents();
    if actions.n_agents() != n {
        return Err(FlockError::Dimension(format!(
            "{} actions for {n} agents",
            actions.n_agents()
        )));
    }
    if !(sample_time > 0.0) || !sample_time.is_finite() {
        return Err(invalid("sample_time", format!("must be positive, got {sample_time}")));
    }
    state.check_finite()?;
    actions.check_finite(state.step_index)?;

    let half_t2 = 0.5 * sample_time * sample_time;
    let mut next = state.clone();
    for i in 0..n {
        let r = state.positions[i];
        let v = state.velocities[i];
        if state.leader_mask[i] {
            next.positions[i] = r + v * sample_time;
        } else {
            let u = actions.0[i];
            next.positions[i] = r + v * sample_time + u * half_t2;
            next.velocities[i] = v + u * sample_time;
        }
    }
    next.step_index += 1;
    next.check_finite()?;
    Ok(next)
}

/// Samples the baseline disc scenario.
///
/// Positions start uniform on the disc of radius `√N`. Each velocity
/// component is uniform on `[-v_init, v_init]`, plus one flock-wide bias
/// drawn the same way. Agents with fewer than `min_spawn_neighbors`
/// neighbors at `comm_radius`, or closer than `min_spawn_separation` to
/// another agent, are redrawn uniformly on the disc until none remain.
/// Redrawing the whole flock almost never succeeds at the baseline density.
pub fn init_flock_disc<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Result<FlockState> {
    cfg.validate()?;
    let n = cfg.n_agents;
    let disc_radius = (n as f64).sqrt();
    let unit = Uniform::new(0.0f64, 1.0).expect("valid range");
    let sample_position = |rng: &mut R| {
        let rad = disc_radius * unit.sample(rng).sqrt();
        let theta = std::f64::consts::TAU * unit.sample(rng);
        Vec2::new(rad * theta.cos(), rad * theta.sin())
    };
    let sample_velocity = |rng: &mut R| {
        if cfg.v_init == 0.0 {
            Vec2::ZERO
        } else {
            Vec2::new(
                cfg.v_init * (2.0 * unit.sample(rng) - 1.0),
                cfg.v_init * (2.0 * unit.sample(rng) - 1.0),
            )
        }
    };

    let mut positions: Vec<Vec2> = (0..n).map(|_| sample_position(rng)).collect();
    let mut velocities: Vec<Vec2> = (0..n).map(|_| sample_velocity(rng)).collect();
    let bias = sample_velocity(rng);
    for v in &mut velocities {
        *v += bias;
    }

    let r2 = cfg.comm_radius * cfg.comm_radius;
    let sep2 = cfg.min_spawn_separation * cfg.min_spawn_separation;
    let mut last = String::new();
    for _ in 0..cfg.max_spawn_attempts {
        let mut degree = vec![0usize; n];
        let mut crowded = vec![false; n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d2 = (positions[j] - positions[i]).norm_sq();
                if d2 > 0.0 && d2 < r2 {
                    degree[i] += 1;
                    degree[j] += 1;
                }
                if d2 < sep2 {
                    crowded[i] = true;
                    crowded[j] = true;
                }
            }
        }
        let bad: Vec<usize> = (0..n)
            .filter(|&i| crowded[i] || degree[i] < cfg.min_spawn_neighbors)
            .collect();
        if bad.is_empty() {
            return FlockState::new(positions, velocities);
        }
        let min_deg = degree.iter().copied().min().unwrap_or(0);
        last = format!(
            "{} agents still violate the spawn rules (min degree {min_deg}, {} crowded)",
            bad.len(),
            crowded.iter().filter(|&&c| c).count()
        );
        for i in bad {
            positions[i] = sample_position(rng);
        }
    }
    Err(FlockError::InitExhausted {
        attempts: cfg.max_spawn_attempts,
        last,
    })
}

/// Lattice scenario with velocities pointing at the centroid.
///
/// Agents fill a `⌈√N⌉`-wide lattice row-major, so a non-square `N` leaves
/// the last row partial. Agent `i` moves with `-speed_scale · (r_i - c)`
/// where `c` is the centroid of the occupied sites.
pub fn init_flock_grid(n_agents: usize, spacing: f64, speed_scale: f64) -> Result<FlockState> {
    if n_agents < 2 {
        return Err(invalid("n_agents", format!("must be at least 2, got {n_agents}")));
    }
    positive("grid_spacing", spacing)?;
    if !speed_scale.is_finite() {
        return Err(invalid("grid_speed_scale", "must be finite"));
    }
    let width = (n_agents as f64).sqrt().ceil() as usize;
    let positions: Vec<Vec2> = (0..n_agents)
        .map(|i| Vec2::new((i % width) as f64 * spacing, (i / width) as f64 * spacing))
        .collect();
    let centroid = positions.iter().fold(Vec2::ZERO, |a, &p| a + p) / n_agents as f64;
    let positions: Vec<Vec2> = positions.into_iter().map(|p| p - centroid).collect();
    let velocities = positions.iter().map(|&p| -speed_scale * p).collect();
    FlockState::new(positions, velocities)
}

/// Speed scale that gives the farthest agent of an `n_agents` grid an
/// initial speed of `max_speed`.
pub fn grid_speed_scale_for(n_agents: usize, spacing: f64, max_speed: f64) -> f64 {
    let state = match init_flock_grid(n_agents.max(2), spacing, 1.0) {
        Ok(s) => s,
        Err(_) => return 0.0,
    };
    let far = state
        .positions
        .iter()
        .map(|p| p.norm())
        .fold(0.0, f64::max);
    if far > 0.0 {
        max_speed / far
    } else {
        0.0
    }
}

/// Flags `n_leaders` distinct agents, chosen uniformly, as leaders moving at
/// `leader_velocity`.
pub fn assign_leaders<R: Rng + ?Sized>(
    state: &FlockState,
    n_leaders: usize,
    leader_velocity: Vec2,
    rng: &mut R,
) -> Result<FlockState> {
    let n = state.n_agents();
    if n_leaders > n {
        return Err(invalid(
            "n_leaders",
            format!("{n_leaders} leaders requested for {n} agents"),
        ));
    }
    if !leader_velocity.is_finite() {
        return Err(invalid("leader_velocity", "must be finite"));
    }
    let mut out = state.clone();
    for i in rand::seq::index::sample(rng, n, n_leaders) {
        out.leader_mask[i] = true;
        out.velocities[i] = leader_velocity;
    }
    Ok(out)
}

pub const STOCHASTIC_TS_MEAN: f64 = 0.12;
pub const STOCHASTIC_TS_VARIANCE: f64 = 3e-4;
pub const STOCHASTIC_TS_FLOOR: f64 = 0.001;

/// Draws a timestep from `N(0.12, 3e-4)`, truncated below at 1 ms.
pub fn sample_stochastic_ts<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let normal = Normal::new(STOCHASTIC_TS_MEAN, STOCHASTIC_TS_VARIANCE.sqrt())
        .expect("valid normal parameters");
    normal.sample(rng).max(STOCHASTIC_TS_FLOOR)
}

/// A (possibly stateful) feedback law mapping flock states to accelerations.
pub trait Policy {
    /// Clears per-trajectory memory.
    fn reset(&mut self) {}

    fn act(&mut self, state: &FlockState) -> Result<ActionMatrix>;
}

impl<P: Policy + ?Sized> Policy for Box<P> {
    fn reset(&mut self) {
        (**self).reset()
    }

    fn act(&mut self, state: &FlockState) -> Result<ActionMatrix> {
        (**self).act(state)
    }
}

/// Evaluates the inner policy in units scaled down by `l`: `l · π(x / l)`.
#[derive(Debug, Clone)]
pub struct ScaledPolicy<P> {
    inner: P,
    scale: f64,
}

impl<P> ScaledPolicy<P> {
    pub fn into_inner(self) -> P {
        self.inner
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

pub fn scaled_policy<P: Policy>(policy: P, scale: f64) -> Result<ScaledPolicy<P>> {
    positive("policy_scale", scale)?;
    Ok(ScaledPolicy {
        inner: policy,
        scale,
    })
}

impl<P: Policy> Policy for ScaledPolicy<P> {
    fn reset(&mut self) {
        self.inner.reset()
    }

    fn act(&mut self, state: &FlockState) -> Result<ActionMatrix> {
        if self.scale == 1.0 {
            return self.inner.act(state);
        }
        let inv = 1.0 / self.scale;
        let scaled = FlockState {
            positions: state.positions.iter().map(|&r| r * inv).collect(),
            velocities: state.velocities.iter().map(|&v| v * inv).collect(),
            leader_mask: state.leader_mask.clone(),
            step_index: state.step_index,
        };
        let mut actions = self.inner.act(&scaled)?;
        for u in &mut actions.0 {
            *u = *u * self.scale;
        }
        Ok(actions)
    }
}

/// Applies zero acceleration everywhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPolicy;

impl Policy for ZeroPolicy {
    fn act(&mut self, state: &FlockState) -> Result<ActionMatrix> {
        Ok(ActionMatrix::zeros(state.n_agents()))
    }
}
