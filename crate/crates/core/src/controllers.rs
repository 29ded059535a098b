//! Flocking controllers and the node features the learned controller sees.
//!
//! The pairwise potential is `U(d) = 1/d² + ln d²` for `d < ρ` and the
//! constant `1/ρ² + ln ρ²` beyond. It diverges at contact, is minimal at
//! unit spacing and is flat past the cutoff. Its gradient with respect to
//! `r_i` is `2·r_ij/d⁴ − 2·r_ij/d²` with `r_ij = r_j − r_i`.

use serde::{Deserialize, Serialize};

use crate::dynamics::{ActionMatrix, Policy};
use crate::error::{invalid, Result};
use crate::geometry::Vec2;
use crate::swarm::{build_comm_graph, CommGraph, FeatureMatrix, FlockState};

/// Width of the per-agent feature vector.
pub const FEATURE_DIM: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PotentialParams {
    /// Cutoff radius `ρ` (m).
    pub rho: f64,
    /// Distances below this are treated as this (m).
    pub epsilon_dist: f64,
}

impl Default for PotentialParams {
    fn default() -> Self {
        Self {
            rho: 1.0,
            epsilon_dist: 1e-3,
        }
    }
}

impl PotentialParams {
    pub fn new(rho: f64, epsilon_dist: f64) -> Result<Self> {
        let p = Self { rho, epsilon_dist };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 1.0) || !self.rho.is_finite() {
            return Err(invalid("potential_radius", format!("must be at least 1, got {}", self.rho)));
        }
        if !(self.epsilon_dist > 0.0 && self.epsilon_dist < 0.1) {
            return Err(invalid(
                "epsilon_dist",
                format!("must lie in (0, 0.1), got {}", self.epsilon_dist),
            ));
        }
        Ok(())
    }
}

/// Collision-avoidance energy for relative position `r_ij`.
pub fn potential(r_ij: Vec2, params: &PotentialParams) -> f64 {
    let d = r_ij.norm().max(params.epsilon_dist);
    let d = d.min(params.rho);
    let d2 = d * d;
    1.0 / d2 + d2.ln()
}

/// `∇_{r_i} U(r_i, r_j)`.
pub fn potential_gradient(r_i: Vec2, r_j: Vec2, params: &PotentialParams) -> Vec2 {
    let r_ij = r_j - r_i;
    let d = r_ij.norm();
    if d >= params.rho {
        return Vec2::ZERO;
    }
    let (inv_d2, inv_d4) = guarded_inverse_powers(r_ij, params.epsilon_dist);
    r_ij * (2.0 * inv_d4 - 2.0 * inv_d2)
}

/// `(1/d², 1/d⁴)` with `d` floored at `epsilon`.
#[inline]
fn guarded_inverse_powers(r_ij: Vec2, epsilon: f64) -> (f64, f64) {
    let d2 = r_ij.norm_sq().max(epsilon * epsilon);
    let inv_d2 = 1.0 / d2;
    (inv_d2, inv_d2 * inv_d2)
}

#[inline]
fn pair_term(state: &FlockState, i: usize, j: usize, params: &PotentialParams) -> Vec2 {
    (state.velocities[i] - state.velocities[j])
        + potential_gradient(state.positions[i], state.positions[j], params)
}

/// Centralized expert: every agent sums over every other agent.
pub fn global_controller(state: &FlockState, params: &PotentialParams) -> ActionMatrix {
    let n = state.n_agents();
    ActionMatrix(
        (0..n)
            .map(|i| {
                let mut acc = Vec2::ZERO;
                for j in (0..n).filter(|&j| j != i) {
                    acc -= pair_term(state, i, j, params);
                }
                acc
            })
            .collect(),
    )
}

/// The same law with sums restricted to communication neighbors.
pub fn local_controller(
    state: &FlockState,
    graph: &CommGraph,
    params: &PotentialParams,
) -> ActionMatrix {
    ActionMatrix(
        (0..state.n_agents())
            .map(|i| {
                let mut acc = Vec2::ZERO;
                for &j in graph.neighbors(i) {
                    acc -= pair_term(state, i, j, params);
                }
                acc
            })
            .collect(),
    )
}

/// Per-agent 6-vector `[Σ(v_i − v_j), Σ r_ij/d⁴, Σ r_ij/d²]` over neighbors.
///
/// The local controller is recovered as `−f₁ − 2·f₂ + 2·f₃` when every
/// neighbor lies inside the potential cutoff.
pub fn compute_features(state: &FlockState, graph: &CommGraph, epsilon_dist: f64) -> FeatureMatrix {
    let n = state.n_agents();
    let mut out = FeatureMatrix::zeros(n, FEATURE_DIM);
    for i in 0..n {
        let mut dv = Vec2::ZERO;
        let mut f4 = Vec2::ZERO;
        let mut f2 = Vec2::ZERO;
        for &j in graph.neighbors(i) {
            dv += state.velocities[i] - state.velocities[j];
            let r_ij = state.positions[j] - state.positions[i];
            let (inv_d2, inv_d4) = guarded_inverse_powers(r_ij, epsilon_dist);
            f4 += r_ij * inv_d4;
            f2 += r_ij * inv_d2;
        }
        out.row_mut(i).copy_from_slice(&[dv.x, dv.y, f4.x, f4.y, f2.x, f2.y]);
    }
    out
}

/// Optional symmetric clip of feature magnitudes.
pub fn clip_features(features: &mut FeatureMatrix, limit: f64) {
    for i in 0..features.n_agents() {
        for v in features.row_mut(i) {
            *v = v.clamp(-limit, limit);
        }
    }
}

/// The centralized expert as a [`Policy`].
#[derive(Debug, Clone, Copy)]
pub struct GlobalPolicy {
    pub params: PotentialParams,
}

impl Policy for GlobalPolicy {
    fn act(&mut self, state: &FlockState) -> Result<ActionMatrix> {
        Ok(global_controller(state, &self.params))
    }
}

/// The radius-limited baseline as a [`Policy`].
#[derive(Debug, Clone, Copy)]
pub struct LocalPolicy {
    pub params: PotentialParams,
    pub comm_radius: f64,
}

impl Policy for LocalPolicy {
    fn act(&mut self, state: &FlockState) -> Result<ActionMatrix> {
        let graph = build_comm_graph(state, self.comm_radius)?;
        Ok(local_controller(state, &graph, &self.params))
    }
}
