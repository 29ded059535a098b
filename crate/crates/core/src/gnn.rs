//! The learned decentralized controller: observe, aggregate, apply the
//! shared per-node network.

use serde::{Deserialize, Serialize};

use crate::aggregation::{AggregationState, DistributedAggregator};
use crate::controllers::{clip_features, compute_features, FEATURE_DIM};
use crate::dynamics::{ActionMatrix, Policy};
use crate::error::{invalid, FlockError, Result};
use crate::geometry::Vec2;
use crate::nn::{check_architecture, MlpParams, Workspace};
use crate::swarm::{build_comm_graph, build_shift_operator, CommGraph, FeatureMatrix, FlockState, ShiftOperator, ShiftScheme};

/// How agents turn raw neighbor measurements into graph signals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureOptions {
    pub shift_scheme: ShiftScheme,
    /// Distance floor in the `1/d²` and `1/d⁴` terms (m).
    pub epsilon_dist: f64,
    /// Symmetric clip on feature magnitudes; off when `None`.
    pub feature_clip: Option<f64>,
}

impl Default for FeatureOptions {
    fn default() -> Self {
        Self {
            shift_scheme: ShiftScheme::MeanNeighbor,
            epsilon_dist: 1e-3,
            feature_clip: None,
        }
    }
}

impl FeatureOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_dist > 0.0 && self.epsilon_dist < 0.1) {
            return Err(invalid(
                "epsilon_dist",
                format!("must lie in (0, 0.1), got {}", self.epsilon_dist),
            ));
        }
        if let Some(c) = self.feature_clip {
            if !(c > 0.0) {
                return Err(invalid("feature_clip", format!("must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Graph, shift operator and features of one step.
#[derive(Debug, Clone)]
pub struct Observation {
    pub graph: CommGraph,
    pub shift: ShiftOperator,
    pub features: FeatureMatrix,
}

pub fn observe(state: &FlockState, comm_radius: f64, opts: &FeatureOptions) -> Result<Observation> {
    let graph = build_comm_graph(state, comm_radius)?;
    let shift = build_shift_operator(&graph, opts.shift_scheme);
    let mut features = compute_features(state, &graph, opts.epsilon_dist);
    if let Some(limit) = opts.feature_clip {
        clip_features(&mut features, limit);
    }
    if let Some(pos) = features.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(FlockError::NonFinite {
            what: "feature",
            step: state.step_index,
            agent: pos / FEATURE_DIM,
        });
    }
    Ok(Observation {
        graph,
        shift,
        features,
    })
}

/// Aggregation GNN controller for a whole flock.
///
/// Every agent runs the same network on its own aggregation sequence. With
/// verification on, the per-agent message-passing protocol runs alongside the
/// centralized update and any disagreement above `1e-12` is an error.
#[derive(Debug, Clone)]
pub struct GnnPolicy {
    params: MlpParams,
    comm_radius: f64,
    opts: FeatureOptions,
    agg: Option<AggregationState>,
    distributed: Option<DistributedAggregator>,
    verify: bool,
    max_verify_error: f64,
    ws: Workspace,
    input: Vec<f64>,
}

/// Largest tolerated distributed/centralized difference.
pub const VERIFY_TOLERANCE: f64 = 1e-12;

impl GnnPolicy {
    pub fn new(params: MlpParams, comm_radius: f64, opts: FeatureOptions) -> Result<Self> {
        check_architecture(&params, params.architecture().history_depth, FEATURE_DIM)?;
        if params.architecture().output_dim != 2 {
            return Err(FlockError::ArchitectureMismatch(format!(
                "controller network must have 2 outputs, has {}",
                params.architecture().output_dim
            )));
        }
        opts.validate()?;
        let ws = Workspace::new(params.architecture());
        let input = vec![0.0; params.architecture().input_dim()];
        Ok(Self {
            params,
            comm_radius,
            opts,
            agg: None,
            distributed: None,
            verify: false,
            max_verify_error: 0.0,
            ws,
            input,
        })
    }

    pub fn with_verification(mut self, on: bool) -> Self {
        self.verify = on;
        self
    }

    pub fn history_depth(&self) -> usize {
        self.params.architecture().history_depth
    }

    pub fn params(&self) -> &MlpParams {
        &self.params
    }

    /// Largest distributed/centralized difference seen since the last reset.
    pub fn max_verify_error(&self) -> f64 {
        self.max_verify_error
    }

    pub fn aggregation(&self) -> Option<&AggregationState> {
        self.agg.as_ref()
    }

    /// Folds one observation into the aggregation history.
    pub fn absorb(&mut self, obs: &Observation, step: usize) -> Result<()> {
        let n = obs.features.n_agents();
        let k = self.history_depth();
        if self.agg.as_ref().map(AggregationState::n_agents) != Some(n) {
            self.agg = Some(AggregationState::new(n, FEATURE_DIM, k)?);
            self.distributed = None;
        }
        let agg = self.agg.as_mut().expect("initialized above");
        agg.update(&obs.shift, &obs.features)?;

        if self.verify {
            let dist = self
                .distributed
                .get_or_insert_with(|| DistributedAggregator::new(n, FEATURE_DIM, k));
            let seqs = dist.round(&obs.graph, &obs.shift, &obs.features)?;
            let mut worst = 0.0f64;
            for (i, z) in seqs.iter().enumerate() {
                worst = worst.max(z.max_abs_diff(&agg.sequence(i)?));
            }
            self.max_verify_error = self.max_verify_error.max(worst);
            if worst > VERIFY_TOLERANCE {
                return Err(FlockError::DistributedMismatch { step, error: worst });
            }
        }
        Ok(())
    }

    /// Network outputs for every agent from the current aggregation state.
    pub fn infer(&mut self) -> Result<ActionMatrix> {
        let agg = self
            .agg
            .as_ref()
            .ok_or_else(|| invalid("gnn", "infer called before any observation"))?;
        let n = agg.n_agents();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            agg.write_sequence(i, &mut self.input);
            let y = self.params.forward_into(&self.input, &mut self.ws);
            out.push(Vec2::new(y[0], y[1]));
        }
        Ok(ActionMatrix(out))
    }
}

impl Policy for GnnPolicy {
    fn reset(&mut self) {
        if let Some(agg) = &mut self.agg {
            agg.reset();
        }
        self.distributed = None;
        self.max_verify_error = 0.0;
    }

    fn act(&mut self, state: &FlockState) -> Result<ActionMatrix> {
        let obs = observe(state, self.comm_radius, &self.opts)?;
        self.absorb(&obs, state.step_index)?;
        self.infer()
    }
}
