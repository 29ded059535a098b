//! Flock state, communication graphs and graph shift operators.
//!
//! The communication graph is the disc graph at radius `R`: agents `i` and
//! `j` are neighbors when `0 < |r_j - r_i| < R`. A shift operator is a sparse
//! matrix supported on that graph; multiplying by it is one round of
//! neighbor exchange.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, FlockError, Result};
use crate::geometry::Vec2;

/// Positions, velocities and leader flags of a planar flock at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct FlockState {
    pub positions: Vec<Vec2>,
    pub velocities: Vec<Vec2>,
    pub leader_mask: Vec<bool>,
    pub step_index: usize,
}

impl FlockState {
    /// Builds a follower-only state at step 0.
    pub fn new(positions: Vec<Vec2>, velocities: Vec<Vec2>) -> Result<Self> {
        let n = positions.len();
        Self::with_leaders(positions, velocities, vec![false; n])
    }

    pub fn with_leaders(
        positions: Vec<Vec2>,
        velocities: Vec<Vec2>,
        leader_mask: Vec<bool>,
    ) -> Result<Self> {
        let state = Self {
            positions,
            velocities,
            leader_mask,
            step_index: 0,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if n < 2 {
            return Err(invalid("n_agents", format!("need at least 2 agents, got {n}")));
        }
        if self.velocities.len() != n || self.leader_mask.len() != n {
            return Err(FlockError::Dimension(format!(
                "positions {}, velocities {}, leader_mask {}",
                n,
                self.velocities.len(),
                self.leader_mask.len()
            )));
        }
        self.check_finite()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (i, (r, v)) in self.positions.iter().zip(&self.velocities).enumerate() {
            if !r.is_finite() {
                return Err(FlockError::NonFinite {
                    what: "position",
                    step: self.step_index,
                    agent: i,
                });
            }
            if !v.is_finite() {
                return Err(FlockError::NonFinite {
                    what: "velocity",
                    step: self.step_index,
                    agent: i,
                });
            }
        }
        Ok(())
    }

    #[inline]
    pub fn n_agents(&self) -> usize {
        self.positions.len()
    }

    pub fn n_leaders(&self) -> usize {
        self.leader_mask.iter().filter(|&&l| l).count()
    }

    /// Mean velocity, accumulated relative to agent 0 so that a flock in
    /// exact consensus has exactly zero deviation.
    pub fn mean_velocity(&self) -> Vec2 {
        let base = self.velocities[0];
        let sum = self
            .velocities
            .iter()
            .fold(Vec2::ZERO, |acc, &v| acc + (v - base));
        base + sum / self.n_agents() as f64
    }

    /// Reorders agents so that agent `perm[i]` of `self` becomes agent `i`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            positions: perm.iter().map(|&p| self.positions[p]).collect(),
            velocities: perm.iter().map(|&p| self.velocities[p]).collect(),
            leader_mask: perm.iter().map(|&p| self.leader_mask[p]).collect(),
            step_index: self.step_index,
        }
    }
}

/// Radius-induced communication graph at one step.
///
/// `neighbors[i]` lists, in ascending order, every `j` that may send to `i`.
/// The disc relation is symmetric, so `j ∈ neighbors[i] ⇔ i ∈ neighbors[j]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommGraph {
    neighbors: Vec<Vec<usize>>,
}

impl CommGraph {
    /// Graph with no edges.
    pub fn empty(n_agents: usize) -> Self {
        Self {
            neighbors: vec![Vec::new(); n_agents],
        }
    }

    /// Builds a symmetric graph from undirected edges. Self pairs and
    /// duplicates are rejected.
    pub fn from_undirected_edges(n_agents: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut sets = vec![BTreeSet::new(); n_agents];
        for &(a, b) in edges {
            if a >= n_agents || b >= n_agents {
                return Err(FlockError::IndexOutOfRange {
                    index: a.max(b),
                    n: n_agents,
                });
            }
            if a == b {
                return Err(invalid("edges", format!("self pair ({a},{a})")));
            }
            if !sets[a].insert(b) || !sets[b].insert(a) {
                return Err(invalid("edges", format!("duplicate edge ({a},{b})")));
            }
        }
        Ok(Self {
            neighbors: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        })
    }

    /// Complete graph on `n_agents` nodes.
    pub fn complete(n_agents: usize) -> Self {
        Self {
            neighbors: (0..n_agents)
                .map(|i| (0..n_agents).filter(|&j| j != i).collect())
                .collect(),
        }
    }

    #[inline]
    pub fn n_agents(&self) -> usize {
        self.neighbors.len()
    }

    #[inline]
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    #[inline]
    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    pub fn min_degree(&self) -> usize {
        self.neighbors.iter().map(Vec::len).min().unwrap_or(0)
    }

    /// Number of ordered pairs `(i, j)`; twice the undirected edge count.
    pub fn n_pairs(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    /// All ordered pairs `(i, j)` in row-major order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().map(move |&j| (i, j)))
    }

    pub fn has_isolated_agent(&self) -> bool {
        self.neighbors.iter().any(Vec::is_empty)
    }

    /// True when every agent neighbors every other agent.
    pub fn is_complete(&self) -> bool {
        let n = self.n_agents();
        self.neighbors.iter().all(|row| row.len() + 1 == n)
    }
}

/// Builds the disc graph: `(i, j)` is present iff `0 < |r_j - r_i| < radius`.
pub fn build_comm_graph(state: &FlockState, radius: f64) -> Result<CommGraph> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(invalid("comm_radius", format!("must be positive and finite, got {radius}")));
    }
    state.check_finite()?;
    let n = state.n_agents();
    let r2 = radius * radius;
    let mut neighbors = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d2 = (state.positions[j] - state.positions[i]).norm_sq();
            if d2 > 0.0 && d2 < r2 {
                neighbors[i].push(j);
                neighbors[j].push(i);
            }
        }
    }
    // Pushes for j < i happen in ascending i, so rows are already sorted.
    Ok(CommGraph { neighbors })
}

/// Edge weighting used to turn a graph into a shift operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftScheme {
    /// `S[i,j] = 1` on every edge.
    BinaryAdjacency,
    /// `S[i,j] = 1 / deg(i)` on every edge; rows are stochastic.
    #[default]
    MeanNeighbor,
}

impl std::str::FromStr for ShiftScheme {
    type Err = FlockError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary_adjacency" | "binary" => Ok(Self::BinaryAdjacency),
            "mean_neighbor" | "mean" => Ok(Self::MeanNeighbor),
            other => Err(invalid(
                "shift_scheme",
                format!("unknown scheme `{other}` (expected binary_adjacency or mean_neighbor)"),
            )),
        }
    }
}

/// Sparse graph shift operator in row-compressed form.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftOperator {
    rows: Vec<Vec<(usize, f64)>>,
}

impl ShiftOperator {
    pub fn zeros(n_agents: usize) -> Self {
        Self {
            rows: vec![Vec::new(); n_agents],
        }
    }

    /// Operator with unit diagonal and no off-diagonal entries.
    pub fn identity(n_agents: usize) -> Self {
        Self {
            rows: (0..n_agents).map(|i| vec![(i, 1.0)]).collect(),
        }
    }

    /// Builds an operator from explicit rows. Column indices must be in range
    /// and unique within a row.
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let n = rows.len();
        for (i, row) in rows.iter().enumerate() {
            let mut seen = BTreeSet::new();
            for &(j, w) in row {
                if j >= n {
                    return Err(FlockError::IndexOutOfRange { index: j, n });
                }
                if !seen.insert(j) {
                    return Err(invalid("shift_operator", format!("duplicate entry ({i},{j})")));
                }
                if !w.is_finite() {
                    return Err(FlockError::NonFinite {
                        what: "shift weight",
                        step: 0,
                        agent: i,
                    });
                }
            }
        }
        Ok(Self { rows })
    }

    #[inline]
    pub fn n_agents(&self) -> usize {
        self.rows.len()
    }

    /// Stored entries of row `i` as `(column, weight)`.
    #[inline]
    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    /// Weight at `(i, j)`, zero when not stored.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i]
            .iter()
            .find(|&&(c, _)| c == j)
            .map_or(0.0, |&(_, w)| w)
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// `P·S·Pᵀ` where agent `perm[i]` of the original becomes agent `i`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = perm.len();
        let mut inverse = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        Self {
            rows: perm
                .iter()
                .map(|&old| {
                    self.rows[old]
                        .iter()
                        .map(|&(j, w)| (inverse[j], w))
                        .collect()
                })
                .collect(),
        }
    }

    /// Dense copy, for oracles and debugging.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.n_agents();
        let mut dense = vec![vec![0.0; n]; n];
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                dense[i][j] = w;
            }
        }
        dense
    }
}

pub fn build_shift_operator(graph: &CommGraph, scheme: ShiftScheme) -> ShiftOperator {
    let rows = (0..graph.n_agents())
        .map(|i| {
            let nbrs = graph.neighbors(i);
            let w = match scheme {
                ShiftScheme::BinaryAdjacency => 1.0,
                ShiftScheme::MeanNeighbor if nbrs.is_empty() => 0.0,
                ShiftScheme::MeanNeighbor => 1.0 / nbrs.len() as f64,
            };
            nbrs.iter().map(|&j| (j, w)).collect()
        })
        .collect();
    ShiftOperator { rows }
}

/// Dense `N × p` matrix of per-agent graph signals, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n_agents: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn zeros(n_agents: usize, dim: usize) -> Self {
        Self {
            n_agents,
            dim,
            data: vec![0.0; n_agents * dim],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(FlockError::Dimension("ragged feature rows".into()));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::from_vec(rows.len(), dim, data)
    }

    pub fn from_vec(n_agents: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_agents * dim {
            return Err(FlockError::Dimension(format!(
                "{} values for a {n_agents}x{dim} feature matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(FlockError::NonFinite {
                what: "feature",
                step: 0,
                agent: pos / dim.max(1),
            });
        }
        Ok(Self {
            n_agents,
            dim,
            data,
        })
    }

    #[inline]
    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = Self::zeros(perm.len(), self.dim);
        for (new, &old) in perm.iter().enumerate() {
            out.row_mut(new).copy_from_slice(self.row(old));
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `S · X`, touching only stored entries of `S`.
pub fn apply_shift(shift: &ShiftOperator, x: &FeatureMatrix) -> Result<FeatureMatrix> {
    let mut out = FeatureMatrix::zeros(x.n_agents(), x.dim());
    apply_shift_into(shift, x, &mut out)?;
    Ok(out)
}

pub(crate) fn apply_shift_into(
    shift: &ShiftOperator,
    x: &FeatureMatrix,
    out: &mut FeatureMatrix,
) -> Result<()> {
    if shift.n_agents() != x.n_agents() {
        return Err(FlockError::Dimension(format!(
            "shift operator has {} agents, features have {}",
            shift.n_agents(),
            x.n_agents()
        )));
    }
    debug_assert_eq!(out.n_agents(), x.n_agents());
    debug_assert_eq!(out.dim(), x.dim());
    for i in 0..x.n_agents() {
        let acc = out.row_mut(i);
        acc.fill(0.0);
        for &(j, w) in shift.row(i) {
            for (a, &v) in acc.iter_mut().zip(x.row(j)) {
                *a += w * v;
            }
        }
    }
    Ok(())
}

/// Agents whose `k`-step-old state can have reached agent `i`.
///
/// `graphs[0]` is the graph at the current step, `graphs[1]` the previous
/// one, and so on. The recursion is `N⁰ = {i}`,
/// `Nᵏ_i(n) = ⋃_{j ∈ N_i(n)} Nᵏ⁻¹_j(n-1)`.
pub fn khop_neighborhood(graphs: &[CommGraph], i: usize, k: usize) -> Result<BTreeSet<usize>> {
    if graphs.len() < k {
        return Err(FlockError::InsufficientHistory {
            needed: k,
            have: graphs.len(),
        });
    }
    let n = graphs.first().map_or(i + 1, CommGraph::n_agents);
    if graphs.iter().any(|g| g.n_agents() != n) {
        return Err(FlockError::Dimension("graph sequence has mixed agent counts".into()));
    }
    if i >= n {
        return Err(FlockError::IndexOutOfRange { index: i, n });
    }
    // Walk forward from `i` through graphs[0], graphs[1], ...: a set-valued
    // unroll of the recursion.
    let mut frontier = BTreeSet::from([i]);
    for graph in &graphs[..k] {
        frontier = frontier
            .iter()
            .flat_map(|&j| graph.neighbors(j).iter().copied())
            .collect();
    }
    Ok(frontier)
}
