//! Delayed aggregation over time-varying shift operators.
//!
//! `y[0]` at step `n` is the feature matrix `x_n`; for `k ≥ 1`,
//! `y[k]_n = S_n · y[k-1]_{n-1}`. Unrolled, `y[k]_n = S_n ⋯ S_{n-k+1} · x_{n-k}`:
//! each row carries `k`-step-old state diffused through `k` successive graphs
//! using one exchange per step.
//!
//! Two equivalent implementations live here: a centralized update over the
//! whole flock, and a per-agent message-passing round in which each agent
//! sees only its mailbox, its own row of `S_n` and its own observation.

use std::collections::BTreeMap;

use crate::error::{FlockError, Result};
use crate::swarm::{apply_shift_into, CommGraph, FeatureMatrix, ShiftOperator};

/// The `K` delayed diffusion signals of the whole flock.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationState {
    buffers: Vec<FeatureMatrix>,
    scratch: FeatureMatrix,
}

impl AggregationState {
    /// All-zero history of depth `k` for `n_agents` agents with `dim` features.
    pub fn new(n_agents: usize, dim: usize, k: usize) -> Result<Self> {
        if k == 0 || dim == 0 || n_agents == 0 {
            return Err(FlockError::InvalidParam {
                field: "K",
                reason: format!("need K, p, N >= 1 (got K={k}, p={dim}, N={n_agents})"),
            });
        }
        Ok(Self {
            buffers: vec![FeatureMatrix::zeros(n_agents, dim); k],
            scratch: FeatureMatrix::zeros(n_agents, dim),
        })
    }

    #[inline]
    pub fn depth(&self) -> usize {
        self.buffers.len()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.buffers[0].dim()
    }

    #[inline]
    pub fn n_agents(&self) -> usize {
        self.buffers[0].n_agents()
    }

    /// `y[k]` at the current step.
    pub fn buffer(&self, k: usize) -> &FeatureMatrix {
        &self.buffers[k]
    }

    pub fn reset(&mut self) {
        for b in &mut self.buffers {
            *b = FeatureMatrix::zeros(b.n_agents(), b.dim());
        }
    }

    /// Advances one step with shift operator `S_n` and fresh features `x_n`.
    pub fn update(&mut self, shift: &ShiftOperator, features: &FeatureMatrix) -> Result<()> {
        if features.n_agents() != self.n_agents() || features.dim() != self.dim() {
            return Err(FlockError::Dimension(format!(
                "features are {}x{}, aggregation expects {}x{}",
                features.n_agents(),
                features.dim(),
                self.n_agents(),
                self.dim()
            )));
        }
        if shift.n_agents() != self.n_agents() {
            return Err(FlockError::Dimension(format!(
                "shift operator has {} agents, aggregation has {}",
                shift.n_agents(),
                self.n_agents()
            )));
        }
        // Descending k so that y[k] reads the previous step's y[k-1].
        for k in (1..self.depth()).rev() {
            apply_shift_into(shift, &self.buffers[k - 1], &mut self.scratch)?;
            std::mem::swap(&mut self.buffers[k], &mut self.scratch);
        }
        self.buffers[0].clone_from(features);
        Ok(())
    }

    /// Agent `i`'s aggregation sequence: row `k` is `[y[k]]_i`.
    pub fn sequence(&self, i: usize) -> Result<AggregationSequence> {
        if i >= self.n_agents() {
            return Err(FlockError::IndexOutOfRange {
                index: i,
                n: self.n_agents(),
            });
        }
        let dim = self.dim();
        let mut data = Vec::with_capacity(self.depth() * dim);
        for b in &self.buffers {
            data.extend_from_slice(b.row(i));
        }
        Ok(AggregationSequence {
            agent: i,
            depth: self.depth(),
            dim,
            data,
        })
    }

    /// Writes agent `i`'s flattened sequence into `out` (length `K·p`).
    pub(crate) fn write_sequence(&self, i: usize, out: &mut [f64]) {
        let dim = self.dim();
        for (k, b) in self.buffers.iter().enumerate() {
            out[k * dim..(k + 1) * dim].copy_from_slice(b.row(i));
        }
    }
}

pub fn init_aggregation(n_agents: usize, dim: usize, k: usize) -> Result<AggregationState> {
    AggregationState::new(n_agents, dim, k)
}

/// Functional form of [`AggregationState::update`].
pub fn update_aggregation(
    agg: &AggregationState,
    shift: &ShiftOperator,
    features: &FeatureMatrix,
) -> Result<AggregationState> {
    let mut next = agg.clone();
    next.update(shift, features)?;
    Ok(next)
}

pub fn extract_z(agg: &AggregationState, i: usize) -> Result<AggregationSequence> {
    agg.sequence(i)
}

/// One agent's `K × p` aggregation sequence, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationSequence {
    pub agent: usize,
    depth: usize,
    dim: usize,
    data: Vec<f64>,
}

impl AggregationSequence {
    pub fn zeros(agent: usize, depth: usize, dim: usize) -> Self {
        Self {
            agent,
            depth,
            dim,
            data: vec![0.0; depth * dim],
        }
    }

    pub fn from_flat(agent: usize, depth: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != depth * dim {
            return Err(FlockError::Dimension(format!(
                "{} values for a {depth}x{dim} sequence",
                data.len()
            )));
        }
        Ok(Self {
            agent,
            depth,
            dim,
            data,
        })
    }

    #[inline]
    pub fn depth(&self) -> usize {
        self.depth
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    /// Row-major flattening, the network input layout.
    #[inline]
    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Wire form: agent id, K, p as little-endian `u32`, then `K·p`
    /// little-endian `f64` row-major.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.data.len());
        out.extend_from_slice(&(self.agent as u32).to_le_bytes());
        out.extend_from_slice(&(self.depth as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let word = |at: usize| -> Result<usize> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
                .ok_or_else(|| FlockError::Dimension("truncated message header".into()))
        };
        let (agent, depth, dim) = (word(0)?, word(4)?, word(8)?);
        let body = &bytes[12..];
        if body.len() != 8 * depth * dim {
            return Err(FlockError::Dimension(format!(
                "message body has {} bytes, expected {}",
                body.len(),
                8 * depth * dim
            )));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::from_flat(agent, depth, dim, data)
    }
}

/// Messages an agent received this round, keyed by sender.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AgentMailbox {
    messages: BTreeMap<usize, AggregationSequence>,
}

impl AgentMailbox {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores a message; a second message from the same sender in one round
    /// is a protocol violation.
    pub fn receive(&mut self, owner: usize, msg: AggregationSequence) -> Result<()> {
        let sender = msg.agent;
        if self.messages.insert(sender, msg).is_some() {
            return Err(FlockError::Protocol {
                agent: owner,
                reason: format!("second message from agent {sender} in one round"),
            });
        }
        Ok(())
    }

    pub fn get(&self, sender: usize) -> Option<&AggregationSequence> {
        self.messages.get(&sender)
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn senders(&self) -> impl Iterator<Item = usize> + '_ {
        self.messages.keys().copied()
    }
}

/// What one agent broadcasts at the end of a round.
#[derive(Debug, Clone, PartialEq)]
pub struct Broadcast {
    pub sender: usize,
    pub payload: Vec<u8>,
}

/// Routes each broadcast to the agents that can hear its sender under
/// `graph`, producing one mailbox per agent. Every sender also keeps a
/// loopback copy of its own broadcast, which diagonal shift weights use.
pub fn deliver(broadcasts: &[Broadcast], graph: &CommGraph) -> Result<Vec<AgentMailbox>> {
    let n = graph.n_agents();
    let mut boxes = vec![AgentMailbox::new(); n];
    for b in broadcasts {
        if b.sender >= n {
            return Err(FlockError::IndexOutOfRange { index: b.sender, n });
        }
        let msg = AggregationSequence::decode(&b.payload)?;
        if msg.agent != b.sender {
            return Err(FlockError::Protocol {
                agent: b.sender,
                reason: format!("payload claims sender {}", msg.agent),
            });
        }
        for &receiver in graph.neighbors(b.sender) {
            boxes[receiver].receive(receiver, msg.clone())?;
        }
        boxes[b.sender].receive(b.sender, msg)?;
    }
    Ok(boxes)
}

/// Agent-local step of the distributed aggregation protocol.
///
/// Needs the previous-step sequence of every agent in the support of the
/// agent's row of `S_n` in `mailbox`. Messages from outside that support,
/// other than the agent's own loopback, are rejected.
pub fn agent_round(
    agent: usize,
    mailbox: &AgentMailbox,
    shift_row: &[(usize, f64)],
    observation: &[f64],
    depth: usize,
) -> Result<AggregationSequence> {
    let dim = observation.len();
    let mut z = AggregationSequence::zeros(agent, depth, dim);
    z.data[..dim].copy_from_slice(observation);
    for &(j, w) in shift_row {
        let prev = mailbox.get(j).ok_or_else(|| FlockError::Protocol {
            agent,
            reason: format!("missing message from agent {j}"),
        })?;
        if prev.depth != depth || prev.dim != dim {
            return Err(FlockError::Protocol {
                agent,
                reason: format!(
                    "neighbor {j} sent a {}x{} sequence, expected {depth}x{dim}",
                    prev.depth, prev.dim
                ),
            });
        }
        for k in 1..depth {
            let src = prev.row(k - 1);
            let dst = &mut z.data[k * dim..(k + 1) * dim];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }
    if let Some(extra) = mailbox
        .senders()
        .find(|&s| s != agent && !shift_row.iter().any(|&(j, _)| j == s))
    {
        return Err(FlockError::Protocol {
            agent,
            reason: format!("unexpected message from non-neighbor {extra}"),
        });
    }
    Ok(z)
}

/// Output of one synchronous round.
#[derive(Debug, Clone)]
pub struct RoundOutput {
    pub sequences: Vec<AggregationSequence>,
    pub outgoing: Vec<Broadcast>,
}

/// Runs [`agent_round`] for every agent. Agents share nothing but the
/// read-only inputs, so the per-agent work is independent.
pub fn distributed_round(
    mailboxes: &[AgentMailbox],
    shift: &ShiftOperator,
    observations: &FeatureMatrix,
    depth: usize,
) -> Result<RoundOutput> {
    let n = shift.n_agents();
    if mailboxes.len() != n || observations.n_agents() != n {
        return Err(FlockError::Dimension(format!(
            "{} mailboxes and {} observations for {n} agents",
            mailboxes.len(),
            observations.n_agents()
        )));
    }
    let sequences = (0..n)
        .map(|i| agent_round(i, &mailboxes[i], shift.row(i), observations.row(i), depth))
        .collect::<Result<Vec<_>>>()?;
    let outgoing = sequences
        .iter()
        .map(|z| Broadcast {
            sender: z.agent,
            payload: z.encode(),
        })
        .collect();
    Ok(RoundOutput {
        sequences,
        outgoing,
    })
}

/// Drives [`distributed_round`] over a trajectory: keeps last round's
/// broadcasts and delivers them over the current graph.
#[derive(Debug, Clone)]
pub struct DistributedAggregator {
    depth: usize,
    dim: usize,
    pending: Vec<Broadcast>,
}

impl DistributedAggregator {
    /// Cold start: every agent's previous sequence is zero.
    pub fn new(n_agents: usize, dim: usize, depth: usize) -> Self {
        let pending = (0..n_agents)
            .map(|i| Broadcast {
                sender: i,
                payload: AggregationSequence::zeros(i, depth, dim).encode(),
            })
            .collect();
        Self {
            depth,
            dim,
            pending,
        }
    }

    pub fn reset(&mut self) {
        *self = Self::new(self.pending.len(), self.dim, self.depth);
    }

    pub fn round(
        &mut self,
        graph: &CommGraph,
        shift: &ShiftOperator,
        observations: &FeatureMatrix,
    ) -> Result<Vec<AggregationSequence>> {
        let mailboxes = deliver(&self.pending, graph)?;
        let out = distributed_round(&mailboxes, shift, observations, self.depth)?;
        self.pending = out.outgoing;
        Ok(out.sequences)
    }
}
