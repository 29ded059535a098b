//! Decentralized flocking with delayed-aggregation graph neural networks.
//!
//! Agents are double integrators that only talk to neighbors inside a
//! communication radius. Each agent keeps a short history of multi-hop
//! aggregated features and feeds it to a shared network trained by
//! imitating a centralized controller.

pub mod aggregation;
pub mod controllers;
pub mod dynamics;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod gnn;
pub mod imitation;
pub mod nn;
pub mod rng;
pub mod swarm;

pub use error::{FlockError, Result};
pub use geometry::Vec2;
