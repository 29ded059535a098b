#![allow(dead_code)]

use aggflock::controllers::FEATURE_DIM;
use aggflock::swarm::{CommGraph, FeatureMatrix, FlockState, ShiftOperator};
use aggflock::Vec2;
use rand::Rng;

pub fn random_state<R: Rng>(rng: &mut R, n: usize, half_width: f64, v_max: f64) -> FlockState {
    let positions = (0..n)
        .map(|_| Vec2::new(rng.random_range(-half_width..half_width), rng.random_range(-half_width..half_width)))
        .collect();
    let velocities = (0..n)
        .map(|_| Vec2::new(rng.random_range(-v_max..v_max), rng.random_range(-v_max..v_max)))
        .collect();
    FlockState::new(positions, velocities).unwrap()
}

pub fn random_features<R: Rng>(rng: &mut R, n: usize, dim: usize) -> FeatureMatrix {
    FeatureMatrix::from_vec(n, dim, (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn feature_dim() -> usize {
    FEATURE_DIM
}

pub type Dense = Vec<Vec<f64>>;

pub fn dense_mul(a: &Dense, b: &Dense) -> Dense {
    let n = a.len();
    let m = b[0].len();
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for (l, row) in b.iter().enumerate() {
            let w = a[i][l];
            for j in 0..m {
                out[i][j] += w * row[j];
            }
        }
    }
    out
}

pub fn features_dense(x: &FeatureMatrix) -> Dense {
    (0..x.n_agents()).map(|i| x.row(i).to_vec()).collect()
}

pub fn adjacency(g: &CommGraph) -> Dense {
    let n = g.n_agents();
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        for &j in g.neighbors(i) {
            a[i][j] = 1.0;
        }
    }
    a
}

pub fn shift_dense(s: &ShiftOperator) -> Dense {
    s.to_dense()
}

pub fn max_abs(a: &Dense, b: &Dense) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(r, s)| r.iter().zip(s).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

/// Random permutation of `0..n`.
pub fn permutation<R: Rng>(rng: &mut R, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Random walk of a small flock so the disc graph changes between steps.
pub fn wandering_states<R: Rng>(rng: &mut R, n: usize, steps: usize) -> Vec<FlockState> {
    let mut s = random_state(rng, n, 1.5, 1.0);
    let mut out = vec![s.clone()];
    for _ in 1..steps {
        for r in &mut s.positions {
            *r += Vec2::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4));
        }
        for v in &mut s.velocities {
            *v += Vec2::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
        }
        s.step_index += 1;
        out.push(s.clone());
    }
    out
}

/// `max |a - b|`, divided by `max(1, scale)` where `scale` bounds the
/// magnitudes the compared values were computed from. Reordered sums of
/// large terms differ in the last bits, so equality is checked relative to
/// the inputs.
pub fn scaled_diff(a: &[f64], b: &[f64], scale: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / scale.max(1.0)
}

pub fn max_magnitude(x: &FeatureMatrix) -> f64 {
    x.as_slice().iter().fold(0.0, |m, v| m.max(v.abs()))
}
