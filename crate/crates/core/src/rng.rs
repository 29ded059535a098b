//! Seed splitting.
//!
//! Every random draw in a run descends from one root seed. A stream is a
//! ChaCha8 generator keyed by the root seed, with its 64-bit stream id set to
//! `(purpose << 48) | index`. Distinct (purpose, index) pairs never share a
//! keystream, so a trajectory draws the same numbers whether it runs serially
//! or on a worker thread.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// What a random stream is used for. The discriminant is part of the stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum Purpose {
    /// Network weight initialization.
    ParamInit = 1,
    /// One DAgger training trajectory (initial state + mixture draws).
    Collect = 2,
    /// Minibatch shuffling for one training round.
    Shuffle = 3,
    /// One evaluation episode (initial state, leaders, stochastic timesteps).
    Episode = 4,
    /// Free-standing draws in examples and tests.
    Misc = 15,
}

pub fn stream(root_seed: u64, purpose: Purpose, index: u64) -> SimRng {
    debug_assert!(index < (1 << 48));
    let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
    rng.set_stream(((purpose as u64) << 48) | (index & ((1 << 48) - 1)));
    rng
}
