//! Named random streams.
//!
//! Every consumer of randomness in the workspace draws from its own ChaCha8
//! stream derived from (seed, stream id). Streams are independent: consuming
//! any number of draws from one never shifts another, so e.g. jittering phase
//! durations (scheduling stream) cannot perturb sensor noise draws.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Sensor noise added to committed simulation states.
pub const NOISE_STREAM: u64 = 1;
/// Phase-duration jitter scheduling.
pub const SCHED_STREAM: u64 = 2;
/// Window-origin sampling for dataset splits.
pub const SPLIT_STREAM: u64 = 3;
/// Sensor-fault injection (point anomalies, dead sensors).
pub const ANOMALY_STREAM: u64 = 4;
/// Data augmentation draws (added noise, time-warp jitter).
pub const AUGMENT_STREAM: u64 = 5;
/// Model parameter initialization.
pub const INIT_STREAM: u64 = 6;
/// Minibatch shuffling during training.
pub const SHUFFLE_STREAM: u64 = 7;

/// The generator for one named stream of a seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
