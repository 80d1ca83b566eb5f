//! Reproducible random streams.
//!
//! Every replication draws from its own ChaCha8 stream: the master seed fixes
//! the key and the replication index selects the stream, so results do not
//! depend on how replications are scheduled across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type StudyRng = ChaCha8Rng;

/// Generator for replication `index` under `master`.
pub fn stream(master: u64, index: u64) -> StudyRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng
}

/// Master seed for a nested family of streams, e.g. the inner replications of
/// outer replication `index`.
pub fn child_seed(master: u64, index: u64) -> u64 {
    stream(master, index).random()
}

/// Mixes a label into a seed so distinct study cells get unrelated streams.
pub fn labelled(master: u64, label: &str) -> u64 {
    // FNV-1a; stable across platforms and releases.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    child_seed(master ^ h, 0)
}
