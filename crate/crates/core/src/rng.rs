//! Named random streams derived from one root seed.
//!
//! Each noise source draws from its own ChaCha stream, so switching one
//! source on or off never shifts the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Process,
    Exploration,
    ZoDirections,
    Drift,
    WarmStart,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Process => 1,
            Stream::Exploration => 2,
            Stream::ZoDirections => 3,
            Stream::Drift => 4,
            Stream::WarmStart => 5,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}

/// Sub-stream for an indexed task (a rollout pair, a sweep cell) within a
/// named stream.
pub fn substream(seed: u64, which: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(which.id() << 32 | (index & 0xFFFF_FFFF));
    rng
}
