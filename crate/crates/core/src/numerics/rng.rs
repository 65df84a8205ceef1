//! Counter-based random streams.
//!
//! A stream is the immutable pair (master_seed, stream_id); every draw is a
//! pure function of (stream, counter). This gives bit-identical replay and
//! lets independent trajectories own disjoint streams with no shared mutable
//! state, so ensemble results cannot depend on scheduling.

use super::Vector;
use serde::{Deserialize, Serialize};

/// splitmix64 finalizer: bijective on u64 with strong avalanche.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;
const STREAM_SALT: u64 = 0x6a09_e667_f3bc_c908;

/// Immutable descriptor of one random stream. Draw positions are carried by
/// the caller (or a [`NormalCursor`]), never by the stream itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    pub master_seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        RngStream {
            master_seed,
            stream_id,
        }
    }

    /// Raw 64-bit word at `counter`.
    #[inline]
    pub fn raw(&self, counter: u64) -> u64 {
        let key = mix64(self.master_seed ^ mix64(self.stream_id ^ STREAM_SALT));
        mix64(key ^ mix64(counter.wrapping_mul(GOLDEN).wrapping_add(self.stream_id)))
    }

    /// Uniform draw in the open interval (0, 1) at `counter`.
    #[inline]
    pub fn uniform(&self, counter: u64) -> f64 {
        // top 53 bits, offset by half an ulp so 0 and 1 are unreachable
        ((self.raw(counter) >> 11) as f64 + 0.5) * (1.0 / 9007199254740992.0)
    }

    /// Standard normal draw at `index` (Box-Muller, cosine branch).
    /// Each index consumes two uniform counters, so draws are random-access.
    #[inline]
    pub fn normal(&self, index: u64) -> f64 {
        let u1 = self.uniform(2 * index);
        let u2 = self.uniform(2 * index + 1);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Sequential cursor over the stream's normal draws, starting at 0.
    pub fn cursor(&self) -> NormalCursor {
        NormalCursor {
            stream: *self,
            next: 0,
        }
    }
}

/// Explicit draw position over a stream's normal sequence.
#[derive(Clone, Copy, Debug)]
pub struct NormalCursor {
    stream: RngStream,
    next: u64,
}

impl NormalCursor {
    pub fn next(&mut self) -> f64 {
        let v = self.stream.normal(self.next);
        self.next += 1;
        v
    }

    pub fn position(&self) -> u64 {
        self.next
    }
}

/// `count` i.i.d. standard normal draws from the head of the stream.
pub fn gaussian_draw(stream: &RngStream, count: usize) -> Vector {
    assert!(count >= 1, "gaussian_draw requires count >= 1");
    Vector((0..count as u64).map(|i| stream.normal(i)).collect())
}
