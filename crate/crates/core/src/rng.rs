//! Uniform streams and deterministic substreams.
//!
//! Samplers in this crate draw from a [`UniformSource`], which yields numbers
//! in `(0, 1]`. Any [`rand::RngCore`] is a source that never runs dry;
//! [`ReplayUniforms`] replays a fixed sequence and fails once exhausted, which
//! is what hand-traced tests use.
//!
//! Parallel work is seeded through [`substream`]: a ChaCha8 generator keyed by
//! the run seed and positioned on a stream derived from an index path such as
//! `(grid point, chunk)`. The same path always yields the same stream, so
//! results do not depend on how rayon schedules the work.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A stream of independent uniforms on `(0, 1]`.
pub trait UniformSource {
    fn uniform(&mut self) -> Result<f64>;
}

impl<R: RngCore + ?Sized> UniformSource for R {
    #[inline]
    fn uniform(&mut self) -> Result<f64> {
        // 53 random mantissa bits, mapped to (0, 1].
        let bits = self.next_u64() >> 11;
        Ok((bits + 1) as f64 * (1.0 / (1u64 << 53) as f64))
    }
}

/// Replays a fixed list of uniforms; errors when it runs out.
#[derive(Debug, Clone)]
pub struct ReplayUniforms {
    values: Vec<f64>,
    pos: usize,
}

impl ReplayUniforms {
    pub fn new(values: impl Into<Vec<f64>>) -> Self {
        ReplayUniforms {
            values: values.into(),
            pos: 0,
        }
    }

    pub fn consumed(&self) -> usize {
        self.pos
    }
}

impl UniformSource for ReplayUniforms {
    fn uniform(&mut self) -> Result<f64> {
        match self.values.get(self.pos) {
            Some(&u) => {
                self.pos += 1;
                Ok(u)
            }
            None => Err(Error::StreamExhausted { consumed: self.pos }),
        }
    }
}

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The generator for the run seeded by `seed`, stream 0.
pub fn root(seed: u64) -> ChaCha8Rng {
    substream(seed, &[])
}

/// Deterministic substream for `seed` addressed by an index path.
pub fn substream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut state = seed;
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    let mut stream_state = 0x6A09_E667_F3BC_C908u64 ^ path.len() as u64;
    let mut stream = splitmix64(&mut stream_state);
    for &index in path {
        stream_state ^= index.wrapping_mul(0xD6E8_FEB8_6659_FD93);
        stream = splitmix64(&mut stream_state) ^ stream.rotate_left(17);
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}
