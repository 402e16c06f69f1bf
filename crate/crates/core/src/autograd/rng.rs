//! Counter-based deterministic randomness with checkpointable state.
//!
//! The generator is ChaCha8 in counter mode: its full position is the
//! (key, stream, word position) triple, so a checkpoint is a small plain
//! value that can be copied across threads and restored bitwise.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::tensor::Fnv;
use crate::error::{Error, Result};

const STATE_LEN: usize = 32 + 8 + 16 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RngKind {
    ChaCha8,
}

/// Serialized generator position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub kind: RngKind,
    pub bytes: Vec<u8>,
    pub draws: u64,
}

#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
    draws: u64,
}

impl Rng {
    pub fn seed_from(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
            draws: 0,
        }
    }

    /// Independent stream `stream` under the key derived from `seed`.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner, draws: 0 }
    }

    /// Child generator seeded from this one's next draw.
    pub fn fork(&mut self) -> Rng {
        let seed = self.next_u64();
        Rng::seed_from(seed)
    }

    pub fn draws(&self) -> u64 {
        self.draws
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(self)
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn save(&self) -> RngState {
        let mut bytes = Vec::with_capacity(STATE_LEN);
        bytes.extend_from_slice(&self.inner.get_seed());
        bytes.extend_from_slice(&self.inner.get_stream().to_le_bytes());
        bytes.extend_from_slice(&self.inner.get_word_pos().to_le_bytes());
        let mut h = Fnv::default();
        h.write(&bytes);
        h.write(&self.draws.to_le_bytes());
        bytes.extend_from_slice(&h.finish().to_le_bytes());
        RngState {
            kind: RngKind::ChaCha8,
            bytes,
            draws: self.draws,
        }
    }

    pub fn restore(&mut self, state: &RngState) -> Result<()> {
        *self = Rng::from_state(state)?;
        Ok(())
    }

    pub fn from_state(state: &RngState) -> Result<Self> {
        let b = &state.bytes;
        if b.len() != STATE_LEN {
            return Err(Error::CorruptRngState(format!(
                "expected {STATE_LEN} bytes, got {}",
                b.len()
            )));
        }
        let mut h = Fnv::default();
        h.write(&b[..56]);
        h.write(&state.draws.to_le_bytes());
        let stored = u64::from_le_bytes(b[56..64].try_into().expect("8 bytes"));
        if h.finish() != stored {
            return Err(Error::CorruptRngState("checksum mismatch".into()));
        }
        let seed: [u8; 32] = b[..32].try_into().expect("32 bytes");
        let stream = u64::from_le_bytes(b[32..40].try_into().expect("8 bytes"));
        let pos = u128::from_le_bytes(b[40..56].try_into().expect("16 bytes"));
        let mut inner = ChaCha8Rng::from_seed(seed);
        inner.set_stream(stream);
        inner.set_word_pos(pos);
        Ok(Self {
            inner,
            draws: state.draws,
        })
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.draws += 1;
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.draws += 1;
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.draws += 1;
        self.inner.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_restore_replays_uniforms() {
        let mut rng = Rng::seed_from(7);
        rng.uniform();
        let state = rng.save();
        let first: Vec<f64> = (0..10).map(|_| rng.uniform()).collect();
        rng.restore(&state).unwrap();
        let second: Vec<f64> = (0..10).map(|_| rng.uniform()).collect();
        assert_eq!(
            first.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            second.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn different_seeds_differ() {
        let a = Rng::seed_from(1).uniform();
        let b = Rng::seed_from(2).uniform();
        assert_ne!(a, b);
    }

    #[test]
    fn corrupted_bytes_rejected() {
        let rng = Rng::seed_from(3);
        let mut state = rng.save();
        state.bytes[5] ^= 1;
        assert!(matches!(
            Rng::from_state(&state),
            Err(Error::CorruptRngState(_))
        ));
        state.bytes.truncate(10);
        assert!(Rng::from_state(&state).is_err());
    }

    #[test]
    fn streams_are_separate() {
        let a = Rng::with_stream(5, 0).uniform();
        let b = Rng::with_stream(5, 1).uniform();
        assert_ne!(a, b);
    }
}
