//! Counter-based random streams.
//!
//! Every random draw in a run is addressed by `(seed, run stream, particle,
//! step, substream)`. The address is turned into a Philox4x32-10 key and
//! counter, so a particle's noise never depends on which thread evaluated it
//! or on how many other draws happened before it.

use rand::Rng;
use rand_core::RngCore;
use rand_distr::StandardNormal;

use crate::point::Vec2;

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

#[inline]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = u64::from(a) * u64::from(b);
    ((p >> 32) as u32, p as u32)
}

/// The Philox4x32 bijection with 10 rounds.
#[inline]
pub fn philox4x32_10(mut ctr: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(PHILOX_W0);
            k[1] = k[1].wrapping_add(PHILOX_W1);
        }
        let (hi0, lo0) = mulhilo(PHILOX_M0, ctr[0]);
        let (hi1, lo1) = mulhilo(PHILOX_M1, ctr[2]);
        ctr = [hi1 ^ ctr[1] ^ k[0], lo1, hi0 ^ ctr[3] ^ k[1], lo0];
    }
    ctr
}

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable hash of a list of words. Used for seed derivation only.
pub fn hash_words(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x6A09_E667_F3BC_C908, |acc, &w| mix64(acc ^ mix64(w)))
}

/// Seed used for one budget of a sweep.
pub fn derive_run_seed(base_seed: u64, r: f64) -> u64 {
    hash_words(&[base_seed, r.to_bits()])
}

/// Independent substreams of one particle at one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Substream {
    Init = 1,
    Diffusion = 2,
    Proposal = 3,
    ZoProbe = 4,
    Data = 5,
    Diagnostic = 6,
}

/// Identifies all randomness belonging to one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RngLineage {
    pub seed: u64,
    pub stream: u64,
}

impl RngLineage {
    pub fn new(seed: u64) -> Self {
        RngLineage { seed, stream: 0 }
    }

    pub fn with_stream(self, stream: u64) -> Self {
        RngLineage { stream, ..self }
    }

    /// Random stream for `particle` at `step` on the given substream.
    #[inline]
    pub fn stream_for(&self, particle: u64, step: u64, sub: Substream) -> PhiloxStream {
        PhiloxStream::at(self.particle_key(particle), step, sub)
    }

    /// Philox key of `particle`; constant over the run.
    #[inline]
    pub fn particle_key(&self, particle: u64) -> u64 {
        hash_words(&[self.seed, self.stream, particle])
    }
}

/// A finite random stream: Philox blocks at counters
/// `[block, tag, step_lo, step_hi]` under a fixed key.
#[derive(Debug, Clone)]
pub struct PhiloxStream {
    key: [u32; 2],
    ctr: [u32; 4],
    buf: [u32; 4],
    used: usize,
}

impl PhiloxStream {
    pub fn new(key: u64, step: u64, tag: u32) -> Self {
        PhiloxStream {
            key: [key as u32, (key >> 32) as u32],
            ctr: [0, tag, step as u32, (step >> 32) as u32],
            buf: [0; 4],
            used: 4,
        }
    }

    /// Same as `lineage.stream_for(i, step, sub)` when `key = lineage.particle_key(i)`.
    #[inline]
    pub fn at(key: u64, step: u64, sub: Substream) -> Self {
        PhiloxStream::new(key, step, sub as u32)
    }

    #[inline]
    fn refill(&mut self) {
        self.buf = philox4x32_10(self.ctr, self.key);
        self.ctr[0] = self.ctr[0].wrapping_add(1);
        self.used = 0;
    }

    /// A standard normal draw.
    #[inline]
    pub fn normal(&mut self) -> f64 {
        self.sample(StandardNormal)
    }

    /// A standard normal vector in the plane.
    #[inline]
    pub fn normal2(&mut self) -> Vec2 {
        let x = self.normal();
        let y = self.normal();
        Vec2::new(x, y)
    }

    /// Uniform draw on [0, 1).
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.random::<f64>()
    }
}

impl RngCore for PhiloxStream {
    #[inline]
    fn next_u32(&mut self) -> u32 {
        if self.used == 4 {
            self.refill();
        }
        let v = self.buf[self.used];
        self.used += 1;
        v
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        let lo = u64::from(self.next_u32());
        let hi = u64::from(self.next_u32());
        (hi << 32) | lo
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(4) {
            let w = self.next_u32().to_le_bytes();
            chunk.copy_from_slice(&w[..chunk.len()]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Known-answer vectors from the Random123 distribution.
    #[test]
    fn philox_known_answers() {
        assert_eq!(
            philox4x32_10([0, 0, 0, 0], [0, 0]),
            [0x6627_e8d5, 0xe169_c58d, 0xbc57_ac4c, 0x9b00_dbd8]
        );
        assert_eq!(
            philox4x32_10([u32::MAX; 4], [u32::MAX; 2]),
            [0x408f_276d, 0x41c8_3b0e, 0xa20b_c7c6, 0x6d54_51fd]
        );
        assert_eq!(
            philox4x32_10(
                [0x243f_6a88, 0x85a3_08d3, 0x1319_8a2e, 0x0370_7344],
                [0xa409_3822, 0x299f_31d0]
            ),
            [0xd16c_fe09, 0x94fd_cceb, 0x5001_e420, 0x2412_6ea1]
        );
    }

    #[test]
    fn streams_are_addressable() {
        let lin = RngLineage::new(7);
        let a: Vec<f64> = {
            let mut s = lin.stream_for(3, 11, Substream::Diffusion);
            (0..8).map(|_| s.normal()).collect()
        };
        let b: Vec<f64> = {
            let mut s = lin.stream_for(3, 11, Substream::Diffusion);
            (0..8).map(|_| s.normal()).collect()
        };
        assert_eq!(a, b);
        let mut other = lin.stream_for(3, 12, Substream::Diffusion);
        assert_ne!(a[0], other.normal());
        let mut tagged = lin.stream_for(3, 11, Substream::Proposal);
        assert_ne!(a[0], tagged.normal());
    }

    #[test]
    fn normals_have_unit_moments() {
        let lin = RngLineage::new(1);
        let n = 200_000u64;
        let (mut s1, mut s2) = (0.0, 0.0);
        for i in 0..n {
            let z = lin.stream_for(i, 0, Substream::Diagnostic).normal();
            s1 += z;
            s2 += z * z;
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 0.02);
    }
}
