//! Counter-based random streams.
//!
//! A [`Stream`] is keyed by `(seed, tag, replicate)`; every draw is a pure function of the
//! key and a 64-bit counter, so output does not depend on traversal order or on how
//! replicates are spread across threads. Lattice cells map to counters by hashing their
//! global coordinates, which makes a field sampled on `V` restrict exactly to the field
//! sampled on any sub-block of `V`.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer (a bijection on `u64`).
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sub-stream tags. Different tags never share draws for the same seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Tag {
    Field = 1,
    Noise = 2,
    Companion = 3,
    Wiener = 4,
    Calibration = 5,
    Lipschitz = 6,
    Bootstrap = 7,
    Geometry = 8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stream {
    k0: u64,
    k1: u64,
}

impl Stream {
    pub fn new(seed: u64, tag: Tag, replicate: u64) -> Self {
        let k0 = mix64(seed ^ mix64(tag as u64 ^ GOLDEN));
        let k1 = mix64(k0 ^ mix64(replicate.wrapping_add(GOLDEN).wrapping_mul(GOLDEN)));
        Stream { k0, k1: mix64(k1 ^ seed.rotate_left(17)) }
    }

    /// A derived seed, for handing a nested computation its own key space.
    pub fn derive_seed(seed: u64, salt: u64) -> u64 {
        mix64(mix64(seed ^ 0xD1B5_4A32_D192_ED03) ^ salt)
    }

    #[inline]
    pub fn bits(&self, counter: u64) -> u64 {
        mix64(mix64(counter ^ self.k0).wrapping_add(self.k1))
    }

    /// Uniform on the open interval `(0, 1)`.
    #[inline]
    pub fn uniform(&self, counter: u64) -> f64 {
        ((self.bits(counter) >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// `j`-th uniform attached to a cell counter.
    #[inline]
    pub fn uniform_at(&self, cell: u64, j: u64) -> f64 {
        self.uniform(cell.wrapping_add(j.wrapping_mul(GOLDEN)))
    }

    /// Standard normal by Box–Muller from two uniforms at the cell.
    #[inline]
    pub fn normal_at(&self, cell: u64) -> f64 {
        let u1 = self.uniform_at(cell, 0);
        let u2 = self.uniform_at(cell, 1);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `0..n`.
    #[inline]
    pub fn below(&self, counter: u64, n: u64) -> u64 {
        ((self.bits(counter) as u128 * n as u128) >> 64) as u64
    }
}

/// Hash of global lattice coordinates into a cell counter.
#[inline]
pub fn cell_counter(coords: &[i64]) -> u64 {
    let mut h = 0x243F_6A88_85A3_08D3u64;
    for &c in coords {
        h = mix64(h ^ (c as u64)).wrapping_add(GOLDEN);
    }
    h
}
