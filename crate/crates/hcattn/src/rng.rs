//! Portable seeded random number generation.
//!
//! Synthetic tensors must be reproducible bit-for-bit from a 64-bit seed,
//! including by reimplementations in other languages, so the generator is
//! pinned to a fully specified construction rather than an external crate:
//!
//! * Core stream: **SplitMix64** (Steele, Lea & Flood; public-domain
//!   reference by Vigna). State advances by the golden-gamma constant
//!   `0x9E3779B97F4A7C15`; each output is the new state mixed with
//!   `z ^= z >> 30; z *= 0xBF58476D1CE4E5B9; z ^= z >> 27;
//!   z *= 0x94D049BB133111EB; z ^= z >> 31` (all arithmetic mod 2^64).
//! * Uniform doubles in `(0, 1]`: `((x >> 11) + 1) * 2^-53` from one
//!   64-bit output `x`.
//! * Standard normals: Box-Muller on two uniforms,
//!   `sqrt(-2 ln u1) * cos(2 pi u2)` then `sqrt(-2 ln u1) * sin(2 pi u2)`,
//!   emitted in that order.
//! * Bounded integers `gen_index(n)`: rejection-free `x % n` on one 64-bit
//!   output. The modulo bias is below 2^-32 for every `n` used here.
//!
//! Derived seeds for independent streams (per group, per restart, per
//! layer) are produced by `mix(seed, tag)`, which runs one SplitMix64
//! output step on `seed ^ tag`.

/// SplitMix64 generator. One `u64` of state, one output per step.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Next raw 64-bit output.
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform double in `(0, 1]`.
    pub fn next_uniform(&mut self) -> f64 {
        (((self.next_u64() >> 11) + 1) as f64) * (1.0 / 9007199254740992.0)
    }

    /// Uniform index in `[0, n)`. `n` must be nonzero.
    pub fn gen_index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller; draws two uniforms per pair.
    pub fn next_normal_pair(&mut self) -> (f64, f64) {
        let u1 = self.next_uniform();
        let u2 = self.next_uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        (r * theta.cos(), r * theta.sin())
    }

    /// Fill `out` with standard normals, pair by pair. When `out` has odd
    /// length the second member of the final pair is discarded.
    pub fn fill_normal(&mut self, out: &mut [f32]) {
        let mut chunks = out.chunks_exact_mut(2);
        for pair in &mut chunks {
            let (a, b) = self.next_normal_pair();
            pair[0] = a as f32;
            pair[1] = b as f32;
        }
        if let [last] = chunks.into_remainder() {
            *last = self.next_normal_pair().0 as f32;
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.gen_index(i + 1);
            items.swap(i, j);
        }
    }
}

/// Derive an independent stream seed from a base seed and a tag.
pub fn mix(seed: u64, tag: u64) -> u64 {
    SplitMix64::new(seed ^ tag).next_u64()
}
