//! Seeded uniform stream used for stochastic conversions.
//!
//! The generator is SplitMix64 (Steele, Lea & Flood, 2014): a 64-bit
//! counter advanced by the golden-ratio increment `0x9E3779B97F4A7C15` and
//! passed through a fixed avalanche mix. Uniforms take the top 53 bits and
//! are centred in their cell, `u = (bits + 0.5) / 2^53`, so every draw lies in
//! the open interval (0, 1). The stream depends only on the seed and is the
//! same on every platform.

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform draw in the open interval (0, 1).
    pub fn next_open01(&mut self) -> f64 {
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        ((self.next_u64() >> 11) as f64 + 0.5) * SCALE
    }
}

impl Iterator for SplitMix64 {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        Some(self.next_open01())
    }
}
