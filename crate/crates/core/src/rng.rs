//! SplitMix64 pseudo-randomness.
//!
//! Every random quantity in the crate (profiles, weight init, epoch shuffles)
//! is drawn from this generator so that datasets and checkpoints are
//! byte-reproducible across platforms and implementations.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const MIX_1: u64 = 0xBF58_476D_1CE4_E5B9;
const MIX_2: u64 = 0x94D0_49BB_1331_11EB;
const STREAM_STRIDE: u64 = 0xA24B_AED4_963E_E407;

/// Generator state. Equal states produce identical streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngState {
    pub state: u64,
}

impl RngState {
    pub fn new(state: u64) -> Self {
        Self { state }
    }

    /// One SplitMix64 step.
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(MIX_1);
        z = (z ^ (z >> 27)).wrapping_mul(MIX_2);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn next_unit(&mut self) -> f64 {
        unit_from_bits(self.next_u64())
    }

    /// Standard normal via Box-Muller; the sine partner is discarded.
    pub fn next_gaussian(&mut self) -> f64 {
        let mut u1 = self.next_unit();
        while u1 == 0.0 {
            u1 = self.next_unit();
        }
        let u2 = self.next_unit();
        box_muller(u1, u2)
    }

    /// Uniform integer in `[0, bound)` by 128-bit multiply-high.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        debug_assert!(bound > 0);
        ((self.next_u64() as u128 * bound as u128) >> 64) as u64
    }
}

pub(crate) fn unit_from_bits(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub(crate) fn box_muller(u1: f64, u2: f64) -> f64 {
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Independent per-index stream, so sample `i` never depends on how many
/// samples were generated before it.
pub fn derive_stream(seed: u64, index: u64) -> RngState {
    let mut raw = RngState::new(seed ^ index.wrapping_mul(STREAM_STRIDE));
    RngState::new(raw.next_u64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn splitmix_reference_values() {
        let mut s = RngState::new(0);
        assert_eq!(s.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(s.state, 0x9E37_79B9_7F4A_7C15);
        assert_eq!(s.next_u64(), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn equal_states_equal_streams() {
        let mut a = RngState::new(123);
        let mut b = RngState::new(123);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn unit_conversion_edges() {
        assert_eq!(unit_from_bits(0), 0.0);
        let top = unit_from_bits(u64::MAX);
        assert_eq!(top, ((1u64 << 53) - 1) as f64 * 2f64.powi(-53));
        assert!(top < 1.0);
    }

    #[test]
    fn box_muller_edges() {
        assert_eq!(box_muller(1.0, 0.37), 0.0);
        assert!((box_muller((-2.0f64).exp(), 0.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_moments() {
        let mut s = RngState::new(2024);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| s.next_gaussian()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((0.95..=1.05).contains(&var), "var {var}");
    }

    #[test]
    fn derive_stream_reference_values() {
        assert_eq!(derive_stream(42, 0).state, 0xBDD7_3226_2FEB_6E95);
        assert_eq!(derive_stream(42, 1).state, 0x0FC1_BC4C_9CEF_205D);
        assert_eq!(derive_stream(0, 0).state, 0xE220_A839_7B1D_CDAF);
        assert_eq!(derive_stream(9, 77), derive_stream(9, 77));
    }

    #[test]
    fn derive_stream_no_collisions() {
        let mut seen = HashSet::with_capacity(1_000_001);
        for i in 0..=1_000_000u64 {
            assert!(seen.insert(derive_stream(42, i).state), "collision at {i}");
        }
    }

    #[test]
    fn next_below_in_range() {
        let mut s = RngState::new(5);
        for bound in 1..200u64 {
            assert!(s.next_below(bound) < bound);
        }
    }
}
