//! Crack-profile synthesis and the eddy-current response surrogate.
//!
//! Profiles are 40x12 binary grids in the (y, z) plane: rows index the
//! lateral position `m`, columns the depth `n` (0 is the surface). The
//! response at frequency `k` and scan position `(i, j)` is
//!
//! ```text
//! dZ_k(i, j) = -C_k * A_x(i) * sum_{p(m,n)=1} shadow(m,n)
//!                  * exp(-2 (1 + i) (n + 0.5) / delta_k)
//!                  * exp(-(j - m)^2 / (2 sigma_y^2))
//! ```
//!
//! i.e. a Born-approximation sum over crack cells of the squared incident
//! field (hence the doubled complex skin-depth exponent), attenuated by
//! crack cells lying above each cell in its column.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::rng::RngState;

pub const PROFILE_H: usize = 40;
pub const PROFILE_W: usize = 12;
pub const PROFILE_LEN: usize = PROFILE_H * PROFILE_W;
pub const SCAN_H: usize = 40;
pub const SCAN_W: usize = 40;
pub const N_FREQ: usize = 3;
pub const N_CHANNELS: usize = 2 * N_FREQ;
pub const CHANNELS_LEN: usize = N_CHANNELS * SCAN_H * SCAN_W;

/// Nominal frequency of the deepest-penetrating channel. Metadata only; the
/// surrogate works in skin-depth cell units.
const REFERENCE_FREQUENCY_HZ: f64 = 1.0e3;

/// Binary crack occupancy, row-major (`m` outer, `n` inner).
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct CrackProfile {
    cells: [u8; PROFILE_LEN],
}

impl std::fmt::Debug for CrackProfile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "CrackProfile(")?;
        for m in 0..PROFILE_H {
            let row: String = (0..PROFILE_W).map(|n| if self.get(m, n) { '#' } else { '.' }).collect();
            writeln!(f, "  {row}")?;
        }
        write!(f, ")")
    }
}

impl CrackProfile {
    pub fn zeros() -> Self {
        Self {
            cells: [0; PROFILE_LEN],
        }
    }

    pub fn ones() -> Self {
        Self {
            cells: [1; PROFILE_LEN],
        }
    }

    /// Builds a profile from a `rows x cols` grid, rejecting any other
    /// geometry and any cell outside {0, 1}.
    pub fn from_grid(rows: usize, cols: usize, cells: &[u8]) -> Result<Self> {
        if rows != PROFILE_H || cols != PROFILE_W || cells.len() != PROFILE_LEN {
            return Err(Error::Shape(format!(
                "crack profile must be {PROFILE_H}x{PROFILE_W}, got {rows}x{cols} ({} cells)",
                cells.len()
            )));
        }
        if let Some(bad) = cells.iter().find(|&&c| c > 1) {
            return Err(Error::InvalidArgument(format!(
                "profile cell value {bad} is not binary"
            )));
        }
        let mut out = Self::zeros();
        out.cells.copy_from_slice(cells);
        Ok(out)
    }

    #[inline]
    pub fn get(&self, m: usize, n: usize) -> bool {
        self.cells[m * PROFILE_W + n] != 0
    }

    #[inline]
    pub fn set(&mut self, m: usize, n: usize, value: bool) {
        self.cells[m * PROFILE_W + n] = value as u8;
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn count_ones(&self) -> usize {
        self.cells.iter().map(|&c| c as usize).sum()
    }
}

/// Complex responses for the three frequencies, indexed `(k, i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMaps {
    pub values: Vec<Complex64>,
    pub frequencies_hz: [f64; N_FREQ],
}

impl ResponseMaps {
    #[inline]
    pub fn get(&self, k: usize, i: usize, j: usize) -> Complex64 {
        self.values[(k * SCAN_H + i) * SCAN_W + j]
    }

    /// Flattens to `[Re f1, Im f1, Re f2, Im f2, Re f3, Im f3]`, each 40x40.
    pub fn to_channels(&self) -> Vec<f32> {
        let plane = SCAN_H * SCAN_W;
        let mut out = vec![0f32; CHANNELS_LEN];
        for k in 0..N_FREQ {
            let src = &self.values[k * plane..(k + 1) * plane];
            let (re, im) = out[2 * k * plane..(2 * k + 2) * plane].split_at_mut(plane);
            for ((r, i), z) in re.iter_mut().zip(im.iter_mut()).zip(src) {
                *r = z.re as f32;
                *i = z.im as f32;
            }
        }
        out
    }
}

/// Surrogate forward-model constants, in cell units.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Skin depth per frequency, strictly decreasing.
    pub skin_depths: [f64; N_FREQ],
    pub sigma_y: f64,
    pub sigma_x: f64,
    /// Half-open extent of the crack along scan-x.
    pub crack_x: (u16, u16),
    pub gamma: f64,
    pub calibration: [Complex64; N_FREQ],
}

impl Default for SimConfig {
    fn default() -> Self {
        Self::new([6.0, 3.0, 1.5], 3.0, 3.0, (10, 30), 0.15).expect("default simulation constants are valid")
    }
}

impl SimConfig {
    /// Validates the constants and fills in the calibration.
    pub fn new(
        skin_depths: [f64; N_FREQ],
        sigma_y: f64,
        sigma_x: f64,
        crack_x: (u16, u16),
        gamma: f64,
    ) -> Result<Self> {
        let mut cfg = Self {
            skin_depths,
            sigma_y,
            sigma_x,
            crack_x,
            gamma,
            calibration: [Complex64::new(1.0, 0.0); N_FREQ],
        };
        cfg.validate()?;
        cfg.calibration = calibrate(&cfg);
        Ok(cfg)
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        let mut cfg = self.clone();
        cfg.gamma = gamma;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.skin_depths;
        if !(d[0] > d[1] && d[1] > d[2] && d[2] > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "skin depths must be strictly decreasing and positive, got {d:?}"
            )));
        }
        if !(self.sigma_y > 0.0 && self.sigma_x > 0.0) {
            return Err(Error::InvalidArgument("coupling widths must be positive".into()));
        }
        let (x0, x1) = self.crack_x;
        if x0 >= x1 || x1 as usize > SCAN_H {
            return Err(Error::InvalidArgument(format!(
                "crack x-extent [{x0}, {x1}) must be a nonempty subrange of [0, {SCAN_H})"
            )));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        Ok(())
    }

    /// Nominal frequencies consistent with `delta ~ 1/sqrt(f)`.
    pub fn frequencies_hz(&self) -> [f64; N_FREQ] {
        let d0 = self.skin_depths[0];
        self.skin_depths.map(|d| REFERENCE_FREQUENCY_HZ * (d0 / d).powi(2))
    }
}

/// Draws 480 fair bits (top bit of each SplitMix64 output), row-major.
pub fn generate_raw_profile(rng: &mut RngState) -> CrackProfile {
    let mut p = CrackProfile::zeros();
    for cell in p.cells.iter_mut() {
        *cell = (rng.next_u64() >> 63) as u8;
    }
    p
}

/// 3x3 majority filter with clipped border windows; ties keep the center.
pub fn median_filter_3x3(p: &CrackProfile) -> CrackProfile {
    let mut out = CrackProfile::zeros();
    for m in 0..PROFILE_H {
        let rows = m.saturating_sub(1)..(m + 2).min(PROFILE_H);
        for n in 0..PROFILE_W {
            let cols = n.saturating_sub(1)..(n + 2).min(PROFILE_W);
            let window = rows.len() * cols.len();
            let ones: usize = rows
                .clone()
                .flat_map(|r| cols.clone().map(move |c| (r, c)))
                .filter(|&(r, c)| p.get(r, c))
                .count();
            let v = match (2 * ones).cmp(&window) {
                std::cmp::Ordering::Greater => true,
                std::cmp::Ordering::Less => false,
                std::cmp::Ordering::Equal => p.get(m, n),
            };
            out.set(m, n, v);
        }
    }
    out
}

/// `exp(-2 (1 + i) (n + 0.5) / delta)` for every depth cell.
fn depth_factors(delta: f64) -> [Complex64; PROFILE_W] {
    std::array::from_fn(|n| {
        let a = -2.0 * (n as f64 + 0.5) / delta;
        Complex64::from_polar(a.exp(), a)
    })
}

fn x_footprint(cfg: &SimConfig) -> [f64; SCAN_H] {
    let (x0, x1) = cfg.crack_x;
    let s2 = 2.0 * cfg.sigma_x * cfg.sigma_x;
    std::array::from_fn(|i| {
        (x0..x1)
            .map(|u| {
                let d = i as f64 - u as f64;
                (-d * d / s2).exp()
            })
            .sum()
    })
}

/// Lateral coupling `exp(-(j - m)^2 / (2 sigma_y^2))`, indexed by `|j - m|`.
fn lateral_kernel(cfg: &SimConfig) -> [f64; SCAN_W + PROFILE_H] {
    let s2 = 2.0 * cfg.sigma_y * cfg.sigma_y;
    std::array::from_fn(|d| (-(d as f64).powi(2) / s2).exp())
}

/// Attenuation of cell `(m, n)` by the crack cells above it in its column.
pub fn shadow_factor(p: &CrackProfile, m: usize, n: usize, gamma: f64) -> f64 {
    let above = (0..n).filter(|&q| p.get(m, q)).count();
    (-gamma * above as f64).exp()
}

/// Response of a single row `m`: shadowed sum over its crack cells.
fn column_sums(p: &CrackProfile, gamma: f64, factors: &[Complex64; PROFILE_W]) -> [Complex64; PROFILE_H] {
    std::array::from_fn(|m| {
        let mut acc = Complex64::new(0.0, 0.0);
        let mut above = 0i32;
        for (n, f) in factors.iter().enumerate() {
            if p.get(m, n) {
                let shadow = if gamma == 0.0 {
                    1.0
                } else {
                    (-gamma * above as f64).exp()
                };
                acc += f * shadow;
                above += 1;
            }
        }
        acc
    })
}

fn raw_response(p: &CrackProfile, cfg: &SimConfig, gamma: f64, calibration: &[Complex64; N_FREQ]) -> Vec<Complex64> {
    let ax = x_footprint(cfg);
    let g = lateral_kernel(cfg);
    let plane = SCAN_H * SCAN_W;
    let mut values = vec![Complex64::new(0.0, 0.0); N_FREQ * plane];
    for k in 0..N_FREQ {
        let factors = depth_factors(cfg.skin_depths[k]);
        let rows = column_sums(p, gamma, &factors);
        let lateral: [Complex64; SCAN_W] = std::array::from_fn(|j| {
            rows.iter()
                .enumerate()
                .filter(|(_, d)| d.re != 0.0 || d.im != 0.0)
                .map(|(m, d)| d * g[j.abs_diff(m)])
                .sum()
        });
        let scale = -calibration[k];
        for (i, a) in ax.iter().enumerate() {
            let row = &mut values[k * plane + i * SCAN_W..k * plane + (i + 1) * SCAN_W];
            for (v, s) in row.iter_mut().zip(&lateral) {
                *v = scale * (a * s);
            }
        }
    }
    values
}

/// Computes the three calibrated response maps of a profile.
pub fn forward_operate(p: &CrackProfile, cfg: &SimConfig) -> ResponseMaps {
    ResponseMaps {
        values: raw_response(p, cfg, cfg.gamma, &cfg.calibration),
        frequencies_hz: cfg.frequencies_hz(),
    }
}

/// Peak raw magnitude per frequency for the all-ones profile (no shadowing,
/// unit constants).
pub fn uncalibrated_peaks(cfg: &SimConfig) -> [f64; N_FREQ] {
    let unit = [Complex64::new(1.0, 0.0); N_FREQ];
    let values = raw_response(&CrackProfile::ones(), cfg, 0.0, &unit);
    let plane = SCAN_H * SCAN_W;
    std::array::from_fn(|k| {
        values[k * plane..(k + 1) * plane]
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    })
}

/// Real constants `C_k = 1 / M_k` normalizing the all-ones peak to 1.
pub fn calibrate(cfg: &SimConfig) -> [Complex64; N_FREQ] {
    uncalibrated_peaks(cfg).map(|m| Complex64::new(1.0 / m, 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_stream;

    fn naive(p: &CrackProfile, cfg: &SimConfig) -> Vec<Complex64> {
        let mut out = Vec::with_capacity(N_FREQ * SCAN_H * SCAN_W);
        for k in 0..N_FREQ {
            for i in 0..SCAN_H {
                let mut ax = 0.0;
                for u in cfg.crack_x.0..cfg.crack_x.1 {
                    ax += (-(i as f64 - u as f64).powi(2) / (2.0 * cfg.sigma_x.powi(2))).exp();
                }
                for j in 0..SCAN_W {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for m in 0..PROFILE_H {
                        for n in 0..PROFILE_W {
                            if !p.get(m, n) {
                                continue;
                            }
                            let above = (0..n).filter(|&q| p.get(m, q)).count() as f64;
                            let shadow = (-cfg.gamma * above).exp();
                            let depth = (Complex64::new(-2.0, -2.0) * (n as f64 + 0.5) / cfg.skin_depths[k]).exp();
                            let lat = (-(j as f64 - m as f64).powi(2) / (2.0 * cfg.sigma_y.powi(2))).exp();
                            acc += depth * shadow * lat;
                        }
                    }
                    out.push(-cfg.calibration[k] * ax * acc);
                }
            }
        }
        out
    }

    fn random_profile(seed: u64, i: u64) -> CrackProfile {
        median_filter_3x3(&generate_raw_profile(&mut derive_stream(seed, i)))
    }

    #[test]
    fn rejects_wrong_geometry() {
        assert!(matches!(
            CrackProfile::from_grid(12, 40, &[0; 480]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            CrackProfile::from_grid(40, 12, &[0; 479]),
            Err(Error::Shape(_))
        ));
        assert!(CrackProfile::from_grid(40, 12, &[2; 480]).is_err());
        assert!(CrackProfile::from_grid(40, 12, &[1; 480]).is_ok());
    }

    #[test]
    fn raw_profile_is_deterministic_and_balanced() {
        let a = generate_raw_profile(&mut RngState::new(99));
        let b = generate_raw_profile(&mut RngState::new(99));
        assert_eq!(a, b);
        let ones: usize = (0..1000)
            .map(|i| generate_raw_profile(&mut derive_stream(42, i)).count_ones())
            .sum();
        let frac = ones as f64 / (1000 * PROFILE_LEN) as f64;
        assert!((0.47..=0.53).contains(&frac), "fraction {frac}");
    }

    #[test]
    fn median_filter_cases() {
        assert_eq!(median_filter_3x3(&CrackProfile::zeros()), CrackProfile::zeros());
        assert_eq!(median_filter_3x3(&CrackProfile::ones()), CrackProfile::ones());

        let mut isolated = CrackProfile::zeros();
        isolated.set(20, 6, true);
        assert!(!median_filter_3x3(&isolated).get(20, 6));

        let mut corner = CrackProfile::zeros();
        corner.set(0, 0, true);
        corner.set(0, 1, true);
        assert!(median_filter_3x3(&corner).get(0, 0));
        // Same tie with the center off stays off.
        let mut corner_off = CrackProfile::zeros();
        corner_off.set(0, 1, true);
        corner_off.set(1, 0, true);
        assert!(!median_filter_3x3(&corner_off).get(0, 0));
    }

    #[test]
    fn zero_profile_zero_response() {
        let r = forward_operate(&CrackProfile::zeros(), &SimConfig::default());
        assert!(r.values.iter().all(|z| z.re == 0.0 && z.im == 0.0));
    }

    #[test]
    fn matches_naive_reference() {
        let cfg = SimConfig::default();
        for i in 0..25 {
            let p = if i == 0 {
                CrackProfile::ones()
            } else {
                random_profile(3, i)
            };
            let fast = forward_operate(&p, &cfg).values;
            let slow = naive(&p, &cfg);
            for (a, b) in fast.iter().zip(&slow) {
                let denom = a.norm().max(b.norm()).max(1e-300);
                assert!((a - b).norm() / denom <= 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn linear_without_shadowing() {
        let cfg = SimConfig::default().with_gamma(0.0).unwrap();
        let full = random_profile(11, 0);
        let mut p1 = CrackProfile::zeros();
        let mut p2 = CrackProfile::zeros();
        for m in 0..PROFILE_H {
            for n in 0..PROFILE_W {
                if full.get(m, n) {
                    if (m + n) % 2 == 0 {
                        p1.set(m, n, true)
                    } else {
                        p2.set(m, n, true)
                    }
                }
            }
        }
        let r = forward_operate(&full, &cfg).values;
        let r1 = forward_operate(&p1, &cfg).values;
        let r2 = forward_operate(&p2, &cfg).values;
        for ((a, b), c) in r.iter().zip(&r1).zip(&r2) {
            let sum = b + c;
            let denom = a.norm().max(sum.norm()).max(1e-300);
            assert!((a - sum).norm() / denom <= 1e-12);
        }
    }

    #[test]
    fn single_cell_peaks_under_the_crack() {
        let cfg = SimConfig::default();
        let mut p = CrackProfile::zeros();
        p.set(20, 0, true);
        let r = forward_operate(&p, &cfg);
        for k in 0..N_FREQ {
            for i in cfg.crack_x.0 as usize..cfg.crack_x.1 as usize {
                let best = (0..SCAN_W)
                    .max_by(|&a, &b| r.get(k, i, a).norm().total_cmp(&r.get(k, i, b).norm()))
                    .unwrap();
                assert_eq!(best, 20);
            }
        }
    }

    #[test]
    fn calibration_normalizes_all_ones() {
        let cfg = SimConfig::default().with_gamma(0.0).unwrap();
        let r = forward_operate(&CrackProfile::ones(), &cfg);
        let plane = SCAN_H * SCAN_W;
        for k in 0..N_FREQ {
            let peak = r.values[k * plane..(k + 1) * plane]
                .iter()
                .map(|z| z.norm())
                .fold(0.0, f64::max);
            assert!((peak - 1.0).abs() < 1e-12);
        }
        let m = uncalibrated_peaks(&cfg);
        assert!(m[0] > m[1] && m[1] > m[2]);
        assert_eq!(calibrate(&cfg), calibrate(&cfg));
        assert!(cfg.calibration.iter().all(|c| c.im == 0.0 && c.re > 0.0));
    }

    #[test]
    fn depth_sensitivity_and_frequency_order() {
        let cfg = SimConfig::default();
        let unit = [Complex64::new(1.0, 0.0); N_FREQ];
        let peak = |n: usize, k: usize| {
            let mut p = CrackProfile::zeros();
            p.set(20, n, true);
            raw_response(&p, &cfg, cfg.gamma, &unit)[(k * SCAN_H + 20) * SCAN_W + 20].norm()
        };
        for k in 0..N_FREQ {
            for n in 1..PROFILE_W {
                assert!(peak(n, k) < peak(n - 1, k));
            }
        }
        for n in 6..PROFILE_W {
            assert!(peak(n, 0) > peak(n, 2));
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(SimConfig::new([1.0, 3.0, 6.0], 3.0, 3.0, (10, 30), 0.1).is_err());
        assert!(SimConfig::new([6.0, 3.0, 1.5], 3.0, 3.0, (10, 41), 0.1).is_err());
        assert!(SimConfig::new([6.0, 3.0, 1.5], 3.0, 3.0, (10, 30), -0.1).is_err());
    }
}
