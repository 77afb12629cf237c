//! Gaussian-smoothed piecewise-constant maps.
//!
//! A step function with thresholds `t_k` and jumps `J_k` is convolved with a
//! zero-mean Gaussian truncated at ±3σ (not renormalised). The smoothed map
//! and its slope only depend on the thresholds inside the window:
//!
//! ```text
//! Q̃(y)  = M·F(y − 3σ) + Σ_k J_k·[Φ((y − t_k)/σ) − Φ(−3)]
//! Q̃'(y) = Σ_k J_k·φ((y − t_k)/σ)/σ
//! ```
//!
//! with `M = Φ(3) − Φ(−3)` the retained Gaussian mass.

use crate::error::{Error, Result};
use crate::quant::{dequantize_value, quantize_value};

/// Half-width of the Gaussian window in units of σ.
pub const TRUNCATION: f64 = 3.0;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub fn gauss_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

#[inline]
pub fn gauss_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z * std::f64::consts::FRAC_1_SQRT_2))
}

/// Gaussian mass kept inside ±3σ.
pub fn window_mass() -> f64 {
    gauss_cdf(TRUNCATION) - gauss_cdf(-TRUNCATION)
}

pub fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")))
    }
}

/// Smoothed value, slope in `y`, and `Σ J·φ/σ·t` (used for threshold scaling).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Smoothed {
    pub value: f64,
    pub slope: f64,
    pub threshold_moment: f64,
}

#[derive(Default)]
struct Acc {
    jumps: f64,
    slope: f64,
    moment: f64,
}

impl Acc {
    #[inline]
    fn add(&mut self, y: f64, sigma: f64, t: f64, jump: f64) {
        if jump == 0.0 {
            return;
        }
        let z = (y - t) / sigma;
        if z.abs() >= TRUNCATION {
            return;
        }
        let d = jump * gauss_pdf(z) / sigma;
        self.jumps += jump * (gauss_cdf(z) - gauss_cdf(-TRUNCATION));
        self.slope += d;
        self.moment += d * t;
    }

    fn finish(self, left_plateau: f64) -> Smoothed {
        Smoothed {
            value: window_mass() * left_plateau + self.jumps,
            slope: self.slope,
            threshold_moment: self.moment,
        }
    }
}

/// Explicit step function: `plateaus[k]` holds on `[t_{k-1}, t_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TableStep {
    thresholds: Vec<f64>,
    plateaus: Vec<f64>,
}

impl TableStep {
    pub fn new(thresholds: Vec<f64>, plateaus: Vec<f64>) -> Result<Self> {
        if plateaus.len() != thresholds.len() + 1 {
            return Err(Error::InvalidArgument(format!(
                "{} thresholds need {} plateau values, got {}",
                thresholds.len(),
                thresholds.len() + 1,
                plateaus.len()
            )));
        }
        if thresholds.iter().any(|t| !t.is_finite()) || thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("thresholds must be finite and strictly increasing".into()));
        }
        Ok(Self { thresholds, plateaus })
    }

    /// Exact (discontinuous) value.
    pub fn value(&self, y: f64) -> f64 {
        self.plateaus[self.thresholds.partition_point(|&t| t <= y)]
    }

    pub fn smoothed(&self, y: f64, sigma: f64) -> Smoothed {
        let lo = y - TRUNCATION * sigma;
        let hi = y + TRUNCATION * sigma;
        let first = self.thresholds.partition_point(|&t| t <= lo);
        let mut acc = Acc::default();
        for k in first..self.thresholds.len() {
            let t = self.thresholds[k];
            if t >= hi {
                break;
            }
            acc.add(y, sigma, t, self.plateaus[k + 1] - self.plateaus[k]);
        }
        acc.finish(self.plateaus[first])
    }
}

/// Look-up table over a contiguous index range; indices outside are clamped.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexLut {
    pub first: i32,
    pub values: Vec<f64>,
}

impl IndexLut {
    #[inline]
    pub fn get(&self, q: i32) -> f64 {
        let last = self.first + self.values.len() as i32 - 1;
        self.values[(q.clamp(self.first, last) - self.first) as usize]
    }
}

/// The composite `y ↦ P(Q(g·y))` where `Q` is the ξ = 0 deadzone quantizer
/// with step `delta` and `P` maps indices to plateau values. Thresholds sit
/// at `mΔ/g`, `m ≠ 0`.
pub fn smoothed_deadzone(
    y: f64,
    gain: f64,
    delta: f64,
    sigma: f64,
    plateau: impl Fn(i32) -> f64,
) -> Smoothed {
    let lo = y - TRUNCATION * sigma;
    let hi = y + TRUNCATION * sigma;
    let step = delta / gain;
    let left = quantize_value(gain * lo, delta, 0.0);
    let m_lo = (lo / step).floor() as i64;
    let m_hi = (hi / step).ceil() as i64;
    let mut acc = Acc::default();
    for m in m_lo..=m_hi {
        if m == 0 {
            continue;
        }
        let t = m as f64 * step;
        if t <= lo || t >= hi {
            continue;
        }
        let (a, b) = if m > 0 { (m - 1, m) } else { (m, m + 1) };
        acc.add(y, sigma, t, plateau(b as i32) - plateau(a as i32));
    }
    acc.finish(plateau(left))
}

/// Smoothed quantize→dequantize composite `y ↦ G_s·Q⁻¹(Q(G_a·y))`.
/// Returns (value, ∂/∂y, ∂/∂G_a, ∂/∂G_s) of the smoothed map.
pub fn smoothed_quantizer(y: f64, ga: f64, gs: f64, delta: f64, sigma: f64) -> [f64; 4] {
    let s = smoothed_deadzone(y, ga, delta, sigma, |q| dequantize_value(q, delta));
    [gs * s.value, gs * s.slope, gs * s.threshold_moment / ga, s.value]
}

/// Derivative of the quantizer composite used by the annealed backward pass.
pub fn annealed_quant_backward(y: f64, ga: f64, gs: f64, delta: f64, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    Ok(smoothed_quantizer(y, ga, gs, delta, sigma)[1])
}

#[cfg(test)]
mod tests {
    use super::*;

    // Composite Simpson quadrature of ∫_{-3σ}^{3σ} F(y − s) φ_σ(s) ds, split
    // at the discontinuities `y − t` so every panel integrates a smooth piece.
    fn quadrature(f: impl Fn(f64) -> f64, thresholds: &[f64], y: f64, sigma: f64) -> f64 {
        let (a, b) = (-TRUNCATION * sigma, TRUNCATION * sigma);
        let mut cuts: Vec<f64> = thresholds.iter().map(|t| y - t).filter(|&s| s > a && s < b).collect();
        cuts.push(a);
        cuts.push(b);
        cuts.sort_by(f64::total_cmp);
        let g = |s: f64| gauss_pdf(s / sigma) / sigma;
        let mut total = 0.0;
        for w in cuts.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            // F is constant on the open panel; sample it at the midpoint.
            let fv = f(y - 0.5 * (lo + hi));
            let n = 2000;
            let h = (hi - lo) / n as f64;
            let mut acc = g(lo) + g(hi);
            for i in 1..n {
                acc += g(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            total += fv * acc * h / 3.0;
        }
        total
    }

    #[test]
    fn cdf_reference_values() {
        assert!((gauss_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((gauss_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((window_mass() - 0.997_300_203_936_739_8).abs() < 1e-12);
    }

    #[test]
    fn unit_jump_slope() {
        let s = TableStep::new(vec![0.0], vec![0.0, 1.0]).unwrap();
        let d = s.smoothed(0.0, 1.0).slope;
        assert!((d - 0.398_942_28).abs() < 1e-7);
        assert_eq!(s.smoothed(3.5, 1.0).slope, 0.0);
    }

    #[test]
    fn table_value_matches_quadrature() {
        let s = TableStep::new(vec![-1.0, 0.2, 0.5, 2.0], vec![3.0, -1.0, 0.5, 4.0, 4.5]).unwrap();
        for &(y, sigma) in &[(0.3, 0.2), (-0.9, 0.5), (1.0, 1.0), (5.0, 0.3)] {
            let q = quadrature(|v| s.value(v), &s.thresholds, y, sigma);
            let d = (s.smoothed(y, sigma).value - q).abs();
            assert!(d < 1e-10, "y {y}: {d}");
        }
    }

    #[test]
    fn deadzone_matches_table_form() {
        let delta = 0.7;
        let (ga, gs) = (1.3, 0.8);
        let thresholds: Vec<f64> = (-20..=20).filter(|&m| m != 0).map(|m| m as f64 * delta / ga).collect();
        let mut plateaus = vec![gs * dequantize_value(-20, delta)];
        for m in (-20..=20).filter(|&m| m != 0) {
            let q = if m < 0 { m + 1 } else { m };
            plateaus.push(gs * dequantize_value(q, delta));
        }
        let table = TableStep::new(thresholds, plateaus).unwrap();
        for i in 0..200 {
            let y = -6.0 + i as f64 * 0.061;
            for sigma in [0.05, 0.3] {
                let a = smoothed_quantizer(y, ga, gs, delta, sigma);
                let b = table.smoothed(y, sigma);
                assert!((a[0] - b.value).abs() < 1e-12 && (a[1] - b.slope).abs() < 1e-12, "y {y}");
            }
        }
    }

    #[test]
    fn deadzone_interior_is_flat() {
        let d = annealed_quant_backward(0.2, 1.0, 1.0, 1.0, 0.1).unwrap();
        assert_eq!(d, 0.0);
        assert!(annealed_quant_backward(0.2, 1.0, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn table_rejects_bad_inputs() {
        assert!(TableStep::new(vec![0.0, 0.0], vec![0.0; 3]).is_err());
        assert!(TableStep::new(vec![0.0], vec![0.0]).is_err());
    }
}
