//! Deadzone scalar quantization with per-subband analysis/synthesis gains.

use crate::dwt::{synthesis_norm, Band, Grid, WaveletKernel};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Reconstruction offset inside a non-zero bin (bin centre).
pub const RECON_OFFSET: f64 = 0.5;

/// `sign(v)·⌊|v|/Δ + ξ⌋` when `|v|/Δ + ξ > 0`, else 0.
#[inline]
pub fn quantize_value(v: f64, delta: f64, xi: f64) -> i32 {
    let m = v.abs() / delta + xi;
    if m > 0.0 {
        let mut q = m.floor();
        if xi == 0.0 {
            // the division rounds; settle the bin with exact fma sign tests
            let a = v.abs();
            if q > 0.0 && q.mul_add(delta, -a) > 0.0 {
                q -= 1.0;
            } else if (q + 1.0).mul_add(delta, -a) <= 0.0 {
                q += 1.0;
            }
        }
        let q = if q > i32::MAX as f64 { i32::MAX } else { q as i32 };
        if v < 0.0 {
            -q
        } else {
            q
        }
    } else {
        0
    }
}

#[inline]
pub fn dequantize_value(q: i32, delta: f64) -> f64 {
    if q == 0 {
        0.0
    } else {
        let m = q.unsigned_abs() as f64 + RECON_OFFSET;
        if q < 0 {
            -m * delta
        } else {
            m * delta
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandQuant {
    pub delta: f64,
    pub xi: f64,
    pub gain_a: f64,
    pub gain_s: f64,
}

impl BandQuant {
    pub fn new(delta: f64) -> Self {
        Self {
            delta,
            xi: 0.0,
            gain_a: 1.0,
            gain_s: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidArgument(format!("step size must be positive, got {}", self.delta)));
        }
        if !(self.gain_a > 0.0 && self.gain_a.is_finite() && self.gain_s > 0.0 && self.gain_s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "gains must be finite and positive, got {} / {}",
                self.gain_a, self.gain_s
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn index(&self, y: f64) -> i32 {
        quantize_value(self.gain_a * y, self.delta, self.xi)
    }

    #[inline]
    pub fn reconstruct(&self, q: i32) -> f64 {
        self.gain_s * dequantize_value(q, self.delta)
    }

    /// Same quantizer with the step size scaled (operating-point sweeps).
    pub fn with_step_scale(&self, m: f64) -> Self {
        Self {
            delta: self.delta * m,
            ..*self
        }
    }
}

/// Grid of quantization indices for one subband.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexGrid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<i32>,
}

pub fn quantize_subband<T: Real>(y: &Grid<T>, cfg: &BandQuant) -> Result<IndexGrid> {
    cfg.validate()?;
    let mut data = Vec::with_capacity(y.data.len());
    for v in &y.data {
        let v = v.f64();
        if !v.is_finite() {
            return Err(Error::NonFinite("subband sample".into()));
        }
        data.push(cfg.index(v));
    }
    Ok(IndexGrid {
        height: y.height,
        width: y.width,
        data,
    })
}

pub fn dequantize_subband<T: Real>(q: &IndexGrid, cfg: &BandQuant) -> Grid<T> {
    Grid {
        height: q.height,
        width: q.width,
        data: q.data.iter().map(|&i| T::of(cfg.reconstruct(i))).collect(),
    }
}

/// Per-subband quantizer settings for every decomposition level. Entry
/// `[d-1][band]` serves level `d`; the LL entry is only used at the deepest
/// level of a decomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizerConfig {
    pub levels: Vec<[BandQuant; 4]>,
}

impl QuantizerConfig {
    pub fn uniform(levels: usize, delta: f64) -> Self {
        Self {
            levels: vec![[BandQuant::new(delta); 4]; levels],
        }
    }

    /// Step sizes `Δ_base / ‖synthesis basis‖` with unit gains.
    pub fn from_base_step(levels: usize, base: f64, kernel: &WaveletKernel) -> Self {
        Self {
            levels: (1..=levels)
                .map(|d| Band::ALL.map(|b| BandQuant::new(base / synthesis_norm(kernel, d, b))))
                .collect(),
        }
    }

    pub fn band(&self, level: usize, band: Band) -> &BandQuant {
        &self.levels[level - 1][band.index()]
    }

    pub fn band_mut(&mut self, level: usize, band: Band) -> &mut BandQuant {
        &mut self.levels[level - 1][band.index()]
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn with_step_scale(&self, m: f64) -> Self {
        Self {
            levels: self
                .levels
                .iter()
                .map(|l| l.map(|b| b.with_step_scale(m)))
                .collect(),
        }
    }

    /// Same steps with every gain reset to 1, i.e. the plain codec's quantizer.
    pub fn with_unit_gains(&self) -> Self {
        Self {
            levels: self.levels.iter().map(|l| l.map(|b| BandQuant { gain_a: 1.0, gain_s: 1.0, ..b })).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.levels.iter().flatten().try_for_each(|b| b.validate())
    }
}
