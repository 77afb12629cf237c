//! Synthetic oriented-edge images `f(s₁, s₂) = f(s₁ − α·s₂)`.
//!
//! Each image is a 1D prototype profile (a sum of sharp tanh steps) swept
//! along a straight flow of slope `α`, in one of four orientations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dwt::Grid;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub size: usize,
    pub count: usize,
    /// Slope of the flow relative to the vertical axis.
    pub alpha: f64,
    /// Steepness of each tanh step, in 1/pixel.
    pub sharpness: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            count: 96,
            alpha: 0.3,
            sharpness: 2.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 2 || self.count == 0 {
            return Err(Error::InvalidArgument("synthetic corpus needs size ≥ 2 and count ≥ 1".into()));
        }
        if !(self.alpha.is_finite() && self.sharpness.is_finite() && self.sharpness > 0.0) {
            return Err(Error::InvalidArgument("alpha must be finite and sharpness positive".into()));
        }
        Ok(())
    }
}

/// One step of the prototype profile.
#[derive(Clone, Copy, Debug)]
struct Step {
    centre: f64,
    height: f64,
}

/// A single oriented image from its own RNG stream.
pub fn oriented_edge_image(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Grid<f32> {
    let n = cfg.size as f64;
    let orientation = rng.gen_range(0..4u8);
    let base = rng.gen_range(40.0..120.0);
    let features = rng.gen_range(2..=3);
    // the swept coordinate spans about (1 + |α|)·n
    let span = n * (1.0 + cfg.alpha.abs());
    let steps: Vec<Step> = (0..features)
        .map(|_| Step {
            centre: rng.gen_range(-0.5 * span..0.5 * span),
            height: rng.gen_range(40.0..110.0) * if rng.gen::<bool>() { 1.0 } else { -1.0 },
        })
        .collect();
    let profile = |s: f64| base + steps.iter().map(|st| 0.5 * st.height * (1.0 + ((s - st.centre) * cfg.sharpness).tanh())).sum::<f64>();
    let c = (n - 1.0) / 2.0;
    Grid::from_fn(cfg.size, cfg.size, |i, j| {
        let (y, x) = (i as f64 - c, j as f64 - c);
        let (s1, s2) = match orientation {
            0 => (x, y),
            1 => (y, x),
            2 => (-x, y),
            _ => (y, -x),
        };
        profile(s1 - cfg.alpha * s2).round().clamp(0.0, 255.0) as f32
    })
}

/// `cfg.count` images, deterministic in `cfg.seed`.
pub fn oriented_edge_corpus(cfg: &SynthConfig) -> Result<Vec<Grid<f32>>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok((0..cfg.count).map(|_| oriented_edge_image(cfg, &mut rng)).collect())
}
