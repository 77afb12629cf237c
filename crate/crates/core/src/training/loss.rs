//! Aliasing targets and the rate–distortion training loss.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::autograd::ops::grid_to_tensor;
use crate::autograd::{Graph, IndexLut, Tape, Var};
use crate::codec::{dequantize_pyramid, quantize_pyramid};
use crate::dwt::{analyze_level, Band, Grid, WaveletKernel};
use crate::error::{Error, Result};
use crate::nets::Operators;
use crate::pipeline::{analyze_graph, hybrid_analyze_traced, hybrid_synthesize, synthesize_graph, TransformSpec};
use crate::quant::QuantizerConfig;
use crate::rate::RateTable;
use crate::tensor::{mirror, Real, Tensor};

pub const LOWPASS_TAPS: usize = 33;
/// Cutoff of the aliasing-model low-pass filter, in units of π.
pub const LOWPASS_CUTOFF: f64 = 0.7;

/// Hann-windowed sinc, normalised to unit DC gain.
pub fn lowpass_taps() -> Vec<f64> {
    let half = (LOWPASS_TAPS / 2) as i64;
    let h: Vec<f64> = (-half..=half)
        .map(|n| {
            let n = n as f64;
            let sinc = if n == 0.0 {
                LOWPASS_CUTOFF
            } else {
                (PI * LOWPASS_CUTOFF * n).sin() / (PI * n)
            };
            sinc * (0.5 + 0.5 * (PI * n / (half as f64 + 1.0)).cos())
        })
        .collect();
    let s: f64 = h.iter().sum();
    h.into_iter().map(|v| v / s).collect()
}

/// Separable low-pass filtering with whole-sample symmetric extension.
pub fn lowpass(g: &Grid<f64>) -> Grid<f64> {
    let h = lowpass_taps();
    let half = (h.len() / 2) as isize;
    let (rows, cols) = (g.height, g.width);
    let mut tmp = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            tmp[i * cols + j] = h
                .iter()
                .enumerate()
                .map(|(t, c)| c * g.data[i * cols + mirror(j as isize + t as isize - half, cols)])
                .sum();
        }
    }
    Grid::from_fn(rows, cols, |i, j| {
        h.iter()
            .enumerate()
            .map(|(t, c)| c * tmp[mirror(i as isize + t as isize - half, rows) * cols + j])
            .sum()
    })
}

/// Aliasing model per level: `targets[d-1] = y_LL,d − ȳᵗ_LL,d` with
/// `y_LL,d = A_L(ȳᵗ_LL,d−1)` and `ȳᵗ_LL,d = A_L(LPF(ȳᵗ_LL,d−1))`.
#[derive(Clone, Debug, PartialEq)]
pub struct AliasingTarget {
    pub targets: Vec<Grid<f32>>,
    /// Alias-free chain `ȳᵗ_LL,d`.
    pub clean: Vec<Grid<f32>>,
}

pub fn build_aliasing_target(x: &Grid<f32>, levels: usize, kernel: &WaveletKernel) -> Result<AliasingTarget> {
    if levels == 0 {
        return Err(Error::InvalidArgument("aliasing target needs at least one level".into()));
    }
    let mut u: Grid<f64> = x.cast();
    let (mut targets, mut clean) = (Vec::with_capacity(levels), Vec::with_capacity(levels));
    for _ in 0..levels {
        let y = analyze_level(&u, kernel)?.bands[Band::LL.index()].clone();
        let c = analyze_level(&lowpass(&u), kernel)?.bands[Band::LL.index()].clone();
        let t = Grid::from_fn(y.height, y.width, |i, j| y.get(i, j) - c.get(i, j));
        targets.push(t.cast());
        clean.push(c.cast());
        u = c;
    }
    Ok(AliasingTarget { targets, clean })
}

/// `‖ȳ_LL,d − ȳᵗ_LL,d‖²`: aliasing left in the cleaned LL band of level `d`.
pub fn aliasing_residual(
    x: &Grid<f32>,
    level: usize,
    spec: &TransformSpec,
    ops: Option<&Operators<Tensor<f32>>>,
) -> Result<f64> {
    let (_, chain) = hybrid_analyze_traced(x, level, spec, ops)?;
    let t = build_aliasing_target(x, level, &spec.kernel)?;
    let (a, b) = (&chain[level - 1], &t.clean[level - 1]);
    Ok(a.data.iter().zip(&b.data).map(|(p, q)| (*p - *q as f64).powi(2)).sum())
}

/// Value of every loss term for one or more patches.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    /// Squared reconstruction error.
    pub distortion: f64,
    /// Modelled code length in bits.
    pub rate_bits: f64,
    /// Squared error of the level-1 aliasing estimate.
    pub aliasing: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn add(&mut self, o: &LossTerms) {
        self.distortion += o.distortion;
        self.rate_bits += o.rate_bits;
        self.aliasing += o.aliasing;
        self.total += o.total;
    }

    pub fn scaled(&self, s: f64) -> LossTerms {
        LossTerms {
            distortion: self.distortion * s,
            rate_bits: self.rate_bits * s,
            aliasing: self.aliasing * s,
            total: self.total * s,
        }
    }
}

/// Fixed ingredients of the loss for one Step-1 period.
#[derive(Clone)]
pub struct LossSetup {
    pub spec: TransformSpec,
    pub levels: usize,
    /// Step sizes; the gains inside are ignored in favour of the trained ones.
    pub quant: QuantizerConfig,
    /// Code-length tables in container order.
    pub luts: Vec<Arc<IndexLut>>,
    pub lambda1: f64,
}

impl LossSetup {
    pub fn new(spec: TransformSpec, levels: usize, quant: QuantizerConfig, tables: &[RateTable], lambda1: f64) -> Result<Self> {
        if tables.len() != 3 * levels + 1 {
            return Err(Error::InvalidArgument(format!("{} tables for {levels} levels", tables.len())));
        }
        Ok(Self {
            spec,
            levels,
            quant,
            luts: tables.iter().map(|t| t.lut()).collect(),
            lambda1,
        })
    }

    /// `σ = frac·Δ/G_a` per block: the smoothing width in the input domain
    /// for the current gains.
    pub fn sigmas(&self, gains: &[(f64, f64)], frac: f64) -> Vec<f64> {
        block_order(self.levels)
            .iter()
            .zip(gains)
            .map(|(&(level, band), &(ga, _))| frac * self.quant.band(level, band).delta / ga)
            .collect()
    }
}

/// Subbands in container order: `LL_D`, then (HL, LH, HH) for `D..=1`.
pub fn block_order(levels: usize) -> Vec<(usize, Band)> {
    let mut out = vec![(levels, Band::LL)];
    for d in (1..=levels).rev() {
        out.extend(Band::DETAIL.map(|b| (d, b)));
    }
    out
}

/// Scalar nodes of the loss and its terms.
pub struct LossNodes {
    pub total: Var,
    pub distortion: Var,
    pub rate: Var,
    pub aliasing: Option<Var>,
}

/// Records `J = ‖x − x̂‖² + λ₁Σ l̂ + λ₂‖ỹ_LL,1 − ỹᵗ_LL,1‖²` on `tape`.
///
/// `gains` holds `(G_a, G_s)` scalar nodes and `sigmas` the smoothing width
/// of each quantizer, both in container order. The widths are constants of
/// the surrogate, not functions of the gains.
#[allow(clippy::too_many_arguments)]
pub fn record_loss<T: Real>(
    tape: &mut Tape<T>,
    x: &Grid<f32>,
    target: Option<&Grid<f32>>,
    ops: &Operators<Var>,
    gains: &[(Var, Var)],
    sigmas: &[f64],
    setup: &LossSetup,
    lambda2: f64,
) -> Result<LossNodes> {
    let d = setup.levels;
    let xv = tape.input(grid_to_tensor(x.cast::<T>()));
    let a = analyze_graph(tape, &xv, d, &setup.spec, Some(ops))?;

    let mut blocks: Vec<Var> = vec![a.clean_ll[d - 1]];
    for level in (1..=d).rev() {
        blocks.extend(a.details[level - 1]);
    }
    let mut quantized = Vec::with_capacity(blocks.len());
    let mut rates = Vec::with_capacity(blocks.len());
    for (k, ((level, band), y)) in block_order(d).into_iter().zip(&blocks).enumerate() {
        let delta = setup.quant.band(level, band).delta;
        let (ga, gs) = gains[k];
        let sigma = sigmas[k];
        quantized.push(tape.quantize(*y, ga, gs, delta, sigma)?);
        rates.push(tape.rate(*y, ga, delta, sigma, setup.luts[k].clone())?);
    }
    let ll = quantized[0];
    let details: Vec<[Var; 3]> = (1..=d)
        .map(|level| {
            let base = 1 + 3 * (d - level);
            [quantized[base], quantized[base + 1], quantized[base + 2]]
        })
        .collect();
    let xhat = synthesize_graph(tape, &details, &ll, &a.applied, 0, &setup.spec, Some(ops))?;
    let err = tape.sub(&xv, &xhat)?;
    let distortion = tape.sum_squares(err);
    let rate = tape.weighted_sum(&rates.iter().map(|&r| (r, 1.0)).collect::<Vec<_>>())?;
    let aliasing = match (target, &a.aliasing[0]) {
        (Some(t), Some(est)) => {
            let tv = tape.input(grid_to_tensor(t.cast::<T>()));
            let diff = tape.sub(est, &tv)?;
            Some(tape.sum_squares(diff))
        }
        _ => None,
    };
    let mut terms = vec![(distortion, 1.0), (rate, setup.lambda1)];
    if let Some(al) = aliasing {
        terms.push((al, lambda2));
    }
    let total = tape.weighted_sum(&terms)?;
    Ok(LossNodes {
        total,
        distortion,
        rate,
        aliasing,
    })
}

/// Exact (unrelaxed) loss evaluated through the inference path, with
/// `quant` carrying the trained gains.
#[allow(clippy::too_many_arguments)]
pub fn exact_loss(
    x: &Grid<f32>,
    target: Option<&Grid<f32>>,
    ops: &Operators<Tensor<f32>>,
    quant: &QuantizerConfig,
    tables: &[RateTable],
    spec: &TransformSpec,
    levels: usize,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossTerms> {
    let (p, chain) = hybrid_analyze_traced(x, levels, spec, Some(ops))?;
    let q = quantize_pyramid(&p, quant)?;
    let rate_bits: f64 = q
        .blocks()
        .iter()
        .zip(tables)
        .map(|((_, _, g), t)| t.total_length(g.data.iter().copied()))
        .sum();
    let xhat = hybrid_synthesize(&dequantize_pyramid(&q), spec, Some(ops))?;
    let distortion: f64 = x.data.iter().zip(&xhat.data).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
    let aliasing = match target {
        Some(t) if p.applied[0] => {
            let raw = analyze_level(x, &spec.kernel)?.bands[Band::LL.index()].clone();
            raw.data
                .iter()
                .zip(&chain[0].data)
                .zip(&t.data)
                .map(|((r, c), t)| (*r as f64 - *c - *t as f64).powi(2))
                .sum()
        }
        _ => 0.0,
    };
    Ok(LossTerms {
        distortion,
        rate_bits,
        aliasing,
        total: distortion + lambda1 * rate_bits + lambda2 * aliasing,
    })
}

/// Index grids of every subband of `x` under the exact quantizer.
pub fn subband_indices(
    x: &Grid<f32>,
    ops: &Operators<Tensor<f32>>,
    quant: &QuantizerConfig,
    spec: &TransformSpec,
    levels: usize,
) -> Result<Vec<Vec<i32>>> {
    let p = crate::pipeline::hybrid_analyze(x, levels, spec, Some(ops))?;
    let q = quantize_pyramid(&p, quant)?;
    Ok(q.blocks().into_iter().map(|(_, _, g)| g.data.clone()).collect())
}

/// Level-1 aliasing estimate `y_LL,1 − ȳ_LL,1` through the inference path.
pub fn aliasing_estimate(x: &Grid<f32>, spec: &TransformSpec, ops: &Operators<Tensor<f32>>) -> Result<Grid<f64>> {
    let (_, chain) = hybrid_analyze_traced(x, 1, spec, Some(ops))?;
    let raw = analyze_level(x, &spec.kernel)?.bands[Band::LL.index()].clone();
    Ok(Grid::from_fn(raw.height, raw.width, |i, j| raw.get(i, j) as f64 - chain[0].get(i, j)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dwt::Wavelet;
    use crate::nets::{L2hVariant, NetConfig};
    use crate::pipeline::Mode;
    use rand::{Rng, SeedableRng};

    fn spec(mode: Mode) -> TransformSpec {
        TransformSpec {
            kernel: Wavelet::LeGall53.kernel(),
            mode,
            min_extent: 8,
            input_scale: 1.0 / 64.0,
        }
    }

    #[test]
    fn lowpass_response() {
        let h = lowpass_taps();
        assert_eq!(h.len(), 33);
        let resp = |w: f64| h.iter().enumerate().map(|(n, c)| c * (w * (n as f64 - 16.0)).cos()).sum::<f64>();
        assert!((resp(0.0) - 1.0).abs() < 1e-12);
        for k in 0..=50 {
            let w = 0.55 * PI * k as f64 / 50.0;
            assert!((resp(w) - 1.0).abs() < 0.01, "passband {w}: {}", resp(w));
        }
        assert!(resp(0.9 * PI).abs() < 0.01);
        assert!((resp(0.7 * PI) - 0.5).abs() < 0.05);
    }

    #[test]
    fn constant_image_has_no_aliasing() {
        let x = Grid::from_fn(40, 36, |_, _| 97.0f32);
        let t = build_aliasing_target(&x, 3, &Wavelet::Cdf97.kernel()).unwrap();
        for g in &t.targets {
            assert!(g.data.iter().all(|v| v.abs() < 1e-3));
        }
    }

    #[test]
    fn low_frequency_cosine_has_no_aliasing() {
        // with N = 2^L + 1 and ω(N−1) = kπ every level stays whole-sample symmetric
        let n = 65;
        let (wy, wx) = (6.0 * PI / 64.0, 9.0 * PI / 64.0);
        let amp = 50.0;
        let x = Grid::from_fn(n, n, |i, j| (128.0 + amp * (wy * i as f64).cos() * (wx * j as f64).cos()) as f32);
        let t = build_aliasing_target(&x, 2, &Wavelet::LeGall53.kernel()).unwrap();
        for g in &t.targets {
            let m = g.data.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            assert!((m as f64) < 0.01 * amp, "{m}");
        }
    }

    #[test]
    fn edge_target_matches_two_path_oracle() {
        use crate::synth::{oriented_edge_image, SynthConfig};
        let cfg = SynthConfig { size: 64, alpha: 0.3, ..Default::default() };
        let x = oriented_edge_image(&cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
        let k = Wavelet::LeGall53.kernel();
        let t = build_aliasing_target(&x, 1, &k).unwrap();
        // second path: direct FIR filtering, then the band difference
        let h = lowpass_taps();
        let xd: Grid<f64> = x.cast();
        let filt = Grid::from_fn(64, 64, |i, j| {
            let mut acc = 0.0;
            for (a, ca) in h.iter().enumerate() {
                for (b, cb) in h.iter().enumerate() {
                    acc += ca * cb * xd.get(mirror(i as isize + a as isize - 16, 64), mirror(j as isize + b as isize - 16, 64));
                }
            }
            acc
        });
        let y = analyze_level(&xd, &k).unwrap().bands[0].clone();
        let c = analyze_level(&filt, &k).unwrap().bands[0].clone();
        let e: f64 = y.data.iter().zip(&c.data).map(|(a, b)| (a - b).powi(2)).sum();
        let got: f64 = t.targets[0].data.iter().map(|v| (*v as f64).powi(2)).sum();
        assert!(e > 1.0, "staircase residual should be visible");
        assert!((got - e).abs() / e < 1e-5, "{got} vs {e}");
    }

    fn random_image(seed: u64) -> Grid<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Grid::from_fn(32, 32, |_, _| rng.gen_range(0.0..255.0f32).round())
    }

    fn setup(levels: usize, delta: f64, tables: &[RateTable], lambda1: f64) -> LossSetup {
        LossSetup::new(spec(Mode::Hybrid), levels, QuantizerConfig::uniform(levels, delta), tables, lambda1).unwrap()
    }

    #[test]
    fn pure_distortion_with_huge_step() {
        let x = random_image(1);
        let ops: Operators<Tensor<f32>> = Operators::init(&NetConfig::default(), L2hVariant::Adaptive, 1);
        let tables: Vec<RateTable> = (0..7).map(|_| RateTable::build([0])).collect();
        let s = setup(2, 1e9, &tables, 0.0);
        let mut tape = Tape::<f64>::new();
        let o = ops.cast::<f64>().bind(&mut tape);
        let g: Vec<(Var, Var)> = (0..7).map(|_| (tape.param(&Tensor::scalar(1.0)), tape.param(&Tensor::scalar(1.0)))).collect();
        let n = record_loss(&mut tape, &x, None, &o, &g, &s.sigmas(&[(1.0, 1.0); 7], 0.5), &s, 0.0).unwrap();
        let sse: f64 = x.data.iter().map(|v| (*v as f64).powi(2)).sum();
        assert!((tape.scalar_value(n.total) - sse).abs() < 1e-6 * sse);
    }

    #[test]
    fn perfect_aliasing_prediction_costs_nothing() {
        let x = random_image(2);
        let ops: Operators<Tensor<f32>> = Operators::init(&NetConfig::default(), L2hVariant::Adaptive, 2);
        // zero operators predict zero aliasing, so a zero target is met exactly
        let zero = Grid::zeros(16, 16);
        let tables: Vec<RateTable> = (0..7).map(|_| RateTable::build([0])).collect();
        let s = setup(2, 4.0, &tables, 0.0);
        let mut tape = Tape::<f32>::new();
        let o = ops.bind(&mut tape);
        let g: Vec<(Var, Var)> = (0..7).map(|_| (tape.param(&Tensor::scalar(1.0)), tape.param(&Tensor::scalar(1.0)))).collect();
        let n = record_loss(&mut tape, &x, Some(&zero), &o, &g, &s.sigmas(&[(1.0, 1.0); 7], 0.5), &s, 1.0).unwrap();
        assert_eq!(tape.scalar_value(n.aliasing.unwrap()), 0.0);
    }

    #[test]
    fn tape_forward_matches_inference_path() {
        let x = random_image(3);
        let ops: Operators<Tensor<f32>> = Operators::random(&NetConfig::default(), L2hVariant::Adaptive, 3, 0.05);
        let sp = spec(Mode::Hybrid);
        let mut quant = QuantizerConfig::uniform(2, 3.0);
        quant.band_mut(1, Band::HH).gain_a = 1.25;
        quant.band_mut(2, Band::LL).gain_s = 0.96875;
        let idx = subband_indices(&x, &ops, &quant, &sp, 2).unwrap();
        let tables: Vec<RateTable> = idx.iter().map(|v| RateTable::build(v.iter().copied())).collect();
        let target = build_aliasing_target(&x, 1, &sp.kernel).unwrap().targets.remove(0);
        let exact = exact_loss(&x, Some(&target), &ops, &quant, &tables, &sp, 2, 0.7, 0.3).unwrap();

        let s = LossSetup::new(sp, 2, quant.clone(), &tables, 0.7).unwrap();
        let mut tape = Tape::<f32>::new();
        let o = ops.bind(&mut tape);
        let gv: Vec<(f64, f64)> = block_order(2).iter().map(|&(l, b)| (quant.band(l, b).gain_a, quant.band(l, b).gain_s)).collect();
        let g: Vec<(Var, Var)> = gv.iter().map(|&(a, b)| (tape.param(&Tensor::scalar(a as f32)), tape.param(&Tensor::scalar(b as f32)))).collect();
        let n = record_loss(&mut tape, &x, Some(&target), &o, &g, &s.sigmas(&gv, 0.5), &s, 0.3).unwrap();
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-9);
        assert!(rel(tape.scalar_value(n.rate), exact.rate_bits) < 1e-6);
        assert!(rel(tape.scalar_value(n.distortion), exact.distortion) < 1e-4);
        assert!(rel(tape.scalar_value(n.aliasing.unwrap()), exact.aliasing) < 1e-4);
        assert!(rel(tape.scalar_value(n.total), exact.total) < 1e-4);
    }
}
