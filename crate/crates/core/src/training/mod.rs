//! Joint training of the lifting operators and quantizer gains.
//!
//! Training alternates two steps. Step 1 runs Adam on the operator weights
//! and gains for `lut_period` epochs with the code-length tables frozen and
//! the quantizer's derivative smoothed by a shrinking Gaussian. Step 2 refits
//! the tables to histograms of the current indices.

mod config;
mod loss;

pub use config::TrainConfig;
pub use loss::{
    aliasing_estimate, aliasing_residual, block_order, build_aliasing_target, exact_loss, lowpass, lowpass_taps,
    record_loss, subband_indices, AliasingTarget, LossNodes, LossSetup, LossTerms, LOWPASS_CUTOFF, LOWPASS_TAPS,
};

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::ops::grid_to_tensor;
use crate::autograd::{Graph, Tape, Var};
use crate::codec::{fit_tables, quantize_pyramid};
use crate::dwt::Grid;
use crate::error::{Error, Result};
use crate::nets::{L2hVariant, Operators};
use crate::pipeline::{analyze_graph, hybrid_analyze, Mode, TransformSpec};
use crate::quant::QuantizerConfig;
use crate::rate::RateTable;
use crate::tensor::{Real, Tensor};
use crate::weights::{Lambda2Mode, OperatorWeights, WeightsMeta};

/// Smallest trained gain.
pub const MIN_GAIN: f64 = 1e-3;

/// Operator weights plus one `(G_a, G_s)` pair per subband in container order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T: Real = f32> {
    pub ops: Operators<Tensor<T>>,
    pub gains: Vec<(f64, f64)>,
}

impl<T: Real> Params<T> {
    pub fn len(&self) -> usize {
        self.ops.parameter_count() + 2 * self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All values, operator tensors first.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for (_, t) in self.ops.named() {
            out.extend(t.data().iter().map(|v| v.f64()));
        }
        for &(a, s) in &self.gains {
            out.extend([a, s]);
        }
        out
    }

    /// Same layout as `self`, values taken from `flat`.
    pub fn with_flat(&self, flat: &[f64]) -> Self {
        let mut pos = 0;
        let ops = self.ops.map(|_, t| {
            let n = t.len();
            let data = flat[pos..pos + n].iter().map(|&v| T::of(v)).collect();
            pos += n;
            Tensor::new(t.shape().to_vec(), data).expect("same shape")
        });
        let gains = flat[pos..].chunks(2).map(|c| (c[0], c[1])).collect();
        Self { ops, gains }
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            ops: self.ops.cast(),
            gains: self.gains.clone(),
        }
    }

    /// Quantizer settings with these gains and the steps of `steps`.
    pub fn quantizer(&self, steps: &QuantizerConfig) -> QuantizerConfig {
        let mut q = steps.clone();
        for (&(level, band), &(a, s)) in block_order(steps.num_levels()).iter().zip(&self.gains) {
            let b = q.band_mut(level, band);
            b.gain_a = a;
            b.gain_s = s;
        }
        q
    }
}

/// Loss of one patch and, optionally, its gradient in [`Params::flat`] order.
#[allow(clippy::too_many_arguments)]
pub fn patch_loss<T: Real>(
    params: &Params<T>,
    x: &Grid<f32>,
    target: Option<&Grid<f32>>,
    setup: &LossSetup,
    sigmas: &[f64],
    lambda2: f64,
    relaxed_forward: bool,
    with_grad: bool,
) -> Result<(LossTerms, Option<Vec<f64>>)> {
    let mut tape = Tape::<T>::new();
    tape.set_relaxed_forward(relaxed_forward);
    let ops = params.ops.bind(&mut tape);
    let gains: Vec<(Var, Var)> = params
        .gains
        .iter()
        .map(|&(a, s)| (tape.param(&Tensor::scalar(T::of(a))), tape.param(&Tensor::scalar(T::of(s)))))
        .collect();
    let n = record_loss(&mut tape, x, target, &ops, &gains, sigmas, setup, lambda2)?;
    let terms = LossTerms {
        distortion: tape.scalar_value(n.distortion),
        rate_bits: tape.scalar_value(n.rate),
        aliasing: n.aliasing.map_or(0.0, |a| tape.scalar_value(a)),
        total: tape.scalar_value(n.total),
    };
    if !with_grad {
        return Ok((terms, None));
    }
    let mut g = tape.backward(n.total)?;
    let mut flat = Vec::with_capacity(params.len());
    for ((_, v), (_, t)) in ops.named().into_iter().zip(params.ops.named()) {
        flat.extend(g.take_or_zeros(*v, t.shape()).data().iter().map(|v| v.f64()));
    }
    for &(a, s) in &gains {
        for v in [a, s] {
            flat.push(g.take_or_zeros(v, &[]).data().first().map_or(0.0, |v| v.f64()));
        }
    }
    Ok((terms, Some(flat)))
}

/// Aliasing-only loss `‖ỹ_LL,1 − ỹᵗ_LL,1‖²` used for H2L warm starts.
pub fn aliasing_loss(
    params: &Params<f32>,
    x: &Grid<f32>,
    target: &Grid<f32>,
    spec: &TransformSpec,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::<f32>::new();
    let ops = params.ops.bind(&mut tape);
    let xv = tape.input(grid_to_tensor(x.clone()));
    let a = analyze_graph(&mut tape, &xv, 1, spec, Some(&ops))?;
    let est = a.aliasing[0]
        .ok_or_else(|| Error::InvalidArgument("patch too small for the operators".into()))?;
    let t = tape.input(grid_to_tensor(target.clone()));
    let diff = tape.sub(&est, &t)?;
    let l = tape.sum_squares(diff);
    let mut g = tape.backward(l)?;
    let mut flat = Vec::with_capacity(params.len());
    for ((_, v), (_, t)) in ops.named().into_iter().zip(params.ops.named()) {
        flat.extend(g.take_or_zeros(*v, t.shape()).data().iter().map(|v| v.f64()));
    }
    flat.resize(params.len(), 0.0);
    Ok((tape.scalar_value(l), flat))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.t as usize
    }

    pub fn step(&mut self, x: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            x[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Smoothing width fraction at `epoch_in_period`: exponential decay from
/// `sigma_start` to `sigma_end` over each period.
pub fn sigma_fraction(cfg: &TrainConfig, epoch_in_period: usize) -> f64 {
    if cfg.lut_period == 1 {
        return cfg.sigma_start;
    }
    let t = epoch_in_period as f64 / (cfg.lut_period - 1) as f64;
    cfg.sigma_start * (cfg.sigma_end / cfg.sigma_start).powf(t)
}

pub fn lambda2_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    match cfg.lambda2 {
        Lambda2Mode::Zero => 0.0,
        Lambda2Mode::One => 1.0,
        Lambda2Mode::Anneal if cfg.epochs == 1 => 1.0,
        Lambda2Mode::Anneal => 1.0 - epoch as f64 / (cfg.epochs - 1) as f64,
    }
}

pub fn learning_rate_at(cfg: &TrainConfig, step: usize) -> f64 {
    cfg.learning_rate * cfg.lr_decay.powf(step as f64 / cfg.lr_decay_steps as f64)
}

/// Deterministic `size×size` crop of every image.
pub fn crop_patches(images: &[Grid<f32>], size: usize, seed: u64) -> Result<Vec<Grid<f32>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    images
        .iter()
        .map(|g| {
            if g.height < size || g.width < size {
                return Err(Error::Shape(format!("image {}×{} is smaller than the {size}-pixel patch", g.height, g.width)));
            }
            let (i0, j0) = (rng.gen_range(0..=g.height - size), rng.gen_range(0..=g.width - size));
            Ok(Grid::from_fn(size, size, |i, j| g.get(i0 + i, j0 + j)))
        })
        .collect()
}

fn f32_exact(v: f64) -> f64 {
    v as f32 as f64
}

/// Step sizes `Δ_base/‖basis‖`, rounded to what the container stores.
pub fn base_steps(levels: usize, delta_base: f64, spec: &TransformSpec) -> QuantizerConfig {
    let mut q = QuantizerConfig::from_base_step(levels, delta_base, &spec.kernel);
    for b in q.levels.iter_mut().flatten() {
        b.delta = f32_exact(b.delta);
    }
    q
}

/// Distortion and modelled bits of the baseline codec over `patches`, each
/// patch coded with its own fitted tables.
pub fn baseline_operating_point(patches: &[Grid<f32>], levels: usize, delta_base: f64, spec: &TransformSpec) -> Result<(f64, f64)> {
    let base = TransformSpec { mode: Mode::Baseline, ..spec.clone() };
    let steps = base_steps(levels, delta_base, &base);
    let mut sse = 0.0;
    let mut bits = 0.0;
    for x in patches {
        let p = hybrid_analyze(x, levels, &base, None)?;
        let q = quantize_pyramid(&p, &steps)?;
        bits += crate::codec::estimated_bits(&q, &fit_tables(&q));
        let r = crate::pipeline::hybrid_synthesize(&crate::codec::dequantize_pyramid(&q), &base, None)?;
        sse += x.data.iter().zip(&r.data).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>();
    }
    Ok((sse, bits))
}

/// Base step size giving `target_bpp` average modelled rate on the baseline.
pub fn calibrate_delta_base(patches: &[Grid<f32>], levels: usize, target_bpp: f64, spec: &TransformSpec) -> Result<f64> {
    let pixels: usize = patches.iter().map(|p| p.data.len()).sum();
    let bpp = |d: f64| baseline_operating_point(patches, levels, d, spec).map(|(_, b)| b / pixels as f64);
    let (mut lo, mut hi) = (1e-2f64.ln(), 1e4f64.ln());
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if bpp(mid.exp())? > target_bpp {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-4 {
            break;
        }
    }
    Ok(f32_exact((0.5 * (lo + hi)).exp()))
}

/// Local slope `|ΔD/ΔR|` of the baseline around `delta_base`.
pub fn estimate_lambda1(patches: &[Grid<f32>], levels: usize, delta_base: f64, spec: &TransformSpec) -> Result<f64> {
    let (d0, r0) = baseline_operating_point(patches, levels, delta_base * 0.9, spec)?;
    let (d1, r1) = baseline_operating_point(patches, levels, delta_base * 1.1, spec)?;
    if (r0 - r1).abs() < 1e-9 {
        return Err(Error::InvalidArgument("rate does not change with the step size".into()));
    }
    Ok(((d1 - d0) / (r0 - r1)).abs())
}

/// Per-block tables fitted to the pooled indices of `patches`.
pub fn fit_pooled_tables(
    params: &Params<f32>,
    patches: &[Grid<f32>],
    steps: &QuantizerConfig,
    spec: &TransformSpec,
    levels: usize,
) -> Result<Vec<RateTable>> {
    let quant = params.quantizer(steps);
    let per: Vec<Vec<Vec<i32>>> = patches
        .par_iter()
        .map(|x| subband_indices(x, &params.ops, &quant, spec, levels))
        .collect::<Result<_>>()?;
    let mut hists = vec![BTreeMap::<i32, u64>::new(); 3 * levels + 1];
    for blocks in &per {
        for (h, b) in hists.iter_mut().zip(blocks) {
            for &q in b {
                *h.entry(q).or_default() += 1;
            }
        }
    }
    Ok(hists.iter().map(RateTable::from_histogram).collect())
}

/// Summed exact loss over `patches`.
#[allow(clippy::too_many_arguments)]
pub fn exact_loss_sum(
    params: &Params<f32>,
    patches: &[Grid<f32>],
    targets: &[Grid<f32>],
    steps: &QuantizerConfig,
    tables: &[RateTable],
    spec: &TransformSpec,
    levels: usize,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossTerms> {
    let quant = params.quantizer(steps);
    let per: Vec<LossTerms> = patches
        .par_iter()
        .zip(targets.par_iter())
        .map(|(x, t)| exact_loss(x, Some(t), &params.ops, &quant, tables, spec, levels, lambda1, lambda2))
        .collect::<Result<_>>()?;
    let mut sum = LossTerms::default();
    per.iter().for_each(|t| sum.add(t));
    Ok(sum)
}

/// One line of the loss trace; terms are per-patch means over the epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub distortion: f64,
    pub rate_bits: f64,
    pub aliasing: f64,
    pub total: f64,
    pub sigma: f64,
    pub lambda2: f64,
    pub lr: f64,
}

/// Step-2 boundary: the table-fitting sample's `J'` and `Σ l̂` under the
/// old and the refitted tables.
#[derive(Clone, Debug, PartialEq)]
pub struct RefreshRecord {
    pub epoch: usize,
    pub j_before: f64,
    pub j_after: f64,
    pub bits_before: f64,
    pub bits_after: f64,
    /// Blocks whose refit would have lengthened the sample and were kept.
    pub kept_blocks: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: OperatorWeights,
    pub tables: Vec<RateTable>,
    pub trace: Vec<TraceRow>,
    pub refreshes: Vec<RefreshRecord>,
    pub lambda1: f64,
    pub lambda1_estimated: bool,
    pub delta_base: f64,
    /// Mean aliasing loss per pretraining epoch.
    pub pretrain_trace: Vec<f64>,
}

pub fn write_trace_csv(outcome: &TrainOutcome, mut out: impl Write) -> Result<()> {
    writeln!(
        out,
        "# lambda1={}{} delta_base={}",
        outcome.lambda1,
        if outcome.lambda1_estimated { " (estimated)" } else { "" },
        outcome.delta_base
    )?;
    writeln!(out, "epoch,D_term,R_term,aliasing_term,J,sigma,lambda2,lr")?;
    for r in &outcome.trace {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch, r.distortion, r.rate_bits, r.aliasing, r.total, r.sigma, r.lambda2, r.lr
        )?;
    }
    Ok(())
}

fn variant_for(mode: Mode) -> L2hVariant {
    mode.l2h().unwrap_or(L2hVariant::Adaptive)
}

/// Summed gradient of a batch, reduced in patch order.
fn batch_gradient(
    params: &Params<f32>,
    batch: &[usize],
    patches: &[Grid<f32>],
    targets: &[Grid<f32>],
    setup: &LossSetup,
    sigma_frac: f64,
    lambda2: f64,
) -> Result<(LossTerms, Vec<f64>)> {
    let sigmas = setup.sigmas(&params.gains, sigma_frac);
    let per: Vec<(LossTerms, Option<Vec<f64>>)> = batch
        .par_iter()
        .map(|&i| patch_loss(params, &patches[i], Some(&targets[i]), setup, &sigmas, lambda2, false, true))
        .collect::<Result<_>>()?;
    let mut terms = LossTerms::default();
    let mut grad = vec![0.0; params.len()];
    for (t, g) in per {
        terms.add(&t);
        for (a, b) in grad.iter_mut().zip(g.expect("requested")) {
            *a += b;
        }
    }
    Ok((terms, grad))
}

/// Removes the mean of every low-to-high filter. Details of a constant LL
/// band are zero, and a filter with DC response would leak the LL mean into
/// flat regions, where the deadzone turns it into reconstruction error.
pub fn project_zero_dc<T: Real>(params: &Params<T>, flat: &mut [f64]) {
    let mut pos = 0;
    for (name, t) in params.ops.named() {
        if name == "l2h.proposals" || name == "l2h.linear" {
            let per = t.len() / t.shape()[0];
            for f in flat[pos..pos + t.len()].chunks_mut(per) {
                let mean = f.iter().sum::<f64>() / per as f64;
                f.iter_mut().for_each(|v| *v -= mean);
            }
        }
        pos += t.len();
    }
}

fn apply_step(params: &Params<f32>, adam: &mut Adam, grad: &[f64], lr: f64) -> Params<f32> {
    let mut flat = params.flat();
    adam.step(&mut flat, grad, lr);
    project_zero_dc(params, &mut flat);
    let n_ops = params.ops.parameter_count();
    for (i, v) in flat.iter_mut().enumerate() {
        *v = if i < n_ops { f32_exact(*v) } else { f32_exact(v.max(MIN_GAIN)) };
    }
    params.with_flat(&flat)
}

fn check_finite(epoch: usize, t: &LossTerms, grad: &[f64]) -> Result<()> {
    if !t.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged {
            epoch,
            reason: format!("non-finite loss or gradient (D={}, R={}, A={})", t.distortion, t.rate_bits, t.aliasing),
        });
    }
    Ok(())
}

/// Aliasing-only training of the H2L operator.
fn pretrain_h2l(
    cfg: &TrainConfig,
    mut params: Params<f32>,
    patches: &[Grid<f32>],
    targets: &[Grid<f32>],
    spec: &TransformSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(Params<f32>, Vec<f64>)> {
    let mut adam = Adam::new(params.len());
    let mut trace = Vec::with_capacity(cfg.pretrain_epochs);
    let mut order: Vec<usize> = (0..patches.len()).collect();
    for epoch in 0..cfg.pretrain_epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let per: Vec<(f64, Vec<f64>)> = batch
                .par_iter()
                .map(|&i| aliasing_loss(&params, &patches[i], &targets[i], spec))
                .collect::<Result<_>>()?;
            let mut grad = vec![0.0; params.len()];
            for (l, g) in per {
                total += l;
                grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            grad.iter_mut().for_each(|g| *g /= batch.len() as f64);
            let lr = learning_rate_at(cfg, adam.steps());
            check_finite(epoch, &LossTerms { total, ..Default::default() }, &grad)?;
            params = apply_step(&params, &mut adam, &grad, lr);
        }
        trace.push(total / patches.len() as f64);
    }
    Ok((params, trace))
}

/// Full alternating training on `images` (cropped to `patch_size`).
pub fn train(images: &[Grid<f32>], cfg: &TrainConfig, init: Option<&OperatorWeights>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::InvalidArgument("training corpus is empty".into()));
    }
    let levels = cfg.levels;
    let mut meta = WeightsMeta::new(cfg.wavelet, variant_for(cfg.mode));
    meta.net = cfg.net;
    meta.lambda2 = cfg.lambda2;
    meta.min_extent = cfg.min_extent;
    let spec = TransformSpec {
        kernel: cfg.wavelet.kernel(),
        mode: cfg.mode,
        min_extent: cfg.min_extent,
        input_scale: cfg.net.opacity_input_scale as f64,
    };

    let patches = crop_patches(images, cfg.patch_size, cfg.seed)?;
    let targets: Vec<Grid<f32>> = patches
        .par_iter()
        .map(|x| build_aliasing_target(x, 1, &spec.kernel).map(|t| t.targets[0].clone()))
        .collect::<Result<_>>()?;
    let sample = match cfg.table_sample {
        0 => patches.len(),
        n => n.min(patches.len()),
    };

    let delta_base = match cfg.delta_base {
        Some(d) => f32_exact(d),
        None => calibrate_delta_base(&patches, levels, cfg.target_bpp, &spec)?,
    };
    let (lambda1, lambda1_estimated) = match cfg.lambda1 {
        Some(l) => (l, false),
        None => (estimate_lambda1(&patches, levels, delta_base, &spec)?, true),
    };
    let steps = base_steps(levels, delta_base, &spec);

    let mut params = match init {
        Some(w) => {
            if w.ops.variant() != meta.variant || w.meta.net != cfg.net {
                return Err(Error::WeightsMismatch("initial weights do not match the configuration".into()));
            }
            w.ops.check_shapes(&cfg.net)?;
            let gains = block_order(levels)
                .iter()
                .map(|&(l, b)| {
                    let q = w.quant.levels.get(l - 1).map(|lv| lv[b.index()]);
                    q.map_or((1.0, 1.0), |q| (q.gain_a, q.gain_s))
                })
                .collect();
            Params { ops: w.ops.clone(), gains }
        }
        None => Params {
            ops: Operators::init(&cfg.net, meta.variant, cfg.seed),
            gains: vec![(1.0, 1.0); 3 * levels + 1],
        },
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
    let mut pretrain_trace = Vec::new();
    if cfg.pretrain_epochs > 0 {
        let (p, t) = pretrain_h2l(cfg, params, &patches, &targets, &spec, &mut rng)?;
        params = p;
        pretrain_trace = t;
    }

    let (sample_x, sample_t) = (&patches[..sample], &targets[..sample]);
    let mut tables = fit_pooled_tables(&params, sample_x, &steps, &spec, levels)?;
    let mut adam = Adam::new(params.len());
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut refreshes = Vec::with_capacity(cfg.periods());
    let mut order: Vec<usize> = (0..patches.len()).collect();
    let n = patches.len() as f64;

    for period in 0..cfg.periods() {
        let setup = LossSetup::new(spec.clone(), levels, steps.clone(), &tables, lambda1)?;
        let mut period_start = None;
        let mut last = 0.0;
        for e in 0..cfg.lut_period {
            let epoch = period * cfg.lut_period + e;
            let sigma = sigma_fraction(cfg, e);
            let lambda2 = lambda2_at(cfg, epoch);
            let lr_epoch = learning_rate_at(cfg, adam.steps());
            order.shuffle(&mut rng);
            let mut sum = LossTerms::default();
            for batch in order.chunks(cfg.batch_size) {
                let (terms, mut grad) = batch_gradient(&params, batch, &patches, &targets, &setup, sigma, lambda2)?;
                check_finite(epoch, &terms, &grad)?;
                sum.add(&terms);
                grad.iter_mut().for_each(|g| *g /= batch.len() as f64);
                let lr = learning_rate_at(cfg, adam.steps());
                params = apply_step(&params, &mut adam, &grad, lr);
            }
            let mean = sum.scaled(1.0 / n);
            period_start.get_or_insert(mean.total);
            last = mean.total;
            trace.push(TraceRow {
                epoch,
                distortion: mean.distortion,
                rate_bits: mean.rate_bits,
                aliasing: mean.aliasing,
                total: mean.total,
                sigma,
                lambda2,
                lr: lr_epoch,
            });
        }
        let start = period_start.expect("non-empty period");
        if last > cfg.divergence_factor * start {
            return Err(Error::Diverged {
                epoch: (period + 1) * cfg.lut_period - 1,
                reason: format!("J grew from {start} to {last} within one period"),
            });
        }

        // Step 2
        let epoch = (period + 1) * cfg.lut_period - 1;
        let lambda2 = lambda2_at(cfg, epoch);
        let refit = fit_pooled_tables(&params, sample_x, &steps, &spec, levels)?;
        let quant = params.quantizer(&steps);
        let indices: Vec<Vec<Vec<i32>>> = sample_x
            .par_iter()
            .map(|x| subband_indices(x, &params.ops, &quant, &spec, levels))
            .collect::<Result<_>>()?;
        let block_bits = |t: &RateTable, k: usize| -> f64 { indices.iter().map(|b| t.total_length(b[k].iter().copied())).sum() };
        let mut kept = 0;
        let mut next = Vec::with_capacity(tables.len());
        let (mut bits_before, mut bits_after) = (0.0, 0.0);
        for (k, (old, new)) in tables.iter().zip(refit).enumerate() {
            let (b_old, b_new) = (block_bits(old, k), block_bits(&new, k));
            bits_before += b_old;
            if b_new > b_old {
                kept += 1;
                bits_after += b_old;
                next.push(old.clone());
            } else {
                bits_after += b_new;
                next.push(new);
            }
        }
        let j_before = exact_loss_sum(&params, sample_x, sample_t, &steps, &tables, &spec, levels, lambda1, lambda2)?.total;
        let j_after = exact_loss_sum(&params, sample_x, sample_t, &steps, &next, &spec, levels, lambda1, lambda2)?.total;
        refreshes.push(RefreshRecord {
            epoch,
            j_before,
            j_after,
            bits_before,
            bits_after,
            kept_blocks: kept,
        });
        tables = next;
    }

    let weights = OperatorWeights {
        meta,
        ops: params.ops.clone(),
        quant: params.quantizer(&steps),
    };
    Ok(TrainOutcome {
        weights,
        tables,
        trace,
        refreshes,
        lambda1,
        lambda1_estimated,
        delta_base,
        pretrain_trace,
    })
}

/// Largest relative error between the tape gradient of the relaxed loss
/// and central differences, over the coordinates `indices` of
/// [`Params::flat`]. Smoothing widths are frozen at `params`. Coordinates
/// whose reference derivative is below `floor` are compared in absolute
/// terms against `floor`.
///
/// `steps` are tried in order for each coordinate until one agrees within
/// `tol`: a leaky-ReLU kink inside one step, or rounding at a tiny one,
/// spoils a single difference, while a wrong gradient disagrees at all of
/// them. The reported error of a coordinate is its smallest over the steps
/// tried.
#[allow(clippy::too_many_arguments)]
pub fn loss_gradient_check(
    params: &Params<f64>,
    x: &Grid<f32>,
    target: &Grid<f32>,
    setup: &LossSetup,
    sigma_frac: f64,
    lambda2: f64,
    steps: &[f64],
    floor: f64,
    tol: f64,
    indices: &[usize],
) -> Result<GradCheckReport> {
    if steps.is_empty() {
        return Err(Error::InvalidArgument("gradient check needs at least one step".into()));
    }
    let sigmas = setup.sigmas(&params.gains, sigma_frac);
    let (_, g) = patch_loss(params, x, Some(target), setup, &sigmas, lambda2, true, true)?;
    let analytic = g.expect("requested");
    let base = params.flat();
    let eval = |flat: &[f64]| -> Result<f64> {
        let p = params.with_flat(flat);
        Ok(patch_loss(&p, x, Some(target), setup, &sigmas, lambda2, true, false)?.0.total)
    };
    // (index, analytic, best difference, its error, steps tried)
    let results: Vec<(usize, f64, f64, f64, usize)> = indices
        .par_iter()
        .map(|&i| {
            let a = analytic[i];
            let mut probe = base.clone();
            let mut best = (f64::NAN, f64::INFINITY);
            let mut tried = 0;
            for &eps in steps {
                probe[i] = base[i] + eps;
                let up = eval(&probe)?;
                probe[i] = base[i] - eps;
                let down = eval(&probe)?;
                let fd = (up - down) / (2.0 * eps);
                let err = (a - fd).abs() / fd.abs().max(floor);
                tried += 1;
                if err < best.1 {
                    best = (fd, err);
                }
                if err <= tol {
                    break;
                }
            }
            Ok((i, a, best.0, best.1, tried))
        })
        .collect::<Result<_>>()?;
    let mut report = GradCheckReport { checked: results.len(), ..Default::default() };
    for (i, a, fd, err, tried) in results {
        if tried > 1 {
            report.fallbacks += 1;
        }
        if err > report.worst {
            report.worst = err;
            report.worst_index = i;
            report.worst_pair = (a, fd);
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst: f64,
    pub worst_index: usize,
    /// Analytic and finite-difference derivative at the worst coordinate.
    pub worst_pair: (f64, f64),
    /// Coordinates that needed more than the first step.
    pub fallbacks: usize,
}

/// Name of the parameter at `flat` position `i`.
pub fn parameter_name<T: Real>(params: &Params<T>, i: usize) -> String {
    let mut pos = 0;
    for (name, t) in params.ops.named() {
        if i < pos + t.len() {
            return format!("{name}[{}]", i - pos);
        }
        pos += t.len();
    }
    let k = (i - pos) / 2;
    let (level, band) = block_order((params.gains.len() - 1) / 3)[k];
    format!("gain_{}[{}{}]", if (i - pos).is_multiple_of(2) { "a" } else { "s" }, band.name(), level)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dwt::{Band, Wavelet};
    use crate::nets::NetConfig;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            levels: 2,
            patch_size: 32,
            epochs: 4,
            lut_period: 2,
            batch_size: 4,
            learning_rate: 1e-3,
            net: NetConfig { proposals: 2, proposal_kernel: 5, opacity_width: 4, res_blocks: 1, ..Default::default() },
            ..Default::default()
        }
    }

    fn corpus(n: usize, size: usize) -> Vec<Grid<f32>> {
        crate::synth::oriented_edge_corpus(&crate::synth::SynthConfig { count: n, size, ..Default::default() }).unwrap()
    }

    #[test]
    fn flat_round_trip() {
        let p = Params::<f32> {
            ops: Operators::random(&NetConfig::default(), L2hVariant::Linear, 4, 0.1),
            gains: vec![(1.5, 0.5); 7],
        };
        assert_eq!(p.with_flat(&p.flat()), p);
        assert_eq!(p.flat().len(), p.len());
        assert_eq!(parameter_name(&p, p.len() - 1), "gain_s[HH1]");
        assert_eq!(parameter_name(&p, 0), "h2l.opacity.stem.weight[0]");
    }

    #[test]
    fn schedules() {
        let cfg = TrainConfig { epochs: 40, lut_period: 20, lambda2: Lambda2Mode::Anneal, ..Default::default() };
        assert!((sigma_fraction(&cfg, 0) - 0.5).abs() < 1e-15);
        assert!((sigma_fraction(&cfg, 19) - 0.1).abs() < 1e-15);
        assert!(sigma_fraction(&cfg, 10) < sigma_fraction(&cfg, 9));
        assert_eq!(lambda2_at(&cfg, 0), 1.0);
        assert_eq!(lambda2_at(&cfg, 39), 0.0);
        assert!((learning_rate_at(&cfg, 20) - 0.96e-4).abs() < 1e-18);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut a = Adam::new(2);
        let mut x = vec![1.0, -1.0];
        a.step(&mut x, &[3.0, -0.5], 0.1);
        assert!((x[0] - 0.9).abs() < 1e-6 && (x[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn delta_calibration_hits_target() {
        let patches = corpus(6, 32);
        let spec = TransformSpec::baseline(Wavelet::LeGall53);
        let d = calibrate_delta_base(&patches, 2, 1.0, &spec).unwrap();
        let (_, bits) = baseline_operating_point(&patches, 2, d, &spec).unwrap();
        let bpp = bits / (6.0 * 1024.0);
        assert!((bpp - 1.0).abs() < 0.05, "{bpp}");
        assert!(estimate_lambda1(&patches, 2, d, &spec).unwrap() > 0.0);
    }

    #[test]
    fn refit_is_a_fixed_point() {
        let patches = corpus(4, 32);
        let spec = TransformSpec { mode: Mode::Hybrid, ..TransformSpec::baseline(Wavelet::LeGall53) };
        let params = Params::<f32> {
            ops: Operators::random(&NetConfig::default(), L2hVariant::Adaptive, 1, 0.02),
            gains: vec![(1.0, 1.0); 7],
        };
        let steps = base_steps(2, 6.0, &spec);
        let a = fit_pooled_tables(&params, &patches, &steps, &spec, 2).unwrap();
        let b = fit_pooled_tables(&params, &patches, &steps, &spec, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn training_is_reproducible_and_monotone_at_refresh() {
        let images = corpus(8, 32);
        let cfg = small_cfg();
        let a = train(&images, &cfg, None).unwrap();
        let b = train(&images, &cfg, None).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.trace.len(), 4);
        assert_eq!(a.refreshes.len(), 2);
        for r in &a.refreshes {
            assert!(r.bits_after <= r.bits_before && r.j_after <= r.j_before, "{r:?}");
        }
        assert!(a.lambda1_estimated && a.lambda1 > 0.0);
        assert_ne!(a.weights.ops, Operators::init(&cfg.net, L2hVariant::Adaptive, cfg.seed));
        let mut csv = Vec::new();
        write_trace_csv(&a, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().nth(1), Some("epoch,D_term,R_term,aliasing_term,J,sigma,lambda2,lr"));
        assert_eq!(text.lines().count(), 6);
    }

    #[test]
    fn pretraining_reduces_aliasing_loss() {
        let images = corpus(8, 32);
        let cfg = TrainConfig { pretrain_epochs: 6, learning_rate: 3e-3, epochs: 1, lut_period: 1, ..small_cfg() };
        let out = train(&images, &cfg, None).unwrap();
        let t = &out.pretrain_trace;
        assert_eq!(t.len(), 6);
        assert!(t[5] < t[0], "{t:?}");
    }

    #[test]
    fn constant_corpus_codes_details_for_free() {
        let images = vec![Grid::from_fn(32, 32, |_, _| 131.0f32); 4];
        let cfg = TrainConfig { delta_base: Some(8.0), lambda1: Some(1.0), ..small_cfg() };
        let out = train(&images, &cfg, None).unwrap();
        let spec = TransformSpec::for_weights(&out.weights, cfg.mode).unwrap();
        let q = quantize_pyramid(&hybrid_analyze(&images[0], 2, &spec, Some(&out.weights.ops)).unwrap(), &out.weights.quant).unwrap();
        for (level, band, g) in q.blocks() {
            if band != Band::LL {
                assert!(g.data.iter().all(|&v| v == 0), "level {level} {band:?}");
            }
        }
        // only the deadzone error of the DC band remains
        let last = out.trace.last().unwrap();
        let d_bits = out.tables[1..].iter().map(|t| t.length(0)).fold(0.0, f64::max);
        assert!(d_bits < 0.1, "{d_bits}");
        assert!(last.distortion < 32.0 * 32.0 * 8.0 * 8.0);
    }

    #[test]
    fn small_gradient_check() {
        let x = corpus(1, 16).remove(0);
        let spec = TransformSpec { mode: Mode::Hybrid, min_extent: 4, ..TransformSpec::baseline(Wavelet::LeGall53) };
        let net = NetConfig { proposals: 2, proposal_kernel: 3, opacity_width: 3, res_blocks: 1, ..Default::default() };
        let ops = Operators::<Tensor<f64>>::random(&net, L2hVariant::Adaptive, 9, 0.1).with_random_biases(9, 0.2);
        let mut params = Params::<f64> { ops, gains: vec![(1.1, 0.9); 7] };
        params.gains[3] = (0.8, 1.2);
        let steps = base_steps(2, 4.0, &spec);
        let idx = subband_indices(&x, &params.ops.cast(), &params.quantizer(&steps), &spec, 2).unwrap();
        let tables: Vec<RateTable> = idx.iter().map(|b| RateTable::build(b.iter().copied())).collect();
        let setup = LossSetup::new(spec.clone(), 2, steps, &tables, 0.5).unwrap();
        let target = build_aliasing_target(&x, 1, &spec.kernel).unwrap().targets.remove(0);
        let all: Vec<usize> = (0..params.len()).collect();
        let r = loss_gradient_check(&params, &x, &target, &setup, 0.5, 0.7, &[1e-6], 1e-3, 1e-2, &all).unwrap();
        assert!(r.worst < 1e-2, "{} at {}: {:?}", r.worst, parameter_name(&params, r.worst_index), r.worst_pair);
    }
}
