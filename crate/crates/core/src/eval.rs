//! Quality metrics, energy compaction, Bjøntegaard rates and RD sweeps.

use std::io::Write;

use rayon::prelude::*;

use crate::codec::{decode_image_stream, encode_image};
use crate::dwt::{Band, Grid, Wavelet};
use crate::error::{Error, Result};
use crate::image::quantize_8bit;
use crate::nets::Operators;
use crate::pipeline::{Mode, TransformSpec};
use crate::quant::QuantizerConfig;
use crate::tensor::Tensor;
use crate::weights::OperatorWeights;

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const MS_SSIM_MIN_DIM: usize = 176;

fn same_shape(x: &Grid<f32>, y: &Grid<f32>) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::Shape(format!("images differ in shape: {:?} vs {:?}", x.shape(), y.shape())));
    }
    if x.data.is_empty() {
        return Err(Error::Shape("empty image".into()));
    }
    Ok(())
}

pub fn mse(x: &Grid<f32>, y: &Grid<f32>) -> Result<f64> {
    same_shape(x, y)?;
    let s: f64 = x.data.iter().zip(&y.data).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    Ok(s / x.data.len() as f64)
}

/// PSNR in dB; identical images give `+∞`.
pub fn psnr(x: &Grid<f32>, y: &Grid<f32>, peak: f64) -> Result<f64> {
    let m = mse(x, y)?;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (peak * peak / m).log10() })
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable filtering keeping only fully covered positions.
fn filter_valid(data: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..n).map(|t| k[t] * data[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..n).map(|t| k[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM and mean contrast-structure term.
fn ssim_terms(x: &[f64], y: &[f64], h: usize, w: usize) -> (f64, f64) {
    let k = gaussian_window();
    let c1 = (SSIM_K1 * 255.0).powi(2);
    let c2 = (SSIM_K2 * 255.0).powi(2);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (mx, ..) = filter_valid(x, h, w, &k);
    let (my, ..) = filter_valid(y, h, w, &k);
    let (sxx, ..) = filter_valid(&prod(x, x), h, w, &k);
    let (syy, ..) = filter_valid(&prod(y, y), h, w, &k);
    let (sxy, ..) = filter_valid(&prod(x, y), h, w, &k);
    let (mut s, mut cs) = (0.0, 0.0);
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cxy = sxy[i] - ux * uy;
        let c = (2.0 * cxy + c2) / (vx + vy + c2);
        cs += c;
        s += c * (2.0 * ux * uy + c1) / (ux * ux + uy * uy + c1);
    }
    let n = mx.len() as f64;
    (s / n, cs / n)
}

fn to_f64(g: &Grid<f32>) -> Vec<f64> {
    g.data.iter().map(|&v| v as f64).collect()
}

/// Mean SSIM over all fully covered 11×11 windows.
pub fn ssim(x: &Grid<f32>, y: &Grid<f32>) -> Result<f64> {
    same_shape(x, y)?;
    if x.height < SSIM_WINDOW || x.width < SSIM_WINDOW {
        return Err(Error::Shape(format!("SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels")));
    }
    Ok(ssim_terms(&to_f64(x), &to_f64(y), x.height, x.width).0)
}

/// 2×2 averaging then decimation (edge samples mirror onto themselves).
fn downsample(d: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let (i1, j1) = ((2 * i + 1).min(h - 1), (2 * j + 1).min(w - 1));
            out[i * ow + j] = 0.25 * (d[2 * i * w + 2 * j] + d[2 * i * w + j1] + d[i1 * w + 2 * j] + d[i1 * w + j1]);
        }
    }
    (out, oh, ow)
}

/// Five-scale MS-SSIM. Negative per-scale terms are clamped to zero.
pub fn ms_ssim(x: &Grid<f32>, y: &Grid<f32>) -> Result<f64> {
    same_shape(x, y)?;
    if x.height.min(x.width) < MS_SSIM_MIN_DIM {
        return Err(Error::Shape(format!(
            "MS-SSIM needs a minimum dimension of {MS_SSIM_MIN_DIM}, image is {}×{}",
            x.height, x.width
        )));
    }
    let (mut a, mut b, mut h, mut w) = (to_f64(x), to_f64(y), x.height, x.width);
    let mut out = 1.0;
    for (s, &wt) in MS_SSIM_WEIGHTS.iter().enumerate() {
        let (full, cs) = ssim_terms(&a, &b, h, w);
        let term = if s + 1 == MS_SSIM_WEIGHTS.len() { full } else { cs };
        out *= term.max(0.0).powf(wt);
        if s + 1 < MS_SSIM_WEIGHTS.len() {
            let (na, nh, nw) = downsample(&a, h, w);
            b = downsample(&b, h, w).0;
            a = na;
            h = nh;
            w = nw;
        }
    }
    Ok(out)
}

/// `−10·log₁₀(1 − v)`, the decibel form of MS-SSIM.
pub fn ms_ssim_db(v: f64) -> f64 {
    -10.0 * (1.0 - v).log10()
}

/// Subband energies as a percentage of the plain wavelet's, summed over a
/// set of images. `None` marks bands the mode leaves untouched (level-1
/// details without a low-to-high step).
#[derive(Clone, Debug, PartialEq)]
pub struct CompactionTable {
    /// `levels[d-1][band]` in LL, HL, LH, HH order.
    pub levels: Vec<[Option<f64>; 4]>,
}

impl CompactionTable {
    pub fn get(&self, level: usize, band: Band) -> Option<f64> {
        self.levels[level - 1][band.index()]
    }

    pub fn render(&self) -> String {
        let mut s = String::from("level      LL       HL       LH       HH\n");
        for (d, row) in self.levels.iter().enumerate() {
            s.push_str(&format!("{:>5}", d + 1));
            for v in row {
                match v {
                    Some(v) => s.push_str(&format!(" {v:>7.2}%")),
                    None => s.push_str("        –"),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Energy of every cleaned subband relative to the baseline transform.
pub fn energy_compaction(
    images: &[Grid<f32>],
    levels: usize,
    spec: &TransformSpec,
    ops: Option<&Operators<Tensor<f32>>>,
) -> Result<CompactionTable> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("no images for energy compaction".into()));
    }
    let base_spec = TransformSpec {
        mode: Mode::Baseline,
        ..spec.clone()
    };
    let per_image = images
        .par_iter()
        .map(|x| -> Result<Vec<[(f64, f64); 4]>> {
            let (p, chain) = crate::pipeline::hybrid_analyze_traced(x, levels, spec, ops)?;
            let (b, bchain) = crate::pipeline::hybrid_analyze_traced(x, levels, &base_spec, None)?;
            Ok((0..levels)
                .map(|d| {
                    let mut row = [(chain[d].energy(), bchain[d].energy()); 4];
                    for i in 0..3 {
                        row[i + 1] = (p.details[d][i].energy(), b.details[d][i].energy());
                    }
                    row
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut levels_out = Vec::with_capacity(levels);
    for d in 0..levels {
        let mut row = [None; 4];
        for (band, slot) in row.iter_mut().enumerate() {
            if d == 0 && band > 0 && spec.mode.l2h().is_none() {
                continue;
            }
            let (num, den) = per_image.iter().fold((0.0, 0.0), |(a, b), e| (a + e[d][band].0, b + e[d][band].1));
            *slot = Some(if den > 0.0 { 100.0 * num / den } else { 100.0 });
        }
        levels_out.push(row);
    }
    Ok(CompactionTable { levels: levels_out })
}

/// Rate–quality points of one codec, rates strictly increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct RdCurve {
    pub label: String,
    pub metric: String,
    pub points: Vec<(f64, f64)>,
}

impl RdCurve {
    pub fn new(label: impl Into<String>, metric: impl Into<String>, mut points: Vec<(f64, f64)>) -> Result<Self> {
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        if points.iter().any(|p| !(p.0 > 0.0 && p.0.is_finite() && p.1.is_finite())) {
            return Err(Error::InvalidArgument("RD points need positive finite rates and finite quality".into()));
        }
        if points.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::InvalidArgument("RD curve rates must be strictly increasing".into()));
        }
        Ok(Self {
            label: label.into(),
            metric: metric.into(),
            points,
        })
    }
}

/// Least-squares polynomial of the given degree; coefficients low to high
/// in the variable `(t − centre)/scale`.
struct Poly {
    coeffs: Vec<f64>,
    centre: f64,
    scale: f64,
}

impl Poly {
    fn fit(t: &[f64], v: &[f64], degree: usize) -> Result<Self> {
        let n = degree + 1;
        if t.len() < n {
            return Err(Error::InvalidArgument(format!("need at least {n} points for a degree-{degree} fit")));
        }
        let centre = t.iter().sum::<f64>() / t.len() as f64;
        let scale = t.iter().map(|x| (x - centre).abs()).fold(0.0, f64::max);
        if scale == 0.0 {
            return Err(Error::InvalidArgument("quality values are all equal".into()));
        }
        let mut a = vec![vec![0.0; n + 1]; n];
        for (&ti, &vi) in t.iter().zip(v) {
            let s = (ti - centre) / scale;
            let pw: Vec<f64> = (0..n).map(|k| s.powi(k as i32)).collect();
            for r in 0..n {
                for c in 0..n {
                    a[r][c] += pw[r] * pw[c];
                }
                a[r][n] += pw[r] * vi;
            }
        }
        // Gaussian elimination with partial pivoting
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).expect("rows");
            if a[piv][col].abs() < 1e-12 {
                return Err(Error::InvalidArgument("degenerate RD fit".into()));
            }
            a.swap(col, piv);
            for r in 0..n {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for c in col..=n {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
        Ok(Self {
            coeffs: (0..n).map(|r| a[r][n] / a[r][r]).collect(),
            centre,
            scale,
        })
    }

    fn eval(&self, t: f64) -> f64 {
        let s = (t - self.centre) / self.scale;
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * s + c)
    }
}

/// Intervals of the trapezoidal rule over the common quality range.
const BD_INTERVALS: usize = 20_000;

/// Average rate difference of `test` against `anchor` at equal quality, in
/// percent (negative is a saving).
pub fn bd_rate(anchor: &RdCurve, test: &RdCurve) -> Result<f64> {
    bd_rate_with_degree(anchor, test, 3)
}

pub(crate) fn bd_rate_with_degree(anchor: &RdCurve, test: &RdCurve, degree: usize) -> Result<f64> {
    let fit = |c: &RdCurve| {
        let q: Vec<f64> = c.points.iter().map(|p| p.1).collect();
        let r: Vec<f64> = c.points.iter().map(|p| p.0.ln()).collect();
        let lo = q.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Poly::fit(&q, &r, degree).map(|p| (p, lo, hi))
    };
    let (pa, alo, ahi) = fit(anchor)?;
    let (pt, tlo, thi) = fit(test)?;
    let (lo, hi) = (alo.max(tlo), ahi.min(thi));
    if lo >= hi {
        return Err(Error::InvalidArgument(format!(
            "quality ranges of {} and {} do not overlap",
            anchor.label, test.label
        )));
    }
    let h = (hi - lo) / BD_INTERVALS as f64;
    let diff = |q: f64| pt.eval(q) - pa.eval(q);
    let mut area = 0.5 * (diff(lo) + diff(hi));
    for i in 1..BD_INTERVALS {
        area += diff(lo + i as f64 * h);
    }
    let avg = area * h / (hi - lo);
    Ok(100.0 * (avg.exp() - 1.0))
}

/// One codec configuration in a sweep.
#[derive(Clone, Debug)]
pub struct SweepCodec<'a> {
    pub label: String,
    pub wavelet: Wavelet,
    pub mode: Mode,
    pub weights: Option<&'a OperatorWeights>,
    pub quant: QuantizerConfig,
}

#[derive(Clone, Debug)]
pub struct SweepImage {
    pub name: String,
    pub category: String,
    pub image: Grid<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub image: String,
    pub category: String,
    pub codec: String,
    pub step_scale: f64,
    pub bpp_estimated: f64,
    pub bpp_actual: f64,
    pub psnr: f64,
    pub ssim: f64,
    /// NaN for images below the MS-SSIM size limit.
    pub msssim: f64,
}

/// Encodes and decodes every image at every step multiplier with every
/// codec. Fails hard if a decode differs from the encoder's reconstruction.
pub fn rd_sweep(images: &[SweepImage], codecs: &[SweepCodec], step_scales: &[f64], levels: usize) -> Result<Vec<SweepRow>> {
    if images.is_empty() || codecs.is_empty() {
        return Err(Error::InvalidArgument("sweep needs images and codecs".into()));
    }
    let mut rows = Vec::new();
    for codec in codecs {
        for &m in step_scales {
            let quant = codec.quant.with_step_scale(m);
            let batch = images
                .par_iter()
                .map(|img| -> Result<SweepRow> {
                    let x = &img.image;
                    let enc = encode_image(x, levels, codec.wavelet, codec.mode, codec.weights, &quant)?;
                    let dec = decode_image_stream(&enc.bytes, codec.weights)?;
                    if dec != enc.reconstruction {
                        return Err(Error::DecodeMismatch(format!("{} with {} at ×{m}", img.name, codec.label)));
                    }
                    let rec = quantize_8bit(&dec);
                    let px = (x.height * x.width) as f64;
                    Ok(SweepRow {
                        image: img.name.clone(),
                        category: img.category.clone(),
                        codec: codec.label.clone(),
                        step_scale: m,
                        bpp_estimated: enc.estimated_bits / px,
                        bpp_actual: enc.bytes.len() as f64 * 8.0 / px,
                        psnr: psnr(x, &rec, 255.0)?,
                        ssim: ssim(x, &rec)?,
                        msssim: ms_ssim(x, &rec).unwrap_or(f64::NAN),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.extend(batch);
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv(rows: &[SweepRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "image,mode,bpp_estimated,bpp_actual,psnr,ssim,msssim")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:.6},{:.6},{:.4},{:.6},{:.6}",
            r.image, r.codec, r.bpp_estimated, r.bpp_actual, r.psnr, r.ssim, r.msssim
        )?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Psnr,
    Ssim,
    MsSsimDb,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
            Metric::MsSsimDb => "msssim_db",
        }
    }

    fn of(self, r: &SweepRow) -> f64 {
        match self {
            Metric::Psnr => r.psnr,
            Metric::Ssim => r.ssim,
            Metric::MsSsimDb => ms_ssim_db(r.msssim),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RateKind {
    /// Modelled code lengths.
    Estimated,
    /// Container bytes.
    Actual,
}

/// Corpus-average curve of one codec: rate and quality are averaged over
/// images at each step multiplier.
pub fn sweep_curve(rows: &[SweepRow], codec: &str, metric: Metric, rate: RateKind) -> Result<RdCurve> {
    let mut scales: Vec<f64> = rows.iter().filter(|r| r.codec == codec).map(|r| r.step_scale).collect();
    scales.sort_by(f64::total_cmp);
    scales.dedup();
    let points = scales
        .iter()
        .map(|&m| {
            let sel: Vec<&SweepRow> = rows.iter().filter(|r| r.codec == codec && r.step_scale == m).collect();
            let n = sel.len() as f64;
            let r = sel
                .iter()
                .map(|r| match rate {
                    RateKind::Estimated => r.bpp_estimated,
                    RateKind::Actual => r.bpp_actual,
                })
                .sum::<f64>()
                / n;
            (r, sel.iter().map(|r| metric.of(r)).sum::<f64>() / n)
        })
        .collect();
    RdCurve::new(codec, metric.name(), points)
}

/// One manifest entry: an image path and its category label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub label: String,
}

/// Parses `path [label]` lines; blank lines and `#` comments are ignored.
/// Relative paths resolve against `base`.
pub fn parse_manifest(text: &str, base: Option<&std::path::Path>) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let path = parts.next().expect("non-empty line");
        let label = parts.next().unwrap_or("uncategorised");
        if parts.next().is_some() {
            return Err(Error::Parse(format!("manifest line {}: expected `path [label]`", n + 1)));
        }
        let path = match base {
            Some(b) if std::path::Path::new(path).is_relative() => b.join(path).to_string_lossy().into_owned(),
            _ => path.to_string(),
        };
        out.push(ManifestEntry {
            path,
            label: label.to_string(),
        });
    }
    if out.is_empty() {
        return Err(Error::Parse("manifest lists no images".into()));
    }
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<std::path::Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    parse_manifest(&std::fs::read_to_string(path)?, path.parent())
}
