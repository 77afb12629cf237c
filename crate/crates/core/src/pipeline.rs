//! Multi-level open-loop transform with the two learned lifting steps.
//!
//! Per level: wavelet analysis, then `ȳ_LL = y_LL − H2L(y_HL, y_LH, y_HH)`,
//! then `ȳ_b = y_b − L2H(ȳ_LL)` for each detail band, recursing on `ȳ_LL`.
//! Synthesis undoes the steps in reverse order. Levels whose LL band is
//! smaller than the configured minimum extent skip both operators.

use std::rc::Rc;

use crate::autograd::{ops::grid_to_tensor, ops::tensor_to_grid, Eager, Graph};
use crate::dwt::{band_shape, Band, Grid, Wavelet, WaveletKernel};
use crate::error::{Error, Result};
use crate::nets::{h2l_apply, l2h_apply, L2hVariant, Operators};
use crate::tensor::{Real, Tensor};
use crate::weights::OperatorWeights;

/// Largest supported decomposition depth.
pub const MAX_LEVELS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Baseline,
    H2lOnly,
    Hybrid,
    H2lPlusLinear,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::H2lOnly, Mode::Hybrid, Mode::H2lPlusLinear];

    pub fn id(self) -> u8 {
        match self {
            Mode::Baseline => 0,
            Mode::H2lOnly => 1,
            Mode::Hybrid => 2,
            Mode::H2lPlusLinear => 3,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.id() == id)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::H2lOnly => "h2l_only",
            Mode::Hybrid => "hybrid",
            Mode::H2lPlusLinear => "h2l_plus_linear",
        }
    }

    pub fn uses_operators(self) -> bool {
        self != Mode::Baseline
    }

    /// Low-to-high variant this mode applies, if any.
    pub fn l2h(self) -> Option<L2hVariant> {
        match self {
            Mode::Hybrid => Some(L2hVariant::Adaptive),
            Mode::H2lPlusLinear => Some(L2hVariant::Linear),
            _ => None,
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Parse(format!("unknown mode {s:?}")))
    }
}

/// Input extents of every level, checking that each is at least 2×2.
pub fn level_extents(height: usize, width: usize, levels: usize) -> Result<Vec<(usize, usize)>> {
    let max = max_levels(height, width);
    if levels == 0 || levels > max || levels > MAX_LEVELS {
        return Err(Error::MaxLevels {
            requested: levels,
            max: max.min(MAX_LEVELS),
            height,
            width,
        });
    }
    let mut out = Vec::with_capacity(levels);
    let (mut h, mut w) = (height, width);
    for _ in 0..levels {
        out.push((h, w));
        h = h.div_ceil(2);
        w = w.div_ceil(2);
    }
    Ok(out)
}

/// Number of levels whose input is at least 2×2.
pub fn max_levels(height: usize, width: usize) -> usize {
    let (mut h, mut w, mut d) = (height, width, 0);
    while h >= 2 && w >= 2 {
        d += 1;
        h = h.div_ceil(2);
        w = w.div_ceil(2);
    }
    d
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PyramidState {
    AnalysisFloat,
    Dequantized,
}

/// Cleaned detail bands for every level plus the deepest cleaned LL band.
/// Bands are f64 by default so analysis followed by synthesis is exact to
/// far below 8-bit precision even with strong operators.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandPyramid<T = f64> {
    pub height: usize,
    pub width: usize,
    /// `details[d-1]` holds (HL, LH, HH) of level `d`.
    pub details: Vec<[Grid<T>; 3]>,
    pub ll: Grid<T>,
    /// Whether the operators ran at each level.
    pub applied: Vec<bool>,
    pub state: PyramidState,
}

impl<T: Real> SubbandPyramid<T> {
    pub fn levels(&self) -> usize {
        self.details.len()
    }

    pub fn band(&self, level: usize, band: Band) -> &Grid<T> {
        match band {
            Band::LL => {
                assert_eq!(level, self.levels(), "only the deepest LL band is stored");
                &self.ll
            }
            b => &self.details[level - 1][b.index() - 1],
        }
    }

    /// Checks the shape chain against the image extents.
    pub fn check_shapes(&self) -> Result<()> {
        let ext = level_extents(self.height, self.width, self.levels())?;
        if self.applied.len() != self.levels() {
            return Err(Error::Shape("operator flags do not match the level count".into()));
        }
        for (d, &(h, w)) in ext.iter().enumerate() {
            for (i, b) in Band::DETAIL.iter().enumerate() {
                if self.details[d][i].shape() != band_shape(*b, h, w) {
                    return Err(Error::Shape(format!(
                        "level {} {} band is {:?}, expected {:?}",
                        d + 1,
                        b.name(),
                        self.details[d][i].shape(),
                        band_shape(*b, h, w)
                    )));
                }
            }
        }
        let (h, w) = ext[ext.len() - 1];
        if self.ll.shape() != band_shape(Band::LL, h, w) {
            return Err(Error::Shape(format!("deepest LL band is {:?}", self.ll.shape())));
        }
        Ok(())
    }

    /// Zeroed pyramid of the right shape.
    pub fn zeros(height: usize, width: usize, levels: usize, applied: Vec<bool>) -> Result<Self> {
        let ext = level_extents(height, width, levels)?;
        let details = ext
            .iter()
            .map(|&(h, w)| Band::DETAIL.map(|b| {
                let (bh, bw) = band_shape(b, h, w);
                Grid::zeros(bh, bw)
            }))
            .collect();
        let (h, w) = ext[levels - 1];
        let (lh, lw) = band_shape(Band::LL, h, w);
        Ok(Self {
            height,
            width,
            details,
            ll: Grid::zeros(lh, lw),
            applied,
            state: PyramidState::AnalysisFloat,
        })
    }
}

/// Static transform settings shared by analysis and synthesis.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformSpec {
    pub kernel: WaveletKernel,
    pub mode: Mode,
    pub min_extent: usize,
    pub input_scale: f64,
}

impl TransformSpec {
    pub fn baseline(wavelet: Wavelet) -> Self {
        Self {
            kernel: wavelet.kernel(),
            mode: Mode::Baseline,
            min_extent: 8,
            input_scale: 1.0,
        }
    }

    /// Settings for running `mode` with `w`, checking compatibility.
    pub fn for_weights(w: &OperatorWeights, mode: Mode) -> Result<Self> {
        if let Some(v) = mode.l2h() {
            if w.meta.variant != v {
                return Err(Error::WeightsMismatch(format!(
                    "mode {mode} needs {:?} low-to-high weights, file holds {:?}",
                    v, w.meta.variant
                )));
            }
        }
        Ok(Self {
            kernel: w.meta.wavelet.kernel(),
            mode,
            min_extent: w.meta.min_extent,
            input_scale: w.meta.net.opacity_input_scale as f64,
        })
    }

    /// Whether the operators run at a level whose LL band is `ll_h×ll_w`.
    pub fn applies(&self, ll_h: usize, ll_w: usize) -> bool {
        self.mode.uses_operators() && ll_h >= self.min_extent.max(2) && ll_w >= self.min_extent.max(2)
    }

    pub fn applied_flags(&self, height: usize, width: usize, levels: usize) -> Result<Vec<bool>> {
        Ok(level_extents(height, width, levels)?
            .into_iter()
            .map(|(h, w)| {
                let (lh, lw) = band_shape(Band::LL, h, w);
                self.applies(lh, lw)
            })
            .collect())
    }
}

/// Graph values produced by [`analyze_graph`].
pub struct Analysis<V> {
    pub details: Vec<[V; 3]>,
    /// Cleaned LL per level (`ȳ_LL,d`); the last entry is the stored band.
    pub clean_ll: Vec<V>,
    /// Uncleaned LL per level (`y_LL,d`).
    pub raw_ll: Vec<V>,
    /// H2L aliasing estimate per level, `None` where the operators are skipped.
    pub aliasing: Vec<Option<V>>,
    pub applied: Vec<bool>,
}

fn require_ops<'a, V>(ops: Option<&'a Operators<V>>, spec: &TransformSpec) -> Result<Option<&'a Operators<V>>> {
    if !spec.mode.uses_operators() {
        return Ok(None);
    }
    let ops = ops.ok_or_else(|| Error::WeightsMismatch(format!("mode {} needs operator weights", spec.mode)))?;
    if let Some(v) = spec.mode.l2h() {
        if ops.variant() != v {
            return Err(Error::WeightsMismatch(format!("mode {} cannot use {:?} low-to-high weights", spec.mode, ops.variant())));
        }
    }
    Ok(Some(ops))
}

/// Forward transform of a `1×H×W` value on any graph.
pub fn analyze_graph<T: Real, G: Graph<T>>(
    g: &mut G,
    x: &G::V,
    levels: usize,
    spec: &TransformSpec,
    ops: Option<&Operators<G::V>>,
) -> Result<Analysis<G::V>> {
    let ops = require_ops(ops, spec)?;
    let (_, h, w) = g.value(x).chw();
    let ext = level_extents(h, w, levels)?;
    let mut out = Analysis {
        details: Vec::with_capacity(levels),
        clean_ll: Vec::with_capacity(levels),
        raw_ll: Vec::with_capacity(levels),
        aliasing: Vec::with_capacity(levels),
        applied: Vec::with_capacity(levels),
    };
    let mut u = x.clone();
    for &(ph, pw) in &ext {
        let [ll, hl, lh, hh] = g.dwt_analyze(&u, &spec.kernel)?;
        let (lh_h, lh_w) = band_shape(Band::LL, ph, pw);
        let on = spec.applies(lh_h, lh_w);
        let (clean, details, alias) = match (on, ops) {
            (true, Some(ops)) => {
                let a = h2l_apply(g, &ops.h2l, [&hl, &lh, &hh], (lh_h, lh_w), spec.input_scale)?;
                let clean = g.sub(&ll, &a)?;
                let details = if spec.mode.l2h().is_some() {
                    let p = l2h_apply(g, &ops.l2h, &clean, (ph, pw), spec.input_scale)?;
                    [g.sub(&hl, &p[0])?, g.sub(&lh, &p[1])?, g.sub(&hh, &p[2])?]
                } else {
                    [hl, lh, hh]
                };
                (clean, details, Some(a))
            }
            _ => (ll.clone(), [hl, lh, hh], None),
        };
        out.raw_ll.push(ll);
        out.details.push(details);
        out.clean_ll.push(clean.clone());
        out.aliasing.push(alias);
        out.applied.push(on);
        u = clean;
    }
    Ok(out)
}

/// Inverse transform from the level-`levels` cleaned LL down to level
/// `stop` (`0` reconstructs the image, `d` returns the cleaned LL of level
/// `d`).
pub fn synthesize_graph<T: Real, G: Graph<T>>(
    g: &mut G,
    details: &[[G::V; 3]],
    ll: &G::V,
    applied: &[bool],
    stop: usize,
    spec: &TransformSpec,
    ops: Option<&Operators<G::V>>,
) -> Result<G::V> {
    let levels = details.len();
    if applied.len() != levels || stop > levels {
        return Err(Error::InvalidArgument(format!("cannot synthesize {levels} levels down to level {stop}")));
    }
    let ops = if applied.iter().any(|&a| a) { require_ops(ops, spec)? } else { None };
    let mut u = ll.clone();
    for d in (stop + 1..=levels).rev() {
        let [hl, lh, hh] = &details[d - 1];
        let (ll_h, ll_w) = (g.value(&u).shape()[1], g.value(&u).shape()[2]);
        let (ph, pw) = (ll_h + g.value(lh).shape()[1], ll_w + g.value(hl).shape()[2]);
        let bands = match (applied[d - 1], ops) {
            (true, Some(ops)) => {
                let [hl, lh, hh] = if spec.mode.l2h().is_some() {
                    let p = l2h_apply(g, &ops.l2h, &u, (ph, pw), spec.input_scale)?;
                    [g.add(hl, &p[0])?, g.add(lh, &p[1])?, g.add(hh, &p[2])?]
                } else {
                    [hl.clone(), lh.clone(), hh.clone()]
                };
                let a = h2l_apply(g, &ops.h2l, [&hl, &lh, &hh], (ll_h, ll_w), spec.input_scale)?;
                let ll = g.add(&u, &a)?;
                [ll, hl, lh, hh]
            }
            (true, None) => return Err(Error::WeightsMismatch("operator weights required".into())),
            _ => [u.clone(), hl.clone(), lh.clone(), hh.clone()],
        };
        u = g.dwt_synthesize(&bands, &spec.kernel)?;
    }
    Ok(u)
}

/// Operators bound for eager inference, or `None` for baseline. Inference
/// runs in f64: the inverse re-evaluates the nonlinear operators on
/// reconstructed inputs, which amplifies f32 rounding.
fn eager_ops(w: Option<&Operators<Tensor<f32>>>, spec: &TransformSpec) -> Option<Operators<Rc<Tensor<f64>>>> {
    if spec.mode.uses_operators() {
        w.map(|o| o.cast::<f64>().bind(&mut Eager))
    } else {
        None
    }
}

fn to_value<T: Real>(g: &Grid<T>) -> Rc<Tensor<f64>> {
    Rc::new(grid_to_tensor(Grid {
        height: g.height,
        width: g.width,
        data: g.data.iter().map(|v| v.f64()).collect(),
    }))
}

fn to_band(v: &Rc<Tensor<f64>>) -> Grid<f64> {
    tensor_to_grid(v).expect("single-channel band")
}

fn to_image(v: &Rc<Tensor<f64>>) -> Grid<f32> {
    let g = to_band(v);
    Grid {
        height: g.height,
        width: g.width,
        data: g.data.iter().map(|&v| v as f32).collect(),
    }
}

/// Forward hybrid transform of an image.
pub fn hybrid_analyze(
    x: &Grid<f32>,
    levels: usize,
    spec: &TransformSpec,
    ops: Option<&Operators<Tensor<f32>>>,
) -> Result<SubbandPyramid> {
    Ok(hybrid_analyze_traced(x, levels, spec, ops)?.0)
}

/// [`hybrid_analyze`] that also returns the cleaned LL band of every level.
pub fn hybrid_analyze_traced(
    x: &Grid<f32>,
    levels: usize,
    spec: &TransformSpec,
    ops: Option<&Operators<Tensor<f32>>>,
) -> Result<(SubbandPyramid, Vec<Grid<f64>>)> {
    if x.height == 0 || x.width == 0 {
        return Err(Error::Shape("empty image".into()));
    }
    let bound = eager_ops(ops, spec);
    let a = analyze_graph(&mut Eager, &to_value(x), levels, spec, bound.as_ref())?;
    let pyramid = SubbandPyramid {
        height: x.height,
        width: x.width,
        details: a.details.iter().map(|d| [to_band(&d[0]), to_band(&d[1]), to_band(&d[2])]).collect(),
        ll: to_band(a.clean_ll.last().expect("at least one level")),
        applied: a.applied,
        state: PyramidState::AnalysisFloat,
    };
    Ok((pyramid, a.clean_ll.iter().map(to_band).collect()))
}

/// Inverse transform down to level `stop`: `0` gives the image, `d` the
/// cleaned LL band of level `d`.
pub fn synthesize_to(
    p: &SubbandPyramid,
    stop: usize,
    spec: &TransformSpec,
    ops: Option<&Operators<Tensor<f32>>>,
) -> Result<Grid<f32>> {
    p.check_shapes()?;
    let bound = eager_ops(ops, spec);
    let details: Vec<[Rc<Tensor<f64>>; 3]> = p.details.iter().map(|d| [to_value(&d[0]), to_value(&d[1]), to_value(&d[2])]).collect();
    let out = synthesize_graph(&mut Eager, &details, &to_value(&p.ll), &p.applied, stop, spec, bound.as_ref())?;
    Ok(to_image(&out))
}

/// Inverse of [`hybrid_analyze`].
pub fn hybrid_synthesize(p: &SubbandPyramid, spec: &TransformSpec, ops: Option<&Operators<Tensor<f32>>>) -> Result<Grid<f32>> {
    synthesize_to(p, 0, spec, ops)
}

/// Cleaned LL band of level `d`, synthesizing only levels `D..d+1`.
pub fn extract_resolution(
    p: &SubbandPyramid,
    d: usize,
    spec: &TransformSpec,
    ops: Option<&Operators<Tensor<f32>>>,
) -> Result<Grid<f32>> {
    if d == 0 || d > p.levels() {
        return Err(Error::InvalidArgument(format!("resolution level {d} outside 1..={}", p.levels())));
    }
    if d == p.levels() {
        return Ok(p.ll.cast());
    }
    synthesize_to(p, d, spec, ops)
}
