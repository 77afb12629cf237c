//! Reverse-mode differentiation for the operator networks and the training
//! loss.
//!
//! Network code is written once against [`Graph`]. [`Eager`] evaluates it
//! without recording anything (inference), [`Tape`] records every node so
//! that [`Tape::backward`] can return gradients for each leaf.

mod eager;
pub mod relax;
mod tape;

pub use eager::Eager;
pub use relax::{IndexLut, TableStep};
pub use tape::{grad_check, Gradients, Tape, Var};

use crate::dwt::WaveletKernel;
use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// Negative-side slope of the leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    LeakyRelu,
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::LeakyRelu => {
                if x < T::zero() {
                    x * T::of(LEAKY_SLOPE)
                } else {
                    x
                }
            }
            Activation::Relu => x.max(T::zero()),
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    #[inline]
    pub fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            Activation::LeakyRelu => {
                if x < T::zero() {
                    T::of(LEAKY_SLOPE)
                } else {
                    T::one()
                }
            }
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Identity => T::one(),
        }
    }
}

/// The operations shared by eager evaluation and the recording tape. All
/// spatial tensors are `C×H×W`.
pub trait Graph<T: Real> {
    type V: Clone;

    /// Trainable leaf.
    fn param(&mut self, t: &Tensor<T>) -> Self::V;
    /// Non-trainable input.
    fn input(&mut self, t: Tensor<T>) -> Self::V;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<T>;

    fn conv2d(&mut self, x: &Self::V, k: &Self::V, b: Option<&Self::V>) -> Result<Self::V>;
    fn activation(&mut self, x: &Self::V, a: Activation) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, x: &Self::V, s: f64) -> Self::V;
    /// `out[g] = Σ_n o[n] ⊙ p[g·N + n]` with `N` opacity channels.
    fn blend(&mut self, o: &Self::V, p: &Self::V) -> Result<Self::V>;
    fn concat(&mut self, parts: &[Self::V]) -> Result<Self::V>;
    fn slice_channels(&mut self, x: &Self::V, start: usize, len: usize) -> Result<Self::V>;
    /// Symmetric extension at the bottom/right edges to `h×w`.
    fn extend(&mut self, x: &Self::V, h: usize, w: usize) -> Result<Self::V>;
    /// Keeps the top-left `h×w` window.
    fn crop(&mut self, x: &Self::V, h: usize, w: usize) -> Result<Self::V>;
    /// One DWT level of a `1×H×W` tensor, bands in `LL, HL, LH, HH` order.
    fn dwt_analyze(&mut self, x: &Self::V, k: &WaveletKernel) -> Result<[Self::V; 4]>;
    fn dwt_synthesize(&mut self, bands: &[Self::V; 4], k: &WaveletKernel) -> Result<Self::V>;
}

pub(crate) mod ops {
    //! Forward kernels shared by both graph implementations.
    use super::*;
    use crate::dwt::{analyze_level, synthesize_level, Grid, Subbands};
    use crate::error::Error;
    use crate::tensor::mirror;

    pub fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!("{op}: {:?} vs {:?}", a.shape(), b.shape())));
        }
        Ok(())
    }

    pub fn check_blend<T: Real>(o: &Tensor<T>, p: &Tensor<T>) -> Result<usize> {
        let (n, h, w) = o.chw();
        let (pc, ph, pw) = p.chw();
        if (ph, pw) != (h, w) || n == 0 || pc % n != 0 {
            return Err(Error::Shape(format!("blend: opacity {:?}, proposals {:?}", o.shape(), p.shape())));
        }
        Ok(pc / n)
    }

    pub fn blend<T: Real>(o: &Tensor<T>, p: &Tensor<T>) -> Result<Tensor<T>> {
        let groups = check_blend(o, p)?;
        let (n, h, w) = o.chw();
        let hw = h * w;
        let mut out = vec![T::zero(); groups * hw];
        for g in 0..groups {
            let dst = &mut out[g * hw..(g + 1) * hw];
            for c in 0..n {
                let oc = &o.data()[c * hw..(c + 1) * hw];
                let pc = &p.data()[(g * n + c) * hw..(g * n + c + 1) * hw];
                for ((d, &a), &b) in dst.iter_mut().zip(oc).zip(pc) {
                    *d += a * b;
                }
            }
        }
        Tensor::new(vec![groups, h, w], out)
    }

    pub fn concat<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let Some(first) = parts.first() else {
            return Err(Error::Shape("concat of nothing".into()));
        };
        let (_, h, w) = first.chw();
        let mut c = 0;
        let mut data = Vec::new();
        for p in parts {
            let (pc, ph, pw) = p.chw();
            if (ph, pw) != (h, w) {
                return Err(Error::Shape(format!("concat: {:?} vs {:?}", first.shape(), p.shape())));
            }
            c += pc;
            data.extend_from_slice(p.data());
        }
        Tensor::new(vec![c, h, w], data)
    }

    pub fn slice<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
        let (c, h, w) = x.chw();
        if start + len > c || len == 0 {
            return Err(Error::Shape(format!("slice {start}..{} of {c} channels", start + len)));
        }
        Tensor::new(vec![len, h, w], x.data()[start * h * w..(start + len) * h * w].to_vec())
    }

    pub fn extend<T: Real>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
        let (c, xh, xw) = x.chw();
        if h < xh || w < xw || xh == 0 || xw == 0 {
            return Err(Error::Shape(format!("cannot extend {xh}x{xw} to {h}x{w}")));
        }
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            let src = &x.data()[ch * xh * xw..(ch + 1) * xh * xw];
            for i in 0..h {
                let si = mirror(i as isize, xh);
                for j in 0..w {
                    out.push(src[si * xw + mirror(j as isize, xw)]);
                }
            }
        }
        Tensor::new(vec![c, h, w], out)
    }

    pub fn extend_adjoint<T: Real>(g: &Tensor<T>, xh: usize, xw: usize) -> Tensor<T> {
        let (c, h, w) = g.chw();
        let mut out = Tensor::zeros(&[c, xh, xw]);
        let d = out.data_mut();
        for ch in 0..c {
            for i in 0..h {
                let si = mirror(i as isize, xh);
                for j in 0..w {
                    d[ch * xh * xw + si * xw + mirror(j as isize, xw)] += g.data()[ch * h * w + i * w + j];
                }
            }
        }
        out
    }

    pub fn crop<T: Real>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
        let (c, xh, xw) = x.chw();
        if h > xh || w > xw {
            return Err(Error::Shape(format!("cannot crop {xh}x{xw} to {h}x{w}")));
        }
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for i in 0..h {
                let row = ch * xh * xw + i * xw;
                out.extend_from_slice(&x.data()[row..row + w]);
            }
        }
        Tensor::new(vec![c, h, w], out)
    }

    pub fn crop_adjoint<T: Real>(g: &Tensor<T>, xh: usize, xw: usize) -> Tensor<T> {
        let (c, h, w) = g.chw();
        let mut out = Tensor::zeros(&[c, xh, xw]);
        let d = out.data_mut();
        for ch in 0..c {
            for i in 0..h {
                let dst = ch * xh * xw + i * xw;
                d[dst..dst + w].copy_from_slice(&g.data()[ch * h * w + i * w..ch * h * w + (i + 1) * w]);
            }
        }
        out
    }

    pub fn tensor_to_grid<T: Real>(x: &Tensor<T>) -> Result<Grid<T>> {
        let (c, h, w) = x.chw();
        if c != 1 {
            return Err(Error::Shape(format!("expected one channel, got {:?}", x.shape())));
        }
        Grid::new(h, w, x.data().to_vec())
    }

    pub fn grid_to_tensor<T: Real>(g: Grid<T>) -> Tensor<T> {
        Tensor::new(vec![1, g.height, g.width], g.data).expect("grid extents are consistent")
    }

    pub fn dwt_analyze<T: Real>(x: &Tensor<T>, k: &WaveletKernel) -> Result<[Tensor<T>; 4]> {
        let s = analyze_level(&tensor_to_grid(x)?, k)?;
        Ok(s.bands.map(grid_to_tensor))
    }

    pub fn to_subbands<T: Real>(bands: [&Tensor<T>; 4]) -> Result<Subbands<T>> {
        let mut grids = Vec::with_capacity(4);
        for t in bands {
            grids.push(tensor_to_grid(t)?);
        }
        let bands: [Grid<T>; 4] = grids.try_into().map_err(|_| Error::Shape("four bands".into()))?;
        Ok(Subbands { bands })
    }

    pub fn dwt_synthesize<T: Real>(bands: [&Tensor<T>; 4], k: &WaveletKernel) -> Result<Tensor<T>> {
        Ok(grid_to_tensor(synthesize_level(&to_subbands(bands)?, k)?))
    }
}
