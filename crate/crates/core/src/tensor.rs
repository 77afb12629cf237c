//! Dense row-major tensors and the convolution kernels shared by the eager
//! evaluator and the differentiation tape.
//!
//! Everything is generic over [`Real`] so the same code runs in `f32` for
//! coding and training and in `f64` for finite-difference verification.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use crate::error::{Error, Result};

/// Scalar type the numeric core is instantiated with.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + Copy
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` on strided row-major matrices.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn f64(self) -> f64 {
                self as f64
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    for v in c.iter_mut() {
                        *v *= beta;
                    }
                    return;
                }
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                // SAFETY: the slices cover every index addressed by the
                // (row, column) strides for the given extents; callers only
                // pass dense row-major or transposed-dense layouts.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extents of a `C×H×W` tensor.
    pub fn chw(&self) -> (usize, usize, usize) {
        match self.shape[..] {
            [c, h, w] => (c, h, w),
            _ => panic!("expected a C×H×W tensor, got {:?}", self.shape),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: T) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.f64()).sum()
    }

    pub fn sum_squares_f64(&self) -> f64 {
        self.data.iter().map(|v| v.f64() * v.f64()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.f64().abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a.f64() - b.f64()).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Whole-sample symmetric index mapping onto `0..n`, reflecting as many
/// times as needed.
#[inline]
pub fn mirror(j: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = j.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Pads every channel of a `C×H×W` tensor by `r` on each side using
/// whole-sample symmetric extension.
pub fn pad_symmetric<T: Real>(x: &Tensor<T>, r: usize) -> Tensor<T> {
    let (c, h, w) = x.chw();
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let mut out = vec![T::zero(); c * ph * pw];
    let src = x.data();
    let cols: Vec<usize> = (0..pw).map(|j| mirror(j as isize - r as isize, w)).collect();
    for ch in 0..c {
        for i in 0..ph {
            let si = mirror(i as isize - r as isize, h);
            let srow = &src[(ch * h + si) * w..(ch * h + si + 1) * w];
            let drow = &mut out[(ch * ph + i) * pw..(ch * ph + i + 1) * pw];
            for (d, &sj) in drow.iter_mut().zip(&cols) {
                *d = srow[sj];
            }
        }
    }
    Tensor {
        shape: vec![c, ph, pw],
        data: out,
    }
}

/// Adjoint of [`pad_symmetric`]: folds a padded gradient back onto the
/// interior samples it was copied from.
pub fn pad_symmetric_adjoint<T: Real>(g: &Tensor<T>, h: usize, w: usize, r: usize) -> Tensor<T> {
    let (c, ph, pw) = g.chw();
    debug_assert_eq!((ph, pw), (h + 2 * r, w + 2 * r));
    let mut out = vec![T::zero(); c * h * w];
    let cols: Vec<usize> = (0..pw).map(|j| mirror(j as isize - r as isize, w)).collect();
    let src = g.data();
    for ch in 0..c {
        for i in 0..ph {
            let di = mirror(i as isize - r as isize, h);
            let srow = &src[(ch * ph + i) * pw..(ch * ph + i + 1) * pw];
            let drow = &mut out[(ch * h + di) * w..(ch * h + di + 1) * w];
            for (&s, &dj) in srow.iter().zip(&cols) {
                drow[dj] += s;
            }
        }
    }
    Tensor {
        shape: vec![c, h, w],
        data: out,
    }
}

/// Unfolds a padded `C×(H+K-1)×(W+K-1)` tensor into a `(C·K·K)×(H·W)`
/// matrix whose columns are receptive fields.
fn im2col<T: Real>(padded: &Tensor<T>, k: usize, h: usize, w: usize) -> Vec<T> {
    let (c, ph, pw) = padded.chw();
    debug_assert!(ph == h + k - 1 && pw == w + k - 1);
    let hw = h * w;
    let mut col = vec![T::zero(); c * k * k * hw];
    let src = padded.data();
    for ch in 0..c {
        for u in 0..k {
            for v in 0..k {
                let row = (ch * k + u) * k + v;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for i in 0..h {
                    let s = (ch * ph + i + u) * pw + v;
                    dst[i * w..(i + 1) * w].copy_from_slice(&src[s..s + w]);
                }
            }
        }
    }
    col
}

fn col2im<T: Real>(col: &[T], c: usize, k: usize, h: usize, w: usize) -> Tensor<T> {
    let (ph, pw) = (h + k - 1, w + k - 1);
    let hw = h * w;
    let mut out = vec![T::zero(); c * ph * pw];
    for ch in 0..c {
        for u in 0..k {
            for v in 0..k {
                let row = (ch * k + u) * k + v;
                let s = &col[row * hw..(row + 1) * hw];
                for i in 0..h {
                    let d = (ch * ph + i + u) * pw + v;
                    for (o, &g) in out[d..d + w].iter_mut().zip(&s[i * w..(i + 1) * w]) {
                        *o += g;
                    }
                }
            }
        }
    }
    Tensor {
        shape: vec![c, ph, pw],
        data: out,
    }
}

fn check_conv_shapes<T: Real>(
    x: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<(usize, usize)> {
    if x.shape().len() != 3 {
        return Err(Error::Shape(format!("conv2d input must be C×H×W, got {:?}", x.shape())));
    }
    let (c, h, w) = x.chw();
    let &[n, kc, kh, kw] = kernels.shape() else {
        return Err(Error::Shape(format!(
            "conv2d kernels must be N×C×K×K, got {:?}",
            kernels.shape()
        )));
    };
    if kc != c {
        return Err(Error::Shape(format!(
            "conv2d kernels expect {kc} input channels, input has {c}"
        )));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::Shape(format!("conv2d kernel must be square and odd, got {kh}×{kw}")));
    }
    if h == 0 || w == 0 {
        return Err(Error::Shape("conv2d input has an empty spatial extent".into()));
    }
    if let Some(b) = bias {
        if b.shape() != [n] {
            return Err(Error::Shape(format!("conv2d bias must be [{n}], got {:?}", b.shape())));
        }
    }
    Ok((n, kh))
}

/// Same-size cross-correlation with symmetric boundary extension.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (n, k) = check_conv_shapes(x, kernels, bias)?;
    let (c, h, w) = x.chw();
    let hw = h * w;
    let mut out = vec![T::zero(); n * hw];
    if let Some(b) = bias {
        for (row, &bv) in out.chunks_mut(hw).zip(b.data()) {
            row.fill(bv);
        }
    }
    let ckk = c * k * k;
    if k == 1 {
        T::gemm(n, c, hw, T::one(), kernels.data(), c as isize, 1, x.data(), hw as isize, 1, T::one(), &mut out, hw as isize, 1);
    } else {
        let col = im2col(&pad_symmetric(x, k / 2), k, h, w);
        T::gemm(n, ckk, hw, T::one(), kernels.data(), ckk as isize, 1, &col, hw as isize, 1, T::one(), &mut out, hw as isize, 1);
    }
    Ok(Tensor {
        shape: vec![n, h, w],
        data: out,
    })
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gradients of [`conv2d`] with respect to its input, kernels and bias.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    kernels: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> ConvGrads<T> {
    let (c, h, w) = x.chw();
    let &[n, _, k, _] = kernels.shape() else {
        unreachable!()
    };
    let hw = h * w;
    let ckk = c * k * k;
    let go = grad_out.data();
    let bias = Tensor {
        shape: vec![n],
        data: go.chunks(hw).map(|r| r.iter().copied().sum()).collect(),
    };
    let mut gk = vec![T::zero(); n * ckk];
    let input = if k == 1 {
        // kernels: N×C, x: C×HW
        T::gemm(n, hw, c, T::one(), go, hw as isize, 1, x.data(), 1, hw as isize, T::zero(), &mut gk, c as isize, 1);
        let mut gx = vec![T::zero(); c * hw];
        T::gemm(c, n, hw, T::one(), kernels.data(), 1, c as isize, go, hw as isize, 1, T::zero(), &mut gx, hw as isize, 1);
        Tensor { shape: vec![c, h, w], data: gx }
    } else {
        let col = im2col(&pad_symmetric(x, k / 2), k, h, w);
        T::gemm(n, hw, ckk, T::one(), go, hw as isize, 1, &col, 1, hw as isize, T::zero(), &mut gk, ckk as isize, 1);
        let mut gcol = col;
        T::gemm(ckk, n, hw, T::one(), kernels.data(), 1, ckk as isize, go, hw as isize, 1, T::zero(), &mut gcol, hw as isize, 1);
        let gpad = col2im(&gcol, c, k, h, w);
        pad_symmetric_adjoint(&gpad, h, w, k / 2)
    };
    ConvGrads {
        input,
        kernels: Tensor {
            shape: kernels.shape().to_vec(),
            data: gk,
        },
        bias,
    }
}
