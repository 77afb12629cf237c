use std::sync::Arc;

use super::relax::{check_sigma, smoothed_deadzone, smoothed_quantizer, IndexLut, TableStep};
use super::{ops, Activation, Graph};
use crate::dwt::{analyze_level_adjoint, band_shape, interleave, synthesize_level_adjoint, Band, Grid, WaveletKernel};
use crate::error::{Error, Result};
use crate::quant::{dequantize_value, quantize_value};
use crate::tensor::{conv2d, conv2d_backward, Real, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    Conv { x: usize, k: usize, b: Option<usize> },
    Act { x: usize, a: Activation },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Blend { o: usize, p: usize },
    Concat(Vec<usize>),
    Slice { x: usize, start: usize },
    Extend { x: usize },
    Crop { x: usize },
    // value is the lifted, still interleaved 1×H×W buffer
    Dwt { x: usize, kernel: WaveletKernel },
    Pick { src: usize, band: Band },
    Synth { bands: [usize; 4], kernel: WaveletKernel },
    Sum(usize),
    SumSquares(usize),
    SumAbs(usize),
    Weighted(Vec<(usize, f64)>),
    Quant { y: usize, ga: usize, gs: usize, delta: f64, sigma: f64 },
    Rate { y: usize, ga: usize, delta: f64, sigma: f64, lut: Arc<IndexLut> },
    Step { y: usize, step: Arc<TableStep>, sigma: f64 },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Conv { x, k, b } => [Some(*x), Some(*k), *b].into_iter().flatten().collect(),
            Op::Act { x, .. }
            | Op::Scale(x, _)
            | Op::Slice { x, .. }
            | Op::Extend { x }
            | Op::Crop { x }
            | Op::Dwt { x, .. }
            | Op::Sum(x)
            | Op::SumSquares(x)
            | Op::SumAbs(x) => vec![*x],
            Op::Pick { src, .. } => vec![*src],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Blend { o, p } => vec![*o, *p],
            Op::Concat(v) => v.clone(),
            Op::Synth { bands, .. } => bands.to_vec(),
            Op::Weighted(v) => v.iter().map(|(i, _)| *i).collect(),
            Op::Quant { y, ga, gs, .. } => vec![*y, *ga, *gs],
            Op::Rate { y, ga, .. } => vec![*y, *ga],
            Op::Step { y, .. } => vec![*y],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Records the forward computation in execution order.
///
/// The quantizer, rate and step nodes are discontinuous. Their backward pass
/// always uses the Gaussian-smoothed slope; the forward value is exact unless
/// [`Tape::set_relaxed_forward`] switches it to the smoothed surrogate.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    relaxed_forward: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients returned by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zeros when nothing flowed into it.
    pub fn take_or_zeros(&mut self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.grads
            .get_mut(v.0)
            .and_then(|g| g.take())
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn scalar<T: Real>(v: f64) -> Tensor<T> {
    Tensor::scalar(T::of(v))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            relaxed_forward: false,
        }
    }

    pub fn set_relaxed_forward(&mut self, on: bool) {
        self.relaxed_forward = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Value of a one-element node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        self.val(v).data()[0].f64()
    }

    fn scalar_input(&self, v: Var, what: &str) -> Result<f64> {
        let t = self.val(v);
        if t.len() != 1 {
            return Err(Error::Shape(format!("{what} must be a scalar, got {:?}", t.shape())));
        }
        Ok(t.data()[0].f64())
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x).sum_f64();
        self.push(scalar(s), Op::Sum(x.0))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.val(x).sum_squares_f64();
        self.push(scalar(s), Op::SumSquares(x.0))
    }

    pub fn sum_abs(&mut self, x: Var) -> Var {
        let s: f64 = self.val(x).data().iter().map(|v| v.f64().abs()).sum();
        self.push(scalar(s), Op::SumAbs(x.0))
    }

    /// `Σ w_i·s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        for &(v, w) in terms {
            s += w * self.scalar_input(v, "weighted_sum term")?;
        }
        Ok(self.push(scalar(s), Op::Weighted(terms.iter().map(|&(v, w)| (v.0, w)).collect())))
    }

    /// Quantize→dequantize composite `G_s·Q⁻¹(Q(G_a·y))` with scalar gain
    /// nodes `ga` and `gs`.
    pub fn quantize(&mut self, y: Var, ga: Var, gs: Var, delta: f64, sigma: f64) -> Result<Var> {
        check_sigma(sigma)?;
        let (a, s) = (self.scalar_input(ga, "analysis gain")?, self.scalar_input(gs, "synthesis gain")?);
        let relaxed = self.relaxed_forward;
        let out = self.val(y).map(|v| {
            let v = v.f64();
            T::of(if relaxed {
                smoothed_quantizer(v, a, s, delta, sigma)[0]
            } else {
                s * dequantize_value(quantize_value(a * v, delta, 0.0), delta)
            })
        });
        Ok(self.push(out, Op::Quant { y: y.0, ga: ga.0, gs: gs.0, delta, sigma }))
    }

    /// Total code length `Σ_i l̂(Q(G_a·y_i))` under a length table.
    pub fn rate(&mut self, y: Var, ga: Var, delta: f64, sigma: f64, lut: Arc<IndexLut>) -> Result<Var> {
        check_sigma(sigma)?;
        let a = self.scalar_input(ga, "analysis gain")?;
        let total: f64 = if self.relaxed_forward {
            self.val(y)
                .data()
                .iter()
                .map(|v| smoothed_deadzone(v.f64(), a, delta, sigma, |q| lut.get(q)).value)
                .sum()
        } else {
            self.val(y)
                .data()
                .iter()
                .map(|v| lut.get(quantize_value(a * v.f64(), delta, 0.0)))
                .sum()
        };
        Ok(self.push(scalar(total), Op::Rate { y: y.0, ga: ga.0, delta, sigma, lut }))
    }

    /// Elementwise piecewise-constant map with an annealed backward pass.
    pub fn step(&mut self, y: Var, step: Arc<TableStep>, sigma: f64) -> Result<Var> {
        check_sigma(sigma)?;
        let relaxed = self.relaxed_forward;
        let out = self.val(y).map(|v| {
            T::of(if relaxed {
                step.smoothed(v.f64(), sigma).value
            } else {
                step.value(v.f64())
            })
        });
        Ok(self.push(out, Op::Step { y: y.0, step, sigma }))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.val(loss).len() != 1 {
            return Err(Error::Shape(format!("loss must be scalar, got {:?}", self.val(loss).shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.val(loss).shape(), T::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let nodes = &self.nodes;
        let mut acc = |i: usize, t: Tensor<T>| {
            if !nodes[i].needs_grad {
                return;
            }
            match &mut grads[i] {
                Some(a) => a.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let v = |i: usize| &nodes[i].value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, k, b } => {
                let cg = conv2d_backward(v(*x), v(*k), g);
                acc(*x, cg.input);
                acc(*k, cg.kernels);
                if let Some(b) = b {
                    acc(*b, cg.bias);
                }
            }
            Op::Act { x, a } => {
                let xv = v(*x);
                let mut out = g.clone();
                for ((o, &xi), &yi) in out.data_mut().iter_mut().zip(xv.data()).zip(node.value.data()) {
                    *o *= a.derivative(xi, yi);
                }
                acc(*x, out);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(v(*b), |x, y| x * y));
                acc(*b, g.zip_map(v(*a), |x, y| x * y));
            }
            Op::Scale(x, s) => {
                let s = T::of(*s);
                acc(*x, g.map(|t| t * s));
            }
            Op::Blend { o, p } => {
                let (ov, pv) = (v(*o), v(*p));
                let (n, h, w) = ov.chw();
                let hw = h * w;
                let groups = pv.chw().0 / n;
                let mut go = Tensor::zeros(ov.shape());
                let mut gp = Tensor::zeros(pv.shape());
                for gi in 0..groups {
                    let gg = &g.data()[gi * hw..(gi + 1) * hw];
                    for c in 0..n {
                        let pc = (gi * n + c) * hw;
                        let oc = c * hw;
                        for s in 0..hw {
                            go.data_mut()[oc + s] += gg[s] * pv.data()[pc + s];
                            gp.data_mut()[pc + s] = gg[s] * ov.data()[oc + s];
                        }
                    }
                }
                acc(*o, go);
                acc(*p, gp);
            }
            Op::Concat(parts) => {
                let (_, h, w) = g.chw();
                let mut off = 0;
                for &i in parts {
                    let c = v(i).chw().0;
                    let data = g.data()[off * h * w..(off + c) * h * w].to_vec();
                    acc(i, Tensor::new(vec![c, h, w], data).expect("slice extents"));
                    off += c;
                }
            }
            Op::Slice { x, start } => {
                let (_, h, w) = g.chw();
                let mut t = Tensor::zeros(v(*x).shape());
                t.data_mut()[start * h * w..start * h * w + g.len()].copy_from_slice(g.data());
                acc(*x, t);
            }
            Op::Extend { x } => {
                let (_, h, w) = v(*x).chw();
                acc(*x, ops::extend_adjoint(g, h, w));
            }
            Op::Crop { x } => {
                let (_, h, w) = v(*x).chw();
                acc(*x, ops::crop_adjoint(g, h, w));
            }
            Op::Dwt { x, kernel } => {
                let (_, h, w) = g.chw();
                let sub = crate::dwt::Subbands {
                    bands: crate::dwt::deinterleave(g.data(), h, w),
                };
                let gx = analyze_level_adjoint(&sub, kernel).expect("consistent band shapes");
                acc(*x, ops::grid_to_tensor(gx));
            }
            Op::Pick { src, band } => {
                let (_, h, w) = v(*src).chw();
                let (pr, pc) = band.phases();
                let (_, bw) = band_shape(*band, h, w);
                let mut t = Tensor::zeros(&[1, h, w]);
                for (idx, &gv) in g.data().iter().enumerate() {
                    let (i, j) = (idx / bw, idx % bw);
                    t.data_mut()[(2 * i + pr) * w + 2 * j + pc] = gv;
                }
                acc(*src, t);
            }
            Op::Synth { bands, kernel } => {
                let grid = Grid::new(g.chw().1, g.chw().2, g.data().to_vec()).expect("grid extents");
                let sub = synthesize_level_adjoint(&grid, kernel);
                for (i, b) in sub.bands.into_iter().enumerate() {
                    acc(bands[i], ops::grid_to_tensor(b));
                }
            }
            Op::Sum(x) => {
                acc(*x, Tensor::full(v(*x).shape(), g.data()[0]));
            }
            Op::SumSquares(x) => {
                let s = g.data()[0] + g.data()[0];
                acc(*x, v(*x).map(|t| t * s));
            }
            Op::SumAbs(x) => {
                let s = g.data()[0];
                acc(*x, v(*x).map(|t| if t > T::zero() { s } else if t < T::zero() { -s } else { T::zero() }));
            }
            Op::Weighted(terms) => {
                for &(i, w) in terms {
                    acc(i, scalar(g.data()[0].f64() * w));
                }
            }
            Op::Quant { y, ga, gs, delta, sigma } => {
                let (a, s) = (v(*ga).data()[0].f64(), v(*gs).data()[0].f64());
                let yv = v(*y);
                let mut gy = Tensor::zeros(yv.shape());
                let (mut dga, mut dgs) = (0.0, 0.0);
                for (k, (&yi, &gi)) in yv.data().iter().zip(g.data()).enumerate() {
                    let gi = gi.f64();
                    if gi == 0.0 {
                        continue;
                    }
                    let d = smoothed_quantizer(yi.f64(), a, s, *delta, *sigma);
                    gy.data_mut()[k] = T::of(gi * d[1]);
                    dga += gi * d[2];
                    dgs += gi
                        * if self.relaxed_forward {
                            d[3]
                        } else {
                            dequantize_value(quantize_value(a * yi.f64(), *delta, 0.0), *delta)
                        };
                }
                acc(*y, gy);
                acc(*ga, scalar(dga));
                acc(*gs, scalar(dgs));
            }
            Op::Rate { y, ga, delta, sigma, lut } => {
                let a = v(*ga).data()[0].f64();
                let gi = g.data()[0].f64();
                let yv = v(*y);
                let mut gy = Tensor::zeros(yv.shape());
                let mut dga = 0.0;
                for (o, &yi) in gy.data_mut().iter_mut().zip(yv.data()) {
                    let s = smoothed_deadzone(yi.f64(), a, *delta, *sigma, |q| lut.get(q));
                    dga += s.threshold_moment / a;
                    *o = T::of(gi * s.slope);
                }
                acc(*y, gy);
                acc(*ga, scalar(gi * dga));
            }
            Op::Step { y, step, sigma } => {
                let gy = v(*y).zip_map(g, |yi, gi| T::of(gi.f64() * step.smoothed(yi.f64(), *sigma).slope));
                acc(*y, gy);
            }
        }
    }
}

impl<T: Real> Graph<T> for Tape<T> {
    type V = Var;

    fn param(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t.clone(),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        self.val(*v)
    }

    fn conv2d(&mut self, x: &Var, k: &Var, b: Option<&Var>) -> Result<Var> {
        let out = conv2d(self.val(*x), self.val(*k), b.map(|b| self.val(*b)))?;
        Ok(self.push(out, Op::Conv { x: x.0, k: k.0, b: b.map(|b| b.0) }))
    }

    fn activation(&mut self, x: &Var, a: Activation) -> Var {
        let out = self.val(*x).map(|v| a.apply(v));
        self.push(out, Op::Act { x: x.0, a })
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        ops::same_shape(self.val(*a), self.val(*b), "add")?;
        let out = self.val(*a).zip_map(self.val(*b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a.0, b.0)))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        ops::same_shape(self.val(*a), self.val(*b), "sub")?;
        let out = self.val(*a).zip_map(self.val(*b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a.0, b.0)))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        ops::same_shape(self.val(*a), self.val(*b), "mul")?;
        let out = self.val(*a).zip_map(self.val(*b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a.0, b.0)))
    }

    fn scale(&mut self, x: &Var, s: f64) -> Var {
        let st = T::of(s);
        let out = self.val(*x).map(|v| v * st);
        self.push(out, Op::Scale(x.0, s))
    }

    fn blend(&mut self, o: &Var, p: &Var) -> Result<Var> {
        let out = ops::blend(self.val(*o), self.val(*p))?;
        Ok(self.push(out, Op::Blend { o: o.0, p: p.0 }))
    }

    fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|p| self.val(*p)).collect();
        let out = ops::concat(&refs)?;
        Ok(self.push(out, Op::Concat(parts.iter().map(|p| p.0).collect())))
    }

    fn slice_channels(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        let out = ops::slice(self.val(*x), start, len)?;
        Ok(self.push(out, Op::Slice { x: x.0, start }))
    }

    fn extend(&mut self, x: &Var, h: usize, w: usize) -> Result<Var> {
        let xv = self.val(*x);
        if (xv.shape()[1], xv.shape()[2]) == (h, w) {
            return Ok(*x);
        }
        let out = ops::extend(xv, h, w)?;
        Ok(self.push(out, Op::Extend { x: x.0 }))
    }

    fn crop(&mut self, x: &Var, h: usize, w: usize) -> Result<Var> {
        let xv = self.val(*x);
        if (xv.shape()[1], xv.shape()[2]) == (h, w) {
            return Ok(*x);
        }
        let out = ops::crop(xv, h, w)?;
        Ok(self.push(out, Op::Crop { x: x.0 }))
    }

    fn dwt_analyze(&mut self, x: &Var, k: &WaveletKernel) -> Result<[Var; 4]> {
        let bands = ops::dwt_analyze(self.val(*x), k)?;
        let (_, h, w) = self.val(*x).chw();
        let grids = bands.map(|b| ops::tensor_to_grid(&b).expect("single channel"));
        let packed = Tensor::new(vec![1, h, w], interleave(&grids, h, w))?;
        let src = self.push(packed, Op::Dwt { x: x.0, kernel: k.clone() });
        Ok(Band::ALL.map(|band| {
            let t = ops::grid_to_tensor(grids[band.index()].clone());
            self.push(t, Op::Pick { src: src.0, band })
        }))
    }

    fn dwt_synthesize(&mut self, bands: &[Var; 4], k: &WaveletKernel) -> Result<Var> {
        let out = ops::dwt_synthesize(
            [self.val(bands[0]), self.val(bands[1]), self.val(bands[2]), self.val(bands[3])],
            k,
        )?;
        Ok(self.push(out, Op::Synth { bands: bands.map(|b| b.0), kernel: k.clone() }))
    }
}

/// Largest per-coordinate relative error between the tape gradient of `f`
/// at `x` and central differences with step `eps`.
pub fn grad_check(
    f: impl Fn(&mut Tape<f64>, Var) -> Result<Var>,
    x: &Tensor<f64>,
    eps: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.param(x);
    let loss = f(&mut tape, xv)?;
    let mut grads = tape.backward(loss)?;
    let analytic = grads.take_or_zeros(xv, x.shape());
    let eval = |p: &Tensor<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.param(p);
        let l = f(&mut t, v)?;
        Ok(t.scalar_value(l))
    };
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * eps);
        let err = (analytic.data()[i] - fd).abs() / fd.abs().max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.param(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let l = t.sum_squares(x);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn abs_subgradient() {
        let mut t = Tape::<f64>::new();
        let x = t.param(&Tensor::new(vec![3], vec![-3.0, 2.0, 0.0]).unwrap());
        let l = t.sum_abs(x);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[-1.0, 1.0, 0.0]);
    }

    #[test]
    fn rejects_non_scalar_loss() {
        let mut t = Tape::<f32>::new();
        let x = t.param(&Tensor::zeros(&[2]));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn grad_check_of_sum_is_exact() {
        let x = rand_tensor(&[1, 3, 3], -5.0, 5.0, 1);
        let e = grad_check(|t, x| Ok(t.sum(x)), &x, 1e-3).unwrap();
        assert!(e < 1e-9, "{e}");
    }

    #[test]
    fn grad_check_sigmoid_sum() {
        let x = rand_tensor(&[1, 4, 4], -2.0, 2.0, 2);
        let e = grad_check(
            |t, x| {
                let s = t.activation(&x, Activation::Sigmoid);
                Ok(t.sum(s))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(e < 1e-4, "{e}");
    }

    // conv → leaky → conv → sigmoid → blend with a linear path, on 1×8×8.
    #[test]
    fn composite_network_matches_finite_differences() {
        let k1 = rand_tensor(&[4, 1, 3, 3], -0.5, 0.5, 3);
        let b1 = rand_tensor(&[4], -0.1, 0.1, 4);
        let k2 = rand_tensor(&[2, 4, 3, 3], -0.5, 0.5, 5);
        let kp = rand_tensor(&[4, 1, 5, 5], -0.3, 0.3, 6);
        let x = rand_tensor(&[1, 8, 8], -1.0, 1.0, 7);
        let e = grad_check(
            |t, x| {
                let (k1, b1, k2, kp) = (t.input(k1.clone()), t.input(b1.clone()), t.input(k2.clone()), t.input(kp.clone()));
                let h = t.conv2d(&x, &k1, Some(&b1))?;
                let h = t.activation(&h, Activation::LeakyRelu);
                let o = t.conv2d(&h, &k2, None)?;
                let o = t.activation(&o, Activation::Sigmoid);
                let p = t.conv2d(&x, &kp, None)?;
                let y = t.blend(&o, &p)?;
                Ok(t.sum_squares(y))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(e < 1e-3, "{e}");
    }

    #[test]
    fn kernel_gradients_match_finite_differences() {
        let x = rand_tensor(&[2, 7, 6], -1.0, 1.0, 8);
        let k = rand_tensor(&[3, 2, 3, 3], -0.5, 0.5, 9);
        let e = grad_check(
            |t, k| {
                let xv = t.input(x.clone());
                let y = t.conv2d(&xv, &k, None)?;
                let y = t.activation(&y, Activation::Sigmoid);
                let a = t.slice_channels(&y, 1, 2)?;
                let b = t.slice_channels(&y, 0, 1)?;
                let c = t.concat(&[b, a])?;
                let d = t.crop(&c, 5, 5)?;
                let d = t.extend(&d, 7, 6)?;
                Ok(t.sum_squares(d))
            },
            &k,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-5, "{e}");
    }

    #[test]
    fn dwt_nodes_match_finite_differences() {
        let x = rand_tensor(&[1, 9, 7], -2.0, 2.0, 10);
        for k in [crate::dwt::Wavelet::LeGall53.kernel(), crate::dwt::Wavelet::Cdf97.kernel()] {
            let e = grad_check(
                |t, x| {
                    let [ll, hl, lh, hh] = t.dwt_analyze(&x, &k)?;
                    let ll2 = t.activation(&ll, Activation::Sigmoid);
                    let hh2 = t.mul(&hh, &hh)?;
                    let r = t.dwt_synthesize(&[ll2, hl, lh, hh2], &k)?;
                    let r = t.activation(&r, Activation::Sigmoid);
                    Ok(t.sum(r))
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(e < 1e-5, "{e}");
        }
    }

    #[test]
    fn linearity_of_backward() {
        let x = rand_tensor(&[1, 5, 5], -1.0, 1.0, 11);
        let grad_of = |a: f64, b: f64| {
            let mut t = Tape::<f64>::new();
            let xv = t.param(&x);
            let s = t.activation(&xv, Activation::Sigmoid);
            let f = t.sum_squares(s);
            let g = t.sum_abs(xv);
            let l = t.weighted_sum(&[(f, a), (g, b)]).unwrap();
            t.backward(l).unwrap().get(xv).unwrap().clone()
        };
        let (gf, gg, gc) = (grad_of(1.0, 0.0), grad_of(0.0, 1.0), grad_of(2.5, -0.7));
        for i in 0..x.len() {
            let expect = 2.5 * gf.data()[i] - 0.7 * gg.data()[i];
            assert!((gc.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn step_forward_is_table_lookup() {
        let step = Arc::new(TableStep::new(vec![-1.0, 0.0, 1.5], vec![-2.0, -0.5, 0.5, 2.0]).unwrap());
        let x = Tensor::new(vec![6], vec![-3.0f32, -1.0, -0.2, 0.0, 1.49, 7.0]).unwrap();
        let mut t = Tape::<f32>::new();
        let xv = t.param(&x);
        let y = t.step(xv, step.clone(), 0.3).unwrap();
        let expect: Vec<f32> = x.data().iter().map(|&v| step.value(v as f64) as f32).collect();
        assert_eq!(t.value(&y).data(), &expect[..]);
        assert!(t.step(xv, step, 0.0).is_err());
    }

    #[test]
    fn relaxed_step_passes_grad_check() {
        let step = Arc::new(TableStep::new(vec![-1.0, -0.25, 0.3, 1.2], vec![0.0, 1.0, -0.5, 2.0, 2.5]).unwrap());
        let x = rand_tensor(&[1, 4, 4], -2.0, 2.0, 12);
        let e = grad_check(
            |t, x| {
                t.set_relaxed_forward(true);
                let y = t.step(x, step.clone(), 0.4)?;
                Ok(t.sum_squares(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-3, "{e}");
    }

    #[test]
    fn relaxed_quant_and_rate_gain_gradients() {
        let y = rand_tensor(&[1, 6, 6], -8.0, 8.0, 13);
        let lut = Arc::new(IndexLut { first: -6, values: (0..13).map(|i| 1.0 + ((i as f64) - 6.0).abs() * 0.8).collect() });
        let loss = |t: &mut Tape<f64>, ga: Var, gs: Var, yv: Var| -> Result<Var> {
            t.set_relaxed_forward(true);
            let q = t.quantize(yv, ga, gs, 1.3, 0.5)?;
            let r = t.rate(yv, ga, 1.3, 0.5, lut.clone())?;
            let yin = t.input(y.clone());
            let d = t.sub(&q, &yin)?;
            let s = t.sum_squares(d);
            t.weighted_sum(&[(s, 1.0), (r, 0.7)])
        };
        // gradient w.r.t. y
        let e = grad_check(
            |t, yv| {
                let ga = t.input(Tensor::scalar(1.2));
                let gs = t.input(Tensor::scalar(0.9));
                loss(t, ga, gs, yv)
            },
            &y,
            1e-6,
        )
        .unwrap();
        assert!(e < 1e-3, "y: {e}");
        // gradient w.r.t. each gain
        for which in 0..2 {
            let e = grad_check(
                |t, g| {
                    let yv = t.input(y.clone());
                    let other = t.input(Tensor::scalar(if which == 0 { 0.9 } else { 1.2 }));
                    let (ga, gs) = if which == 0 { (g, other) } else { (other, g) };
                    loss(t, ga, gs, yv)
                },
                &Tensor::scalar(if which == 0 { 1.2 } else { 0.9 }),
                1e-6,
            )
            .unwrap();
            assert!(e < 1e-4, "gain {which}: {e}");
        }
    }
}
