//! Proposal-opacity lifting operators.
//!
//! Both operators blend `N` linear proposal maps with per-pixel sigmoid
//! opacities. The opacity branch is a small residual CNN; the proposal
//! branch is a bank of bias-free filters, so zero input gives zero output.
//! Parameter structs are generic over their storage so the same layout can
//! hold plain tensors, tape variables or optimiser state.

use rand::{Rng, SeedableRng};

use crate::autograd::{Activation, Graph};
use crate::dwt::{band_shape, Band};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Architecture hyper-parameters stored with the weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetConfig {
    pub proposals: usize,
    pub proposal_kernel: usize,
    pub opacity_kernel: usize,
    pub opacity_width: usize,
    pub res_blocks: usize,
    /// Fixed gain applied to opacity-branch inputs.
    pub opacity_input_scale: f32,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            proposals: 8,
            proposal_kernel: 13,
            opacity_kernel: 3,
            opacity_width: 16,
            res_blocks: 2,
            opacity_input_scale: 1.0 / 64.0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let odd = |k: usize| k % 2 == 1;
        if self.proposals == 0 || self.opacity_width == 0 || !odd(self.proposal_kernel) || !odd(self.opacity_kernel) {
            return Err(Error::InconsistentMetadata(format!("invalid network configuration {self:?}")));
        }
        if !(self.opacity_input_scale.is_finite() && self.opacity_input_scale > 0.0) {
            return Err(Error::InconsistentMetadata("opacity input scale must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum L2hVariant {
    Adaptive,
    Linear,
}

impl L2hVariant {
    pub fn id(self) -> u8 {
        match self {
            L2hVariant::Adaptive => 0,
            L2hVariant::Linear => 1,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(L2hVariant::Adaptive),
            1 => Some(L2hVariant::Linear),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv<P> {
    pub weight: P,
    pub bias: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpacityNet<P> {
    pub stem: Conv<P>,
    pub blocks: Vec<[Conv<P>; 2]>,
    pub head: Conv<P>,
}

/// High-to-low operator: proposals are `N×3×K×K` over the stacked
/// (HL, LH, HH) input.
#[derive(Clone, Debug, PartialEq)]
pub struct H2l<P> {
    pub opacity: OpacityNet<P>,
    pub proposals: P,
}

/// Low-to-high operator.
#[derive(Clone, Debug, PartialEq)]
pub enum L2h<P> {
    /// Proposals `3N×1×K×K`, band-major (`b·N + n`).
    Adaptive { opacity: OpacityNet<P>, proposals: P },
    /// One `K×K` filter per detail band, `3×1×K×K`.
    Linear { filters: P },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Operators<P> {
    pub h2l: H2l<P>,
    pub l2h: L2h<P>,
}

impl<P> Conv<P> {
    fn map<'a, Q>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a P) -> Q) -> Conv<Q> {
        Conv {
            weight: f(&format!("{prefix}.weight"), &self.weight),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }
}

impl<P> OpacityNet<P> {
    fn map<'a, Q>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a P) -> Q) -> OpacityNet<Q> {
        OpacityNet {
            stem: self.stem.map(&format!("{prefix}.stem"), f),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, [a, b])| {
                    [
                        a.map(&format!("{prefix}.block{i}.conv0"), f),
                        b.map(&format!("{prefix}.block{i}.conv1"), f),
                    ]
                })
                .collect(),
            head: self.head.map(&format!("{prefix}.head"), f),
        }
    }
}

impl<P> Operators<P> {
    /// Applies `f` to every parameter in canonical order, passing its name.
    pub fn map<'a, Q>(&'a self, mut f: impl FnMut(&str, &'a P) -> Q) -> Operators<Q> {
        let h2l = H2l {
            opacity: self.h2l.opacity.map("h2l.opacity", &mut f),
            proposals: f("h2l.proposals", &self.h2l.proposals),
        };
        let l2h = match &self.l2h {
            L2h::Adaptive { opacity, proposals } => L2h::Adaptive {
                opacity: opacity.map("l2h.opacity", &mut f),
                proposals: f("l2h.proposals", proposals),
            },
            L2h::Linear { filters } => L2h::Linear {
                filters: f("l2h.linear", filters),
            },
        };
        Operators { h2l, l2h }
    }

    /// Parameters in canonical order with their names.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        self.map(|name, p| out.push((name.to_string(), p)));
        out
    }

    pub fn zip_map<Q, R>(&self, other: &Operators<Q>, mut f: impl FnMut(&str, &P, &Q) -> R) -> Operators<R> {
        let rhs = other.named();
        let mut i = 0;
        self.map(|name, p| {
            let (oname, q) = &rhs[i];
            debug_assert_eq!(name, oname);
            i += 1;
            f(name, p, q)
        })
    }

    pub fn variant(&self) -> L2hVariant {
        match self.l2h {
            L2h::Adaptive { .. } => L2hVariant::Adaptive,
            L2h::Linear { .. } => L2hVariant::Linear,
        }
    }
}

impl<T: Real> Operators<Tensor<T>> {
    /// He-uniform convolution weights, zero biases and zero proposals.
    pub fn init(cfg: &NetConfig, variant: L2hVariant, seed: u64) -> Self {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut conv = |n: usize, c: usize, k: usize| {
            let bound = (6.0 / (c * k * k) as f64).sqrt();
            let data = (0..n * c * k * k).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
            Conv {
                weight: Tensor::new(vec![n, c, k, k], data).expect("shape"),
                bias: Tensor::zeros(&[n]),
            }
        };
        let (w, ko) = (cfg.opacity_width, cfg.opacity_kernel);
        let mut opacity = |c_in: usize| OpacityNet {
            stem: conv(w, c_in, ko),
            blocks: (0..cfg.res_blocks).map(|_| [conv(w, w, ko), conv(w, w, ko)]).collect(),
            head: conv(cfg.proposals, w, ko),
        };
        let (n, k) = (cfg.proposals, cfg.proposal_kernel);
        let h2l = H2l {
            opacity: opacity(3),
            proposals: Tensor::zeros(&[n, 3, k, k]),
        };
        let l2h = match variant {
            L2hVariant::Adaptive => L2h::Adaptive {
                opacity: opacity(1),
                proposals: Tensor::zeros(&[3 * n, 1, k, k]),
            },
            L2hVariant::Linear => L2h::Linear {
                filters: Tensor::zeros(&[3, 1, k, k]),
            },
        };
        Operators { h2l, l2h }
    }

    /// Initialisation followed by random proposal filters of magnitude
    /// `proposal_scale` (tests and invertibility sweeps).
    pub fn random(cfg: &NetConfig, variant: L2hVariant, seed: u64, proposal_scale: f64) -> Self {
        let mut ops = Self::init(cfg, variant, seed);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
        let mut fill = |t: &mut Tensor<T>| {
            for v in t.data_mut() {
                *v = T::of(rng.gen_range(-proposal_scale..proposal_scale));
            }
        };
        fill(&mut ops.h2l.proposals);
        match &mut ops.l2h {
            L2h::Adaptive { proposals, .. } => fill(proposals),
            L2h::Linear { filters } => fill(filters),
        }
        ops
    }

    /// Copy with every bias drawn from `±amplitude` (moves gradient checks
    /// off activation kinks).
    pub fn with_random_biases(&self, seed: u64, amplitude: f64) -> Self {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        self.map(|name, t| {
            if !name.ends_with(".bias") {
                return t.clone();
            }
            let data = (0..t.len()).map(|_| T::of(rng.gen_range(-amplitude..amplitude))).collect();
            Tensor::new(t.shape().to_vec(), data).expect("shape")
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Parameter tensors bound as graph leaves.
    pub fn bind<G: Graph<T>>(&self, g: &mut G) -> Operators<G::V> {
        self.map(|_, t| g.param(t))
    }

    pub fn cast<U: Real>(&self) -> Operators<Tensor<U>> {
        self.map(|_, t| t.cast())
    }

    /// Checks that every tensor has the shape implied by `cfg`.
    pub fn check_shapes(&self, cfg: &NetConfig) -> Result<()> {
        let expect = Self::init(cfg, self.variant(), 0);
        for ((name, a), (_, b)) in self.named().into_iter().zip(expect.named()) {
            if a.shape() != b.shape() {
                return Err(Error::InconsistentMetadata(format!(
                    "{name} has shape {:?}, configuration implies {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        if self.named().len() != expect.named().len() {
            return Err(Error::InconsistentMetadata("residual block count differs from configuration".into()));
        }
        Ok(())
    }
}

impl<V: Clone> OpacityNet<V> {
    /// Sigmoid opacity maps, one channel per proposal.
    pub fn forward<T: Real, G: Graph<T, V = V>>(&self, g: &mut G, x: &V, input_scale: f64) -> Result<V> {
        let xs = g.scale(x, input_scale);
        let h = g.conv2d(&xs, &self.stem.weight, Some(&self.stem.bias))?;
        let mut h = g.activation(&h, Activation::LeakyRelu);
        for [a, b] in &self.blocks {
            let r = g.conv2d(&h, &a.weight, Some(&a.bias))?;
            let r = g.activation(&r, Activation::Relu);
            let r = g.conv2d(&r, &b.weight, Some(&b.bias))?;
            h = g.add(&h, &r)?;
        }
        let o = g.conv2d(&h, &self.head.weight, Some(&self.head.bias))?;
        Ok(g.activation(&o, Activation::Sigmoid))
    }
}

/// Aliasing estimate for an LL band of extent `ll_h×ll_w` from the three
/// detail bands of the same level.
pub fn h2l_apply<T: Real, G: Graph<T>>(
    g: &mut G,
    net: &H2l<G::V>,
    details: [&G::V; 3],
    ll_shape: (usize, usize),
    input_scale: f64,
) -> Result<G::V> {
    let (h, w) = ll_shape;
    let mut stacked = Vec::with_capacity(3);
    for (b, d) in Band::DETAIL.iter().zip(details) {
        let shape = g.value(d).shape();
        if shape[1] > h || shape[2] > w || h - shape[1] > 1 || w - shape[2] > 1 {
            return Err(Error::Shape(format!(
                "{} band {:?} does not belong to a level with a {h}x{w} LL band",
                b.name(),
                shape
            )));
        }
        stacked.push(g.extend(d, h, w)?);
    }
    let x = g.concat(&stacked)?;
    let p = g.conv2d(&x, &net.proposals, None)?;
    let o = net.opacity.forward(g, &x, input_scale)?;
    g.blend(&o, &p)
}

/// Detail-band predictions from the cleaned LL band, cropped to the band
/// shapes of a parent of extent `parent`.
pub fn l2h_apply<T: Real, G: Graph<T>>(
    g: &mut G,
    net: &L2h<G::V>,
    ll: &G::V,
    parent: (usize, usize),
    input_scale: f64,
) -> Result<[G::V; 3]> {
    let out = match net {
        L2h::Adaptive { opacity, proposals } => {
            let p = g.conv2d(ll, proposals, None)?;
            let o = opacity.forward(g, ll, input_scale)?;
            g.blend(&o, &p)?
        }
        L2h::Linear { filters } => g.conv2d(ll, filters, None)?,
    };
    let mut bands = Vec::with_capacity(3);
    for (i, b) in Band::DETAIL.iter().enumerate() {
        let (bh, bw) = band_shape(*b, parent.0, parent.1);
        let s = g.slice_channels(&out, i, 1)?;
        bands.push(g.crop(&s, bh, bw)?);
    }
    Ok(bands.try_into().unwrap_or_else(|_| unreachable!()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Eager;
    use crate::tensor::conv2d;
    use std::rc::Rc;

    fn rand_tensor(shape: &[usize], seed: u64, amp: f64) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-amp..amp)).collect()).unwrap()
    }

    fn eager(ops: &Operators<Tensor<f64>>) -> Operators<Rc<Tensor<f64>>> {
        ops.map(|_, t| Rc::new(t.clone()))
    }

    // Independent evaluation of the opacity branch with plain conv2d calls.
    fn opacity_oracle(net: &OpacityNet<Tensor<f64>>, x: &Tensor<f64>, scale: f64) -> Tensor<f64> {
        let xs = x.map(|v| v * scale);
        let mut h = conv2d(&xs, &net.stem.weight, Some(&net.stem.bias)).unwrap();
        h = h.map(|v| if v < 0.0 { 0.3 * v } else { v });
        for [a, b] in &net.blocks {
            let r = conv2d(&h, &a.weight, Some(&a.bias)).unwrap().map(|v| v.max(0.0));
            let r = conv2d(&r, &b.weight, Some(&b.bias)).unwrap();
            h.add_assign(&r);
        }
        conv2d(&h, &net.head.weight, Some(&net.head.bias)).unwrap().map(|v| 1.0 / (1.0 + (-v).exp()))
    }

    #[test]
    fn parameter_budget() {
        let n = Operators::<Tensor<f32>>::init(&NetConfig::default(), L2hVariant::Adaptive, 1).parameter_count();
        assert_eq!(n, 29_600);
        assert!(n <= 40_000);
    }

    #[test]
    fn h2l_matches_two_path_oracle() {
        let cfg = NetConfig::default();
        let ops = Operators::<Tensor<f64>>::random(&cfg, L2hVariant::Adaptive, 3, 0.05);
        let bands = [rand_tensor(&[1, 16, 16], 4, 30.0), rand_tensor(&[1, 16, 16], 5, 30.0), rand_tensor(&[1, 16, 16], 6, 30.0)];
        let mut g = Eager;
        let bound = eager(&ops);
        let b: Vec<Rc<Tensor<f64>>> = bands.iter().map(|t| Rc::new(t.clone())).collect();
        let out = h2l_apply(&mut g, &bound.h2l, [&b[0], &b[1], &b[2]], (16, 16), cfg.opacity_input_scale as f64).unwrap();

        let stacked = Tensor::new(vec![3, 16, 16], bands.iter().flat_map(|t| t.data().to_vec()).collect()).unwrap();
        let o = opacity_oracle(&ops.h2l.opacity, &stacked, cfg.opacity_input_scale as f64);
        let mut expect = vec![0.0; 256];
        for n in 0..cfg.proposals {
            let k = Tensor::new(vec![1, 3, 13, 13], ops.h2l.proposals.data()[n * 507..(n + 1) * 507].to_vec()).unwrap();
            let p = conv2d(&stacked, &k, None).unwrap();
            for i in 0..256 {
                expect[i] += o.data()[n * 256 + i] * p.data()[i];
            }
        }
        let err = out.data().iter().zip(&expect).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 1e-9, "{err}");
        assert!(o.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn h2l_zero_cases() {
        let cfg = NetConfig::default();
        let mut g = Eager;
        // zero detail bands
        let ops = eager(&Operators::random(&cfg, L2hVariant::Adaptive, 7, 0.1));
        let z = Rc::new(Tensor::<f64>::zeros(&[1, 8, 7]));
        let out = h2l_apply(&mut g, &ops.h2l, [&z, &z, &z], (8, 8), 1.0 / 64.0).unwrap();
        assert_eq!(out.max_abs(), 0.0);
        // zero proposals with arbitrary opacities
        let ops = eager(&Operators::init(&cfg, L2hVariant::Adaptive, 8));
        let x = Rc::new(rand_tensor(&[1, 8, 8], 9, 40.0));
        let out = h2l_apply(&mut g, &ops.h2l, [&x, &x, &x], (8, 8), 1.0 / 64.0).unwrap();
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn h2l_rejects_mismatched_bands() {
        let ops = eager(&Operators::random(&NetConfig::default(), L2hVariant::Adaptive, 7, 0.1));
        let z = Rc::new(Tensor::<f64>::zeros(&[1, 5, 5]));
        assert!(h2l_apply(&mut Eager, &ops.h2l, [&z, &z, &z], (8, 8), 1.0).is_err());
    }

    #[test]
    fn l2h_matches_two_path_oracle() {
        let cfg = NetConfig::default();
        let ops = Operators::<Tensor<f64>>::random(&cfg, L2hVariant::Adaptive, 10, 0.05);
        let ll = rand_tensor(&[1, 9, 11], 11, 100.0);
        let out = l2h_apply(&mut Eager, &eager(&ops).l2h, &Rc::new(ll.clone()), (18, 21), cfg.opacity_input_scale as f64).unwrap();
        let L2h::Adaptive { opacity, proposals } = &ops.l2h else { unreachable!() };
        let o = opacity_oracle(opacity, &ll, cfg.opacity_input_scale as f64);
        let hw = 99;
        for (bi, b) in Band::DETAIL.iter().enumerate() {
            let (bh, bw) = band_shape(*b, 18, 21);
            assert_eq!(out[bi].shape(), &[1, bh, bw]);
            let mut full = vec![0.0; hw];
            for n in 0..cfg.proposals {
                let idx = bi * cfg.proposals + n;
                let k = Tensor::new(vec![1, 1, 13, 13], proposals.data()[idx * 169..(idx + 1) * 169].to_vec()).unwrap();
                let p = conv2d(&ll, &k, None).unwrap();
                for i in 0..hw {
                    full[i] += o.data()[n * hw + i] * p.data()[i];
                }
            }
            for i in 0..bh {
                for j in 0..bw {
                    assert!((out[bi].data()[i * bw + j] - full[i * 11 + j]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn l2h_constant_input_with_zero_sum_filters() {
        let cfg = NetConfig::default();
        let mut ops = Operators::<Tensor<f64>>::random(&cfg, L2hVariant::Adaptive, 12, 0.1);
        if let L2h::Adaptive { proposals, .. } = &mut ops.l2h {
            for f in proposals.data_mut().chunks_mut(169) {
                let mean = f.iter().sum::<f64>() / 169.0;
                f.iter_mut().for_each(|v| *v -= mean);
            }
        }
        let ll = Rc::new(Tensor::full(&[1, 10, 10], 77.0));
        let out = l2h_apply(&mut Eager, &eager(&ops).l2h, &ll, (20, 20), 1.0 / 64.0).unwrap();
        assert!(out.iter().all(|t| t.max_abs() < 1e-10));
        let zero = Rc::new(Tensor::zeros(&[1, 10, 10]));
        let out = l2h_apply(&mut Eager, &eager(&ops).l2h, &zero, (20, 20), 1.0 / 64.0).unwrap();
        assert!(out.iter().all(|t| t.max_abs() == 0.0));
    }

    #[test]
    fn proposal_path_is_linear() {
        let cfg = NetConfig::default();
        let ops = Operators::<Tensor<f64>>::random(&cfg, L2hVariant::Adaptive, 13, 0.1);
        let x = rand_tensor(&[3, 12, 12], 14, 20.0);
        let y = rand_tensor(&[3, 12, 12], 15, 20.0);
        let p = |t: &Tensor<f64>| conv2d(t, &ops.h2l.proposals, None).unwrap();
        let sum = p(&x.zip_map(&y, |a, b| a + b));
        let sep = p(&x).zip_map(&p(&y), |a, b| a + b);
        assert!(sum.max_abs_diff(&sep) < 1e-9);
        let doubled = p(&x.map(|v| 2.0 * v));
        assert!(doubled.max_abs_diff(&p(&x).map(|v| 2.0 * v)) < 1e-9);
    }

    #[test]
    fn linear_l2h_superposition_and_impulse() {
        let cfg = NetConfig::default();
        let ops = Operators::<Tensor<f64>>::random(&cfg, L2hVariant::Linear, 16, 0.2);
        let net = eager(&ops).l2h;
        let run = |t: &Tensor<f64>| l2h_apply(&mut Eager, &net, &Rc::new(t.clone()), (60, 60), 1.0).unwrap();
        let x = rand_tensor(&[1, 30, 30], 17, 50.0);
        let y = rand_tensor(&[1, 30, 30], 18, 50.0);
        let s = run(&x.zip_map(&y, |a, b| a + b));
        let (a, b) = (run(&x), run(&y));
        for i in 0..3 {
            assert!(s[i].max_abs_diff(&a[i].zip_map(&b[i], |u, v| u + v)) < 1e-4);
        }
        assert!(run(&Tensor::zeros(&[1, 30, 30])).iter().all(|t| t.max_abs() == 0.0));

        let mut imp = Tensor::zeros(&[1, 30, 30]);
        imp.data_mut()[15 * 30 + 15] = 1.0;
        let r = run(&imp);
        let L2h::Linear { filters } = &ops.l2h else { unreachable!() };
        for bi in 0..3 {
            for u in 0..13 {
                for v in 0..13 {
                    let tap = filters.data()[bi * 169 + u * 13 + v];
                    // cross-correlation: response at (15 − (u − 6), 15 − (v − 6))
                    let got = r[bi].data()[(21 - u) * 30 + (21 - v)];
                    assert_eq!(got, tap);
                }
            }
        }
    }

    #[test]
    fn names_are_unique_and_ordered() {
        let ops = Operators::<Tensor<f32>>::init(&NetConfig::default(), L2hVariant::Adaptive, 0);
        let names: Vec<String> = ops.named().into_iter().map(|(n, _)| n).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert_eq!(names[0], "h2l.opacity.stem.weight");
        assert!(names.contains(&"l2h.proposals".to_string()));
    }
}
