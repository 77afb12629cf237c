use std::rc::Rc;

use super::{ops, Activation, Graph};
use crate::dwt::WaveletKernel;
use crate::error::Result;
use crate::tensor::{conv2d, Real, Tensor};

/// Graph implementation that computes values immediately and keeps no
/// history.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl<T: Real> Graph<T> for Eager {
    type V = Rc<Tensor<T>>;

    fn param(&mut self, t: &Tensor<T>) -> Self::V {
        Rc::new(t.clone())
    }

    fn input(&mut self, t: Tensor<T>) -> Self::V {
        Rc::new(t)
    }

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<T> {
        v
    }

    fn conv2d(&mut self, x: &Self::V, k: &Self::V, b: Option<&Self::V>) -> Result<Self::V> {
        Ok(Rc::new(conv2d(x, k, b.map(|b| &**b))?))
    }

    fn activation(&mut self, x: &Self::V, a: Activation) -> Self::V {
        Rc::new(x.map(|v| a.apply(v)))
    }

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        ops::same_shape(a, b, "add")?;
        Ok(Rc::new(a.zip_map(b, |x, y| x + y)))
    }

    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        ops::same_shape(a, b, "sub")?;
        Ok(Rc::new(a.zip_map(b, |x, y| x - y)))
    }

    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        ops::same_shape(a, b, "mul")?;
        Ok(Rc::new(a.zip_map(b, |x, y| x * y)))
    }

    fn scale(&mut self, x: &Self::V, s: f64) -> Self::V {
        let s = T::of(s);
        Rc::new(x.map(|v| v * s))
    }

    fn blend(&mut self, o: &Self::V, p: &Self::V) -> Result<Self::V> {
        Ok(Rc::new(ops::blend(o, p)?))
    }

    fn concat(&mut self, parts: &[Self::V]) -> Result<Self::V> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|p| &**p).collect();
        Ok(Rc::new(ops::concat(&refs)?))
    }

    fn slice_channels(&mut self, x: &Self::V, start: usize, len: usize) -> Result<Self::V> {
        Ok(Rc::new(ops::slice(x, start, len)?))
    }

    fn extend(&mut self, x: &Self::V, h: usize, w: usize) -> Result<Self::V> {
        if (x.shape()[1], x.shape()[2]) == (h, w) {
            return Ok(x.clone());
        }
        Ok(Rc::new(ops::extend(x, h, w)?))
    }

    fn crop(&mut self, x: &Self::V, h: usize, w: usize) -> Result<Self::V> {
        if (x.shape()[1], x.shape()[2]) == (h, w) {
            return Ok(x.clone());
        }
        Ok(Rc::new(ops::crop(x, h, w)?))
    }

    fn dwt_analyze(&mut self, x: &Self::V, k: &WaveletKernel) -> Result<[Self::V; 4]> {
        Ok(ops::dwt_analyze(x, k)?.map(Rc::new))
    }

    fn dwt_synthesize(&mut self, bands: &[Self::V; 4], k: &WaveletKernel) -> Result<Self::V> {
        Ok(Rc::new(ops::dwt_synthesize(
            [&*bands[0], &*bands[1], &*bands[2], &*bands[3]],
            k,
        )?))
    }
}
