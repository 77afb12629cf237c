//! Python bindings: coding, transform round trips, corpus synthesis and metrics.
//!
//! Images cross the boundary as lists of rows of floats.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use nlc::codec::{decode_image_stream, decode_resolution, encode_image};
use nlc::dwt::{Grid, Wavelet};
use nlc::eval::RdCurve;
use nlc::nets::{L2hVariant, Operators};
use nlc::pipeline::{hybrid_analyze, hybrid_synthesize, Mode, TransformSpec};
use nlc::quant::QuantizerConfig;
use nlc::synth::{oriented_edge_corpus, SynthConfig};
use nlc::weights::{OperatorWeights, WeightsMeta};

fn err(e: nlc::Error) -> PyErr {
    match e {
        nlc::Error::Io(e) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn to_grid(rows: Vec<Vec<f32>>) -> PyResult<Grid<f32>> {
    let width = rows.first().map_or(0, Vec::len);
    if width == 0 {
        return Err(PyValueError::new_err("image must have at least one row and column"));
    }
    if rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("image rows differ in length"));
    }
    Ok(Grid {
        height: rows.len(),
        width,
        data: rows.into_iter().flatten().collect(),
    })
}

fn to_rows(g: &Grid<f32>) -> Vec<Vec<f32>> {
    g.data.chunks(g.width).map(<[f32]>::to_vec).collect()
}

fn parse<T: std::str::FromStr<Err = nlc::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

/// Trained (or random) operator weights with their quantizer settings.
#[pyclass(frozen, module = "nlc_py")]
pub struct Weights {
    inner: OperatorWeights,
}

#[pymethods]
impl Weights {
    #[staticmethod]
    pub fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: OperatorWeights::load(path).map_err(err)? })
    }

    /// Random operators with base-step quantizers, for experiments without training.
    #[staticmethod]
    #[pyo3(signature = (wavelet="5/3", variant="adaptive", levels=3, delta_base=4.0, seed=0, scale=0.02))]
    pub fn random(wavelet: &str, variant: &str, levels: usize, delta_base: f64, seed: u64, scale: f64) -> PyResult<Self> {
        let wavelet: Wavelet = parse(wavelet)?;
        let variant = match variant {
            "adaptive" => L2hVariant::Adaptive,
            "linear" => L2hVariant::Linear,
            v => return Err(PyValueError::new_err(format!("unknown variant {v:?}"))),
        };
        if !(scale > 0.0 && scale.is_finite() && delta_base > 0.0) {
            return Err(PyValueError::new_err("scale and delta_base must be positive"));
        }
        let meta = WeightsMeta::new(wavelet, variant);
        Ok(Self {
            inner: OperatorWeights {
                ops: Operators::random(&meta.net, variant, seed, scale),
                quant: QuantizerConfig::from_base_step(levels, delta_base, &wavelet.kernel()),
                meta,
            },
        })
    }

    pub fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[getter]
    pub fn wavelet(&self) -> &'static str {
        self.inner.meta.wavelet.name()
    }

    #[getter]
    pub fn variant(&self) -> &'static str {
        match self.inner.meta.variant {
            L2hVariant::Adaptive => "adaptive",
            L2hVariant::Linear => "linear",
        }
    }

    #[getter]
    pub fn levels(&self) -> usize {
        self.inner.quant.num_levels()
    }

    #[getter]
    pub fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    #[getter]
    pub fn digest(&self) -> String {
        self.inner.digest().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Weights(wavelet={:?}, variant={:?}, levels={}, parameters={})",
            self.wavelet(),
            self.variant(),
            self.levels(),
            self.parameter_count()
        )
    }
}

fn trained_mode(w: &OperatorWeights) -> Mode {
    match w.meta.variant {
        L2hVariant::Adaptive => Mode::Hybrid,
        L2hVariant::Linear => Mode::H2lPlusLinear,
    }
}

/// Encodes an image; returns the container and the modelled bit count.
#[pyfunction]
#[pyo3(signature = (image, weights=None, step_scale=1.0, mode=None, wavelet="5/3", levels=3, delta=None))]
#[allow(clippy::too_many_arguments)]
pub fn encode<'py>(
    py: Python<'py>,
    image: Vec<Vec<f32>>,
    weights: Option<&Weights>,
    step_scale: f64,
    mode: Option<&str>,
    wavelet: &str,
    levels: usize,
    delta: Option<f64>,
) -> PyResult<(Bound<'py, PyBytes>, f64)> {
    let x = to_grid(image)?;
    let w = weights.map(|w| &w.inner);
    let mode = match (mode, w) {
        (Some(m), _) => parse(m)?,
        (None, Some(w)) => trained_mode(w),
        (None, None) => Mode::Baseline,
    };
    let (wavelet, levels, quant) = match w {
        Some(w) => {
            let q = if mode.uses_operators() { w.quant.clone() } else { w.quant.with_unit_gains() };
            (w.meta.wavelet, w.quant.num_levels(), q)
        }
        None => {
            let wavelet: Wavelet = parse(wavelet)?;
            let d = delta.ok_or_else(|| PyValueError::new_err("coding without weights needs delta"))?;
            (wavelet, levels, QuantizerConfig::from_base_step(levels, d, &wavelet.kernel()))
        }
    };
    if !(step_scale > 0.0 && step_scale.is_finite()) {
        return Err(PyValueError::new_err("step_scale must be positive"));
    }
    let enc = encode_image(&x, levels, wavelet, mode, w, &quant.with_step_scale(step_scale)).map_err(err)?;
    Ok((PyBytes::new(py, &enc.bytes), enc.estimated_bits))
}

/// Decodes a container, optionally stopping at the LL band of `resolution`.
#[pyfunction]
#[pyo3(signature = (data, weights=None, resolution=None))]
pub fn decode(data: &[u8], weights: Option<&Weights>, resolution: Option<usize>) -> PyResult<Vec<Vec<f32>>> {
    let w = weights.map(|w| &w.inner);
    let g = match resolution {
        Some(d) => decode_resolution(data, d, w),
        None => decode_image_stream(data, w),
    }
    .map_err(err)?;
    Ok(to_rows(&g))
}

/// Largest absolute error of analysis followed by synthesis, without quantization.
#[pyfunction]
#[pyo3(signature = (image, levels, mode="baseline", wavelet="5/3", weights=None))]
pub fn round_trip_error(image: Vec<Vec<f32>>, levels: usize, mode: &str, wavelet: &str, weights: Option<&Weights>) -> PyResult<f64> {
    let x = to_grid(image)?;
    let mode: Mode = parse(mode)?;
    let spec = match weights {
        Some(w) => TransformSpec::for_weights(&w.inner, mode).map_err(err)?,
        None if mode.uses_operators() => return Err(PyValueError::new_err(format!("mode {mode} needs weights"))),
        None => TransformSpec::baseline(parse(wavelet)?),
    };
    let ops = weights.map(|w| &w.inner.ops);
    let p = hybrid_analyze(&x, levels, &spec, ops).map_err(err)?;
    let y = hybrid_synthesize(&p, &spec, ops).map_err(err)?;
    Ok(x.data.iter().zip(&y.data).map(|(a, b)| (*a as f64 - *b as f64).abs()).fold(0.0, f64::max))
}

#[pyfunction]
#[pyo3(signature = (x, y, peak=255.0))]
pub fn psnr(x: Vec<Vec<f32>>, y: Vec<Vec<f32>>, peak: f64) -> PyResult<f64> {
    nlc::eval::psnr(&to_grid(x)?, &to_grid(y)?, peak).map_err(err)
}

#[pyfunction]
pub fn ssim(x: Vec<Vec<f32>>, y: Vec<Vec<f32>>) -> PyResult<f64> {
    nlc::eval::ssim(&to_grid(x)?, &to_grid(y)?).map_err(err)
}

/// Bjøntegaard delta rate in percent between two (rate, quality) curves.
#[pyfunction]
pub fn bd_rate(anchor: Vec<(f64, f64)>, test: Vec<(f64, f64)>) -> PyResult<f64> {
    let a = RdCurve::new("anchor", "quality", anchor).map_err(err)?;
    let t = RdCurve::new("test", "quality", test).map_err(err)?;
    nlc::eval::bd_rate(&a, &t).map_err(err)
}

#[pyfunction]
pub fn read_pgm(path: &str) -> PyResult<Vec<Vec<f32>>> {
    Ok(to_rows(&nlc::image::read_pgm(path).map_err(err)?))
}

#[pyfunction]
pub fn write_pgm(path: &str, image: Vec<Vec<f32>>) -> PyResult<()> {
    nlc::image::write_pgm(path, &to_grid(image)?).map_err(err)
}

/// Oriented-edge test images.
#[pyfunction]
#[pyo3(signature = (count=8, size=64, alpha=0.3, sharpness=2.0, seed=7))]
pub fn synth(count: usize, size: usize, alpha: f64, sharpness: f64, seed: u64) -> PyResult<Vec<Vec<Vec<f32>>>> {
    let cfg = SynthConfig { size, count, alpha, sharpness, seed };
    Ok(oriented_edge_corpus(&cfg).map_err(err)?.iter().map(to_rows).collect())
}

#[pymodule]
fn nlc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Weights>()?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(round_trip_error, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(bd_rate, m)?)?;
    m.add_function(wrap_pyfunction!(read_pgm, m)?)?;
    m.add_function(wrap_pyfunction!(write_pgm, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    Ok(())
}
