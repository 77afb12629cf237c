//! Operator weight container and its `NLW1` file format.
//!
//! Layout (little-endian): magic `NLW1`, version `u16`, metadata length
//! `u16` followed by the metadata block, tensor count `u32`, then per tensor
//! `{name length u16, UTF-8 name, rank u8, dims u32[rank], f32 data}`.
//! Proposal banks are split into one record per proposal index so the
//! record count can be checked against `N`.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::dwt::{Band, Wavelet};
use crate::error::{Error, Result};
use crate::nets::{L2h, L2hVariant, NetConfig, Operators};
use crate::quant::{BandQuant, QuantizerConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NLW1";
pub const VERSION: u16 = 1;

/// Activation layout of the opacity branch: leaky-ReLU stem, ReLU/linear
/// residual blocks, sigmoid head.
pub const ACTIVATION_PATTERN: u8 = 1;

/// Weight of the aliasing term over training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Lambda2Mode {
    Zero,
    One,
    /// Linear decay from 1 to 0 across all epochs.
    Anneal,
}

impl Lambda2Mode {
    pub fn id(self) -> u8 {
        match self {
            Lambda2Mode::Zero => 0,
            Lambda2Mode::One => 1,
            Lambda2Mode::Anneal => 2,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        [Lambda2Mode::Zero, Lambda2Mode::One, Lambda2Mode::Anneal].into_iter().find(|m| m.id() == id)
    }

    pub fn name(self) -> &'static str {
        match self {
            Lambda2Mode::Zero => "zero",
            Lambda2Mode::One => "one",
            Lambda2Mode::Anneal => "anneal",
        }
    }
}

impl std::str::FromStr for Lambda2Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "zero" | "0" => Ok(Lambda2Mode::Zero),
            "one" | "1" => Ok(Lambda2Mode::One),
            "anneal" | "anneal_1_to_0" => Ok(Lambda2Mode::Anneal),
            _ => Err(Error::Parse(format!("unknown lambda2 mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightsMeta {
    pub net: NetConfig,
    pub wavelet: Wavelet,
    pub lambda2: Lambda2Mode,
    pub variant: L2hVariant,
    /// Levels whose LL band is smaller than this in either dimension skip
    /// both operators.
    pub min_extent: usize,
}

impl WeightsMeta {
    pub fn new(wavelet: Wavelet, variant: L2hVariant) -> Self {
        Self {
            net: NetConfig::default(),
            wavelet,
            lambda2: Lambda2Mode::Zero,
            variant,
            min_extent: 8,
        }
    }
}

/// Everything the codec needs besides the bitstream: both operators and
/// the trained per-subband quantizer settings.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorWeights {
    pub meta: WeightsMeta,
    pub ops: Operators<Tensor<f32>>,
    pub quant: QuantizerConfig,
}

impl OperatorWeights {
    /// Fresh weights (proposals zero, so every mode starts out equal to the
    /// plain wavelet transform) with unit-gain quantizers.
    pub fn init(meta: WeightsMeta, quant: QuantizerConfig, seed: u64) -> Self {
        Self {
            ops: Operators::init(&meta.net, meta.variant, seed),
            meta,
            quant,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.ops.parameter_count()
    }

    fn quant_tensors(&self) -> [(&'static str, Tensor<f32>); 3] {
        let l = self.quant.num_levels();
        let pick = |f: fn(&BandQuant) -> f64| {
            let data = self.quant.levels.iter().flat_map(|lv| lv.iter().map(|b| f(b) as f32)).collect();
            Tensor::new(vec![l, 4], data).expect("shape")
        };
        [
            ("quant.delta", pick(|b| b.delta)),
            ("quant.gain_a", pick(|b| b.gain_a)),
            ("quant.gain_s", pick(|b| b.gain_s)),
        ]
    }

    /// Records in file order.
    fn records(&self) -> Vec<(String, Tensor<f32>)> {
        let n = self.meta.net.proposals;
        let mut out = Vec::new();
        for (name, t) in self.ops.named() {
            match name.as_str() {
                "h2l.proposals" => {
                    let per = t.len() / n;
                    let s = &t.shape()[1..];
                    for i in 0..n {
                        let data = t.data()[i * per..(i + 1) * per].to_vec();
                        out.push((format!("h2l.proposal.{i}"), Tensor::new([&[1], s].concat(), data).expect("shape")));
                    }
                }
                "l2h.proposals" => {
                    let per = t.len() / (3 * n);
                    let s = &t.shape()[1..];
                    for i in 0..n {
                        let mut data = Vec::with_capacity(3 * per);
                        for b in 0..3 {
                            let idx = b * n + i;
                            data.extend_from_slice(&t.data()[idx * per..(idx + 1) * per]);
                        }
                        out.push((format!("l2h.proposal.{i}"), Tensor::new([&[3], s].concat(), data).expect("shape")));
                    }
                }
                _ => out.push((name, t.clone())),
            }
        }
        out.extend(self.quant_tensors().map(|(n, t)| (n.to_string(), t)));
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        let meta = encode_meta(&self.meta, self.quant.num_levels());
        b.extend_from_slice(&(meta.len() as u16).to_le_bytes());
        b.extend_from_slice(&meta);
        let records = self.records();
        b.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, t) in &records {
            b.extend_from_slice(&(name.len() as u16).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.push(t.shape().len() as u8);
            for &d in t.shape() {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::BadMagic { expected: "NLW1" });
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let meta_len = r.u16()? as usize;
        let (meta, levels) = decode_meta(r.take(meta_len)?)?;
        let count = r.u32()? as usize;
        let mut records: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::InconsistentMetadata("tensor name is not UTF-8".into()))?;
            let rank = r.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.filter(|&n| n <= bytes.len() / 4).ok_or_else(|| Error::Truncated(format!("tensor {name}")))?;
            let raw = r.take(4 * n)?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("tensor {name}")));
            }
            if records.insert(name.clone(), Tensor::new(dims, data)?).is_some() {
                return Err(Error::InconsistentMetadata(format!("duplicate tensor {name}")));
            }
        }
        if !r.rest().is_empty() {
            return Err(Error::InconsistentMetadata("trailing bytes after the last tensor".into()));
        }
        assemble(meta, levels, records)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// First eight bytes of the SHA-256 of the serialised weights.
    pub fn digest(&self) -> [u8; 8] {
        let h = Sha256::digest(self.to_bytes());
        h[..8].try_into().expect("digest is longer than 8 bytes")
    }
}

fn encode_meta(m: &WeightsMeta, levels: usize) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(&(m.net.proposals as u16).to_le_bytes());
    b.push(m.net.proposal_kernel as u8);
    b.push(m.net.opacity_kernel as u8);
    b.extend_from_slice(&(m.net.opacity_width as u16).to_le_bytes());
    b.push(m.net.res_blocks as u8);
    b.push(ACTIVATION_PATTERN);
    b.push(m.wavelet.id());
    b.push(m.lambda2.id());
    b.push(m.variant.id());
    b.extend_from_slice(&m.net.opacity_input_scale.to_le_bytes());
    b.extend_from_slice(&(m.min_extent as u16).to_le_bytes());
    b.push(levels as u8);
    b
}

fn decode_meta(bytes: &[u8]) -> Result<(WeightsMeta, usize)> {
    let mut r = Reader::new(bytes);
    let bad = |what: &str| Error::InconsistentMetadata(what.to_string());
    let proposals = r.u16()? as usize;
    let proposal_kernel = r.u8()? as usize;
    let opacity_kernel = r.u8()? as usize;
    let opacity_width = r.u16()? as usize;
    let res_blocks = r.u8()? as usize;
    if r.u8()? != ACTIVATION_PATTERN {
        return Err(bad("unknown activation pattern"));
    }
    let wavelet = Wavelet::from_id(r.u8()?).ok_or_else(|| bad("unknown wavelet id"))?;
    let lambda2 = Lambda2Mode::from_id(r.u8()?).ok_or_else(|| bad("unknown lambda2 mode"))?;
    let variant = L2hVariant::from_id(r.u8()?).ok_or_else(|| bad("unknown low-to-high variant"))?;
    let opacity_input_scale = r.f32()?;
    let min_extent = r.u16()? as usize;
    let levels = r.u8()? as usize;
    let net = NetConfig {
        proposals,
        proposal_kernel,
        opacity_kernel,
        opacity_width,
        res_blocks,
        opacity_input_scale,
    };
    net.validate()?;
    Ok((
        WeightsMeta {
            net,
            wavelet,
            lambda2,
            variant,
            min_extent,
        },
        levels,
    ))
}

fn assemble(meta: WeightsMeta, levels: usize, mut records: BTreeMap<String, Tensor<f32>>) -> Result<OperatorWeights> {
    let n = meta.net.proposals;
    let mut take = |name: &str| {
        records
            .remove(name)
            .ok_or_else(|| Error::InconsistentMetadata(format!("missing tensor {name}")))
    };
    let template = Operators::<Tensor<f32>>::init(&meta.net, meta.variant, 0);
    let mut gathered: Vec<Tensor<f32>> = Vec::new();
    for (name, t) in template.named() {
        let got = match name.as_str() {
            "h2l.proposals" | "l2h.proposals" => {
                let stem = if name.starts_with("h2l") { "h2l" } else { "l2h" };
                let parts = (0..n).map(|i| take(&format!("{stem}.proposal.{i}"))).collect::<Result<Vec<_>>>()?;
                stack_proposals(stem, &parts, t.shape(), n)?
            }
            _ => take(&name)?,
        };
        if got.shape() != t.shape() {
            return Err(Error::InconsistentMetadata(format!(
                "{name} has shape {:?}, metadata implies {:?}",
                got.shape(),
                t.shape()
            )));
        }
        gathered.push(got);
    }
    let mut it = gathered.into_iter();
    let ops = template.map(|_, _| it.next().expect("one tensor per parameter"));
    let mut quant = QuantizerConfig::uniform(levels, 1.0);
    for (name, field) in [("quant.delta", 0), ("quant.gain_a", 1), ("quant.gain_s", 2)] {
        let t = take(name)?;
        if t.shape() != [levels, 4] {
            return Err(Error::InconsistentMetadata(format!("{name} must be {levels}x4, got {:?}", t.shape())));
        }
        for d in 0..levels {
            for b in Band::ALL {
                let v = t.data()[d * 4 + b.index()] as f64;
                let q = quant.band_mut(d + 1, b);
                match field {
                    0 => q.delta = v,
                    1 => q.gain_a = v,
                    _ => q.gain_s = v,
                }
            }
        }
    }
    quant.validate().map_err(|e| Error::InconsistentMetadata(e.to_string()))?;
    if let Some(extra) = records.keys().next() {
        return Err(Error::InconsistentMetadata(format!(
            "tensor {extra} is not part of the configured networks"
        )));
    }
    if matches!(ops.l2h, L2h::Linear { .. }) != (meta.variant == L2hVariant::Linear) {
        return Err(Error::InconsistentMetadata("low-to-high variant mismatch".into()));
    }
    Ok(OperatorWeights { meta, ops, quant })
}

fn stack_proposals(stem: &str, parts: &[Tensor<f32>], shape: &[usize], n: usize) -> Result<Tensor<f32>> {
    let per = shape[1..].iter().product::<usize>();
    let groups = if stem == "h2l" { 1 } else { 3 };
    let mut data = vec![0.0f32; n * groups * per];
    for (i, p) in parts.iter().enumerate() {
        if p.len() != groups * per {
            return Err(Error::InconsistentMetadata(format!(
                "{stem}.proposal.{i} has shape {:?}",
                p.shape()
            )));
        }
        for g in 0..groups {
            let dst = (g * n + i) * per;
            data[dst..dst + per].copy_from_slice(&p.data()[g * per..(g + 1) * per]);
        }
    }
    Tensor::new(shape.to_vec(), data)
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "needed {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn rest(&self) -> &'a [u8] {
        &self.buf[self.pos..]
    }
}
