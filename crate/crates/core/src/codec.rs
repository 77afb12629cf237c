//! Quantized pyramids and the `NLC1` image container.
//!
//! Layout (little-endian): magic, version u16, width u32, height u32,
//! levels u8, wavelet u8, mode u8, boundary u8, weights digest `[u8; 8]`,
//! one operator flag byte per level, then one record per subband ordered
//! `LL_D`, then `HL, LH, HH` for levels `D` down to 1. A record holds
//! `Δ f32, G_a f32, G_s f32, q_min i32, q_max i32, counts u32[], length u32`
//! and the range-coded payload. Coarse levels come first, so a file cut
//! after level `d+1` still decodes at resolution `d`.

use rayon::prelude::*;

use crate::coder::{decode_block, encode_block};
use crate::dwt::{band_shape, Band, Grid, Wavelet};
use crate::error::{Error, Result};
use crate::pipeline::{
    hybrid_synthesize, level_extents, Mode, PyramidState, SubbandPyramid, TransformSpec,
};
use crate::quant::{dequantize_subband, quantize_subband, BandQuant, IndexGrid, QuantizerConfig};
use crate::rate::RateTable;
use crate::weights::{OperatorWeights, Reader};

pub const MAGIC: &[u8; 4] = b"NLC1";
pub const VERSION: u16 = 1;
/// Boundary flag value for whole-sample symmetric extension.
pub const BOUNDARY_SYMMETRIC: u8 = 1;

/// Quantizer settings as they survive a trip through the header.
pub fn header_precision(b: &BandQuant) -> BandQuant {
    BandQuant {
        delta: b.delta as f32 as f64,
        xi: b.xi,
        gain_a: b.gain_a as f32 as f64,
        gain_s: b.gain_s as f32 as f64,
    }
}

/// Index grids of every subband together with the quantizers that made them.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedPyramid {
    pub height: usize,
    pub width: usize,
    pub details: Vec<[IndexGrid; 3]>,
    pub ll: IndexGrid,
    pub applied: Vec<bool>,
    /// `[d-1]` holds (LL, HL, LH, HH) of level `d`; LL is only used at `D`.
    pub quant: Vec<[BandQuant; 4]>,
}

impl QuantizedPyramid {
    pub fn levels(&self) -> usize {
        self.details.len()
    }

    /// Subbands in container order with their level and band.
    pub fn blocks(&self) -> Vec<(usize, Band, &IndexGrid)> {
        let d = self.levels();
        let mut out = vec![(d, Band::LL, &self.ll)];
        for level in (1..=d).rev() {
            for (i, b) in Band::DETAIL.into_iter().enumerate() {
                out.push((level, b, &self.details[level - 1][i]));
            }
        }
        out
    }

    pub fn band_quant(&self, level: usize, band: Band) -> &BandQuant {
        &self.quant[level - 1][band.index()]
    }

    pub fn sample_count(&self) -> usize {
        self.height * self.width
    }
}

/// Quantizes every subband. Step sizes and gains are first rounded to the
/// precision stored in the header so decoding reproduces them exactly.
pub fn quantize_pyramid(p: &SubbandPyramid, cfg: &QuantizerConfig) -> Result<QuantizedPyramid> {
    p.check_shapes()?;
    if cfg.num_levels() < p.levels() {
        return Err(Error::InvalidArgument(format!(
            "quantizer covers {} levels, pyramid has {}",
            cfg.num_levels(),
            p.levels()
        )));
    }
    cfg.validate()?;
    let quant: Vec<[BandQuant; 4]> = cfg.levels[..p.levels()].iter().map(|l| l.map(|b| header_precision(&b))).collect();
    let details = p
        .details
        .iter()
        .zip(&quant)
        .map(|(bands, q)| -> Result<[IndexGrid; 3]> {
            Ok([
                quantize_subband(&bands[0], &q[1])?,
                quantize_subband(&bands[1], &q[2])?,
                quantize_subband(&bands[2], &q[3])?,
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    let ll = quantize_subband(&p.ll, &quant[p.levels() - 1][0])?;
    Ok(QuantizedPyramid {
        height: p.height,
        width: p.width,
        details,
        ll,
        applied: p.applied.clone(),
        quant,
    })
}

pub fn dequantize_pyramid(q: &QuantizedPyramid) -> SubbandPyramid {
    let d = q.levels();
    SubbandPyramid {
        height: q.height,
        width: q.width,
        details: q
            .details
            .iter()
            .zip(&q.quant)
            .map(|(bands, bq)| [0, 1, 2].map(|i| dequantize_subband(&bands[i], &bq[i + 1])))
            .collect(),
        ll: dequantize_subband(&q.ll, &q.quant[d - 1][0]),
        applied: q.applied.clone(),
        state: PyramidState::Dequantized,
    }
}

/// Tables fitted to each subband's own indices, in container order.
pub fn fit_tables(q: &QuantizedPyramid) -> Vec<RateTable> {
    q.blocks().into_iter().map(|(_, _, g)| RateTable::build(g.data.iter().copied())).collect()
}

/// Modelled code length of the whole pyramid in bits.
pub fn estimated_bits(q: &QuantizedPyramid, tables: &[RateTable]) -> f64 {
    q.blocks()
        .iter()
        .zip(tables)
        .map(|((_, _, g), t)| t.total_length(g.data.iter().copied()))
        .sum()
}

/// Fixed part of the header.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamHeader {
    pub width: usize,
    pub height: usize,
    pub levels: usize,
    pub wavelet: Wavelet,
    pub mode: Mode,
    pub boundary: u8,
    /// Digest of the operator weights; zero for baseline streams.
    pub weights_digest: [u8; 8],
    pub applied: Vec<bool>,
}

impl StreamHeader {
    pub fn byte_len(&self) -> usize {
        4 + 2 + 8 + 4 + 8 + self.levels
    }
}

/// Serialises a quantized pyramid. `tables` are in [`QuantizedPyramid::blocks`] order.
pub fn encode_image_stream(
    q: &QuantizedPyramid,
    wavelet: Wavelet,
    mode: Mode,
    weights: Option<&OperatorWeights>,
    tables: &[RateTable],
) -> Result<Vec<u8>> {
    let blocks = q.blocks();
    if tables.len() != blocks.len() {
        return Err(Error::InvalidArgument(format!("{} tables for {} subbands", tables.len(), blocks.len())));
    }
    let digest = match (mode.uses_operators(), weights) {
        (false, _) => [0; 8],
        (true, Some(w)) => {
            TransformSpec::for_weights(w, mode)?;
            if w.meta.wavelet != wavelet {
                return Err(Error::WeightsMismatch(format!(
                    "weights trained for {}, stream uses {}",
                    w.meta.wavelet.name(),
                    wavelet.name()
                )));
            }
            w.digest()
        }
        (true, None) => return Err(Error::WeightsMismatch(format!("mode {mode} needs operator weights"))),
    };
    let header = StreamHeader {
        width: q.width,
        height: q.height,
        levels: q.levels(),
        wavelet,
        mode,
        boundary: BOUNDARY_SYMMETRIC,
        weights_digest: digest,
        applied: q.applied.clone(),
    };
    let payloads: Vec<Vec<u8>> = blocks
        .par_iter()
        .zip(tables.par_iter())
        .map(|((_, _, g), t)| encode_block(&g.data, t))
        .collect();

    let mut out = Vec::new();
    write_header(&mut out, &header);
    for (((level, band, _), t), payload) in blocks.iter().zip(tables).zip(&payloads) {
        let b = q.band_quant(*level, *band);
        for v in [b.delta, b.gain_a, b.gain_s] {
            out.extend((v as f32).to_le_bytes());
        }
        out.extend(t.q_min().to_le_bytes());
        out.extend(t.q_max().to_le_bytes());
        for c in t.counts() {
            out.extend(c.to_le_bytes());
        }
        out.extend((payload.len() as u32).to_le_bytes());
        out.extend(payload);
    }
    Ok(out)
}

fn write_header(out: &mut Vec<u8>, h: &StreamHeader) {
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((h.width as u32).to_le_bytes());
    out.extend((h.height as u32).to_le_bytes());
    out.extend([h.levels as u8, h.wavelet.id(), h.mode.id(), h.boundary]);
    out.extend(h.weights_digest);
    out.extend(h.applied.iter().map(|&a| a as u8));
}

fn read_header(r: &mut Reader) -> Result<StreamHeader> {
    if r.take(4).map_err(|_| Error::BadMagic { expected: "NLC1" })? != MAGIC {
        return Err(Error::BadMagic { expected: "NLC1" });
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let width = r.u32()? as usize;
    let height = r.u32()? as usize;
    let levels = r.u8()? as usize;
    let wavelet = Wavelet::from_id(r.u8()?).ok_or_else(|| Error::InconsistentMetadata("unknown wavelet id".into()))?;
    let mode = Mode::from_id(r.u8()?).ok_or_else(|| Error::InconsistentMetadata("unknown mode id".into()))?;
    let boundary = r.u8()?;
    if boundary != BOUNDARY_SYMMETRIC {
        return Err(Error::InconsistentMetadata(format!("unsupported boundary extension {boundary}")));
    }
    let weights_digest: [u8; 8] = r.take(8)?.try_into().expect("eight bytes");
    let applied = r
        .take(levels)?
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(Error::InconsistentMetadata(format!("bad operator flag {b}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    level_extents(height, width, levels).map_err(|e| Error::InconsistentMetadata(e.to_string()))?;
    if !mode.uses_operators() && applied.iter().any(|&a| a) {
        return Err(Error::InconsistentMetadata("baseline stream flags operator levels".into()));
    }
    Ok(StreamHeader {
        width,
        height,
        levels,
        wavelet,
        mode,
        boundary,
        weights_digest,
        applied,
    })
}

/// Reads only the header.
pub fn read_stream_header(bytes: &[u8]) -> Result<StreamHeader> {
    read_header(&mut Reader::new(bytes))
}

/// Header plus decoded index grids of levels `D..=stop+1` (and `LL_D`).
/// Payloads of finer levels are never read and may be missing.
#[derive(Clone, Debug)]
pub struct DecodedStream {
    pub header: StreamHeader,
    pub pyramid: QuantizedPyramid,
    /// Tables in container order for the decoded blocks.
    pub tables: Vec<RateTable>,
    /// Finest level whose subbands were decoded (`stop + 1`, or `D + 1`
    /// when only `LL_D` was read).
    pub finest_level: usize,
}

struct RawRecord<'a> {
    level: usize,
    band: Band,
    quant: BandQuant,
    table: RateTable,
    payload: &'a [u8],
    shape: (usize, usize),
}

/// Parses the container, decoding subbands of levels `> stop`.
pub fn decode_indices(bytes: &[u8], stop: usize) -> Result<DecodedStream> {
    let mut r = Reader::new(bytes);
    let header = read_header(&mut r)?;
    let d = header.levels;
    if stop > d {
        return Err(Error::InvalidArgument(format!("resolution {stop} needs at least {stop} levels, stream has {d}")));
    }
    let ext = level_extents(header.height, header.width, d)?;
    let mut order = vec![(d, Band::LL)];
    for level in (stop + 1..=d).rev() {
        order.extend(Band::DETAIL.map(|b| (level, b)));
    }
    let mut records = Vec::with_capacity(order.len());
    for (level, band) in order {
        let (h, w) = ext[level - 1];
        let shape = band_shape(band, h, w);
        let quant = BandQuant {
            delta: r.f32()? as f64,
            xi: 0.0,
            gain_a: r.f32()? as f64,
            gain_s: r.f32()? as f64,
        };
        quant
            .validate()
            .map_err(|e| Error::InconsistentMetadata(format!("level {level} {}: {e}", band.name())))?;
        let q_min = r.i32()?;
        let q_max = r.i32()?;
        let bins = q_max as i64 - q_min as i64 + 3;
        if !(3..=crate::rate::MAX_BINS as i64).contains(&bins) {
            return Err(Error::InconsistentMetadata(format!("index range {q_min}..={q_max} out of bounds")));
        }
        let counts = (0..bins).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let table = RateTable::from_counts(q_min, q_max, counts).map_err(|e| Error::InconsistentMetadata(e.to_string()))?;
        let len = r.u32()? as usize;
        let payload = r.take(len)?;
        records.push(RawRecord {
            level,
            band,
            quant,
            table,
            payload,
            shape,
        });
    }
    let grids = records
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let data = decode_block(rec.payload, rec.shape.0 * rec.shape.1, &rec.table, i)?;
            Ok(IndexGrid {
                height: rec.shape.0,
                width: rec.shape.1,
                data,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    // levels at or below `stop` stay zero with unit quantizers
    let mut quant = vec![[BandQuant::new(1.0); 4]; d];
    let mut details: Vec<[IndexGrid; 3]> = ext
        .iter()
        .map(|&(h, w)| {
            Band::DETAIL.map(|b| {
                let (bh, bw) = band_shape(b, h, w);
                IndexGrid {
                    height: bh,
                    width: bw,
                    data: vec![0; bh * bw],
                }
            })
        })
        .collect();
    let mut ll = None;
    for (rec, grid) in records.iter().zip(grids) {
        quant[rec.level - 1][rec.band.index()] = rec.quant;
        match rec.band {
            Band::LL => ll = Some(grid),
            b => details[rec.level - 1][b.index() - 1] = grid,
        }
    }
    Ok(DecodedStream {
        pyramid: QuantizedPyramid {
            height: header.height,
            width: header.width,
            details,
            ll: ll.expect("LL record is always read"),
            applied: header.applied.clone(),
            quant,
        },
        tables: records.into_iter().map(|r| r.table).collect(),
        finest_level: stop + 1,
        header,
    })
}

/// Transform settings for decoding a stream, checking the weights.
pub fn stream_spec(header: &StreamHeader, weights: Option<&OperatorWeights>) -> Result<TransformSpec> {
    if !header.mode.uses_operators() {
        return Ok(TransformSpec::baseline(header.wavelet));
    }
    let w = weights.ok_or_else(|| Error::WeightsMismatch(format!("{} stream needs operator weights", header.mode)))?;
    if w.meta.wavelet != header.wavelet {
        return Err(Error::WeightsMismatch(format!(
            "stream uses {}, weights are for {}",
            header.wavelet.name(),
            w.meta.wavelet.name()
        )));
    }
    if w.digest() != header.weights_digest {
        return Err(Error::WeightsMismatch("weights digest differs from the stream".into()));
    }
    TransformSpec::for_weights(w, header.mode)
}

/// Full-resolution reconstruction.
pub fn decode_image_stream(bytes: &[u8], weights: Option<&OperatorWeights>) -> Result<Grid<f32>> {
    let s = decode_indices(bytes, 0)?;
    let spec = stream_spec(&s.header, weights)?;
    hybrid_synthesize(&dequantize_pyramid(&s.pyramid), &spec, weights.map(|w| &w.ops))
}

/// Cleaned LL band of level `d` (`d = 0` is the full image). Reads only the
/// header and the records of levels `D..=d+1`.
pub fn decode_resolution(bytes: &[u8], d: usize, weights: Option<&OperatorWeights>) -> Result<Grid<f32>> {
    let s = decode_indices(bytes, d)?;
    let spec = stream_spec(&s.header, weights)?;
    let p = dequantize_pyramid(&s.pyramid);
    if d == p.levels() {
        return Ok(p.ll.cast());
    }
    crate::pipeline::synthesize_to(&p, d, &spec, weights.map(|w| &w.ops))
}

/// Result of encoding one image.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub bytes: Vec<u8>,
    pub estimated_bits: f64,
    pub pyramid: QuantizedPyramid,
    /// What the decoder will reconstruct, before 8-bit rounding.
    pub reconstruction: Grid<f32>,
}

/// Transform settings for encoding with `mode`.
pub fn encode_spec(wavelet: Wavelet, mode: Mode, weights: Option<&OperatorWeights>) -> Result<TransformSpec> {
    if !mode.uses_operators() {
        return Ok(TransformSpec::baseline(wavelet));
    }
    let w = weights.ok_or_else(|| Error::WeightsMismatch(format!("mode {mode} needs operator weights")))?;
    if w.meta.wavelet != wavelet {
        return Err(Error::WeightsMismatch(format!(
            "weights trained for {}, requested {}",
            w.meta.wavelet.name(),
            wavelet.name()
        )));
    }
    TransformSpec::for_weights(w, mode)
}

/// Analysis, quantization, table fitting and container assembly.
pub fn encode_image(
    x: &Grid<f32>,
    levels: usize,
    wavelet: Wavelet,
    mode: Mode,
    weights: Option<&OperatorWeights>,
    quant: &QuantizerConfig,
) -> Result<Encoded> {
    let spec = encode_spec(wavelet, mode, weights)?;
    let ops = weights.map(|w| &w.ops);
    let p = crate::pipeline::hybrid_analyze(x, levels, &spec, ops)?;
    let q = quantize_pyramid(&p, quant)?;
    let tables = fit_tables(&q);
    let bytes = encode_image_stream(&q, wavelet, mode, weights, &tables)?;
    let reconstruction = hybrid_synthesize(&dequantize_pyramid(&q), &spec, ops)?;
    Ok(Encoded {
        bytes,
        estimated_bits: estimated_bits(&q, &tables),
        pyramid: q,
        reconstruction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{L2hVariant, Operators};
    use crate::pipeline::{extract_resolution, hybrid_analyze};
    use crate::weights::WeightsMeta;
    use rand::{Rng, SeedableRng};

    fn image(h: usize, w: usize, seed: u64) -> Grid<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Grid::from_fn(h, w, |y, x| {
            let v = 128.0 + 60.0 * ((x as f32 * 0.3 + y as f32 * 0.1).sin()) + rng.gen_range(-20.0..20.0);
            v.round().clamp(0.0, 255.0)
        })
    }

    fn weights(seed: u64) -> OperatorWeights {
        let meta = WeightsMeta::new(Wavelet::Cdf97, L2hVariant::Adaptive);
        OperatorWeights {
            ops: Operators::random(&meta.net, L2hVariant::Adaptive, seed, 0.02),
            quant: QuantizerConfig::uniform(3, 4.0),
            meta,
        }
    }

    fn encode(x: &Grid<f32>, w: &OperatorWeights, mode: Mode, delta: f64) -> (Vec<u8>, QuantizedPyramid, Vec<RateTable>) {
        let spec = TransformSpec::for_weights(w, mode).unwrap();
        let p = hybrid_analyze(x, 3, &spec, Some(&w.ops)).unwrap();
        let q = quantize_pyramid(&p, &QuantizerConfig::uniform(3, delta)).unwrap();
        let t = fit_tables(&q);
        let bytes = encode_image_stream(&q, Wavelet::Cdf97, mode, Some(w), &t).unwrap();
        (bytes, q, t)
    }

    #[test]
    fn indices_round_trip() {
        let w = weights(1);
        let x = image(45, 61, 2);
        for mode in [Mode::Baseline, Mode::Hybrid, Mode::H2lOnly] {
            let (bytes, q, t) = encode(&x, &w, mode, 3.0);
            let s = decode_indices(&bytes, 0).unwrap();
            assert_eq!(s.pyramid.applied, q.applied);
            for ((l, b, g), (l2, b2, g2)) in s.pyramid.blocks().into_iter().zip(q.blocks()) {
                assert_eq!((l, b, g), (l2, b2, g2));
                let (x, y) = (s.pyramid.band_quant(l, b), q.band_quant(l, b));
                assert_eq!((x.delta, x.gain_a, x.gain_s), (y.delta, y.gain_a, y.gain_s));
            }
            assert_eq!(s.tables, t);
            assert_eq!(s.header.mode, mode);
        }
    }

    #[test]
    fn decode_matches_dequantized_synthesis() {
        let w = weights(3);
        let x = image(40, 40, 4);
        let (bytes, q, _) = encode(&x, &w, Mode::Hybrid, 5.0);
        let spec = TransformSpec::for_weights(&w, Mode::Hybrid).unwrap();
        let expect = hybrid_synthesize(&dequantize_pyramid(&q), &spec, Some(&w.ops)).unwrap();
        assert_eq!(decode_image_stream(&bytes, Some(&w)).unwrap(), expect);
    }

    #[test]
    fn fine_steps_are_near_lossless() {
        let w = weights(5);
        let x = image(32, 48, 6);
        let (bytes, _, _) = encode(&x, &w, Mode::Hybrid, 1e-3);
        let y = decode_image_stream(&bytes, Some(&w)).unwrap();
        let mse = x.data.iter().zip(&y.data).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / x.data.len() as f64;
        let psnr = 10.0 * (255.0f64 * 255.0 / mse.max(1e-20)).log10();
        assert!(psnr > 60.0, "{psnr}");
    }

    #[test]
    fn truncated_stream_decodes_coarse_resolution() {
        let w = weights(7);
        let x = image(64, 64, 8);
        let (bytes, q, _) = encode(&x, &w, Mode::Hybrid, 2.0);
        // drop the level-1 records entirely
        let level1: usize = q.details[0]
            .iter()
            .map(|g| {
                let t = RateTable::build(g.data.iter().copied());
                20 + 4 * t.counts().len() + 4 + encode_block(&g.data, &t).len()
            })
            .sum();
        let cut = &bytes[..bytes.len() - level1];
        assert!(decode_image_stream(cut, Some(&w)).is_err());
        let spec = TransformSpec::for_weights(&w, Mode::Hybrid).unwrap();
        let dq = dequantize_pyramid(&q);
        let r = decode_resolution(cut, 1, Some(&w)).unwrap();
        assert_eq!(r, extract_resolution(&dq, 1, &spec, Some(&w.ops)).unwrap());
        let s = decode_indices(cut, 1).unwrap();
        assert_eq!(s.pyramid.ll, q.ll);
        assert_eq!(s.pyramid.details[1], q.details[1]);
    }

    #[test]
    fn size_bound_holds() {
        let w = weights(9);
        let x = image(64, 64, 10);
        let (bytes, q, t) = encode(&x, &w, Mode::Hybrid, 1.5);
        let header: usize = 4 + 2 + 8 + 4 + 8 + 3
            + t.iter().map(|t| 24 + 4 * t.counts().len()).sum::<usize>();
        let bound = estimated_bits(&q, &t) / 8.0 + header as f64 + 16.0 * t.len() as f64;
        assert!((bytes.len() as f64) <= bound, "{} > {bound}", bytes.len());
    }

    #[test]
    fn weight_mismatch_is_refused() {
        let w = weights(11);
        let x = image(32, 32, 12);
        let (bytes, _, _) = encode(&x, &w, Mode::Hybrid, 2.0);
        assert!(matches!(decode_image_stream(&bytes, None), Err(Error::WeightsMismatch(_))));
        assert!(matches!(decode_image_stream(&bytes, Some(&weights(12))), Err(Error::WeightsMismatch(_))));
        let mut other = w.clone();
        other.meta.wavelet = Wavelet::LeGall53;
        assert!(matches!(decode_image_stream(&bytes, Some(&other)), Err(Error::WeightsMismatch(_))));
    }

    #[test]
    fn header_errors() {
        let w = weights(13);
        let (bytes, _, _) = encode(&image(16, 16, 14), &w, Mode::Baseline, 2.0);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_image_stream(&bad, None), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_image_stream(&bad, None), Err(Error::UnsupportedVersion(9))));
        assert!(matches!(decode_image_stream(&bytes[..20], None), Err(Error::Truncated(_))));
        // baseline streams decode without weights
        assert!(decode_image_stream(&bytes, None).is_ok());
    }

    #[test]
    fn corrupt_payload_names_the_block() {
        let w = weights(15);
        let (mut bytes, q, _) = encode(&image(32, 32, 16), &w, Mode::Baseline, 1.0);
        let last = &q.details[0][2];
        let len = encode_block(&last.data, &RateTable::build(last.data.iter().copied())).len();
        let n = bytes.len();
        bytes[n - len] = 1;
        assert!(matches!(decode_image_stream(&bytes, None), Err(Error::CorruptPayload { block: 9, .. })));
    }
}
