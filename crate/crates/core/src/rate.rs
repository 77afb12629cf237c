//! Histogram code-length tables.
//!
//! A table covers the index range `[q_min − 1, q_max + 1]`. The two end bins
//! double as escape symbols: any index at or beyond them is coded as the end
//! bin followed by a raw 32-bit literal, and its modelled length includes
//! those extra bits.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::autograd::relax::{check_sigma, smoothed_deadzone};
use crate::autograd::IndexLut;
use crate::error::{Error, Result};
use crate::quant::BandQuant;

/// Clamp on `−log₂ p`.
pub const MAX_CODE_LENGTH: f64 = 32.0;
/// Raw literal that follows an escape symbol.
pub const ESCAPE_BITS: f64 = 32.0;
/// Upper bound on the number of bins, end bins included.
pub const MAX_BINS: usize = 4096;
/// Frequency total handed to the range coder.
pub const CODER_TOTAL: u32 = 1 << 16;

#[derive(Clone, Debug, PartialEq)]
pub struct RateTable {
    q_min: i32,
    q_max: i32,
    /// Smoothed counts for `q_min − 1 ..= q_max + 1`.
    counts: Vec<u32>,
    lengths: Vec<f64>,
}

impl RateTable {
    /// Builds a table from explicit smoothed counts (as stored in a
    /// bitstream header).
    pub fn from_counts(q_min: i32, q_max: i32, counts: Vec<u32>) -> Result<Self> {
        if q_max < q_min {
            return Err(Error::InvalidArgument(format!("empty index range {q_min}..={q_max}")));
        }
        let bins = (q_max as i64 - q_min as i64 + 3) as usize;
        if bins > MAX_BINS || counts.len() != bins {
            return Err(Error::InvalidArgument(format!(
                "range {q_min}..={q_max} needs {bins} counts (max {MAX_BINS}), got {}",
                counts.len()
            )));
        }
        if counts.contains(&0) {
            return Err(Error::InvalidArgument("counts must be positive".into()));
        }
        let total: f64 = counts.iter().map(|&c| c as f64).sum();
        let last = counts.len() - 1;
        let lengths = counts
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let l = (-(c as f64 / total).log2()).min(MAX_CODE_LENGTH);
                if i == 0 || i == last {
                    l + ESCAPE_BITS
                } else {
                    l
                }
            })
            .collect();
        Ok(Self { q_min, q_max, counts, lengths })
    }

    /// Add-one smoothed histogram of `indices`. An empty input yields the
    /// table of the single symbol 0.
    pub fn build<I: IntoIterator<Item = i32>>(indices: I) -> Self {
        let mut hist: BTreeMap<i32, u64> = BTreeMap::new();
        for q in indices {
            *hist.entry(q).or_default() += 1;
        }
        Self::from_histogram(&hist)
    }

    pub fn from_histogram(hist: &BTreeMap<i32, u64>) -> Self {
        if hist.is_empty() {
            return Self::from_counts(0, 0, vec![1, 1, 1]).expect("valid");
        }
        let (q_min, q_max) = window(hist, MAX_BINS - 2);
        let mut counts = vec![1u64; (q_max - q_min + 3) as usize];
        for (&q, &c) in hist.range(q_min..=q_max) {
            counts[(q - q_min + 1) as usize] += c;
        }
        // keep the header representable in u32
        let peak = *counts.iter().max().expect("non-empty");
        let counts = if peak > u32::MAX as u64 {
            let s = peak.div_ceil(u32::MAX as u64);
            counts.iter().map(|&c| (c / s).max(1) as u32).collect()
        } else {
            counts.iter().map(|&c| c as u32).collect()
        };
        Self::from_counts(q_min, q_max, counts).expect("consistent counts")
    }

    pub fn q_min(&self) -> i32 {
        self.q_min
    }

    pub fn q_max(&self) -> i32 {
        self.q_max
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    /// Bin of an index: `0` and `len − 1` are the escape bins.
    #[inline]
    pub fn bin(&self, q: i32) -> usize {
        if q < self.q_min {
            0
        } else if q > self.q_max {
            self.counts.len() - 1
        } else {
            (q - self.q_min + 1) as usize
        }
    }

    #[inline]
    pub fn is_escape(&self, q: i32) -> bool {
        q < self.q_min || q > self.q_max
    }

    /// Modelled code length of `q` in bits, escape literal included.
    #[inline]
    pub fn length(&self, q: i32) -> f64 {
        self.lengths[self.bin(q)]
    }

    pub fn total_length<I: IntoIterator<Item = i32>>(&self, indices: I) -> f64 {
        indices.into_iter().map(|q| self.length(q)).sum()
    }

    /// Length table in the form consumed by the differentiation tape.
    pub fn lut(&self) -> Arc<IndexLut> {
        Arc::new(IndexLut {
            first: self.q_min - 1,
            values: self.lengths.clone(),
        })
    }

    /// Frequencies scaled to a total of at most [`CODER_TOTAL`], each ≥ 1.
    /// Deterministic, so encoder and decoder derive the same model from the
    /// header counts.
    pub fn coder_freqs(&self) -> Vec<u32> {
        let total: u64 = self.counts.iter().map(|&c| c as u64).sum();
        let n = self.counts.len() as u64;
        if total <= CODER_TOTAL as u64 {
            return self.counts.clone();
        }
        let budget = CODER_TOTAL as u64 - n;
        self.counts
            .iter()
            .map(|&c| (1 + c as u64 * budget / total) as u32)
            .collect()
    }
}

/// Index window of at most `width` values that holds the most samples.
fn window(hist: &BTreeMap<i32, u64>, width: usize) -> (i32, i32) {
    let lo = *hist.keys().next().expect("non-empty");
    let hi = *hist.keys().next_back().expect("non-empty");
    if (hi as i64 - lo as i64) < width as i64 {
        return (lo, hi);
    }
    let keys: Vec<(i32, u64)> = hist.iter().map(|(&k, &v)| (k, v)).collect();
    let (mut best, mut best_start, mut acc, mut j) = (0u64, lo, 0u64, 0usize);
    for i in 0..keys.len() {
        while j < keys.len() && (keys[j].0 as i64 - keys[i].0 as i64) < width as i64 {
            acc += keys[j].1;
            j += 1;
        }
        if acc > best {
            best = acc;
            best_start = keys[i].0;
        }
        acc -= keys[i].1;
    }
    let end = (best_start as i64 + width as i64 - 1).min(i32::MAX as i64) as i32;
    let end = hist.range(best_start..=end).next_back().map(|(&k, _)| k).unwrap_or(best_start);
    (best_start, end)
}

/// Forward code length of the index `q`.
pub fn code_length_lookup(q: i32, table: &RateTable) -> f64 {
    table.length(q)
}

/// Annealed derivative of `y ↦ l̂(Q(G_a·y))`.
pub fn code_length_backward(y: f64, band: &BandQuant, table: &RateTable, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    Ok(smoothed_deadzone(y, band.gain_a, band.delta, sigma, |q| table.length(q)).slope)
}

/// Empirical entropy in bits per sample of an index stream.
pub fn empirical_entropy<I: IntoIterator<Item = i32>>(indices: I) -> f64 {
    let mut hist: BTreeMap<i32, u64> = BTreeMap::new();
    let mut n = 0u64;
    for q in indices {
        *hist.entry(q).or_default() += 1;
        n += 1;
    }
    if n == 0 {
        return 0.0;
    }
    hist.values()
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.log2()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn uniform_four_symbols() {
        let t = RateTable::build([0, 1, 2, 3]);
        // 2 + 4·1 smoothing over six bins: each seen symbol has p = 2/10
        for q in 0..4 {
            assert!((t.length(q) - (5.0f64).log2()).abs() < 1e-12);
        }
    }

    #[test]
    fn all_zero_indices() {
        let t = RateTable::build(std::iter::repeat_n(0, 10_000));
        assert!(t.length(0) < 0.001);
        assert!(t.length(1) > 10.0 && t.length(1) <= MAX_CODE_LENGTH + ESCAPE_BITS);
        assert_eq!(t.length(5), t.length(1));
    }

    #[test]
    fn empty_input_gives_zero_symbol_table() {
        let t = RateTable::build(std::iter::empty());
        assert_eq!((t.q_min(), t.q_max()), (0, 0));
    }

    #[test]
    fn lookup_clamps_out_of_range() {
        let t = RateTable::build([-2, 0, 0, 1, 3]);
        assert_eq!(code_length_lookup(0, &t), t.length(0));
        assert_eq!(code_length_lookup(100, &t), t.length(4));
        assert_eq!(code_length_lookup(-100, &t), t.length(-3));
        let lut = t.lut();
        for q in -10..10 {
            assert_eq!(lut.get(q), t.length(q));
        }
    }

    #[test]
    fn geometric_source_matches_entropy() {
        // two-sided geometric: |q| ~ Geom(p), random sign for q ≠ 0
        let p: f64 = 0.35;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<i32> = (0..100_000)
            .map(|_| {
                let u: f64 = rng.gen();
                let m = ((1.0 - u).ln() / (1.0 - p).ln()).floor() as i32;
                if m != 0 && rng.gen::<bool>() {
                    -m
                } else {
                    m
                }
            })
            .collect();
        // analytic entropy of the generator
        let q = 1.0 - p;
        let h_geom = (-p * p.log2() - q * q.log2()) / p;
        let h = h_geom + (1.0 - p); // one sign bit whenever m ≠ 0
        let t = RateTable::build(samples.iter().copied());
        let per = t.total_length(samples.iter().copied()) / samples.len() as f64;
        assert!((per - h).abs() / h < 0.01, "{per} vs {h}");
        let emp = empirical_entropy(samples.iter().copied());
        assert!(per >= emp - 1e-12 && per <= emp * 1.01);
    }

    #[test]
    fn wide_ranges_are_windowed() {
        let mut idx: Vec<i32> = (0..10_000).map(|i| i % 50).collect();
        idx.extend([-1_000_000, 2_000_000]);
        let t = RateTable::build(idx.iter().copied());
        assert!(t.counts().len() <= MAX_BINS);
        assert!(t.is_escape(-1_000_000) && t.is_escape(2_000_000) && !t.is_escape(25));
    }

    #[test]
    fn coder_freqs_fit_budget() {
        let t = RateTable::build((0..200_000).map(|i| (i % 7) - 3));
        let f = t.coder_freqs();
        assert!(f.iter().all(|&v| v >= 1));
        assert!(f.iter().map(|&v| v as u64).sum::<u64>() <= CODER_TOTAL as u64);
    }

    #[test]
    fn from_counts_validates() {
        assert!(RateTable::from_counts(0, 1, vec![1, 1, 1]).is_err());
        assert!(RateTable::from_counts(0, 0, vec![1, 0, 1]).is_err());
        assert!(RateTable::from_counts(2, 1, vec![]).is_err());
    }
}
