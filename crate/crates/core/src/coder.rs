//! Static-model range coder (32-bit range, byte-wise renormalisation, carry
//! propagation through a pending-byte cache).

use crate::error::{Error, Result};
use crate::rate::RateTable;

const TOP: u32 = 1 << 24;

pub struct Encoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    out: Vec<u8>,
}

impl Default for Encoder {
    fn default() -> Self {
        Self::new()
    }
}

impl Encoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            pending: 1,
            out: Vec::new(),
        }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low > 0xFFFF_FFFF {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.pending -= 1;
                if self.pending == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    /// Codes the interval `[cum, cum + freq)` out of `total ≤ 2^16`.
    pub fn encode(&mut self, cum: u32, freq: u32, total: u32) {
        debug_assert!(freq > 0 && cum + freq <= total && total <= 1 << 16);
        let r = self.range / total;
        self.low += r as u64 * cum as u64;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    /// Codes `bits ≤ 16` raw bits.
    pub fn encode_bits(&mut self, value: u32, bits: u32) {
        self.encode(value, 1, 1 << bits);
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct Decoder<'a> {
    code: u32,
    range: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(input: &'a [u8]) -> std::result::Result<Self, String> {
        if input.len() < 5 {
            return Err("payload shorter than the coder preamble".into());
        }
        if input[0] != 0 {
            return Err("bad coder preamble".into());
        }
        let mut d = Self {
            code: 0,
            range: u32::MAX,
            input,
            pos: 0,
        };
        for _ in 0..5 {
            d.code = (d.code << 8) | d.next()? as u32;
        }
        Ok(d)
    }

    fn next(&mut self) -> std::result::Result<u8, String> {
        let b = *self.input.get(self.pos).ok_or("payload ended early")?;
        self.pos += 1;
        Ok(b)
    }

    /// Target value in `[0, total)`; follow with [`Decoder::consume`].
    pub fn peek(&mut self, total: u32) -> std::result::Result<u32, String> {
        self.range /= total;
        let v = self.code / self.range;
        if v >= total {
            return Err("code value outside the model".into());
        }
        Ok(v)
    }

    pub fn consume(&mut self, cum: u32, freq: u32) -> std::result::Result<(), String> {
        self.code -= cum * self.range;
        self.range *= freq;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next()? as u32;
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn decode_bits(&mut self, bits: u32) -> std::result::Result<u32, String> {
        let v = self.peek(1 << bits)?;
        self.consume(v, 1)?;
        Ok(v)
    }

    /// All input consumed (the encoder's flush is read exactly).
    pub fn at_end(&self) -> bool {
        self.pos == self.input.len()
    }
}

/// Cumulative frequency model derived from a rate table.
struct Model {
    freqs: Vec<u32>,
    cum: Vec<u32>,
    total: u32,
}

impl Model {
    fn new(table: &RateTable) -> Self {
        let freqs = table.coder_freqs();
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0;
        cum.push(0);
        for &f in &freqs {
            acc += f;
            cum.push(acc);
        }
        Self { freqs, cum, total: acc }
    }

    fn symbol_for(&self, v: u32) -> usize {
        self.cum.partition_point(|&c| c <= v) - 1
    }
}

/// Range-codes an index block. Indices outside the table's direct range are
/// sent as the escape bin followed by a 32-bit literal.
pub fn encode_block(indices: &[i32], table: &RateTable) -> Vec<u8> {
    let model = Model::new(table);
    let mut enc = Encoder::new();
    for &q in indices {
        let b = table.bin(q);
        enc.encode(model.cum[b], model.freqs[b], model.total);
        if table.is_escape(q) {
            let raw = q as u32;
            enc.encode_bits(raw >> 16, 16);
            enc.encode_bits(raw & 0xFFFF, 16);
        }
    }
    enc.finish()
}

pub fn decode_block(payload: &[u8], count: usize, table: &RateTable, block: usize) -> Result<Vec<i32>> {
    let corrupt = |reason: String| Error::CorruptPayload { block, reason };
    let model = Model::new(table);
    let mut dec = Decoder::new(payload).map_err(corrupt)?;
    let last = model.freqs.len() - 1;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let v = dec.peek(model.total).map_err(corrupt)?;
        let b = model.symbol_for(v);
        dec.consume(model.cum[b], model.freqs[b]).map_err(corrupt)?;
        let q = if b == 0 || b == last {
            let hi = dec.decode_bits(16).map_err(corrupt)?;
            let lo = dec.decode_bits(16).map_err(corrupt)?;
            let q = ((hi << 16) | lo) as i32;
            if !table.is_escape(q) || (b == 0) != (q < table.q_min()) {
                return Err(corrupt(format!("escape literal {q} lies inside the table range")));
            }
            q
        } else {
            table.q_min() + b as i32 - 1
        };
        out.push(q);
    }
    if !dec.at_end() {
        return Err(corrupt("trailing bytes after the last symbol".into()));
    }
    Ok(out)
}
