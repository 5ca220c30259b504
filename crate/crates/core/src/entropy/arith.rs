//! Binary-output arithmetic coder with 46-bit registers and deferred
//! (straddle) bit handling. Termination costs two bits, so a coded segment is
//! at most two bits longer than the model's ideal code length.

use super::bitio::{BitReader, BitWriter};
use super::models::AdaptiveModel;
use crate::error::{Error, Result};

const CODE_BITS: u32 = 46;
const TOP: u64 = (1 << CODE_BITS) - 1;
const HALF: u64 = 1 << (CODE_BITS - 1);
const QUARTER: u64 = 1 << (CODE_BITS - 2);
const THREE_QUARTERS: u64 = HALF + QUARTER;

pub struct ArithEncoder {
    low: u64,
    high: u64,
    pending: u64,
    out: BitWriter,
}

impl Default for ArithEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl ArithEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            high: TOP,
            pending: 0,
            out: BitWriter::new(),
        }
    }

    #[inline]
    fn emit(&mut self, bit: bool) {
        self.out.write_bit(bit);
        for _ in 0..self.pending {
            self.out.write_bit(!bit);
        }
        self.pending = 0;
    }

    /// Narrows the interval to `[lo, hi)` out of `total`.
    pub fn encode_range(&mut self, lo: u32, hi: u32, total: u32) {
        debug_assert!(lo < hi && hi <= total);
        let range = self.high - self.low + 1;
        self.high = self.low + range * hi as u64 / total as u64 - 1;
        self.low += range * lo as u64 / total as u64;
        loop {
            if self.high < HALF {
                self.emit(false);
            } else if self.low >= HALF {
                self.emit(true);
                self.low -= HALF;
                self.high -= HALF;
            } else if self.low >= QUARTER && self.high < THREE_QUARTERS {
                self.pending += 1;
                self.low -= QUARTER;
                self.high -= QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = (self.high << 1) | 1;
        }
    }

    /// Codes `sym` with `model`, then adapts the model.
    pub fn encode(&mut self, model: &mut AdaptiveModel, sym: usize) {
        let (lo, hi) = model.range(sym);
        self.encode_range(lo, hi, model.total());
        model.update(sym);
    }

    /// Bits emitted so far, not counting deferred ones or the terminator.
    pub fn bits_so_far(&self) -> usize {
        self.out.bit_len()
    }

    pub fn finish(mut self) -> BitWriter {
        self.pending += 1;
        let bit = self.low >= QUARTER;
        self.emit(bit);
        self.out
    }
}

pub struct ArithDecoder<'a> {
    low: u64,
    high: u64,
    value: u64,
    reader: BitReader<'a>,
    origin: usize,
}

impl<'a> ArithDecoder<'a> {
    /// Starts decoding from `reader`; bits past the reader's window read as zero.
    pub fn new(mut reader: BitReader<'a>) -> Self {
        let origin = reader.position();
        let mut value = 0;
        for _ in 0..CODE_BITS {
            value = (value << 1) | reader.read_bit_or_zero() as u64;
        }
        Self {
            low: 0,
            high: TOP,
            value,
            reader,
            origin,
        }
    }

    fn corrupt(&self, reason: &str) -> Error {
        Error::corrupt(self.reader.position().max(self.origin) as u64, reason)
    }

    pub fn decode(&mut self, model: &mut AdaptiveModel) -> Result<usize> {
        let total = model.total() as u64;
        let range = self.high - self.low + 1;
        if self.value < self.low || self.value > self.high {
            return Err(self.corrupt("arithmetic decoder out of range"));
        }
        let target = ((self.value - self.low + 1) * total - 1) / range;
        let (sym, lo, hi) = model
            .find(target as u32)
            .ok_or_else(|| self.corrupt("arithmetic decoder target beyond model total"))?;
        self.high = self.low + range * hi as u64 / total - 1;
        self.low += range * lo as u64 / total;
        loop {
            if self.high < HALF {
            } else if self.low >= HALF {
                self.low -= HALF;
                self.high -= HALF;
                self.value -= HALF;
            } else if self.low >= QUARTER && self.high < THREE_QUARTERS {
                self.low -= QUARTER;
                self.high -= QUARTER;
                self.value -= QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = (self.high << 1) | 1;
            self.value = (self.value << 1) | self.reader.read_bit_or_zero() as u64;
        }
        model.update(sym);
        Ok(sym)
    }
}

/// Codes a symbol sequence with one adaptive model.
pub fn ac_encode(symbols: &[usize], model: &mut AdaptiveModel, sink: &mut BitWriter) {
    let mut enc = ArithEncoder::new();
    for &s in symbols {
        enc.encode(model, s);
    }
    sink.append(&enc.finish());
}

pub fn ac_decode(source: BitReader<'_>, model: &mut AdaptiveModel, n: usize) -> Result<Vec<usize>> {
    let mut dec = ArithDecoder::new(source);
    (0..n).map(|_| dec.decode(model)).collect()
}

/// Sum of −log2 p(s) over the model's sequential predictions.
pub fn sequential_entropy(symbols: &[usize], model: &mut AdaptiveModel) -> f64 {
    symbols
        .iter()
        .map(|&s| {
            let c = model.cost_bits(s);
            model.update(s);
            c
        })
        .sum()
}
