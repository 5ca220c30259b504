//! MSB-first bit packing.

use crate::error::{Error, Result};

/// Accumulates bits MSB-first into a byte buffer.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BitWriter {
    buf: Vec<u8>,
    bits: usize,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of bits written so far (no padding).
    pub fn bit_len(&self) -> usize {
        self.bits
    }

    #[inline]
    pub fn write_bit(&mut self, bit: bool) {
        let pos = self.bits % 8;
        if pos == 0 {
            self.buf.push(0);
        }
        if bit {
            *self.buf.last_mut().unwrap() |= 0x80 >> pos;
        }
        self.bits += 1;
    }

    /// Writes the low `n` bits of `value`, most significant first.
    pub fn write_bits(&mut self, value: u64, n: u32) {
        debug_assert!(n <= 64);
        debug_assert!(n == 64 || value >> n == 0, "{value} does not fit in {n} bits");
        for i in (0..n).rev() {
            self.write_bit((value >> i) & 1 == 1);
        }
    }

    pub fn append(&mut self, other: &BitWriter) {
        if self.bits.is_multiple_of(8) {
            self.buf.extend_from_slice(&other.buf);
            self.bits += other.bits;
            return;
        }
        let mut r = BitReader::with_bit_len(&other.buf, other.bits);
        while let Ok(b) = r.read_bit() {
            self.write_bit(b);
        }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.buf
    }

    /// Bytes with the final partial byte zero-padded.
    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

/// Reads bits MSB-first from a window `[pos, end)` of a byte slice.
#[derive(Debug, Clone)]
pub struct BitReader<'a> {
    data: &'a [u8],
    pos: usize,
    end: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self::with_bit_len(data, data.len() * 8)
    }

    pub fn with_bit_len(data: &'a [u8], bits: usize) -> Self {
        Self {
            data,
            pos: 0,
            end: bits.min(data.len() * 8),
        }
    }

    /// Absolute bit offset of the next bit.
    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.end - self.pos
    }

    pub fn is_exhausted(&self) -> bool {
        self.pos >= self.end
    }

    #[inline]
    fn bit_at(&self, pos: usize) -> bool {
        (self.data[pos / 8] >> (7 - pos % 8)) & 1 == 1
    }

    #[inline]
    pub fn read_bit(&mut self) -> Result<bool> {
        if self.pos >= self.end {
            return Err(Error::corrupt(self.pos as u64, "unexpected end of stream"));
        }
        let b = self.bit_at(self.pos);
        self.pos += 1;
        Ok(b)
    }

    /// Like [`read_bit`](Self::read_bit) but yields zeros past the window end
    /// without advancing beyond it.
    #[inline]
    pub fn read_bit_or_zero(&mut self) -> bool {
        if self.pos >= self.end {
            return false;
        }
        let b = self.bit_at(self.pos);
        self.pos += 1;
        b
    }

    pub fn read_bits(&mut self, n: u32) -> Result<u64> {
        debug_assert!(n <= 64);
        if self.remaining() < n as usize {
            return Err(Error::corrupt(self.end as u64, "unexpected end of stream"));
        }
        let mut v = 0u64;
        for _ in 0..n {
            v = (v << 1) | self.bit_at(self.pos) as u64;
            self.pos += 1;
        }
        Ok(v)
    }

    pub fn skip(&mut self, n: usize) -> Result<()> {
        if self.remaining() < n {
            return Err(Error::corrupt(self.end as u64, "unexpected end of stream"));
        }
        self.pos += n;
        Ok(())
    }

    /// Splits off the next `n` bits as an independent reader and advances past them.
    pub fn take(&mut self, n: usize) -> Result<BitReader<'a>> {
        if self.remaining() < n {
            return Err(Error::corrupt(self.end as u64, "segment extends past end of stream"));
        }
        let sub = BitReader {
            data: self.data,
            pos: self.pos,
            end: self.pos + n,
        };
        self.pos += n;
        Ok(sub)
    }
}
