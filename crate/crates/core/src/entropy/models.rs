//! Adaptive frequency models.

use crate::error::{Error, Result};

/// Frequencies are halved once the total would exceed this.
pub const MAX_TOTAL: u32 = 1 << 16;

/// Adaptive multi-symbol frequency table. Every frequency stays ≥ 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdaptiveModel {
    freqs: Vec<u32>,
    total: u32,
}

impl AdaptiveModel {
    /// Uniform model with a count of one per symbol.
    pub fn new(symbols: usize) -> Self {
        assert!(symbols >= 1 && symbols < MAX_TOTAL as usize);
        Self {
            freqs: vec![1; symbols],
            total: symbols as u32,
        }
    }

    pub fn from_counts(counts: &[u32]) -> Result<Self> {
        if counts.is_empty() || counts.contains(&0) {
            return Err(Error::InvalidInput(
                "model counts must be non-empty and positive".into(),
            ));
        }
        let mut m = Self {
            freqs: counts.to_vec(),
            total: 0,
        };
        m.total = m.freqs.iter().map(|&f| f as u64).sum::<u64>().min(u32::MAX as u64) as u32;
        while m.total > MAX_TOTAL {
            m.rescale();
        }
        Ok(m)
    }

    pub fn symbols(&self) -> usize {
        self.freqs.len()
    }

    pub fn total(&self) -> u32 {
        self.total
    }

    pub fn freq(&self, sym: usize) -> u32 {
        self.freqs[sym]
    }

    /// Cumulative range `[lo, hi)` of `sym`.
    pub fn range(&self, sym: usize) -> (u32, u32) {
        let lo: u32 = self.freqs[..sym].iter().sum();
        (lo, lo + self.freqs[sym])
    }

    /// Symbol whose cumulative range contains `target`, with its range.
    pub fn find(&self, target: u32) -> Option<(usize, u32, u32)> {
        let mut lo = 0;
        for (sym, &f) in self.freqs.iter().enumerate() {
            if target < lo + f {
                return Some((sym, lo, lo + f));
            }
            lo += f;
        }
        None
    }

    pub fn probability(&self, sym: usize) -> f64 {
        self.freqs[sym] as f64 / self.total as f64
    }

    /// Ideal code length of `sym` under the current state, in bits.
    pub fn cost_bits(&self, sym: usize) -> f64 {
        -self.probability(sym).log2()
    }

    pub fn update(&mut self, sym: usize) {
        self.freqs[sym] += 1;
        self.total += 1;
        if self.total > MAX_TOTAL {
            self.rescale();
        }
    }

    fn rescale(&mut self) {
        for f in &mut self.freqs {
            *f = f.div_ceil(2);
        }
        self.total = self.freqs.iter().sum();
    }
}

pub const DEFAULT_CONTEXT_RANGE: usize = 49;

/// Binary occupancy models indexed by a neighbourhood-sum context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextModel {
    contexts: Vec<AdaptiveModel>,
    /// Number of distinct contexts; also the length of the causal window.
    pub context_range: usize,
    /// Grid cell width in quantized location units.
    pub block_width: usize,
}

impl ContextModel {
    pub fn new(context_range: usize) -> Self {
        assert!(context_range >= 1);
        Self {
            contexts: vec![AdaptiveModel::new(2); context_range],
            context_range,
            block_width: 1,
        }
    }

    /// Initial counts laid out as `[ctx0_empty, ctx0_occupied, ctx1_empty, …]`.
    pub fn from_table(counts: &[u32], context_range: usize) -> Result<Self> {
        if counts.len() != context_range * 2 {
            return Err(Error::InvalidInput(format!(
                "context table has {} counts, expected {}",
                counts.len(),
                context_range * 2
            )));
        }
        let contexts = counts
            .chunks(2)
            .map(AdaptiveModel::from_counts)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            contexts,
            context_range,
            block_width: 1,
        })
    }

    pub fn context(&mut self, ctx: usize) -> &mut AdaptiveModel {
        &mut self.contexts[ctx.min(self.context_range - 1)]
    }
}

/// A loadable table of initial context counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextTable {
    pub counts: Vec<u32>,
    pub context_range: usize,
}

impl ContextTable {
    /// Parses little-endian 32-bit counts, `context_range × 2` of them.
    pub fn from_le_bytes(bytes: &[u8], context_range: usize) -> Result<Self> {
        if bytes.len() != context_range * 2 * 4 {
            return Err(Error::InvalidInput(format!(
                "context table file has {} bytes, expected {}",
                bytes.len(),
                context_range * 8
            )));
        }
        let counts: Vec<u32> = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        // validate eagerly
        ContextModel::from_table(&counts, context_range)?;
        Ok(Self { counts, context_range })
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.counts.iter().flat_map(|c| c.to_le_bytes()).collect()
    }

    /// Non-zero FNV-1a digest used as the table id in stream headers.
    pub fn id(&self) -> u32 {
        let mut h: u32 = 0x811c_9dc5;
        for b in self.to_le_bytes() {
            h ^= b as u32;
            h = h.wrapping_mul(0x0100_0193);
        }
        h.max(1)
    }

    pub fn model(&self) -> ContextModel {
        ContextModel::from_table(&self.counts, self.context_range).expect("validated on load")
    }
}
