//! Intra-mode scalar quantization of keypoint location, scale and orientation,
//! plus Lloyd-Max training for the normalized scale offset.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::model::{wrap_theta, Keypoint, THETA_MAX, THETA_MIN};

/// Base scale of the scale-space lattice.
pub const SIGMA0: f64 = 2.0159;
pub const OCTAVE_BITS: u32 = 3;
pub const INTRA_SCALE_BITS: u32 = 2;
pub const OFFSET_BITS: u32 = 1;
pub const SCALE_CODE_BITS: u32 = OCTAVE_BITS + INTRA_SCALE_BITS + OFFSET_BITS;
pub const MAX_OCTAVE: u8 = 7;
pub const MAX_INTRA_SCALE: u8 = 2;
pub const DEFAULT_ORIENTATION_BITS: u32 = 6;
pub const DEFAULT_LOCATION_FACTOR: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct QuantizedLocation {
    pub gx: u32,
    pub gy: u32,
}

impl QuantizedLocation {
    pub fn new(gx: u32, gy: u32) -> Self {
        Self { gx, gy }
    }
}

/// Occupancy grid in quantized location units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocationGrid {
    pub width: u32,
    pub height: u32,
}

impl LocationGrid {
    /// Grid covering a `width × height` frame at quantization factor `f`.
    pub fn for_frame(width: u32, height: u32, f: f64) -> Self {
        Self {
            width: ((width as f64 / f).ceil() as u32).max(1),
            height: ((height as f64 / f).ceil() as u32).max(1),
        }
    }

    pub fn cells(&self) -> u64 {
        self.width as u64 * self.height as u64
    }

    pub fn contains(&self, loc: QuantizedLocation) -> bool {
        loc.gx < self.width && loc.gy < self.height
    }

    /// Raster index (row-major).
    pub fn index(&self, loc: QuantizedLocation) -> u64 {
        loc.gy as u64 * self.width as u64 + loc.gx as u64
    }

    pub fn location(&self, index: u64) -> QuantizedLocation {
        QuantizedLocation {
            gx: (index % self.width as u64) as u32,
            gy: (index / self.width as u64) as u32,
        }
    }

    pub fn clamp(&self, loc: QuantizedLocation) -> QuantizedLocation {
        QuantizedLocation {
            gx: loc.gx.min(self.width - 1),
            gy: loc.gy.min(self.height - 1),
        }
    }
}

/// Rounds the location to the `f`-spaced grid. Negative coordinates clamp to 0.
pub fn quantize_location(k: &Keypoint, f: f64) -> QuantizedLocation {
    QuantizedLocation {
        gx: (k.x / f).round().max(0.0) as u32,
        gy: (k.y / f).round().max(0.0) as u32,
    }
}

pub fn dequantize_location(q: QuantizedLocation, f: f64) -> (f64, f64) {
    (f * q.gx as f64, f * q.gy as f64)
}

/// Octave, intra-octave scale and one-bit offset index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ScaleCode {
    pub octave: u8,
    pub intra_scale: u8,
    pub offset_bit: u8,
}

impl ScaleCode {
    pub fn packed(&self) -> u64 {
        ((self.octave as u64) << 3) | ((self.intra_scale as u64) << 1) | self.offset_bit as u64
    }

    pub fn from_packed(v: u64) -> Option<Self> {
        let code = Self {
            octave: ((v >> 3) & 0b111) as u8,
            intra_scale: ((v >> 1) & 0b11) as u8,
            offset_bit: (v & 1) as u8,
        };
        (code.intra_scale <= MAX_INTRA_SCALE).then_some(code)
    }
}

/// Scale-space lattice point `σ0 · 2^(o + s/3)`.
pub fn lattice_scale(octave: i32, intra_scale: i32) -> f64 {
    SIGMA0 * 2f64.powf(octave as f64 + intra_scale as f64 / 3.0)
}

/// Nearest lattice point by absolute distance, searched over an extended
/// octave range so that out-of-range scales are detectable.
pub fn nearest_lattice(sigma: f64) -> (i32, i32) {
    let mut best = (0, 0);
    let mut best_err = f64::INFINITY;
    for o in -2..=MAX_OCTAVE as i32 + 2 {
        for s in 0..=MAX_INTRA_SCALE as i32 {
            let err = (sigma - lattice_scale(o, s)).abs();
            if err < best_err {
                best_err = err;
                best = (o, s);
            }
        }
    }
    best
}

/// Normalized offset of `sigma` from a lattice point.
pub fn normalized_offset(sigma: f64, octave: i32, intra_scale: i32) -> f64 {
    let base = lattice_scale(octave, intra_scale);
    (sigma - base) / base
}

pub fn code_scale(sigma: f64, codebook: &LloydMaxCodebook) -> Result<ScaleCode> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::ScaleOutOfRange { sigma });
    }
    let (o, s) = nearest_lattice(sigma);
    if !(0..=MAX_OCTAVE as i32).contains(&o) {
        return Err(Error::ScaleOutOfRange { sigma });
    }
    let offset = normalized_offset(sigma, o, s);
    Ok(ScaleCode {
        octave: o as u8,
        intra_scale: s as u8,
        offset_bit: codebook.nearest(offset) as u8,
    })
}

pub fn decode_scale(code: ScaleCode, codebook: &LloydMaxCodebook) -> f64 {
    lattice_scale(code.octave as i32, code.intra_scale as i32) * (1.0 + codebook.levels[code.offset_bit as usize])
}

/// Lowest and highest lattice points; scales outside are clamped by the encoder.
pub fn representable_scale_range() -> (f64, f64) {
    (
        lattice_scale(0, 0),
        lattice_scale(MAX_OCTAVE as i32, MAX_INTRA_SCALE as i32),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct OrientationCode {
    pub index: u32,
}

fn orientation_levels(t: u32) -> f64 {
    ((1u64 << t) - 1) as f64
}

/// Orientations already inside the closed interval are coded as-is; others wrap.
pub fn code_orientation(theta: f64, t: u32) -> OrientationCode {
    let theta = if (THETA_MIN..=THETA_MAX).contains(&theta) {
        theta
    } else {
        wrap_theta(theta)
    };
    let levels = orientation_levels(t);
    let e = ((theta / (2.0 * PI) + 0.75) * levels).round().clamp(0.0, levels);
    OrientationCode { index: e as u32 }
}

pub fn decode_orientation(code: OrientationCode, t: u32) -> f64 {
    (code.index as f64 / orientation_levels(t) - 0.75) * 2.0 * PI
}

/// Number of distinct angles on the orientation index circle (the first and
/// last index name the same angle).
pub fn orientation_period(t: u32) -> i64 {
    (1i64 << t) - 1
}

/// Scalar quantizer: sorted reconstruction levels and the thresholds between them.
#[derive(Debug, Clone, PartialEq)]
pub struct LloydMaxCodebook {
    pub levels: Vec<f64>,
    pub boundaries: Vec<f64>,
}

impl LloydMaxCodebook {
    pub fn from_levels(mut levels: Vec<f64>) -> Self {
        levels.sort_by(f64::total_cmp);
        let boundaries = levels.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        Self { levels, boundaries }
    }

    /// Two-level codebook used when no training data is available.
    pub fn fallback() -> Self {
        Self::from_levels(vec![-0.03, 0.03])
    }

    pub fn nearest(&self, v: f64) -> usize {
        self.boundaries.iter().take_while(|&&b| v >= b).count()
    }

    pub fn quantize(&self, v: f64) -> f64 {
        self.levels[self.nearest(v)]
    }

    pub fn mse(&self, samples: &[f64]) -> f64 {
        samples.iter().map(|&v| (v - self.quantize(v)).powi(2)).sum::<f64>() / samples.len().max(1) as f64
    }
}

pub const LLOYD_TOLERANCE: f64 = 1e-8;
const LLOYD_MAX_ITERATIONS: usize = 10_000;

/// Trains a `levels`-level scalar quantizer by alternating nearest-neighbour
/// partitioning and centroid updates.
///
/// Lloyd iterations only find a local optimum, so training runs from two fixed
/// starts, the sample quantile midpoints and the uniform grid over the sample
/// range, and keeps the lower-MSE result (ties go to the quantile start). Since
/// no iteration increases the MSE, the result is never worse than the uniform
/// quantizer.
pub fn train_lloyd_max(samples: &[f64], levels: usize) -> Result<LloydMaxCodebook> {
    if levels < 2 || samples.len() < 2 * levels {
        return Err(Error::InsufficientSamples {
            needed: 2 * levels.max(2),
            got: samples.len(),
        });
    }
    let mut sorted: Vec<f64> = samples.iter().copied().filter(|v| v.is_finite()).collect();
    if sorted.len() < 2 * levels {
        return Err(Error::InsufficientSamples {
            needed: 2 * levels,
            got: sorted.len(),
        });
    }
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut quantiles: Vec<f64> = (0..levels)
        .map(|i| sorted[(((i as f64 + 0.5) / levels as f64) * n as f64) as usize])
        .collect();
    quantiles.dedup();
    if quantiles.len() < levels {
        return Err(Error::InsufficientSamples {
            needed: levels,
            got: quantiles.len(),
        });
    }
    let (lo, hi) = (sorted[0], sorted[n - 1]);
    let uniform: Vec<f64> = (0..levels)
        .map(|i| lo + (hi - lo) * (i as f64 + 0.5) / levels as f64)
        .collect();

    let a = lloyd_iterate(&sorted, quantiles);
    let b = lloyd_iterate(&sorted, uniform);
    Ok(if b.mse(&sorted) < a.mse(&sorted) { b } else { a })
}

fn lloyd_iterate(sorted: &[f64], init: Vec<f64>) -> LloydMaxCodebook {
    let levels = init.len();
    let mut book = LloydMaxCodebook::from_levels(init);
    let mut prev_mse = book.mse(sorted);
    for _ in 0..LLOYD_MAX_ITERATIONS {
        let mut sums = vec![0.0; levels];
        let mut counts = vec![0usize; levels];
        for &v in sorted {
            let i = book.nearest(v);
            sums[i] += v;
            counts[i] += 1;
        }
        let next: Vec<f64> = (0..levels)
            .map(|i| {
                if counts[i] > 0 {
                    sums[i] / counts[i] as f64
                } else {
                    book.levels[i]
                }
            })
            .collect();
        let candidate = LloydMaxCodebook::from_levels(next);
        let mse = candidate.mse(sorted);
        book = candidate;
        if (prev_mse - mse).abs() < LLOYD_TOLERANCE {
            break;
        }
        prev_mse = mse;
    }
    book
}

/// Q16.16 fixed point, as stored in stream headers.
pub fn to_q16(v: f64) -> i32 {
    (v * 65536.0).round().clamp(i32::MIN as f64, i32::MAX as f64) as i32
}

pub fn from_q16(v: i32) -> f64 {
    v as f64 / 65536.0
}
