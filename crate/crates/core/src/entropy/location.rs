//! Sum-based context coding of keypoint locations.
//!
//! The occupancy grid is scanned in raster order. Each cell's binary
//! occupancy is coded with the adaptive model selected by the number of
//! occupied cells among the previous `context_range` scanned cells (clamped
//! to `context_range - 1`).

use std::collections::VecDeque;

use super::arith::{ArithDecoder, ArithEncoder};
use super::bitio::{BitReader, BitWriter};
use super::models::{AdaptiveModel, ContextModel};
use crate::error::{Error, Result};
use crate::kpquant::{LocationGrid, QuantizedLocation};

/// Causal window over the most recent scanned cells.
struct Window {
    cells: VecDeque<bool>,
    len: usize,
    sum: usize,
}

impl Window {
    fn new(len: usize) -> Self {
        Self {
            cells: VecDeque::with_capacity(len + 1),
            len,
            sum: 0,
        }
    }

    fn context(&self, range: usize) -> usize {
        self.sum.min(range - 1)
    }

    fn push(&mut self, occupied: bool) {
        self.cells.push_back(occupied);
        self.sum += occupied as usize;
        if self.cells.len() > self.len && self.cells.pop_front() == Some(true) {
            self.sum -= 1;
        }
    }
}

fn raster_indices(locs: &[QuantizedLocation], grid: LocationGrid) -> Result<Vec<u64>> {
    let mut idx = Vec::with_capacity(locs.len());
    for &loc in locs {
        if !grid.contains(loc) {
            return Err(Error::LocationOutOfGrid {
                gx: loc.gx,
                gy: loc.gy,
                width: grid.width,
                height: grid.height,
            });
        }
        idx.push(grid.index(loc));
    }
    idx.sort_unstable();
    Ok(idx)
}

/// Codes the occupancy map of `locs`; duplicate cells merge.
pub fn code_occupancy(
    enc: &mut ArithEncoder,
    locs: &[QuantizedLocation],
    grid: LocationGrid,
    model: &mut ContextModel,
) -> Result<()> {
    let mut occupied = raster_indices(locs, grid)?;
    occupied.dedup();
    let range = model.context_range;
    let mut window = Window::new(range);
    let mut next = occupied.iter().peekable();
    for cell in 0..grid.cells() {
        let bit = next.peek().is_some_and(|&&c| c == cell);
        if bit {
            next.next();
        }
        enc.encode(model.context(window.context(range)), bit as usize);
        window.push(bit);
    }
    Ok(())
}

/// Decodes an occupancy map; returns the occupied cells in raster order.
pub fn decode_occupancy(
    dec: &mut ArithDecoder<'_>,
    grid: LocationGrid,
    model: &mut ContextModel,
) -> Result<Vec<QuantizedLocation>> {
    let range = model.context_range;
    let mut window = Window::new(range);
    let mut out = Vec::new();
    for cell in 0..grid.cells() {
        let bit = dec.decode(model.context(window.context(range)))? == 1;
        if bit {
            out.push(grid.location(cell));
        }
        window.push(bit);
    }
    Ok(out)
}

/// Codes a multiset of locations: the occupancy map, then for each occupied
/// cell a unary run of "one more here" flags.
pub fn code_location_multiset(
    enc: &mut ArithEncoder,
    locs: &[QuantizedLocation],
    grid: LocationGrid,
    model: &mut ContextModel,
) -> Result<()> {
    code_occupancy(enc, locs, grid, model)?;
    let idx = raster_indices(locs, grid)?;
    let mut more = AdaptiveModel::new(2);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && idx[j] == idx[i] {
            enc.encode(&mut more, 1);
            j += 1;
        }
        enc.encode(&mut more, 0);
        i = j;
    }
    Ok(())
}

/// Inverse of [`code_location_multiset`]; duplicates come out adjacent, in raster order.
pub fn decode_location_multiset(
    dec: &mut ArithDecoder<'_>,
    grid: LocationGrid,
    model: &mut ContextModel,
    max_count: usize,
) -> Result<Vec<QuantizedLocation>> {
    let cells = decode_occupancy(dec, grid, model)?;
    let mut more = AdaptiveModel::new(2);
    let mut out = Vec::with_capacity(cells.len());
    for cell in cells {
        out.push(cell);
        while dec.decode(&mut more)? == 1 {
            out.push(cell);
            if out.len() > max_count {
                return Err(Error::corrupt(0, "location multiplicity exceeds keypoint count"));
            }
        }
    }
    Ok(out)
}

/// Standalone occupancy coding into `sink`; returns the number of bits written.
pub fn encode_locations(
    locs: &[QuantizedLocation],
    grid: LocationGrid,
    model: &mut ContextModel,
    sink: &mut BitWriter,
) -> Result<usize> {
    let mut enc = ArithEncoder::new();
    code_occupancy(&mut enc, locs, grid, model)?;
    let bits = enc.finish();
    sink.append(&bits);
    Ok(bits.bit_len())
}

pub fn decode_locations(
    source: BitReader<'_>,
    grid: LocationGrid,
    model: &mut ContextModel,
) -> Result<Vec<QuantizedLocation>> {
    let mut dec = ArithDecoder::new(source);
    decode_occupancy(&mut dec, grid, model)
}
