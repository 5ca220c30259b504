//! Adaptive coding of inter-mode keypoint residuals.

use super::arith::{ArithDecoder, ArithEncoder};
use super::bitio::{BitReader, BitWriter};
use super::models::AdaptiveModel;
use crate::error::{Error, Result};
use crate::framecontrol::{InterResidual, MAX_LOCATION_RESIDUAL, MAX_ORIENTATION_RESIDUAL, SCALE_RATIO_LEVELS};

const LOCATION_SYMBOLS: usize = 2 * MAX_LOCATION_RESIDUAL as usize + 1;
const ORIENTATION_SYMBOLS: usize = 2 * MAX_ORIENTATION_RESIDUAL as usize + 1;

/// One adaptive model per residual alphabet; reset for every frame.
#[derive(Debug, Clone)]
pub struct ResidualModels {
    dx: AdaptiveModel,
    dy: AdaptiveModel,
    scale: AdaptiveModel,
    dtheta: AdaptiveModel,
}

impl Default for ResidualModels {
    fn default() -> Self {
        Self::new()
    }
}

impl ResidualModels {
    pub fn new() -> Self {
        Self {
            dx: AdaptiveModel::new(LOCATION_SYMBOLS),
            dy: AdaptiveModel::new(LOCATION_SYMBOLS),
            scale: AdaptiveModel::new(SCALE_RATIO_LEVELS as usize),
            dtheta: AdaptiveModel::new(ORIENTATION_SYMBOLS),
        }
    }

    /// Ideal cost of `r` under the current state; adapts like the coder does.
    pub fn cost_and_update(&mut self, r: &InterResidual) -> f64 {
        let syms = symbols(r);
        let models = [&mut self.dx, &mut self.dy, &mut self.scale, &mut self.dtheta];
        let mut bits = 0.0;
        for (m, s) in models.into_iter().zip(syms) {
            bits += m.cost_bits(s);
            m.update(s);
        }
        bits
    }
}

fn symbols(r: &InterResidual) -> [usize; 4] {
    [
        (r.dx + MAX_LOCATION_RESIDUAL) as usize,
        (r.dy + MAX_LOCATION_RESIDUAL) as usize,
        r.scale_idx as usize,
        (r.dtheta_idx + MAX_ORIENTATION_RESIDUAL) as usize,
    ]
}

pub fn check_residual(r: &InterResidual) -> Result<()> {
    let loc = -MAX_LOCATION_RESIDUAL..=MAX_LOCATION_RESIDUAL;
    let ori = -MAX_ORIENTATION_RESIDUAL..=MAX_ORIENTATION_RESIDUAL;
    if !loc.contains(&r.dx) || !loc.contains(&r.dy) || r.scale_idx >= SCALE_RATIO_LEVELS || !ori.contains(&r.dtheta_idx)
    {
        return Err(Error::ResidualOutOfRange(format!("{r:?}")));
    }
    Ok(())
}

pub fn code_residual(enc: &mut ArithEncoder, models: &mut ResidualModels, r: &InterResidual) -> Result<()> {
    check_residual(r)?;
    let [dx, dy, scale, dtheta] = symbols(r);
    enc.encode(&mut models.dx, dx);
    enc.encode(&mut models.dy, dy);
    enc.encode(&mut models.scale, scale);
    enc.encode(&mut models.dtheta, dtheta);
    Ok(())
}

pub fn decode_residual(
    dec: &mut ArithDecoder<'_>,
    models: &mut ResidualModels,
    prev_ref: usize,
) -> Result<InterResidual> {
    let dx = dec.decode(&mut models.dx)? as i32 - MAX_LOCATION_RESIDUAL;
    let dy = dec.decode(&mut models.dy)? as i32 - MAX_LOCATION_RESIDUAL;
    let scale_idx = dec.decode(&mut models.scale)? as u8;
    let dtheta_idx = dec.decode(&mut models.dtheta)? as i32 - MAX_ORIENTATION_RESIDUAL;
    Ok(InterResidual {
        dx,
        dy,
        scale_idx,
        dtheta_idx,
        prev_ref,
    })
}

/// Codes a residual list with fresh models; returns the bit count.
pub fn encode_inter_residuals(residuals: &[InterResidual], sink: &mut BitWriter) -> Result<usize> {
    let mut enc = ArithEncoder::new();
    let mut models = ResidualModels::new();
    for r in residuals {
        code_residual(&mut enc, &mut models, r)?;
    }
    let bits = enc.finish();
    sink.append(&bits);
    Ok(bits.bit_len())
}

/// Decodes `n` residuals; `prev_ref` is filled with the list position.
pub fn decode_inter_residuals(source: BitReader<'_>, n: usize) -> Result<Vec<InterResidual>> {
    let mut dec = ArithDecoder::new(source);
    let mut models = ResidualModels::new();
    (0..n).map(|i| decode_residual(&mut dec, &mut models, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn res(dx: i32, dy: i32, scale_idx: u8, dtheta_idx: i32, prev_ref: usize) -> InterResidual {
        InterResidual {
            dx,
            dy,
            scale_idx,
            dtheta_idx,
            prev_ref,
        }
    }

    fn roundtrip(rs: &[InterResidual]) -> usize {
        let mut sink = BitWriter::new();
        let bits = encode_inter_residuals(rs, &mut sink).unwrap();
        let bytes = sink.into_bytes();
        let back = decode_inter_residuals(BitReader::with_bit_len(&bytes, bits), rs.len()).unwrap();
        assert_eq!(back, rs);
        bits
    }

    #[test]
    fn zeros_roundtrip() {
        let rs: Vec<_> = (0..50).map(|i| res(0, 0, 2, 0, i)).collect();
        roundtrip(&rs);
    }

    #[test]
    fn boundary_values_roundtrip() {
        roundtrip(&[res(-16, 16, 4, -4, 0), res(16, -16, 0, 4, 1)]);
    }

    #[test]
    fn out_of_range_rejected() {
        let mut sink = BitWriter::new();
        for bad in [
            res(17, 0, 2, 0, 0),
            res(0, -17, 2, 0, 0),
            res(0, 0, 5, 0, 0),
            res(0, 0, 2, 5, 0),
        ] {
            assert!(matches!(
                encode_inter_residuals(&[bad], &mut sink),
                Err(Error::ResidualOutOfRange(_))
            ));
        }
    }

    #[test]
    fn random_residuals_cost_within_two_bits_of_model_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let rs: Vec<_> = (0..1000)
            .map(|i| {
                res(
                    rng.random_range(-16..=16),
                    rng.random_range(-16..=16),
                    rng.random_range(0..5),
                    rng.random_range(-4..=4),
                    i,
                )
            })
            .collect();
        let bits = roundtrip(&rs);
        let mut models = ResidualModels::new();
        let h: f64 = rs.iter().map(|r| models.cost_and_update(r)).sum();
        assert!(bits as f64 <= h + 2.0, "{bits} vs {h}");
    }
}
