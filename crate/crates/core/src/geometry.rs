//! Affine decomposition, keypoint propagation between frames and the 48-bit
//! affine quantizer.

use crate::entropy::bitio::{BitReader, BitWriter};
use crate::error::{Error, Result};
use crate::model::{wrap_theta, AffineTransform, DecomposedAffine, Keypoint};

/// Smallest |det| accepted by [`decompose`].
pub const MIN_ABS_DET: f64 = 1e-6;

/// Default clamp range for the translation components, in pixels.
pub const DEFAULT_T_MAX: f64 = 64.0;

pub const SCALE_RANGE: (f64, f64) = (0.9, 1.1);
pub const SHEAR_RANGE: (f64, f64) = (-0.05, 0.05);
pub const ROTATION_RANGE: (f64, f64) = (-0.15, 0.15);

pub const R1_BITS: u32 = 7;
pub const R2_BITS: u32 = 7;
pub const Q_BITS: u32 = 7;
pub const PHI_BITS: u32 = 9;
pub const TX_BITS: u32 = 9;
pub const TY_BITS: u32 = 9;

/// Serialized size of a [`QuantizedAffine`].
pub const QUANTIZED_AFFINE_BITS: u32 = R1_BITS + R2_BITS + Q_BITS + PHI_BITS + TX_BITS + TY_BITS;

/// Factors the linear part of `t` into scaling, shearing and rotation.
pub fn decompose(t: &AffineTransform) -> Result<DecomposedAffine> {
    let det = t.det();
    let norm = t.a.hypot(t.b);
    if !(det.abs() >= MIN_ABS_DET) || norm == 0.0 {
        return Err(Error::DegenerateTransform { det });
    }
    Ok(DecomposedAffine {
        r1: norm,
        r2: det / norm,
        q: (t.a * t.c + t.b * t.d) / det,
        phi: t.b.atan2(t.a),
        tx: t.tx,
        ty: t.ty,
    })
}

pub fn recompose(d: &DecomposedAffine) -> Result<AffineTransform> {
    if !(d.r1 > 0.0) {
        return Err(Error::InvalidDecomposition("r1 must be positive"));
    }
    let (s, c) = d.phi.sin_cos();
    Ok(AffineTransform {
        a: d.r1 * c,
        b: d.r1 * s,
        c: d.r2 * (d.q * c - s),
        d: d.r2 * (d.q * s + c),
        tx: d.tx,
        ty: d.ty,
    })
}

/// Radius of the circle whose area equals the sheared ellipse, per unit radius.
pub fn scale_factor(d: &DecomposedAffine) -> Result<f64> {
    let area = d.r1 * d.r2;
    if !(area > 0.0) {
        return Err(Error::InvalidDecomposition("r1 * r2 must be positive"));
    }
    Ok(area.sqrt())
}

/// Predicts where `k` lands in the next frame under `d`.
pub fn estimate_keypoint(k: &Keypoint, d: &DecomposedAffine) -> Result<Keypoint> {
    let t = recompose(d)?;
    let s = scale_factor(d)?;
    Ok(estimate_with(k, &t, s, d.phi))
}

/// [`estimate_keypoint`] with the recomposed matrix and scale factor precomputed.
pub(crate) fn estimate_with(k: &Keypoint, t: &AffineTransform, s: f64, phi: f64) -> Keypoint {
    let (x, y) = t.apply(k.x, k.y);
    Keypoint {
        x,
        y,
        sigma: s * k.sigma,
        theta: wrap_theta(k.theta - phi),
    }
}

/// Propagates every keypoint with one transform.
pub fn estimate_all(keypoints: &[Keypoint], d: &DecomposedAffine) -> Result<Vec<Keypoint>> {
    let t = recompose(d)?;
    let s = scale_factor(d)?;
    Ok(keypoints.iter().map(|k| estimate_with(k, &t, s, d.phi)).collect())
}

/// Endpoint-inclusive uniform scalar quantizer over `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformQuantizer {
    pub lo: f64,
    pub hi: f64,
    pub bits: u32,
}

impl UniformQuantizer {
    pub fn new(lo: f64, hi: f64, bits: u32) -> Self {
        debug_assert!(hi > lo && (1..=16).contains(&bits));
        Self { lo, hi, bits }
    }

    pub fn max_index(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / self.max_index() as f64
    }

    /// Returns the index and whether `v` had to be clamped.
    pub fn quantize(&self, v: f64) -> (u32, bool) {
        let clamped = v.clamp(self.lo, self.hi);
        let was_clamped = clamped != v;
        let idx = ((clamped - self.lo) / (self.hi - self.lo) * self.max_index() as f64).round();
        (idx as u32, was_clamped)
    }

    pub fn dequantize(&self, idx: u32) -> f64 {
        self.lo + idx as f64 / self.max_index() as f64 * (self.hi - self.lo)
    }
}

/// Quantizers for the six transmitted parameters, in stream order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineQuantizer {
    pub r1: UniformQuantizer,
    pub r2: UniformQuantizer,
    pub q: UniformQuantizer,
    pub phi: UniformQuantizer,
    pub tx: UniformQuantizer,
    pub ty: UniformQuantizer,
}

impl AffineQuantizer {
    pub fn new(t_max: f64) -> Self {
        Self {
            r1: UniformQuantizer::new(SCALE_RANGE.0, SCALE_RANGE.1, R1_BITS),
            r2: UniformQuantizer::new(SCALE_RANGE.0, SCALE_RANGE.1, R2_BITS),
            q: UniformQuantizer::new(SHEAR_RANGE.0, SHEAR_RANGE.1, Q_BITS),
            phi: UniformQuantizer::new(ROTATION_RANGE.0, ROTATION_RANGE.1, PHI_BITS),
            tx: UniformQuantizer::new(-t_max, t_max, TX_BITS),
            ty: UniformQuantizer::new(-t_max, t_max, TY_BITS),
        }
    }

    pub fn quantize(&self, d: &DecomposedAffine) -> (QuantizedAffine, usize) {
        let parts = [
            self.r1.quantize(d.r1),
            self.r2.quantize(d.r2),
            self.q.quantize(d.q),
            self.phi.quantize(d.phi),
            self.tx.quantize(d.tx),
            self.ty.quantize(d.ty),
        ];
        let clamps = parts.iter().filter(|(_, c)| *c).count();
        (
            QuantizedAffine {
                idx_r1: parts[0].0,
                idx_r2: parts[1].0,
                idx_q: parts[2].0,
                idx_phi: parts[3].0,
                idx_tx: parts[4].0,
                idx_ty: parts[5].0,
            },
            clamps,
        )
    }

    pub fn dequantize(&self, q: &QuantizedAffine) -> DecomposedAffine {
        DecomposedAffine {
            r1: self.r1.dequantize(q.idx_r1),
            r2: self.r2.dequantize(q.idx_r2),
            q: self.q.dequantize(q.idx_q),
            phi: self.phi.dequantize(q.idx_phi),
            tx: self.tx.dequantize(q.idx_tx),
            ty: self.ty.dequantize(q.idx_ty),
        }
    }
}

/// Six quantizer indices; 48 bits on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuantizedAffine {
    pub idx_r1: u32,
    pub idx_r2: u32,
    pub idx_q: u32,
    pub idx_phi: u32,
    pub idx_tx: u32,
    pub idx_ty: u32,
}

impl QuantizedAffine {
    fn fields(&self) -> [(u32, u32); 6] {
        [
            (self.idx_r1, R1_BITS),
            (self.idx_r2, R2_BITS),
            (self.idx_q, Q_BITS),
            (self.idx_phi, PHI_BITS),
            (self.idx_tx, TX_BITS),
            (self.idx_ty, TY_BITS),
        ]
    }

    pub fn is_valid(&self) -> bool {
        self.fields().iter().all(|&(v, bits)| v < (1 << bits))
    }

    pub fn write(&self, w: &mut BitWriter) {
        for (v, bits) in self.fields() {
            w.write_bits(v as u64, bits);
        }
    }

    pub fn read(r: &mut BitReader<'_>) -> Result<Self> {
        Ok(Self {
            idx_r1: r.read_bits(R1_BITS)? as u32,
            idx_r2: r.read_bits(R2_BITS)? as u32,
            idx_q: r.read_bits(Q_BITS)? as u32,
            idx_phi: r.read_bits(PHI_BITS)? as u32,
            idx_tx: r.read_bits(TX_BITS)? as u32,
            idx_ty: r.read_bits(TY_BITS)? as u32,
        })
    }
}

/// Quantizes with the default translation range. Out-of-range values clamp.
pub fn quantize_affine(d: &DecomposedAffine) -> QuantizedAffine {
    AffineQuantizer::new(DEFAULT_T_MAX).quantize(d).0
}

pub fn dequantize_affine(q: &QuantizedAffine) -> DecomposedAffine {
    AffineQuantizer::new(DEFAULT_T_MAX).dequantize(q)
}

/// Composes two decomposed transforms (`second ∘ first`) and re-decomposes.
pub fn compose_decomposed(first: &DecomposedAffine, second: &DecomposedAffine) -> Result<DecomposedAffine> {
    decompose(&recompose(second)?.compose(&recompose(first)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_affine(rng: &mut ChaCha8Rng) -> AffineTransform {
        loop {
            let t = AffineTransform::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-100.0..100.0),
                rng.random_range(-100.0..100.0),
            );
            if t.det().abs() > 1e-3 {
                return t;
            }
        }
    }

    #[test]
    fn decompose_identity() {
        let d = decompose(&AffineTransform::IDENTITY).unwrap();
        assert_eq!((d.r1, d.r2, d.q, d.phi), (1.0, 1.0, 0.0, 0.0));
    }

    #[test]
    fn decompose_pure_rotation() {
        for phi in [-3.0, -1.0, -0.1, 0.0, 0.37, 1.2, 3.1] {
            let (s, c) = f64::sin_cos(phi);
            let d = decompose(&AffineTransform::new(c, s, -s, c, 0.0, 0.0)).unwrap();
            assert!((d.r1 - 1.0).abs() < 1e-15);
            assert!((d.r2 - 1.0).abs() < 1e-15);
            assert!(d.q.abs() < 1e-15);
            assert!((d.phi - phi).abs() < 1e-15);
        }
    }

    #[test]
    fn decompose_pure_scaling() {
        // r1 = sqrt(4) = 2, r2 = (2 * 0.5) / 2 = 0.5, q = 0, phi = 0.
        let d = decompose(&AffineTransform::new(2.0, 0.0, 0.0, 0.5, 0.0, 0.0)).unwrap();
        assert_eq!((d.r1, d.r2, d.q, d.phi), (2.0, 0.5, 0.0, 0.0));
        let t = recompose(&d).unwrap();
        assert_eq!((t.a, t.b, t.c, t.d), (2.0, 0.0, 0.0, 0.5));
    }

    #[test]
    fn decompose_rejects_degenerate() {
        let t = AffineTransform::new(1.0, 2.0, 2.0, 4.0, 0.0, 0.0);
        assert!(matches!(decompose(&t), Err(Error::DegenerateTransform { .. })));
        let t = AffineTransform::new(0.0, 0.0, 1.0, 1.0, 0.0, 0.0);
        assert!(decompose(&t).is_err());
    }

    #[test]
    fn recompose_identity_and_errors() {
        assert_eq!(
            recompose(&DecomposedAffine::IDENTITY).unwrap(),
            AffineTransform::IDENTITY
        );
        let mut bad = DecomposedAffine::IDENTITY;
        bad.r1 = 0.0;
        assert!(matches!(recompose(&bad), Err(Error::InvalidDecomposition(_))));
    }

    #[test]
    fn roundtrip_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let t = random_affine(&mut rng);
            let back = recompose(&decompose(&t).unwrap()).unwrap();
            assert!(t.max_abs_diff(&back) < 1e-9, "{t:?} vs {back:?}");
        }
    }

    #[test]
    fn scale_factor_cases() {
        assert_eq!(scale_factor(&DecomposedAffine::IDENTITY).unwrap(), 1.0);
        let d = DecomposedAffine {
            r1: 2.0,
            r2: 0.25,
            ..DecomposedAffine::IDENTITY
        };
        assert!((scale_factor(&d).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        let d = DecomposedAffine {
            r2: -1.0,
            ..DecomposedAffine::IDENTITY
        };
        assert!(scale_factor(&d).is_err());
        // rotation and shear leave the area unchanged
        let d = DecomposedAffine {
            q: 0.7,
            phi: 1.3,
            ..DecomposedAffine::IDENTITY
        };
        assert_eq!(scale_factor(&d).unwrap(), 1.0);
    }

    #[test]
    fn area_identity_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10_000 {
            let d = DecomposedAffine {
                r1: rng.random_range(0.1..5.0),
                r2: rng.random_range(0.1..5.0),
                ..DecomposedAffine::IDENTITY
            };
            let sigma: f64 = rng.random_range(0.5..50.0);
            let s = scale_factor(&d).unwrap();
            let lhs = PI * (s * sigma).powi(2);
            let rhs = PI * d.r1 * d.r2 * sigma * sigma;
            assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1.0));
        }
    }

    #[test]
    fn estimate_examples() {
        let k = Keypoint::new(10.0, 20.0, 2.0, 0.0);
        assert_eq!(estimate_keypoint(&k, &DecomposedAffine::IDENTITY).unwrap(), k);

        let d = DecomposedAffine {
            tx: 5.0,
            ty: -3.0,
            ..DecomposedAffine::IDENTITY
        };
        let e = estimate_keypoint(&k, &d).unwrap();
        assert_eq!((e.x, e.y, e.sigma, e.theta), (15.0, 17.0, 2.0, 0.0));

        let k = Keypoint::new(0.0, 0.0, 2.0, 0.3);
        let d = DecomposedAffine {
            r1: 1.21,
            r2: 1.21,
            phi: 0.1,
            ..DecomposedAffine::IDENTITY
        };
        let e = estimate_keypoint(&k, &d).unwrap();
        assert!((e.sigma - 2.42).abs() < 1e-12);
        assert!((e.theta - 0.2).abs() < 1e-12);
        assert_eq!((e.x, e.y), (0.0, 0.0));
    }

    #[test]
    fn estimate_composes_for_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..2_000 {
            let rigid = |rng: &mut ChaCha8Rng| DecomposedAffine {
                phi: rng.random_range(-0.5..0.5),
                tx: rng.random_range(-20.0..20.0),
                ty: rng.random_range(-20.0..20.0),
                ..DecomposedAffine::IDENTITY
            };
            let d1 = rigid(&mut rng);
            let d2 = rigid(&mut rng);
            let k = Keypoint::new(
                rng.random_range(0.0..640.0),
                rng.random_range(0.0..480.0),
                rng.random_range(1.0..30.0),
                rng.random_range(-4.0..1.5),
            );
            let seq = estimate_keypoint(&estimate_keypoint(&k, &d1).unwrap(), &d2).unwrap();
            let joint = estimate_keypoint(&k, &compose_decomposed(&d1, &d2).unwrap()).unwrap();
            assert!((seq.x - joint.x).abs() < 1e-9);
            assert!((seq.y - joint.y).abs() < 1e-9);
            assert!((seq.sigma - joint.sigma).abs() < 1e-9);
            let dt = wrap_theta(seq.theta - joint.theta + PI) - PI;
            assert!(wrap_theta(dt).abs() < 1e-9 || (dt.abs() - 2.0 * PI).abs() < 1e-9);
        }
    }

    #[test]
    fn quantized_layout_is_48_bits() {
        assert_eq!(QUANTIZED_AFFINE_BITS, 48);
        assert_eq!(
            [R1_BITS, R2_BITS, Q_BITS, PHI_BITS, TX_BITS, TY_BITS],
            [7, 7, 7, 9, 9, 9]
        );
        let q = quantize_affine(&DecomposedAffine::IDENTITY);
        let mut w = BitWriter::new();
        q.write(&mut w);
        assert_eq!(w.bit_len(), 48);
        let bytes = w.into_bytes();
        let mut r = BitReader::new(&bytes);
        assert_eq!(QuantizedAffine::read(&mut r).unwrap(), q);
    }

    #[test]
    fn quantize_midpoint_examples() {
        let q = quantize_affine(&DecomposedAffine::IDENTITY);
        // 1.0 sits exactly between indices 63 and 64
        assert!(q.idx_r1 == 63 || q.idx_r1 == 64);
        let d = dequantize_affine(&q);
        assert!((d.r1 - 1.0).abs() <= 0.2 / 254.0 + 1e-15);
        assert!(d.phi.abs() <= 0.3 / (2.0 * 511.0) + 1e-15);
    }

    #[test]
    fn quantizer_clamps_and_counts() {
        let aq = AffineQuantizer::new(DEFAULT_T_MAX);
        let d = DecomposedAffine {
            r1: 1.5,
            r2: 0.5,
            q: 0.0,
            phi: 0.0,
            tx: 100.0,
            ty: 0.0,
        };
        let (q, clamps) = aq.quantize(&d);
        assert_eq!(clamps, 3);
        assert_eq!(q.idx_r1, 127);
        assert_eq!(q.idx_r2, 0);
        assert_eq!(q.idx_tx, 511);
    }

    #[test]
    fn reconstruction_is_fixed_point_on_every_r1_index() {
        let aq = AffineQuantizer::new(DEFAULT_T_MAX);
        for i in 0..128 {
            let v = aq.r1.dequantize(i);
            assert_eq!(aq.r1.quantize(v).0, i);
        }
        for i in 0..512 {
            assert_eq!(aq.phi.quantize(aq.phi.dequantize(i)).0, i);
            assert_eq!(aq.tx.quantize(aq.tx.dequantize(i)).0, i);
        }
    }

    #[test]
    fn grid_points_reconstruct_exactly() {
        let aq = AffineQuantizer::new(DEFAULT_T_MAX);
        let q = QuantizedAffine {
            idx_r1: 63,
            idx_r2: 64,
            idx_q: 64,
            idx_phi: 255,
            idx_tx: 256,
            idx_ty: 255,
        };
        let d = aq.dequantize(&q);
        assert_eq!(aq.quantize(&d), (q, 0));
        assert_eq!(aq.dequantize(&aq.quantize(&d).0), d);
    }

    proptest! {
        #[test]
        fn in_range_error_at_most_half_step(
            r1 in 0.9f64..1.1, r2 in 0.9f64..1.1, q in -0.05f64..0.05,
            phi in -0.15f64..0.15, tx in -64.0f64..64.0, ty in -64.0f64..64.0,
        ) {
            let aq = AffineQuantizer::new(DEFAULT_T_MAX);
            let d = DecomposedAffine { r1, r2, q, phi, tx, ty };
            let (qa, clamps) = aq.quantize(&d);
            prop_assert_eq!(clamps, 0);
            prop_assert!(qa.is_valid());
            let back = aq.dequantize(&qa);
            let tol = 1e-12;
            prop_assert!((back.r1 - r1).abs() <= aq.r1.step() / 2.0 + tol);
            prop_assert!((back.r2 - r2).abs() <= aq.r2.step() / 2.0 + tol);
            prop_assert!((back.q - q).abs() <= aq.q.step() / 2.0 + tol);
            prop_assert!((back.phi - phi).abs() <= aq.phi.step() / 2.0 + tol);
            prop_assert!((back.tx - tx).abs() <= aq.tx.step() / 2.0 + tol);
            prop_assert!((back.ty - ty).abs() <= aq.ty.step() / 2.0 + tol);
            prop_assert_eq!(aq.quantize(&back).0, qa);
        }

        #[test]
        fn quantizer_is_monotone(a in -0.3f64..0.3, b in -0.3f64..0.3) {
            let uq = UniformQuantizer::new(ROTATION_RANGE.0, ROTATION_RANGE.1, PHI_BITS);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(uq.quantize(lo).0 <= uq.quantize(hi).0);
        }
    }
}
