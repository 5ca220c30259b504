//! Value types shared by every stage of the codec.

use std::f64::consts::PI;

/// Lower end of the canonical orientation interval `[-1.5π, 0.5π)`.
pub const THETA_MIN: f64 = -1.5 * PI;
/// Upper (open) end of the canonical orientation interval.
pub const THETA_MAX: f64 = 0.5 * PI;

/// Default upper bound on features per frame.
pub const DEFAULT_MAX_FEATURES: usize = 200;

/// Wraps an angle into `[-1.5π, 0.5π)`.
pub fn wrap_theta(theta: f64) -> f64 {
    if (THETA_MIN..THETA_MAX).contains(&theta) {
        return theta;
    }
    let turn = 2.0 * PI;
    let mut w = (theta - THETA_MIN).rem_euclid(turn) + THETA_MIN;
    // rem_euclid can return exactly `turn` after rounding.
    if w >= THETA_MAX {
        w -= turn;
    }
    if w < THETA_MIN {
        w = THETA_MIN;
    }
    w
}

/// A detected interest point: location, scale and orientation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub sigma: f64,
    pub theta: f64,
}

impl Keypoint {
    /// Builds a keypoint with its orientation wrapped to the canonical interval.
    pub fn new(x: f64, y: f64, sigma: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            sigma,
            theta: wrap_theta(theta),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.sigma.is_finite() && self.sigma > 0.0 && self.theta.is_finite()
    }

    pub fn in_bounds(&self, width: u32, height: u32) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.x < width as f64 && self.y < height as f64
    }
}

/// Descriptor payload. Opaque to the codec apart from Euclidean matching.
pub type Descriptor = Vec<f32>;

#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub keypoint: Keypoint,
    pub descriptor: Option<Descriptor>,
}

impl Feature {
    pub fn new(keypoint: Keypoint, descriptor: Descriptor) -> Self {
        Self {
            keypoint,
            descriptor: Some(descriptor),
        }
    }
}

/// One frame's ordered feature list.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    pub frame_index: u64,
    pub width: u32,
    pub height: u32,
    pub features: Vec<Feature>,
}

impl FrameFeatures {
    pub fn new(frame_index: u64, width: u32, height: u32, features: Vec<Feature>) -> Self {
        Self {
            frame_index,
            width,
            height,
            features,
        }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn keypoints(&self) -> impl Iterator<Item = &Keypoint> + '_ {
        self.features.iter().map(|f| &f.keypoint)
    }

    /// Descriptor dimension, if every feature carries a descriptor of the same length.
    pub fn descriptor_dim(&self) -> Option<usize> {
        let mut dim = None;
        for f in &self.features {
            let d = f.descriptor.as_ref()?.len();
            match dim {
                None => dim = Some(d),
                Some(prev) if prev != d => return None,
                _ => {}
            }
        }
        dim
    }
}

/// Frame type tag; serialized as two bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrameType {
    /// Detection frame: every keypoint intra coded.
    D,
    /// Skip frame: keypoints predicted from the buffer with one affine transform.
    S,
    /// Update frame: mixes skip, inter and intra keypoints.
    U,
    /// Null frame: keypoint side information switched off.
    N,
}

impl FrameType {
    pub fn code(self) -> u8 {
        match self {
            FrameType::D => 0b00,
            FrameType::S => 0b01,
            FrameType::U => 0b10,
            FrameType::N => 0b11,
        }
    }

    pub fn from_code(code: u8) -> Self {
        match code & 0b11 {
            0b00 => FrameType::D,
            0b01 => FrameType::S,
            0b10 => FrameType::U,
            _ => FrameType::N,
        }
    }

    pub fn as_char(self) -> char {
        match self {
            FrameType::D => 'D',
            FrameType::S => 'S',
            FrameType::U => 'U',
            FrameType::N => 'N',
        }
    }
}

impl std::fmt::Display for FrameType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

/// Homogeneous 2D affine transform `[a b tx; c d ty; 0 0 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub tx: f64,
    pub ty: f64,
}

impl AffineTransform {
    pub const IDENTITY: Self = Self {
        a: 1.0,
        b: 0.0,
        c: 0.0,
        d: 1.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn new(a: f64, b: f64, c: f64, d: f64, tx: f64, ty: f64) -> Self {
        Self { a, b, c, d, tx, ty }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            tx,
            ty,
            ..Self::IDENTITY
        }
    }

    pub fn det(&self) -> f64 {
        self.a * self.d - self.b * self.c
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (self.a * x + self.b * y + self.tx, self.c * x + self.d * y + self.ty)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &AffineTransform) -> AffineTransform {
        AffineTransform {
            a: self.a * other.a + self.b * other.c,
            b: self.a * other.b + self.b * other.d,
            c: self.c * other.a + self.d * other.c,
            d: self.c * other.b + self.d * other.d,
            tx: self.a * other.tx + self.b * other.ty + self.tx,
            ty: self.c * other.tx + self.d * other.ty + self.ty,
        }
    }

    pub fn max_abs_diff(&self, other: &AffineTransform) -> f64 {
        [
            self.a - other.a,
            self.b - other.b,
            self.c - other.c,
            self.d - other.d,
            self.tx - other.tx,
            self.ty - other.ty,
        ]
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Scaling / shearing / rotation factorisation of the linear part plus translation.
///
/// The linear part is `diag(r1, r2) · [1 0; q 1] · [cos φ  sin φ; −sin φ  cos φ]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecomposedAffine {
    pub r1: f64,
    pub r2: f64,
    pub q: f64,
    pub phi: f64,
    pub tx: f64,
    pub ty: f64,
}

impl DecomposedAffine {
    pub const IDENTITY: Self = Self {
        r1: 1.0,
        r2: 1.0,
        q: 0.0,
        phi: 0.0,
        tx: 0.0,
        ty: 0.0,
    };
}
