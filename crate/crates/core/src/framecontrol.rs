//! Frame-type decisions (D/S/U/N) and per-keypoint mode assignment for
//! update frames.

use crate::entropy::models::{ContextModel, ContextTable, DEFAULT_CONTEXT_RANGE};
use crate::error::{Error, Result};
use crate::geometry::{decompose, estimate_all, AffineQuantizer, DEFAULT_T_MAX};
use crate::kpquant::{
    code_orientation, decode_orientation, orientation_period, quantize_location, LloydMaxCodebook, LocationGrid,
    OrientationCode, DEFAULT_LOCATION_FACTOR, DEFAULT_ORIENTATION_BITS,
};
use crate::matching::{match_descriptors, nndr_match, ransac_affine, MatchPair, RansacConfig, DEFAULT_NNDR};
use crate::model::{DecomposedAffine, Descriptor, FrameFeatures, FrameType, Keypoint, DEFAULT_MAX_FEATURES};

/// Largest per-axis location residual, in grid units.
pub const MAX_LOCATION_RESIDUAL: i32 = 16;
/// Largest relative scale change coded as inter.
pub const SCALE_RATIO_LIMIT: f64 = 0.3;
pub const SCALE_RATIO_LEVELS: u8 = 5;
/// Scale-ratio index meaning "unchanged".
pub const SCALE_RATIO_ZERO: u8 = 2;
/// Largest orientation index difference coded as inter.
pub const MAX_ORIENTATION_RESIDUAL: i32 = 4;
pub const DEFAULT_EPSILON: f64 = 0.8;
pub const DEFAULT_NS: usize = 4;

// Absorbs rounding in (σ - σ̂)/σ̂ so that a nominal 0.30 change stays inter.
const SCALE_RATIO_SLACK: f64 = 1e-9;

/// Reconstruction value of a scale-ratio index.
pub fn scale_ratio_level(idx: u8) -> f64 {
    let step = 2.0 * SCALE_RATIO_LIMIT / (SCALE_RATIO_LEVELS - 1) as f64;
    (idx as f64 - SCALE_RATIO_ZERO as f64) * step
}

/// Differential update of one buffered keypoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InterResidual {
    pub dx: i32,
    pub dy: i32,
    pub scale_idx: u8,
    pub dtheta_idx: i32,
    /// Buffer position of the predicted keypoint.
    pub prev_ref: usize,
}

impl InterResidual {
    /// True when the residual is small enough for the keypoint to be skipped.
    pub fn is_skip(&self) -> bool {
        self.dx.abs() <= 1 && self.dy.abs() <= 1 && self.scale_idx == SCALE_RATIO_ZERO && self.dtheta_idx == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KeypointMode {
    Skip,
    Inter,
    Drop,
}

impl KeypointMode {
    pub fn symbol(self) -> usize {
        match self {
            KeypointMode::Skip => 0,
            KeypointMode::Inter => 1,
            KeypointMode::Drop => 2,
        }
    }

    pub fn from_symbol(s: usize) -> Option<Self> {
        match s {
            0 => Some(KeypointMode::Skip),
            1 => Some(KeypointMode::Inter),
            2 => Some(KeypointMode::Drop),
            _ => None,
        }
    }
}

/// Outcome of mode assignment for one update frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModeAssignment {
    /// One mode per buffered keypoint, in buffer order.
    pub modes: Vec<KeypointMode>,
    /// Residuals of the inter-mode keypoints, in buffer order.
    pub residuals: Vec<InterResidual>,
    /// Current-frame feature indices to code as intra, ascending.
    pub intra: Vec<usize>,
    /// For each buffered keypoint, the current feature it was matched to (kept entries only).
    pub matched: Vec<Option<usize>>,
}

impl ModeAssignment {
    pub fn count(&self, mode: KeypointMode) -> usize {
        self.modes.iter().filter(|&&m| m == mode).count()
    }
}

/// How frames are allowed to be typed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Policy {
    /// D/S/U classification with the N-frame rule.
    #[default]
    Adaptive,
    /// Every frame is a D-frame.
    AllIntra,
    /// D for the first frame (and whenever motion fails), U otherwise.
    IntraThenUpdate,
}

/// Encoder configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecConfig {
    /// Fraction of anchor features that must match for an S-frame.
    pub epsilon: f64,
    /// Stability window length.
    pub n_s: usize,
    pub nndr: f64,
    pub location_factor: f64,
    pub orientation_bits: u32,
    pub t_max: f64,
    pub seed: u64,
    pub max_features: usize,
    pub context_range: usize,
    /// Fixed scale-offset codebook; trained on the stream when `None`.
    pub codebook: Option<LloydMaxCodebook>,
    pub context_table: Option<ContextTable>,
    pub r_tol: f64,
    pub ransac_iterations: usize,
    pub min_inliers: usize,
    pub policy: Policy,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            n_s: DEFAULT_NS,
            nndr: DEFAULT_NNDR,
            location_factor: DEFAULT_LOCATION_FACTOR,
            orientation_bits: DEFAULT_ORIENTATION_BITS,
            t_max: DEFAULT_T_MAX,
            seed: 0,
            max_features: DEFAULT_MAX_FEATURES,
            context_range: DEFAULT_CONTEXT_RANGE,
            codebook: None,
            context_table: None,
            r_tol: 3.0,
            ransac_iterations: 1000,
            min_inliers: 8,
            policy: Policy::Adaptive,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return bad(format!("epsilon must lie in (0, 1], got {}", self.epsilon));
        }
        if self.n_s > u8::MAX as usize {
            return bad(format!("n_s must be at most 255, got {}", self.n_s));
        }
        if !(self.nndr > 0.0 && self.nndr <= 1.0) {
            return bad(format!("nndr threshold must lie in (0, 1], got {}", self.nndr));
        }
        if !(self.location_factor > 0.0 && self.location_factor <= 256.0) {
            return bad(format!(
                "location factor must lie in (0, 256], got {}",
                self.location_factor
            ));
        }
        if !(3..=8).contains(&self.orientation_bits) {
            return bad(format!(
                "orientation bits must lie in 3..=8, got {}",
                self.orientation_bits
            ));
        }
        if !(self.t_max > 0.0 && self.t_max <= 4096.0) {
            return bad(format!("t_max must lie in (0, 4096], got {}", self.t_max));
        }
        if self.max_features == 0 || self.max_features > u16::MAX as usize {
            return bad(format!("max_features must lie in 1..=65535, got {}", self.max_features));
        }
        if !(1..=255).contains(&self.context_range) {
            return bad(format!("context range must lie in 1..=255, got {}", self.context_range));
        }
        if let Some(cb) = &self.codebook {
            if cb.levels.len() != 2 || cb.levels.iter().any(|l| !l.is_finite() || l.abs() >= 1.0) {
                return bad("scale codebook must have two finite levels in (-1, 1)".into());
            }
        }
        if let Some(t) = &self.context_table {
            if t.context_range != self.context_range {
                return bad("context table range differs from context_range".into());
            }
        }
        if !(self.r_tol > 0.0) || self.ransac_iterations == 0 || self.min_inliers < 3 {
            return bad("RANSAC needs r_tol > 0, at least one iteration and min_inliers >= 3".into());
        }
        Ok(())
    }

    pub fn ransac(&self, frame_index: u64) -> RansacConfig {
        RansacConfig {
            r_tol: self.r_tol,
            max_iterations: self.ransac_iterations,
            confidence: 0.99,
            min_inliers: self.min_inliers,
            seed: self.seed ^ frame_index.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        }
    }
}

/// Parameters fixed for a whole stream and known to both encoder and decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamParams {
    pub width: u32,
    pub height: u32,
    pub max_features: usize,
    pub location_factor: f64,
    pub orientation_bits: u32,
    pub t_max: f64,
    pub codebook: LloydMaxCodebook,
    pub context_range: usize,
    pub context_table: Option<ContextTable>,
}

impl StreamParams {
    pub fn grid(&self) -> LocationGrid {
        LocationGrid::for_frame(self.width, self.height, self.location_factor)
    }

    pub fn affine_quantizer(&self) -> AffineQuantizer {
        AffineQuantizer::new(self.t_max)
    }

    pub fn context_model(&self) -> ContextModel {
        match &self.context_table {
            Some(t) => t.model(),
            None => ContextModel::new(self.context_range),
        }
    }
}

/// Decoded state shared by encoder and decoder.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CodecState {
    /// Decoded keypoints of the previous frame.
    pub buffer: Vec<Keypoint>,
    /// Type of the last committed frame; `None` before the first.
    pub last_type: Option<FrameType>,
}

impl CodecState {
    /// Whether the next frame must be a D-frame.
    pub fn needs_detection(&self) -> bool {
        matches!(self.last_type, None | Some(FrameType::N))
    }
}

fn reduce_orientation(diff: i64, t: u32) -> i32 {
    let p = orientation_period(t);
    let r = diff.rem_euclid(p);
    (if r > p / 2 { r - p } else { r }) as i32
}

/// Residual of `cur` against its prediction `est`, or `None` when any
/// component is too large for inter coding.
pub fn compute_residual(
    est: &Keypoint,
    cur: &Keypoint,
    params: &StreamParams,
    prev_ref: usize,
) -> Option<InterResidual> {
    let f = params.location_factor;
    let q = params.grid().clamp(quantize_location(cur, f));
    let dx = q.gx as i64 - (est.x / f).round() as i64;
    let dy = q.gy as i64 - (est.y / f).round() as i64;
    let lim = MAX_LOCATION_RESIDUAL as i64;
    if dx.abs() > lim || dy.abs() > lim {
        return None;
    }
    let ratio = (cur.sigma - est.sigma) / est.sigma;
    if !(ratio.abs() <= SCALE_RATIO_LIMIT + SCALE_RATIO_SLACK) {
        return None;
    }
    let step = scale_ratio_level(SCALE_RATIO_ZERO + 1);
    let scale_idx =
        ((ratio / step).round() as i32 + SCALE_RATIO_ZERO as i32).clamp(0, SCALE_RATIO_LEVELS as i32 - 1) as u8;
    let t = params.orientation_bits;
    let e_cur = code_orientation(cur.theta, t).index as i64;
    let e_est = code_orientation(est.theta, t).index as i64;
    let dtheta_idx = reduce_orientation(e_cur - e_est, t);
    if dtheta_idx.abs() > MAX_ORIENTATION_RESIDUAL {
        return None;
    }
    Some(InterResidual {
        dx: dx as i32,
        dy: dy as i32,
        scale_idx,
        dtheta_idx,
        prev_ref,
    })
}

/// Decoder-side reconstruction of an inter keypoint.
pub fn apply_residual(est: &Keypoint, r: &InterResidual, params: &StreamParams) -> Keypoint {
    let f = params.location_factor;
    let t = params.orientation_bits;
    let e_est = code_orientation(est.theta, t).index as i64;
    let e = (e_est + r.dtheta_idx as i64).rem_euclid(orientation_period(t));
    Keypoint {
        x: f * ((est.x / f).round() + r.dx as f64),
        y: f * ((est.y / f).round() + r.dy as f64),
        sigma: est.sigma * (1.0 + scale_ratio_level(r.scale_idx)),
        theta: decode_orientation(OrientationCode { index: e as u32 }, t),
    }
}

/// Inter-frame motion between two raw frames, as a decomposed affine.
pub fn estimate_motion(prev: &FrameFeatures, curr: &FrameFeatures, cfg: &CodecConfig) -> Result<DecomposedAffine> {
    let matches = nndr_match(prev, curr, cfg.nndr)?;
    let fit = ransac_affine(&matches, prev, curr, &cfg.ransac(curr.frame_index))?;
    decompose(&fit.transform)
}

/// Number of distinct anchor features matched by the current frame.
pub fn anchor_matches(anchor: &[Descriptor], curr: &[Descriptor], nndr: f64) -> usize {
    let mut hit = vec![false; anchor.len()];
    for m in match_descriptors(anchor, curr, nndr) {
        hit[m.idx_prev] = true;
    }
    hit.into_iter().filter(|&h| h).count()
}

/// Inputs to the provisional frame-type decision.
#[derive(Debug, Clone, Copy)]
pub struct ClassifyInput<'a> {
    /// First frame of the stream or first frame after an N commit.
    pub force_detection: bool,
    /// Motion from the previous raw frame, if estimation succeeded.
    pub motion: Option<&'a DecomposedAffine>,
    /// Descriptors of the anchor (the previous D- or U-frame).
    pub anchor: &'a [Descriptor],
    pub epsilon: f64,
    pub nndr: f64,
}

/// Provisional D/S/U type of `curr`.
pub fn classify_frame(curr: &[Descriptor], input: &ClassifyInput<'_>) -> FrameType {
    if input.force_detection || input.motion.is_none() {
        return FrameType::D;
    }
    let matched = anchor_matches(input.anchor, curr, input.nndr) as f64;
    // inclusive; the slack keeps ε·N from rounding just above an integer count
    if matched + 1e-9 >= input.epsilon * input.anchor.len() as f64 {
        FrameType::S
    } else {
        FrameType::U
    }
}

/// A provisional D/U frame awaiting its stability window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingWindow {
    pub leader: FrameType,
    /// Provisional types of the frames after the leader.
    pub successors: Vec<FrameType>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowDecision {
    /// Not enough successors yet.
    Wait,
    /// Leader keeps its type; every successor commits as S.
    Commit,
    /// Leader becomes N; successors are reclassified, the first as a D-frame.
    Null,
}

/// Resolves a pending window under the stability rule.
pub fn apply_nframe_rule(window: &PendingWindow, n_s: usize) -> WindowDecision {
    if window.successors.iter().any(|&t| t != FrameType::S) {
        WindowDecision::Null
    } else if window.successors.len() >= n_s {
        WindowDecision::Commit
    } else {
        WindowDecision::Wait
    }
}

/// Mode decision for an update frame. `buffer` and `buffer_desc` are the
/// decoded previous keypoints and their descriptors; `dq` is the dequantized
/// transform the decoder will use.
pub fn assign_modes(
    curr: &FrameFeatures,
    buffer: &[Keypoint],
    buffer_desc: &[Descriptor],
    dq: &DecomposedAffine,
    params: &StreamParams,
    nndr: f64,
) -> Result<ModeAssignment> {
    if buffer.len() != buffer_desc.len() {
        return Err(Error::InvalidInput(
            "buffer and descriptor list differ in length".into(),
        ));
    }
    let curr_desc: Vec<&[f32]> = curr
        .features
        .iter()
        .map(|f| f.descriptor.as_deref().ok_or(Error::MissingDescriptors))
        .collect::<Result<_>>()?;
    let matches = match_descriptors(buffer_desc, &curr_desc, nndr);

    // one current feature per buffered keypoint: lowest ratio wins
    let mut best: Vec<Option<MatchPair>> = vec![None; buffer.len()];
    for m in matches {
        let slot = &mut best[m.idx_prev];
        if slot.is_none_or(|b| m.dist_ratio < b.dist_ratio) {
            *slot = Some(m);
        }
    }

    let estimates = estimate_all(buffer, dq)?;
    let mut kept = vec![false; curr.len()];
    let mut out = ModeAssignment::default();
    for (i, est) in estimates.iter().enumerate() {
        let residual = best[i].and_then(|m| {
            compute_residual(est, &curr.features[m.idx_curr].keypoint, params, i).map(|r| (m.idx_curr, r))
        });
        match residual {
            Some((j, r)) => {
                kept[j] = true;
                out.matched.push(Some(j));
                if r.is_skip() {
                    out.modes.push(KeypointMode::Skip);
                } else {
                    out.modes.push(KeypointMode::Inter);
                    out.residuals.push(r);
                }
            }
            None => {
                out.matched.push(None);
                out.modes.push(KeypointMode::Drop);
            }
        }
    }
    out.intra = (0..curr.len()).filter(|&j| !kept[j]).collect();
    Ok(out)
}

/// Buffer after an S-frame: every keypoint propagated by `dq`.
pub fn s_frame_update(buffer: &[Keypoint], dq: &DecomposedAffine) -> Result<Vec<Keypoint>> {
    estimate_all(buffer, dq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Feature;
    use std::f64::consts::PI;

    fn params() -> StreamParams {
        StreamParams {
            width: 640,
            height: 480,
            max_features: 200,
            location_factor: 1.0,
            orientation_bits: 6,
            t_max: DEFAULT_T_MAX,
            codebook: LloydMaxCodebook::fallback(),
            context_range: DEFAULT_CONTEXT_RANGE,
            context_table: None,
        }
    }

    fn kp(x: f64, y: f64, sigma: f64, theta: f64) -> Keypoint {
        Keypoint { x, y, sigma, theta }
    }

    fn orientation_step() -> f64 {
        2.0 * PI / 63.0
    }

    #[test]
    fn scale_ratio_levels() {
        let levels: Vec<f64> = (0..5).map(scale_ratio_level).collect();
        let expected = [-0.3, -0.15, 0.0, 0.15, 0.3];
        for (a, b) in levels.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn displaced_keypoint_gives_single_inter_residual() {
        let est = kp(100.0, 200.0, 4.0, 0.0);
        let cur = kp(105.0, 197.0, 4.0, 0.0);
        let r = compute_residual(&est, &cur, &params(), 3).unwrap();
        assert_eq!(
            r,
            InterResidual {
                dx: 5,
                dy: -3,
                scale_idx: 2,
                dtheta_idx: 0,
                prev_ref: 3
            }
        );
        assert!(!r.is_skip());
        let back = apply_residual(&est, &r, &params());
        assert_eq!((back.x, back.y, back.sigma), (105.0, 197.0, 4.0));
    }

    #[test]
    fn clipping_boundaries() {
        let p = params();
        let est = kp(100.0, 100.0, 4.0, 0.0);
        assert!(compute_residual(&est, &kp(116.0, 100.0, 4.0, 0.0), &p, 0).is_some());
        assert!(compute_residual(&est, &kp(117.0, 100.0, 4.0, 0.0), &p, 0).is_none());
        assert!(compute_residual(&est, &kp(100.0, 84.0, 4.0, 0.0), &p, 0).is_some());
        assert!(compute_residual(&est, &kp(100.0, 83.0, 4.0, 0.0), &p, 0).is_none());
        let r = compute_residual(&est, &kp(100.0, 100.0, 4.0 * 1.30, 0.0), &p, 0).unwrap();
        assert_eq!(r.scale_idx, 4);
        assert!(compute_residual(&est, &kp(100.0, 100.0, 4.0 * 1.31, 0.0), &p, 0).is_none());
        let r = compute_residual(&est, &kp(100.0, 100.0, 4.0 * 0.70, 0.0), &p, 0).unwrap();
        assert_eq!(r.scale_idx, 0);
        assert!(compute_residual(&est, &kp(100.0, 100.0, 4.0 * 0.69, 0.0), &p, 0).is_none());
        let r = compute_residual(&est, &kp(100.0, 100.0, 4.0, 4.0 * orientation_step()), &p, 0).unwrap();
        assert_eq!(r.dtheta_idx, 4);
        assert!(compute_residual(&est, &kp(100.0, 100.0, 4.0, 5.0 * orientation_step()), &p, 0).is_none());
        assert!(compute_residual(&est, &kp(100.0, 100.0, 4.0, -5.0 * orientation_step()), &p, 0).is_none());
    }

    #[test]
    fn orientation_residual_wraps_around_the_circle() {
        let p = params();
        let est = kp(10.0, 10.0, 4.0, 0.5 * PI - 0.5 * orientation_step());
        let cur = kp(10.0, 10.0, 4.0, -1.5 * PI + 1.0 * orientation_step());
        let r = compute_residual(&est, &cur, &p, 0).unwrap();
        assert!(r.dtheta_idx.abs() <= 2, "{r:?}");
        let back = apply_residual(&est, &r, &p);
        let e = code_orientation(back.theta, 6).index as i64;
        let c = code_orientation(cur.theta, 6).index as i64;
        assert_eq!((e - c).rem_euclid(63), 0);
    }

    #[test]
    fn skip_condition() {
        let s = |dx, dy, si, dt| {
            InterResidual {
                dx,
                dy,
                scale_idx: si,
                dtheta_idx: dt,
                prev_ref: 0,
            }
            .is_skip()
        };
        assert!(s(1, -1, 2, 0));
        assert!(!s(2, 0, 2, 0));
        assert!(!s(0, 0, 3, 0));
        assert!(!s(0, 0, 2, 1));
    }

    fn window(leader: FrameType, successors: &[FrameType]) -> PendingWindow {
        PendingWindow {
            leader,
            successors: successors.to_vec(),
        }
    }

    #[test]
    fn nframe_rule() {
        use FrameType::*;
        assert_eq!(apply_nframe_rule(&window(D, &[S, S, S, S]), 4), WindowDecision::Commit);
        assert_eq!(apply_nframe_rule(&window(D, &[S, S]), 4), WindowDecision::Wait);
        assert_eq!(apply_nframe_rule(&window(D, &[S, S, U]), 4), WindowDecision::Null);
        assert_eq!(apply_nframe_rule(&window(U, &[D]), 4), WindowDecision::Null);
        assert_eq!(apply_nframe_rule(&window(U, &[]), 0), WindowDecision::Commit);
    }

    fn descs(n: usize) -> Vec<Descriptor> {
        (0..n).map(|i| vec![i as f32, (i * i % 7) as f32, 1.0]).collect()
    }

    fn classify(
        curr: &[Descriptor],
        anchor: &[Descriptor],
        epsilon: f64,
        motion: Option<&DecomposedAffine>,
        force: bool,
    ) -> FrameType {
        let input = ClassifyInput {
            force_detection: force,
            motion,
            anchor,
            epsilon,
            nndr: 0.8,
        };
        classify_frame(curr, &input)
    }

    #[test]
    fn classification_threshold_is_inclusive() {
        let anchor = descs(200);
        let m = Some(&DecomposedAffine::IDENTITY);
        assert_eq!(classify(&anchor[..160], &anchor, 0.8, m, false), FrameType::S);
        assert_eq!(classify(&anchor[..159], &anchor, 0.8, m, false), FrameType::U);
        assert_eq!(classify(&anchor, &anchor, 0.8, m, true), FrameType::D);
        assert_eq!(classify(&anchor, &anchor, 0.8, None, false), FrameType::D);
    }

    #[test]
    fn epsilon_one_requires_every_anchor_feature() {
        let anchor = descs(50);
        let m = Some(&DecomposedAffine::IDENTITY);
        assert_eq!(classify(&anchor[..49], &anchor, 1.0, m, false), FrameType::U);
        assert_eq!(classify(&anchor, &anchor, 1.0, m, false), FrameType::S);
    }

    fn frame(kps: &[Keypoint], d: &[Descriptor]) -> FrameFeatures {
        FrameFeatures::new(
            1,
            640,
            480,
            kps.iter().zip(d).map(|(k, d)| Feature::new(*k, d.clone())).collect(),
        )
    }

    #[test]
    fn perfect_prediction_is_all_skip() {
        let buffer: Vec<Keypoint> = (0..20)
            .map(|i| kp(20.0 + 25.0 * i as f64, 30.0 + 9.0 * i as f64, 3.0, 0.1))
            .collect();
        let d = descs(20);
        let motion = DecomposedAffine {
            tx: 4.0,
            ty: -2.0,
            ..DecomposedAffine::IDENTITY
        };
        let curr = frame(&s_frame_update(&buffer, &motion).unwrap(), &d);
        let a = assign_modes(&curr, &buffer, &d, &motion, &params(), 0.8).unwrap();
        assert_eq!(a.count(KeypointMode::Skip), 20);
        assert!(a.residuals.is_empty() && a.intra.is_empty());
    }

    #[test]
    fn modes_partition_buffer_and_frame() {
        let buffer: Vec<Keypoint> = (0..10).map(|i| kp(50.0 + 40.0 * i as f64, 100.0, 3.0, 0.0)).collect();
        let d = descs(12);
        let mut cur: Vec<Keypoint> = buffer.clone();
        cur[2].x += 5.0;
        cur[2].y -= 3.0;
        cur[4].x += 17.0;
        cur.push(kp(5.0, 5.0, 3.0, 0.0));
        cur.push(kp(7.0, 5.0, 3.0, 0.0));
        // buffered keypoint 9 disappears
        let mut cd: Vec<Descriptor> = d[..9].to_vec();
        cd.extend_from_slice(&d[10..12]);
        cur.remove(9);
        let curr = frame(&cur, &cd);
        let a = assign_modes(&curr, &buffer, &d[..10], &DecomposedAffine::IDENTITY, &params(), 0.8).unwrap();
        assert_eq!(a.modes.len(), 10);
        assert_eq!(a.count(KeypointMode::Inter), 1);
        assert_eq!(
            a.residuals[0],
            InterResidual {
                dx: 5,
                dy: -3,
                scale_idx: 2,
                dtheta_idx: 0,
                prev_ref: 2
            }
        );
        assert_eq!(a.modes[4], KeypointMode::Drop);
        assert_eq!(a.modes[9], KeypointMode::Drop);
        assert_eq!(a.count(KeypointMode::Skip), 7);
        let kept = a.matched.iter().flatten().count();
        assert_eq!(a.intra.len(), curr.len() - kept);
        assert_eq!(a.intra, vec![4, 9, 10]);
    }

    #[test]
    fn s_update_identity_and_translation() {
        let b = vec![kp(1.0, 2.0, 3.0, 0.2), kp(10.0, 20.0, 5.0, -1.0)];
        assert_eq!(s_frame_update(&b, &DecomposedAffine::IDENTITY).unwrap(), b);
        let t = DecomposedAffine {
            tx: 2.5,
            ty: -1.0,
            ..DecomposedAffine::IDENTITY
        };
        let moved = s_frame_update(&b, &t).unwrap();
        for (m, o) in moved.iter().zip(&b) {
            assert_eq!((m.x - o.x, m.y - o.y), (2.5, -1.0));
        }
    }

    #[test]
    fn config_validation() {
        assert!(CodecConfig::default().validate().is_ok());
        for eps in [0.0, 1.01, f64::NAN] {
            let c = CodecConfig {
                epsilon: eps,
                ..Default::default()
            };
            assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        }
        assert!(CodecConfig {
            epsilon: 1.0,
            ..Default::default()
        }
        .validate()
        .is_ok());
        assert!(CodecConfig {
            n_s: 256,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
