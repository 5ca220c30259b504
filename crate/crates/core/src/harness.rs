//! Synthetic keypoint sequences with known motion, evaluation against ground
//! truth, and brute-force reference implementations used by the tests.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{csv_error, decode_stream, encode_stream, DecodedFrame, DecodedStream, EncodeOutput};
use crate::entropy::arith::ac_encode;
use crate::entropy::bitio::BitWriter;
use crate::entropy::models::AdaptiveModel;
use crate::error::{Error, Result};
use crate::framecontrol::{CodecConfig, Policy};
use crate::geometry::{estimate_keypoint, AffineQuantizer, DEFAULT_T_MAX};
use crate::kpquant::{
    decode_orientation, lattice_scale, LloydMaxCodebook, OrientationCode, ScaleCode, MAX_INTRA_SCALE, MAX_OCTAVE,
};
use crate::model::{wrap_theta, DecomposedAffine, Feature, FrameFeatures, FrameType, Keypoint, THETA_MAX, THETA_MIN};

/// Association radius between decoded and ground-truth keypoints, in pixels.
pub const MATCH_RADIUS: f64 = 3.0;

fn default_dim() -> usize {
    32
}

fn default_descriptor_noise() -> f64 {
    0.02
}

fn one() -> f64 {
    1.0
}

/// Constant per-frame motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionConfig {
    #[serde(default = "one")]
    pub r1: f64,
    #[serde(default = "one")]
    pub r2: f64,
    #[serde(default)]
    pub shear: f64,
    #[serde(default)]
    pub phi: f64,
    #[serde(default)]
    pub tx: f64,
    #[serde(default)]
    pub ty: f64,
    /// Round the motion onto the affine quantizer's reconstruction grid.
    #[serde(default)]
    pub snap: bool,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            r1: 1.0,
            r2: 1.0,
            shear: 0.0,
            phi: 0.0,
            tx: 0.0,
            ty: 0.0,
            snap: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Standard deviation of location jitter, pixels.
    #[serde(default)]
    pub location_px: f64,
    /// Standard deviation of relative scale jitter.
    #[serde(default)]
    pub scale_rel: f64,
    /// Standard deviation of orientation jitter, radians.
    #[serde(default)]
    pub orientation_rad: f64,
    /// Probability that a visible keypoint is missing from a frame.
    #[serde(default)]
    pub dropout: f64,
    /// Spurious features per frame, as a fraction of the keypoint count.
    #[serde(default)]
    pub distractors: f64,
}

/// Codec settings a scene file may override.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecOverrides {
    pub epsilon: Option<f64>,
    pub n_s: Option<usize>,
    pub nndr: Option<f64>,
    pub t_max: Option<f64>,
    pub seed: Option<u64>,
}

impl CodecOverrides {
    pub fn apply(&self, cfg: &mut CodecConfig) {
        if let Some(v) = self.epsilon {
            cfg.epsilon = v;
        }
        if let Some(v) = self.n_s {
            cfg.n_s = v;
        }
        if let Some(v) = self.nndr {
            cfg.nndr = v;
        }
        if let Some(v) = self.t_max {
            cfg.t_max = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
    }
}

/// Scene description as read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub seed: u64,
    pub frames: usize,
    pub width: u32,
    pub height: u32,
    pub keypoints: usize,
    #[serde(default = "default_dim")]
    pub descriptor_dim: usize,
    #[serde(default = "default_descriptor_noise")]
    pub descriptor_noise: f64,
    /// Replace the scene every this many frames (0 = never).
    #[serde(default)]
    pub scene_cut_every: usize,
    #[serde(default)]
    pub motion: MotionConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub codec: CodecOverrides,
}

impl SceneConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("scene: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Codec configuration for this scene, starting from `base`.
    pub fn codec_config(&self, base: &CodecConfig) -> CodecConfig {
        let mut cfg = base.clone();
        self.codec.apply(&mut cfg);
        cfg
    }
}

/// Ground truth and noise model of a synthetic sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub keypoints: usize,
    pub descriptor_dim: usize,
    pub descriptor_noise: f64,
    /// Motion applied between consecutive frames.
    pub motion: DecomposedAffine,
    pub noise: NoiseConfig,
    pub scene_cut_every: usize,
}

impl SyntheticScene {
    pub fn from_config(cfg: &SceneConfig) -> Result<Self> {
        let m = &cfg.motion;
        let mut motion = DecomposedAffine {
            r1: m.r1,
            r2: m.r2,
            q: m.shear,
            phi: m.phi,
            tx: m.tx,
            ty: m.ty,
        };
        if m.snap {
            motion = snap_to_quantizer(&motion, cfg.codec.t_max.unwrap_or(DEFAULT_T_MAX));
        }
        let scene = Self {
            seed: cfg.seed,
            width: cfg.width,
            height: cfg.height,
            keypoints: cfg.keypoints,
            descriptor_dim: cfg.descriptor_dim,
            descriptor_noise: cfg.descriptor_noise,
            motion,
            noise: cfg.noise.clone(),
            scene_cut_every: cfg.scene_cut_every,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        let n = &self.noise;
        let jitters = [
            n.location_px,
            n.scale_rel,
            n.orientation_rad,
            n.distractors,
            self.descriptor_noise,
        ];
        if jitters.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidConfig(
                "noise parameters must be finite and non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&n.dropout) {
            return Err(Error::InvalidConfig("dropout must lie in [0, 1)".into()));
        }
        if !(self.motion.r1 > 0.0 && self.motion.r2 > 0.0) {
            return Err(Error::InvalidConfig("motion must be invertible (r1, r2 > 0)".into()));
        }
        if self.width == 0 || self.height == 0 || self.descriptor_dim == 0 {
            return Err(Error::InvalidConfig(
                "frame size and descriptor dimension must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Rounds each motion parameter onto the affine quantizer's reconstruction grid.
pub fn snap_to_quantizer(d: &DecomposedAffine, t_max: f64) -> DecomposedAffine {
    let aq = AffineQuantizer::new(t_max);
    aq.dequantize(&aq.quantize(d).0)
}

/// Generated frames plus the noise-free visible keypoints of every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub frames: Vec<FrameFeatures>,
    pub truth: Vec<Vec<Keypoint>>,
}

struct Segment {
    keypoints: Vec<Keypoint>,
    descriptors: Vec<Vec<f32>>,
}

fn random_descriptor(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| rng.random::<f32>()).collect()
}

fn new_segment(scene: &SyntheticScene, rng: &mut ChaCha8Rng) -> Segment {
    let mut keypoints = Vec::with_capacity(scene.keypoints);
    let mut descriptors = Vec::with_capacity(scene.keypoints);
    for _ in 0..scene.keypoints {
        let o = rng.random_range(0..=3);
        let s = rng.random_range(0..=MAX_INTRA_SCALE as i32);
        let delta = rng.random_range(0.015..0.045) * if rng.random::<bool>() { 1.0 } else { -1.0 };
        keypoints.push(Keypoint::new(
            rng.random_range(0.0..scene.width as f64),
            rng.random_range(0.0..scene.height as f64),
            lattice_scale(o, s) * (1.0 + delta),
            rng.random_range(THETA_MIN..THETA_MAX),
        ));
        descriptors.push(random_descriptor(rng, scene.descriptor_dim));
    }
    Segment { keypoints, descriptors }
}

/// Produces `n_frames` frames. True correspondences share a base descriptor
/// plus small noise; distractors get fresh random descriptors.
pub fn generate(scene: &SyntheticScene, n_frames: usize) -> Result<Generated> {
    scene.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    let loc = Normal::new(0.0, scene.noise.location_px).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let scl = Normal::new(0.0, scene.noise.scale_rel).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let ori = Normal::new(0.0, scene.noise.orientation_rad).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let desc = Normal::new(0.0, scene.descriptor_noise).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let n_distractors = (scene.noise.distractors * scene.keypoints as f64).round() as usize;

    let mut segment = new_segment(scene, &mut rng);
    let mut current = segment.keypoints.clone();
    let mut frames = Vec::with_capacity(n_frames);
    let mut truth = Vec::with_capacity(n_frames);
    for k in 0..n_frames {
        if k > 0 {
            if scene.scene_cut_every > 0 && k % scene.scene_cut_every == 0 {
                segment = new_segment(scene, &mut rng);
                current = segment.keypoints.clone();
            } else {
                current = current
                    .iter()
                    .map(|p| estimate_keypoint(p, &scene.motion))
                    .collect::<Result<_>>()?;
            }
        }
        let mut visible = Vec::new();
        let mut features = Vec::new();
        for (p, base) in current.iter().zip(&segment.descriptors) {
            if !p.in_bounds(scene.width, scene.height) {
                continue;
            }
            visible.push(*p);
            if scene.noise.dropout > 0.0 && rng.random::<f64>() < scene.noise.dropout {
                continue;
            }
            let mut obs = Keypoint::new(
                p.x + loc.sample(&mut rng),
                p.y + loc.sample(&mut rng),
                p.sigma * (1.0 + scl.sample(&mut rng)),
                p.theta + ori.sample(&mut rng),
            );
            obs.x = obs.x.clamp(0.0, scene.width as f64 - 1e-6);
            obs.y = obs.y.clamp(0.0, scene.height as f64 - 1e-6);
            obs.sigma = obs.sigma.max(1e-3);
            let d = base.iter().map(|&v| v + desc.sample(&mut rng) as f32).collect();
            features.push(Feature::new(obs, d));
        }
        for _ in 0..n_distractors {
            let k = Keypoint::new(
                rng.random_range(0.0..scene.width as f64),
                rng.random_range(0.0..scene.height as f64),
                lattice_scale(rng.random_range(0..=3), rng.random_range(0..=2)),
                rng.random_range(THETA_MIN..THETA_MAX),
            );
            features.push(Feature::new(k, random_descriptor(&mut rng, scene.descriptor_dim)));
        }
        if n_distractors > 0 {
            features.shuffle(&mut rng);
        }
        frames.push(FrameFeatures::new(k as u64, scene.width, scene.height, features));
        truth.push(visible);
    }
    Ok(Generated { frames, truth })
}

/// Per-frame comparison of decoded keypoints with ground truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameMetrics {
    pub frame_index: u64,
    pub frame_type: char,
    pub bits: usize,
    pub truth_count: usize,
    pub decoded_count: usize,
    pub matched: usize,
    pub surviving_fraction: f64,
    pub mean_location_error: Option<f64>,
    pub mean_scale_error: Option<f64>,
    pub mean_orientation_error: Option<f64>,
    pub max_location_error: Option<f64>,
    pub max_scale_error: Option<f64>,
    pub max_orientation_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsSummary {
    pub frames: usize,
    pub d_frames: usize,
    pub s_frames: usize,
    pub u_frames: usize,
    pub n_frames: usize,
    /// D- plus U-frames.
    pub detection_frames: usize,
    pub total_bits: usize,
    pub mean_bits_per_frame: f64,
    /// Mean number of decoded keypoints associated with ground truth, per frame.
    pub avg_matches: f64,
    pub mean_surviving_fraction: f64,
    pub mean_location_error: f64,
    pub mean_scale_error: f64,
    pub mean_orientation_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub frames: Vec<FrameMetrics>,
    pub summary: MetricsSummary,
}

/// Absolute angular difference on the circle.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

/// Greedy one-to-one association by increasing distance within `radius`.
/// Returns `(decoded index, truth index, distance)`.
pub fn associate(decoded: &[Keypoint], truth: &[Keypoint], radius: f64) -> Vec<(usize, usize, f64)> {
    let mut pairs = Vec::new();
    for (i, d) in decoded.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            let dist = (d.x - t.x).hypot(d.y - t.y);
            if dist <= radius {
                pairs.push((i, j, dist));
            }
        }
    }
    pairs.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut used_d = vec![false; decoded.len()];
    let mut used_t = vec![false; truth.len()];
    pairs
        .into_iter()
        .filter(|&(i, j, _)| {
            let free = !used_d[i] && !used_t[j];
            if free {
                used_d[i] = true;
                used_t[j] = true;
            }
            free
        })
        .collect()
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn max(v: &[f64]) -> Option<f64> {
    v.iter().copied().reduce(f64::max)
}

/// Compares decoded frames with ground truth.
pub fn evaluate(decoded: &[DecodedFrame], truth: &[Vec<Keypoint>]) -> Result<MetricsReport> {
    if decoded.len() != truth.len() {
        return Err(Error::InvalidInput(format!(
            "{} decoded frames but {} ground-truth frames",
            decoded.len(),
            truth.len()
        )));
    }
    let mut frames = Vec::with_capacity(decoded.len());
    let (mut all_loc, mut all_scale, mut all_ori) = (Vec::new(), Vec::new(), Vec::new());
    for (d, t) in decoded.iter().zip(truth) {
        let pairs = associate(&d.keypoints, t, MATCH_RADIUS);
        let loc: Vec<f64> = pairs.iter().map(|p| p.2).collect();
        let scale: Vec<f64> = pairs
            .iter()
            .map(|&(i, j, _)| (d.keypoints[i].sigma - t[j].sigma).abs() / t[j].sigma)
            .collect();
        let ori: Vec<f64> = pairs
            .iter()
            .map(|&(i, j, _)| angle_diff(d.keypoints[i].theta, t[j].theta))
            .collect();
        let surviving = if t.is_empty() {
            1.0
        } else {
            pairs.len() as f64 / t.len() as f64
        };
        frames.push(FrameMetrics {
            frame_index: d.frame_index,
            frame_type: d.frame_type.as_char(),
            bits: d.bits,
            truth_count: t.len(),
            decoded_count: d.keypoints.len(),
            matched: pairs.len(),
            surviving_fraction: surviving,
            mean_location_error: mean(&loc),
            mean_scale_error: mean(&scale),
            mean_orientation_error: mean(&ori),
            max_location_error: max(&loc),
            max_scale_error: max(&scale),
            max_orientation_error: max(&ori),
        });
        all_loc.extend(loc);
        all_scale.extend(scale);
        all_ori.extend(ori);
    }
    let count = |ty: FrameType| frames.iter().filter(|f| f.frame_type == ty.as_char()).count();
    let n = frames.len().max(1) as f64;
    let total_bits: usize = frames.iter().map(|f| f.bits).sum();
    let summary = MetricsSummary {
        frames: frames.len(),
        d_frames: count(FrameType::D),
        s_frames: count(FrameType::S),
        u_frames: count(FrameType::U),
        n_frames: count(FrameType::N),
        detection_frames: count(FrameType::D) + count(FrameType::U),
        total_bits,
        mean_bits_per_frame: total_bits as f64 / n,
        avg_matches: frames.iter().map(|f| f.matched as f64).sum::<f64>() / n,
        mean_surviving_fraction: frames.iter().map(|f| f.surviving_fraction).sum::<f64>() / n,
        mean_location_error: mean(&all_loc).unwrap_or(0.0),
        mean_scale_error: mean(&all_scale).unwrap_or(0.0),
        mean_orientation_error: mean(&all_ori).unwrap_or(0.0),
    };
    Ok(MetricsReport { frames, summary })
}

impl MetricsReport {
    pub fn write_frames_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for f in &self.frames {
            w.serialize(f).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.serialize(&self.summary).map_err(csv_error)?;
        w.flush()?;
        Ok(())
    }
}

/// Outcome of generate → encode → decode → evaluate.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub generated: Generated,
    pub encoded: EncodeOutput,
    pub decoded: DecodedStream,
    pub metrics: MetricsReport,
}

pub fn simulate(scene: &SceneConfig, base: &CodecConfig) -> Result<Simulation> {
    let generated = generate(&SyntheticScene::from_config(scene)?, scene.frames)?;
    simulate_frames(generated, &scene.codec_config(base))
}

pub fn simulate_frames(generated: Generated, config: &CodecConfig) -> Result<Simulation> {
    let encoded = encode_stream(&generated.frames, config)?;
    let decoded = decode_stream(&encoded.bitstream.bytes)?;
    if decoded.frames != encoded.frames {
        return Err(Error::InvalidInput(
            "decoder diverged from the encoder's reconstruction".into(),
        ));
    }
    let metrics = evaluate(&decoded.frames, &generated.truth)?;
    Ok(Simulation {
        generated,
        encoded,
        decoded,
        metrics,
    })
}

/// Total stream payload under each frame-typing policy.
pub fn scheme_bits(frames: &[FrameFeatures], base: &CodecConfig) -> Result<[(Policy, usize); 3]> {
    let mut out = [
        (Policy::AllIntra, 0),
        (Policy::IntraThenUpdate, 0),
        (Policy::Adaptive, 0),
    ];
    for (policy, bits) in &mut out {
        let cfg = CodecConfig {
            policy: *policy,
            ..base.clone()
        };
        *bits = encode_stream(frames, &cfg)?.report.payload_bits();
    }
    Ok(out)
}

// Reference implementations. Deliberately naive; used only to cross-check
// the optimized paths.

/// Scale code by exhaustive search: nearest lattice point over a wide octave
/// range, then the nearest codebook level. `None` when the nearest lattice
/// point lies outside the codable octaves.
pub fn brute_force_lattice_scale(sigma: f64, codebook: &LloydMaxCodebook) -> Option<ScaleCode> {
    let mut best: Option<(i32, i32, f64)> = None;
    for o in -6..=14 {
        for s in 0..=MAX_INTRA_SCALE as i32 {
            let base = 2.0159 * 2f64.powf(o as f64 + s as f64 / 3.0);
            let err = (sigma - base).abs();
            if best.is_none_or(|b| err < b.2) {
                best = Some((o, s, err));
            }
        }
    }
    let (o, s, _) = best?;
    if !(0..=MAX_OCTAVE as i32).contains(&o) {
        return None;
    }
    let base = 2.0159 * 2f64.powf(o as f64 + s as f64 / 3.0);
    let offset = (sigma - base) / base;
    let mut bit = 0;
    for (i, l) in codebook.levels.iter().enumerate() {
        if (offset - l).abs() < (offset - codebook.levels[bit]).abs() {
            bit = i;
        }
    }
    Some(ScaleCode {
        octave: o as u8,
        intra_scale: s as u8,
        offset_bit: bit as u8,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientationSweep {
    /// Indices `e` for which coding the decoded angle does not return `e`.
    pub broken_fixed_points: usize,
    /// Largest circular reconstruction error seen.
    pub max_error: f64,
}

/// Checks every orientation index and a dense sweep of angles.
pub fn exhaustive_orientation_sweep(t: u32, samples: usize) -> OrientationSweep {
    use crate::kpquant::code_orientation;
    let levels = 1u32 << t;
    let broken_fixed_points = (0..levels)
        .filter(|&e| code_orientation(decode_orientation(OrientationCode { index: e }, t), t).index != e)
        .count();
    let mut max_error = 0.0f64;
    for i in 0..=samples {
        let theta = THETA_MIN + (THETA_MAX - THETA_MIN) * i as f64 / samples as f64;
        for th in [theta, wrap_theta(theta)] {
            let back = decode_orientation(code_orientation(th, t), t);
            max_error = max_error.max(angle_diff(th, back));
        }
    }
    OrientationSweep {
        broken_fixed_points,
        max_error,
    }
}

/// Nearest reconstruction level by linear search; ties go to the lower index.
pub fn uniform_quantizer_reference(v: f64, lo: f64, hi: f64, bits: u32) -> u32 {
    let n = 1u32 << bits;
    let mut best = 0;
    let mut best_err = f64::INFINITY;
    for i in 0..n {
        let level = lo + (hi - lo) * i as f64 / (n - 1) as f64;
        let err = (v.clamp(lo, hi) - level).abs();
        if err < best_err - 1e-12 {
            best = i;
            best_err = err;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyCheck {
    pub coded_bits: usize,
    /// Ideal code length under the adaptive model, recomputed from counts.
    pub model_bits: f64,
}

impl EntropyCheck {
    pub fn within(&self, slack_bits: f64) -> bool {
        self.coded_bits as f64 <= self.model_bits + slack_bits
    }
}

/// Codes `symbols` with a fresh adaptive model and recomputes the model's
/// sequential code length from raw counts.
pub fn entropy_bound_check(symbols: &[usize], alphabet: usize) -> EntropyCheck {
    let mut sink = BitWriter::new();
    ac_encode(symbols, &mut AdaptiveModel::new(alphabet), &mut sink);
    let mut counts = vec![1u64; alphabet];
    let mut model_bits = 0.0;
    for &s in symbols {
        let total: u64 = counts.iter().sum();
        model_bits -= (counts[s] as f64 / total as f64).log2();
        counts[s] += 1;
        if total + 1 > 1 << 16 {
            for c in &mut counts {
                *c = c.div_ceil(2);
            }
        }
    }
    EntropyCheck {
        coded_bits: sink.bit_len(),
        model_bits,
    }
}
