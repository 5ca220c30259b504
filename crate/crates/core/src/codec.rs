//! Stream encoder and decoder and the bit-exact record layout.
//!
//! A stream is a fixed 376-bit header followed by one record per frame. Every
//! record starts with a 2-bit frame type. Arithmetic-coded segments carry a
//! 16-bit length prefix so a reader can step over them without decoding.

use std::io::Write;

use serde::Serialize;

use crate::entropy::arith::{ArithDecoder, ArithEncoder};
use crate::entropy::bitio::{BitReader, BitWriter};
use crate::entropy::location::{code_location_multiset, decode_location_multiset};
use crate::entropy::models::{AdaptiveModel, ContextTable};
use crate::entropy::residual::{code_residual, decode_residual, ResidualModels};
use crate::error::{Error, Result};
use crate::framecontrol::{
    apply_nframe_rule, apply_residual, assign_modes, classify_frame, estimate_motion, s_frame_update, ClassifyInput,
    CodecConfig, CodecState, InterResidual, KeypointMode, PendingWindow, Policy, StreamParams, WindowDecision,
};
use crate::geometry::{estimate_all, QuantizedAffine, QUANTIZED_AFFINE_BITS};
use crate::kpquant::{
    code_orientation, code_scale, decode_orientation, decode_scale, from_q16, nearest_lattice, normalized_offset,
    quantize_location, representable_scale_range, to_q16, train_lloyd_max, LloydMaxCodebook, OrientationCode,
    QuantizedLocation, ScaleCode, MAX_OCTAVE, SCALE_CODE_BITS,
};
use crate::model::{DecomposedAffine, Descriptor, FrameFeatures, FrameType, Keypoint};

pub const MAGIC: [u8; 4] = *b"KPC1";
pub const VERSION: u8 = 1;
/// Identifies the arithmetic coder and model set.
pub const CODER_VARIANT: u8 = 1;
pub const HEADER_BITS: usize = 376;
pub const FRAME_TYPE_BITS: u32 = 2;
pub const SEGMENT_LENGTH_BITS: u32 = 16;
pub const COUNT_BITS: u32 = 16;
/// Serialized size of an S record.
pub const S_RECORD_BITS: usize = FRAME_TYPE_BITS as usize + QUANTIZED_AFFINE_BITS as usize;
/// Serialized size of an N record.
pub const N_RECORD_BITS: usize = FRAME_TYPE_BITS as usize;

/// Everything a decoder needs before the first record.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamHeader {
    pub width: u32,
    pub height: u32,
    pub max_features: usize,
    pub location_factor: f64,
    pub orientation_bits: u32,
    pub t_max: f64,
    /// Informative only.
    pub epsilon: f64,
    /// Informative only.
    pub n_s: usize,
    pub codebook: [f64; 2],
    pub context_range: usize,
    /// FNV-1a digest of the initial context table, 0 for uniform initial counts.
    pub context_table_id: u32,
    pub first_frame_index: u64,
    pub frame_count: u64,
}

fn q16_unsigned(v: f64) -> u64 {
    to_q16(v) as u32 as u64
}

impl StreamHeader {
    fn from_config(cfg: &CodecConfig, width: u32, height: u32, codebook: &LloydMaxCodebook) -> Self {
        let round = |v: f64| from_q16(to_q16(v));
        Self {
            width,
            height,
            max_features: cfg.max_features,
            location_factor: round(cfg.location_factor),
            orientation_bits: cfg.orientation_bits,
            t_max: round(cfg.t_max),
            epsilon: round(cfg.epsilon),
            n_s: cfg.n_s,
            codebook: [round(codebook.levels[0]), round(codebook.levels[1])],
            context_range: cfg.context_range,
            context_table_id: cfg.context_table.as_ref().map_or(0, ContextTable::id),
            first_frame_index: 0,
            frame_count: 0,
        }
    }

    pub fn write(&self, w: &mut BitWriter) {
        for b in MAGIC {
            w.write_bits(b as u64, 8);
        }
        w.write_bits(VERSION as u64, 8);
        w.write_bits(CODER_VARIANT as u64, 8);
        w.write_bits(self.width as u64, 16);
        w.write_bits(self.height as u64, 16);
        w.write_bits(self.max_features as u64, 16);
        w.write_bits(q16_unsigned(self.location_factor), 32);
        w.write_bits(self.orientation_bits as u64, 8);
        w.write_bits(q16_unsigned(self.t_max), 32);
        w.write_bits(q16_unsigned(self.epsilon), 32);
        w.write_bits(self.n_s as u64, 8);
        for l in self.codebook {
            w.write_bits(to_q16(l) as u32 as u64, 32);
        }
        w.write_bits(self.context_range as u64, 8);
        w.write_bits(self.context_table_id as u64, 32);
        w.write_bits(self.first_frame_index, 32);
        w.write_bits(self.frame_count, 32);
    }

    pub fn read(r: &mut BitReader<'_>) -> Result<Self> {
        let mut magic = [0u8; 4];
        for m in &mut magic {
            *m = r.read_bits(8)? as u8;
        }
        if magic != MAGIC {
            return Err(Error::corrupt(0, "bad magic"));
        }
        let version = r.read_bits(8)? as u8;
        if version != VERSION {
            return Err(Error::corrupt(32, format!("unsupported version {version}")));
        }
        let variant = r.read_bits(8)? as u8;
        if variant != CODER_VARIANT {
            return Err(Error::corrupt(40, format!("unsupported coder variant {variant}")));
        }
        let q16 = |v: u64| from_q16(v as u32 as i32);
        let h = Self {
            width: r.read_bits(16)? as u32,
            height: r.read_bits(16)? as u32,
            max_features: r.read_bits(16)? as usize,
            location_factor: from_q16_unsigned(r.read_bits(32)?),
            orientation_bits: r.read_bits(8)? as u32,
            t_max: from_q16_unsigned(r.read_bits(32)?),
            epsilon: from_q16_unsigned(r.read_bits(32)?),
            n_s: r.read_bits(8)? as usize,
            codebook: [q16(r.read_bits(32)?), q16(r.read_bits(32)?)],
            context_range: r.read_bits(8)? as usize,
            context_table_id: r.read_bits(32)? as u32,
            first_frame_index: r.read_bits(32)?,
            frame_count: r.read_bits(32)?,
        };
        let bad = |m: &str| Err(Error::corrupt(HEADER_BITS as u64, format!("invalid header: {m}")));
        if h.width == 0 || h.height == 0 {
            return bad("zero frame dimension");
        }
        if !(h.location_factor > 0.0) || !(h.t_max > 0.0) {
            return bad("non-positive quantizer parameter");
        }
        if !(3..=8).contains(&h.orientation_bits) {
            return bad("orientation bits out of range");
        }
        if h.context_range == 0 {
            return bad("zero context range");
        }
        if h.codebook[0] >= h.codebook[1] || h.codebook.iter().any(|l| l.abs() >= 1.0) {
            return bad("scale codebook levels not increasing inside (-1, 1)");
        }
        Ok(h)
    }

    /// Stream parameters implied by the header; `table` must match the header's table id.
    pub fn params(&self, table: Option<&ContextTable>) -> Result<StreamParams> {
        let context_table = match (self.context_table_id, table) {
            (0, _) => None,
            (id, Some(t)) if t.id() == id && t.context_range == self.context_range => Some(t.clone()),
            (id, _) => {
                return Err(Error::InvalidConfig(format!(
                    "stream needs context table {id:08x}, which was not supplied"
                )))
            }
        };
        Ok(StreamParams {
            width: self.width,
            height: self.height,
            max_features: self.max_features,
            location_factor: self.location_factor,
            orientation_bits: self.orientation_bits,
            t_max: self.t_max,
            codebook: LloydMaxCodebook::from_levels(self.codebook.to_vec()),
            context_range: self.context_range,
            context_table,
        })
    }
}

fn from_q16_unsigned(v: u64) -> f64 {
    v as f64 / 65536.0
}

/// One intra-coded keypoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IntraKeypoint {
    pub location: QuantizedLocation,
    pub scale: ScaleCode,
    pub orientation: OrientationCode,
}

/// Intra-coded keypoints in raster order of their locations.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IntraBlock {
    pub keypoints: Vec<IntraKeypoint>,
}

/// Quantizes `keypoints` for intra coding. Returns the block, the input index
/// of each coded keypoint (raster order, stable) and the number of clamps.
pub fn quantize_intra(keypoints: &[Keypoint], params: &StreamParams) -> Result<(IntraBlock, Vec<usize>, usize)> {
    let grid = params.grid();
    let f = params.location_factor;
    let (lo, hi) = representable_scale_range();
    let mut clamps = 0;
    let mut coded = Vec::with_capacity(keypoints.len());
    for k in keypoints {
        let raw = quantize_location(k, f);
        let location = grid.clamp(raw);
        if location != raw || k.x < -0.5 * f || k.y < -0.5 * f {
            clamps += 1;
        }
        let scale = match code_scale(k.sigma, &params.codebook) {
            Ok(s) => s,
            Err(Error::ScaleOutOfRange { .. }) if k.sigma > 0.0 && k.sigma.is_finite() => {
                clamps += 1;
                code_scale(k.sigma.clamp(lo, hi), &params.codebook)?
            }
            Err(e) => return Err(e),
        };
        coded.push(IntraKeypoint {
            location,
            scale,
            orientation: code_orientation(k.theta, params.orientation_bits),
        });
    }
    let mut order: Vec<usize> = (0..keypoints.len()).collect();
    order.sort_by_key(|&i| grid.index(coded[i].location));
    let block = IntraBlock {
        keypoints: order.iter().map(|&i| coded[i]).collect(),
    };
    Ok((block, order, clamps))
}

pub fn dequantize_intra(block: &IntraBlock, params: &StreamParams) -> Vec<Keypoint> {
    let f = params.location_factor;
    block
        .keypoints
        .iter()
        .map(|k| Keypoint {
            x: f * k.location.gx as f64,
            y: f * k.location.gy as f64,
            sigma: decode_scale(k.scale, &params.codebook),
            theta: decode_orientation(k.orientation, params.orientation_bits),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdateRecord {
    pub affine: QuantizedAffine,
    /// One mode per buffered keypoint.
    pub modes: Vec<KeypointMode>,
    pub residuals: Vec<InterResidual>,
    pub intra: IntraBlock,
}

/// One serialized frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameRecord {
    Detect(IntraBlock),
    Skip(QuantizedAffine),
    Update(UpdateRecord),
    Null,
}

impl FrameRecord {
    pub fn frame_type(&self) -> FrameType {
        match self {
            FrameRecord::Detect(_) => FrameType::D,
            FrameRecord::Skip(_) => FrameType::S,
            FrameRecord::Update(_) => FrameType::U,
            FrameRecord::Null => FrameType::N,
        }
    }
}

fn write_segment(w: &mut BitWriter, seg: BitWriter) -> Result<()> {
    let bits = seg.bit_len();
    if bits > u16::MAX as usize {
        return Err(Error::SegmentTooLong { bits });
    }
    w.write_bits(bits as u64, SEGMENT_LENGTH_BITS);
    w.append(&seg);
    Ok(())
}

fn read_segment<'a>(r: &mut BitReader<'a>) -> Result<BitReader<'a>> {
    let bits = r.read_bits(SEGMENT_LENGTH_BITS)? as usize;
    r.take(bits)
}

fn write_intra(w: &mut BitWriter, block: &IntraBlock, params: &StreamParams) -> Result<()> {
    let n = block.keypoints.len();
    if n > params.max_features {
        return Err(Error::InvalidInput(format!(
            "{n} intra keypoints exceed max_features = {}",
            params.max_features
        )));
    }
    w.write_bits(n as u64, COUNT_BITS);
    if n == 0 {
        return Ok(());
    }
    let locations: Vec<QuantizedLocation> = block.keypoints.iter().map(|k| k.location).collect();
    let mut enc = ArithEncoder::new();
    code_location_multiset(&mut enc, &locations, params.grid(), &mut params.context_model())?;
    write_segment(w, enc.finish())?;
    for k in &block.keypoints {
        w.write_bits(k.scale.packed(), SCALE_CODE_BITS);
        w.write_bits(k.orientation.index as u64, params.orientation_bits);
    }
    Ok(())
}

fn read_intra(r: &mut BitReader<'_>, params: &StreamParams) -> Result<IntraBlock> {
    let start = r.position() as u64;
    let n = r.read_bits(COUNT_BITS)? as usize;
    if n > params.max_features {
        return Err(Error::corrupt(start, format!("intra count {n} exceeds max_features")));
    }
    if n == 0 {
        return Ok(IntraBlock::default());
    }
    let seg = read_segment(r)?;
    let seg_start = seg.position() as u64;
    let mut dec = ArithDecoder::new(seg);
    let locations = decode_location_multiset(&mut dec, params.grid(), &mut params.context_model(), n)
        .map_err(|e| relocate(e, seg_start))?;
    if locations.len() != n {
        return Err(Error::corrupt(
            seg_start,
            format!("decoded {} locations, expected {n}", locations.len()),
        ));
    }
    let mut keypoints = Vec::with_capacity(n);
    for location in locations {
        let at = r.position() as u64;
        let scale = ScaleCode::from_packed(r.read_bits(SCALE_CODE_BITS)?)
            .ok_or_else(|| Error::corrupt(at, "invalid intra-octave scale index"))?;
        let orientation = OrientationCode {
            index: r.read_bits(params.orientation_bits)? as u32,
        };
        keypoints.push(IntraKeypoint {
            location,
            scale,
            orientation,
        });
    }
    Ok(IntraBlock { keypoints })
}

// Errors raised inside a segment without position information get the segment start.
fn relocate(e: Error, offset: u64) -> Error {
    match e {
        Error::CorruptStream { bit_offset: 0, reason } => Error::corrupt(offset, reason),
        other => other,
    }
}

pub fn write_record(w: &mut BitWriter, record: &FrameRecord, params: &StreamParams) -> Result<()> {
    w.write_bits(record.frame_type().code() as u64, FRAME_TYPE_BITS);
    match record {
        FrameRecord::Detect(block) => write_intra(w, block, params)?,
        FrameRecord::Skip(qa) => qa.write(w),
        FrameRecord::Update(u) => {
            u.affine.write(w);
            let mut enc = ArithEncoder::new();
            let mut mode_model = AdaptiveModel::new(3);
            for m in &u.modes {
                enc.encode(&mut mode_model, m.symbol());
            }
            let mut models = ResidualModels::new();
            for r in &u.residuals {
                code_residual(&mut enc, &mut models, r)?;
            }
            write_segment(w, enc.finish())?;
            write_intra(w, &u.intra, params)?;
        }
        FrameRecord::Null => {}
    }
    Ok(())
}

/// Reads one record. `buffer_len` is the decoder's current buffer size,
/// which fixes the number of mode symbols in an update record.
pub fn read_record(r: &mut BitReader<'_>, params: &StreamParams, buffer_len: usize) -> Result<FrameRecord> {
    let ty = FrameType::from_code(r.read_bits(FRAME_TYPE_BITS)? as u8);
    Ok(match ty {
        FrameType::D => FrameRecord::Detect(read_intra(r, params)?),
        FrameType::S => FrameRecord::Skip(QuantizedAffine::read(r)?),
        FrameType::U => {
            let affine = QuantizedAffine::read(r)?;
            let seg = read_segment(r)?;
            let seg_start = seg.position() as u64;
            let mut dec = ArithDecoder::new(seg);
            let mut mode_model = AdaptiveModel::new(3);
            let mut modes = Vec::with_capacity(buffer_len);
            for _ in 0..buffer_len {
                let s = dec.decode(&mut mode_model).map_err(|e| relocate(e, seg_start))?;
                modes.push(KeypointMode::from_symbol(s).ok_or_else(|| Error::corrupt(seg_start, "bad mode symbol"))?);
            }
            let mut models = ResidualModels::new();
            let mut residuals = Vec::new();
            for (i, m) in modes.iter().enumerate() {
                if *m == KeypointMode::Inter {
                    residuals.push(decode_residual(&mut dec, &mut models, i).map_err(|e| relocate(e, seg_start))?);
                }
            }
            let intra = read_intra(r, params)?;
            FrameRecord::Update(UpdateRecord {
                affine,
                modes,
                residuals,
                intra,
            })
        }
        FrameType::N => FrameRecord::Null,
    })
}

/// Applies a record to the decoded state and returns the frame's keypoints.
/// Encoder and decoder both go through here, which keeps them in lockstep.
pub fn apply_record(state: &mut CodecState, record: &FrameRecord, params: &StreamParams) -> Result<Vec<Keypoint>> {
    let ty = record.frame_type();
    if matches!(ty, FrameType::S | FrameType::U) && state.needs_detection() {
        return Err(Error::InvalidInput(format!(
            "{ty}-frame without a preceding D-, S- or U-frame"
        )));
    }
    let aq = params.affine_quantizer();
    state.buffer = match record {
        FrameRecord::Detect(block) => dequantize_intra(block, params),
        FrameRecord::Skip(qa) => s_frame_update(&state.buffer, &aq.dequantize(qa))?,
        FrameRecord::Update(u) => {
            if u.modes.len() != state.buffer.len() {
                return Err(Error::InvalidInput(format!(
                    "{} modes for a buffer of {}",
                    u.modes.len(),
                    state.buffer.len()
                )));
            }
            let est = estimate_all(&state.buffer, &aq.dequantize(&u.affine))?;
            let mut residuals = u.residuals.iter();
            let mut next = Vec::with_capacity(est.len() + u.intra.keypoints.len());
            for (k, mode) in est.iter().zip(&u.modes) {
                match mode {
                    KeypointMode::Skip => next.push(*k),
                    KeypointMode::Inter => {
                        let r = residuals
                            .next()
                            .ok_or_else(|| Error::InvalidInput("fewer residuals than inter modes".into()))?;
                        next.push(apply_residual(k, r, params));
                    }
                    KeypointMode::Drop => {}
                }
            }
            if residuals.next().is_some() {
                return Err(Error::InvalidInput("more residuals than inter modes".into()));
            }
            next.extend(dequantize_intra(&u.intra, params));
            next
        }
        FrameRecord::Null => Vec::new(),
    };
    state.last_type = Some(ty);
    Ok(state.buffer.clone())
}

/// Decoded keypoints of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedFrame {
    pub frame_index: u64,
    pub frame_type: FrameType,
    /// Empty for N-frames, which signal a fallback to local detection.
    pub keypoints: Vec<Keypoint>,
    /// Record size in bits.
    pub bits: usize,
}

/// Per-frame encoder statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameReport {
    pub frame_index: u64,
    pub frame_type: char,
    /// Type before the stability rule was applied.
    pub provisional: char,
    pub bits: usize,
    pub skip: usize,
    pub inter: usize,
    pub intra: usize,
    pub dropped: usize,
    pub keypoints: usize,
    pub clamp_events: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EncodeReport {
    pub header_bits: usize,
    pub total_bits: usize,
    pub frames: Vec<FrameReport>,
}

impl EncodeReport {
    /// Frame types in order, e.g. `"DSSSS"`.
    pub fn type_string(&self) -> String {
        self.frames.iter().map(|f| f.frame_type).collect()
    }

    pub fn count(&self, ty: FrameType) -> usize {
        self.frames.iter().filter(|f| f.frame_type == ty.as_char()).count()
    }

    pub fn payload_bits(&self) -> usize {
        self.frames.iter().map(|f| f.bits).sum()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for f in &self.frames {
            w.serialize(f).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidInput(format!("csv: {other:?}")),
    }
}

/// Serialized stream. `bit_len` excludes the zero padding of the last byte.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub bytes: Vec<u8>,
    pub bit_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodeOutput {
    pub bitstream: Bitstream,
    pub report: EncodeReport,
    /// Keypoints as the decoder will reconstruct them.
    pub frames: Vec<DecodedFrame>,
    pub records: Vec<FrameRecord>,
}

struct Queued {
    frame: FrameFeatures,
    descriptors: Vec<Descriptor>,
    motion: Option<DecomposedAffine>,
    provisional: FrameType,
}

/// Streaming encoder. Frames are committed with at most `n_s` frames of
/// latency; [`Encoder::finish`] flushes the rest.
pub struct Encoder {
    config: CodecConfig,
    header: StreamHeader,
    params: StreamParams,
    state: CodecState,
    /// Parallel to `state.buffer`; never transmitted.
    descriptors: Vec<Descriptor>,
    anchor: Vec<Descriptor>,
    prev_raw: Option<FrameFeatures>,
    pending: Vec<Queued>,
    body: BitWriter,
    report: EncodeReport,
    frames: Vec<DecodedFrame>,
    records: Vec<FrameRecord>,
    next_index: Option<u64>,
}

impl Encoder {
    pub fn new(config: CodecConfig, width: u32, height: u32, codebook: &LloydMaxCodebook) -> Result<Self> {
        config.validate()?;
        if width == 0 || height == 0 || width > u16::MAX as u32 || height > u16::MAX as u32 {
            return Err(Error::InvalidConfig(format!(
                "frame size {width}x{height} outside 1..=65535"
            )));
        }
        let cb = LloydMaxCodebook::from_levels(codebook.levels.clone());
        let probe = CodecConfig {
            codebook: Some(cb.clone()),
            ..config.clone()
        };
        probe.validate()?;
        let header = StreamHeader::from_config(&config, width, height, &cb);
        let params = header.params(config.context_table.as_ref())?;
        Ok(Self {
            config,
            header,
            params,
            state: CodecState::default(),
            descriptors: Vec::new(),
            anchor: Vec::new(),
            prev_raw: None,
            pending: Vec::new(),
            body: BitWriter::new(),
            report: EncodeReport::default(),
            frames: Vec::new(),
            records: Vec::new(),
            next_index: None,
        })
    }

    pub fn params(&self) -> &StreamParams {
        &self.params
    }

    fn check_frame(&self, frame: &FrameFeatures) -> Result<Vec<Descriptor>> {
        if frame.width != self.header.width || frame.height != self.header.height {
            return Err(Error::InvalidInput(format!(
                "frame is {}x{}, stream is {}x{}",
                frame.width, frame.height, self.header.width, self.header.height
            )));
        }
        if let Some(next) = self.next_index {
            if frame.frame_index != next {
                return Err(Error::InvalidInput(format!(
                    "expected frame {next}, got {}",
                    frame.frame_index
                )));
            }
        } else if frame.frame_index > u32::MAX as u64 {
            return Err(Error::InvalidInput("first frame index exceeds 32 bits".into()));
        }
        if frame.len() > self.params.max_features {
            return Err(Error::InvalidInput(format!(
                "{} features exceed max_features = {}",
                frame.len(),
                self.params.max_features
            )));
        }
        if let Some(k) = frame.keypoints().find(|k| !k.is_valid()) {
            return Err(Error::InvalidInput(format!("invalid keypoint {k:?}")));
        }
        // all-intra coding never matches, so descriptors are optional there
        if self.config.policy != Policy::AllIntra && !frame.is_empty() && frame.descriptor_dim().is_none() {
            return Err(Error::MissingDescriptors);
        }
        Ok(frame
            .features
            .iter()
            .map(|f| f.descriptor.clone().unwrap_or_default())
            .collect())
    }

    /// Adds the next frame; may commit zero or more earlier frames.
    pub fn push(&mut self, frame: FrameFeatures) -> Result<()> {
        let index = frame.frame_index;
        self.push_inner(frame).map_err(|e| e.at_frame(index))
    }

    fn push_inner(&mut self, frame: FrameFeatures) -> Result<()> {
        let descriptors = self.check_frame(&frame)?;
        if self.next_index.is_none() {
            self.header.first_frame_index = frame.frame_index;
        }
        self.next_index = Some(frame.frame_index + 1);
        let motion = match (&self.prev_raw, self.config.policy) {
            (_, Policy::AllIntra) | (None, _) => None,
            (Some(prev), _) => match estimate_motion(prev, &frame, &self.config) {
                Ok(m) => Some(m),
                Err(Error::FitFailure(_) | Error::DegenerateTransform { .. } | Error::InvalidDecomposition(_)) => None,
                Err(e) => return Err(e),
            },
        };
        self.prev_raw = Some(frame.clone());
        self.process(Queued {
            frame,
            descriptors,
            motion,
            provisional: FrameType::D,
        })
    }

    fn process(&mut self, mut q: Queued) -> Result<()> {
        let force = self.pending.is_empty() && self.state.needs_detection();
        q.provisional = match self.config.policy {
            Policy::AllIntra => FrameType::D,
            Policy::IntraThenUpdate => {
                if force || q.motion.is_none() {
                    FrameType::D
                } else {
                    FrameType::U
                }
            }
            Policy::Adaptive => {
                let anchor = self.pending.first().map_or(&self.anchor, |l| &l.descriptors);
                classify_frame(
                    &q.descriptors,
                    &ClassifyInput {
                        force_detection: force,
                        motion: q.motion.as_ref(),
                        anchor,
                        epsilon: self.config.epsilon,
                        nndr: self.config.nndr,
                    },
                )
            }
        };
        if self.config.policy != Policy::Adaptive || self.config.n_s == 0 {
            let ty = q.provisional;
            return self.commit(q, ty);
        }
        if self.pending.is_empty() {
            if q.provisional == FrameType::S {
                return self.commit(q, FrameType::S);
            }
            self.pending.push(q);
            return Ok(());
        }
        self.pending.push(q);
        let window = PendingWindow {
            leader: self.pending[0].provisional,
            successors: self.pending[1..].iter().map(|q| q.provisional).collect(),
        };
        match apply_nframe_rule(&window, self.config.n_s) {
            WindowDecision::Wait => Ok(()),
            WindowDecision::Commit => self.flush_window(),
            WindowDecision::Null => {
                let mut drained = std::mem::take(&mut self.pending).into_iter();
                let leader = drained.next().expect("window has a leader");
                self.commit(leader, FrameType::N)?;
                for q in drained {
                    self.process(q)?;
                }
                Ok(())
            }
        }
    }

    /// Commits the pending leader as classified and its successors as S.
    fn flush_window(&mut self) -> Result<()> {
        let mut drained = std::mem::take(&mut self.pending).into_iter();
        if let Some(leader) = drained.next() {
            let ty = leader.provisional;
            self.commit(leader, ty)?;
        }
        for q in drained {
            self.commit(q, FrameType::S)?;
        }
        Ok(())
    }

    fn commit(&mut self, q: Queued, ty: FrameType) -> Result<()> {
        let index = q.frame.frame_index;
        self.commit_inner(q, ty).map_err(|e| e.at_frame(index))
    }

    fn commit_inner(&mut self, q: Queued, ty: FrameType) -> Result<()> {
        let aq = self.params.affine_quantizer();
        let motion = || {
            q.motion
                .ok_or_else(|| Error::InvalidInput(format!("{ty}-frame committed without a motion estimate")))
        };
        let mut report = FrameReport {
            frame_index: q.frame.frame_index,
            frame_type: ty.as_char(),
            provisional: q.provisional.as_char(),
            bits: 0,
            skip: 0,
            inter: 0,
            intra: 0,
            dropped: 0,
            keypoints: 0,
            clamp_events: 0,
        };
        let (record, descriptors) = match ty {
            FrameType::D => {
                let kps: Vec<Keypoint> = q.frame.keypoints().copied().collect();
                let (block, order, clamps) = quantize_intra(&kps, &self.params)?;
                report.intra = block.keypoints.len();
                report.clamp_events = clamps;
                let descs = order.iter().map(|&i| q.descriptors[i].clone()).collect();
                (FrameRecord::Detect(block), descs)
            }
            FrameType::S => {
                let (qa, clamps) = aq.quantize(&motion()?);
                report.skip = self.state.buffer.len();
                report.clamp_events = clamps;
                (FrameRecord::Skip(qa), self.descriptors.clone())
            }
            FrameType::U => {
                let (qa, clamps) = aq.quantize(&motion()?);
                let dq = aq.dequantize(&qa);
                let a = assign_modes(
                    &q.frame,
                    &self.state.buffer,
                    &self.descriptors,
                    &dq,
                    &self.params,
                    self.config.nndr,
                )?;
                let new_kps: Vec<Keypoint> = a.intra.iter().map(|&j| q.frame.features[j].keypoint).collect();
                let (block, order, intra_clamps) = quantize_intra(&new_kps, &self.params)?;
                let mut descs: Vec<Descriptor> =
                    a.matched.iter().flatten().map(|&j| q.descriptors[j].clone()).collect();
                descs.extend(order.iter().map(|&i| q.descriptors[a.intra[i]].clone()));
                report.skip = a.count(KeypointMode::Skip);
                report.inter = a.count(KeypointMode::Inter);
                report.dropped = a.count(KeypointMode::Drop);
                report.intra = block.keypoints.len();
                report.clamp_events = clamps + intra_clamps;
                let rec = FrameRecord::Update(UpdateRecord {
                    affine: qa,
                    modes: a.modes,
                    residuals: a.residuals,
                    intra: block,
                });
                (rec, descs)
            }
            FrameType::N => (FrameRecord::Null, Vec::new()),
        };
        let before = self.body.bit_len();
        write_record(&mut self.body, &record, &self.params)?;
        report.bits = self.body.bit_len() - before;
        let keypoints = apply_record(&mut self.state, &record, &self.params)?;
        debug_assert_eq!(keypoints.len(), descriptors.len());
        self.descriptors = descriptors;
        match ty {
            FrameType::D | FrameType::U => self.anchor = q.descriptors,
            FrameType::N => self.anchor.clear(),
            FrameType::S => {}
        }
        report.keypoints = keypoints.len();
        self.frames.push(DecodedFrame {
            frame_index: q.frame.frame_index,
            frame_type: ty,
            keypoints,
            bits: report.bits,
        });
        self.records.push(record);
        self.report.frames.push(report);
        Ok(())
    }

    /// Flushes pending frames and serializes the stream.
    pub fn finish(mut self) -> Result<EncodeOutput> {
        self.flush_window()?;
        self.header.frame_count = self.frames.len() as u64;
        if self.header.first_frame_index + self.header.frame_count > u32::MAX as u64 + 1 {
            return Err(Error::InvalidInput("frame indices exceed 32 bits".into()));
        }
        let mut w = BitWriter::new();
        self.header.write(&mut w);
        debug_assert_eq!(w.bit_len(), HEADER_BITS);
        w.append(&self.body);
        self.report.header_bits = HEADER_BITS;
        self.report.total_bits = w.bit_len();
        let bit_len = w.bit_len();
        Ok(EncodeOutput {
            bitstream: Bitstream {
                bytes: w.into_bytes(),
                bit_len,
            },
            report: self.report,
            frames: self.frames,
            records: self.records,
        })
    }
}

/// Normalized scale offsets of every in-range keypoint, for codebook training.
pub fn scale_offset_samples(frames: &[FrameFeatures]) -> Vec<f64> {
    frames
        .iter()
        .flat_map(|f| f.keypoints())
        .filter(|k| k.sigma > 0.0 && k.sigma.is_finite())
        .filter_map(|k| {
            let (o, s) = nearest_lattice(k.sigma);
            (0..=MAX_OCTAVE as i32)
                .contains(&o)
                .then(|| normalized_offset(k.sigma, o, s))
        })
        .collect()
}

/// Two-level scale codebook trained on `frames`, or the fallback when there
/// is too little data.
pub fn train_codebook(frames: &[FrameFeatures]) -> LloydMaxCodebook {
    train_lloyd_max(&scale_offset_samples(frames), 2).unwrap_or_else(|_| LloydMaxCodebook::fallback())
}

/// Encodes a whole sequence. Frame size comes from the first frame.
pub fn encode_stream(frames: &[FrameFeatures], config: &CodecConfig) -> Result<EncodeOutput> {
    let (width, height) = frames.first().map_or((1, 1), |f| (f.width, f.height));
    let codebook = match &config.codebook {
        Some(cb) => cb.clone(),
        None => train_codebook(frames),
    };
    let mut enc = Encoder::new(config.clone(), width, height, &codebook)?;
    for f in frames {
        enc.push(f.clone())?;
    }
    enc.finish()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedStream {
    pub header: StreamHeader,
    pub frames: Vec<DecodedFrame>,
    pub records: Vec<FrameRecord>,
}

pub fn decode_stream(bytes: &[u8]) -> Result<DecodedStream> {
    decode_stream_with(bytes, None)
}

/// Decodes a stream whose header may reference an initial context table.
pub fn decode_stream_with(bytes: &[u8], table: Option<&ContextTable>) -> Result<DecodedStream> {
    let mut r = BitReader::new(bytes);
    let header = StreamHeader::read(&mut r)?;
    let params = header.params(table)?;
    let mut state = CodecState::default();
    let mut frames = Vec::with_capacity(header.frame_count.min(1 << 20) as usize);
    let mut records = Vec::with_capacity(frames.capacity());
    for i in 0..header.frame_count {
        let frame_index = header.first_frame_index + i;
        let start = r.position();
        let record = read_record(&mut r, &params, state.buffer.len()).map_err(|e| e.at_frame(frame_index))?;
        let keypoints = apply_record(&mut state, &record, &params).map_err(|e| match e {
            Error::InvalidInput(reason) => Error::corrupt(start as u64, reason).at_frame(frame_index),
            other => other.at_frame(frame_index),
        })?;
        frames.push(DecodedFrame {
            frame_index,
            frame_type: record.frame_type(),
            keypoints,
            bits: r.position() - start,
        });
        records.push(record);
    }
    check_trailer(&r)?;
    Ok(DecodedStream {
        header,
        frames,
        records,
    })
}

fn check_trailer(r: &BitReader<'_>) -> Result<()> {
    let mut rest = r.clone();
    if rest.remaining() >= 8 {
        return Err(Error::corrupt(r.position() as u64, "trailing data after last frame"));
    }
    while !rest.is_exhausted() {
        if rest.read_bit()? {
            return Err(Error::corrupt(r.position() as u64, "non-zero padding"));
        }
    }
    Ok(())
}

/// Size and type of one record, found without decoding its payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordInfo {
    pub frame_index: u64,
    pub frame_type: FrameType,
    pub bit_offset: usize,
    pub bits: usize,
    /// Intra keypoint count (D and U records).
    pub intra_count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamSummary {
    pub header: StreamHeader,
    pub records: Vec<RecordInfo>,
}

fn skip_intra(r: &mut BitReader<'_>, header: &StreamHeader) -> Result<usize> {
    let n = r.read_bits(COUNT_BITS)? as usize;
    if n > 0 {
        read_segment(r)?;
        r.skip(n * (SCALE_CODE_BITS + header.orientation_bits) as usize)?;
    }
    Ok(n)
}

/// Walks the record structure using the length prefixes only.
pub fn inspect(bytes: &[u8]) -> Result<StreamSummary> {
    let mut r = BitReader::new(bytes);
    let header = StreamHeader::read(&mut r)?;
    let mut records = Vec::new();
    for i in 0..header.frame_count {
        let frame_index = header.first_frame_index + i;
        let start = r.position();
        let walk = |r: &mut BitReader<'_>| -> Result<(FrameType, Option<usize>)> {
            let ty = FrameType::from_code(r.read_bits(FRAME_TYPE_BITS)? as u8);
            let intra = match ty {
                FrameType::D => Some(skip_intra(r, &header)?),
                FrameType::S => {
                    r.skip(QUANTIZED_AFFINE_BITS as usize)?;
                    None
                }
                FrameType::U => {
                    r.skip(QUANTIZED_AFFINE_BITS as usize)?;
                    read_segment(r)?;
                    Some(skip_intra(r, &header)?)
                }
                FrameType::N => None,
            };
            Ok((ty, intra))
        };
        let (frame_type, intra_count) = walk(&mut r).map_err(|e| e.at_frame(frame_index))?;
        records.push(RecordInfo {
            frame_index,
            frame_type,
            bit_offset: start,
            bits: r.position() - start,
            intra_count,
        });
    }
    check_trailer(&r)?;
    Ok(StreamSummary { header, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::quantize_affine;
    use crate::kpquant::LocationGrid;
    use crate::model::Feature;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params() -> StreamParams {
        StreamHeader::from_config(&CodecConfig::default(), 64, 48, &LloydMaxCodebook::fallback())
            .params(None)
            .unwrap()
    }

    fn random_frame(rng: &mut ChaCha8Rng, index: u64, n: usize) -> FrameFeatures {
        let features = (0..n)
            .map(|_| {
                let k = Keypoint::new(
                    rng.random_range(0.0..64.0),
                    rng.random_range(0.0..48.0),
                    rng.random_range(2.0..60.0),
                    rng.random_range(-3.0..3.0),
                );
                Feature::new(k, (0..8).map(|_| rng.random::<f32>()).collect())
            })
            .collect();
        FrameFeatures::new(index, 64, 48, features)
    }

    #[test]
    fn header_is_376_bits_and_roundtrips() {
        let mut h = StreamHeader::from_config(&CodecConfig::default(), 640, 480, &LloydMaxCodebook::fallback());
        h.first_frame_index = 7;
        h.frame_count = 12;
        let mut w = BitWriter::new();
        h.write(&mut w);
        assert_eq!(w.bit_len(), HEADER_BITS);
        let bytes = w.into_bytes();
        assert_eq!(&bytes[..4], b"KPC1");
        assert_eq!(StreamHeader::read(&mut BitReader::new(&bytes)).unwrap(), h);
    }

    #[test]
    fn header_rejects_unknown_version() {
        let h = StreamHeader::from_config(&CodecConfig::default(), 640, 480, &LloydMaxCodebook::fallback());
        let mut w = BitWriter::new();
        h.write(&mut w);
        let mut bytes = w.into_bytes();
        bytes[4] = 2;
        assert!(matches!(
            StreamHeader::read(&mut BitReader::new(&bytes)),
            Err(Error::CorruptStream { bit_offset: 32, .. })
        ));
    }

    #[test]
    fn s_and_n_record_sizes() {
        let p = params();
        let mut w = BitWriter::new();
        write_record(
            &mut w,
            &FrameRecord::Skip(quantize_affine(&DecomposedAffine::IDENTITY)),
            &p,
        )
        .unwrap();
        assert_eq!(w.bit_len(), S_RECORD_BITS);
        assert_eq!(S_RECORD_BITS, 50);
        let mut w = BitWriter::new();
        write_record(&mut w, &FrameRecord::Null, &p).unwrap();
        assert_eq!(w.bit_len(), N_RECORD_BITS);
        assert_eq!(N_RECORD_BITS, 2);
    }

    #[test]
    fn intra_quantization_sorts_by_raster_and_clamps() {
        let p = params();
        let kps = vec![
            Keypoint::new(10.0, 5.0, 3.0, 0.0),
            Keypoint::new(2.0, 1.0, 3.0, 0.0),
            Keypoint::new(100.0, 5.0, 1000.0, 0.0),
        ];
        let (block, order, clamps) = quantize_intra(&kps, &p).unwrap();
        assert_eq!(order, vec![1, 0, 2]);
        assert_eq!(clamps, 2);
        assert_eq!(block.keypoints[2].location, QuantizedLocation::new(63, 5));
    }

    #[test]
    fn records_roundtrip_through_bits() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let kps: Vec<Keypoint> = random_frame(&mut rng, 0, 30).keypoints().copied().collect();
        let (block, _, _) = quantize_intra(&kps, &p).unwrap();
        let modes: Vec<KeypointMode> = (0..12)
            .map(|i| [KeypointMode::Skip, KeypointMode::Inter, KeypointMode::Drop][i % 3])
            .collect();
        let residuals = (0..12)
            .filter(|i| i % 3 == 1)
            .map(|i| InterResidual {
                dx: 3,
                dy: -2,
                scale_idx: 1,
                dtheta_idx: 1,
                prev_ref: i,
            })
            .collect();
        let records = vec![
            FrameRecord::Detect(block.clone()),
            FrameRecord::Detect(IntraBlock::default()),
            FrameRecord::Update(UpdateRecord {
                affine: quantize_affine(&DecomposedAffine::IDENTITY),
                modes,
                residuals,
                intra: block,
            }),
            FrameRecord::Null,
        ];
        let mut w = BitWriter::new();
        for rec in &records {
            write_record(&mut w, rec, &p).unwrap();
        }
        let len = w.bit_len();
        let bytes = w.into_bytes();
        let mut r = BitReader::with_bit_len(&bytes, len);
        for rec in &records {
            let n = if let FrameRecord::Update(u) = rec {
                u.modes.len()
            } else {
                0
            };
            assert_eq!(&read_record(&mut r, &p, n).unwrap(), rec);
        }
        assert!(r.is_exhausted());
    }

    #[test]
    fn s_or_u_after_null_is_rejected() {
        let p = params();
        let mut st = CodecState::default();
        let skip = FrameRecord::Skip(quantize_affine(&DecomposedAffine::IDENTITY));
        assert!(apply_record(&mut st, &skip, &p).is_err());
        apply_record(&mut st, &FrameRecord::Detect(IntraBlock::default()), &p).unwrap();
        apply_record(&mut st, &skip, &p).unwrap();
        apply_record(&mut st, &FrameRecord::Null, &p).unwrap();
        assert!(apply_record(&mut st, &skip, &p).is_err());
    }

    #[test]
    fn single_frame_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_frame(&mut rng, 0, 20);
        let out = encode_stream(&[f], &CodecConfig::default()).unwrap();
        assert_eq!(out.report.type_string(), "D");
        assert_eq!(out.report.payload_bits() + HEADER_BITS, out.bitstream.bit_len);
        let dec = decode_stream(&out.bitstream.bytes).unwrap();
        assert_eq!(dec.frames, out.frames);
    }

    #[test]
    fn empty_stream_is_header_only() {
        let out = encode_stream(&[], &CodecConfig::default()).unwrap();
        assert_eq!(out.bitstream.bit_len, HEADER_BITS);
        assert!(decode_stream(&out.bitstream.bytes).unwrap().frames.is_empty());
    }

    #[test]
    fn unrelated_frames_roundtrip_under_every_policy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frames: Vec<FrameFeatures> = (0..6).map(|i| random_frame(&mut rng, i, 25)).collect();
        for policy in [Policy::Adaptive, Policy::AllIntra, Policy::IntraThenUpdate] {
            let cfg = CodecConfig {
                policy,
                ..Default::default()
            };
            let out = encode_stream(&frames, &cfg).unwrap();
            let dec = decode_stream(&out.bitstream.bytes).unwrap();
            assert_eq!(dec.frames, out.frames, "{policy:?}");
            let summary = inspect(&out.bitstream.bytes).unwrap();
            let bits: Vec<usize> = summary.records.iter().map(|r| r.bits).collect();
            let reported: Vec<usize> = out.report.frames.iter().map(|f| f.bits).collect();
            assert_eq!(bits, reported);
        }
    }

    #[test]
    fn gaps_in_frame_indices_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frames = vec![random_frame(&mut rng, 0, 5), random_frame(&mut rng, 2, 5)];
        let err = encode_stream(&frames, &CodecConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Frame { frame_index: 2, .. }));
    }

    #[test]
    fn truncation_reports_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frames: Vec<FrameFeatures> = (0..3).map(|i| random_frame(&mut rng, i, 25)).collect();
        let out = encode_stream(&frames, &CodecConfig::default()).unwrap();
        let cut = &out.bitstream.bytes[..out.bitstream.bytes.len() / 2];
        match decode_stream(cut).unwrap_err().root() {
            Error::CorruptStream { bit_offset, .. } => assert!(*bit_offset <= cut.len() as u64 * 8),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn grid_covers_frame() {
        assert_eq!(params().grid(), LocationGrid { width: 64, height: 48 });
    }
}
