//! `kpcodec`: encode, decode, inspect and simulate keypoint side-information streams.

mod featfile;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kpcodec::codec::{decode_stream, encode_stream, inspect, RecordInfo, StreamSummary};
use kpcodec::framecontrol::CodecConfig;
use kpcodec::harness::{simulate, SceneConfig};
use kpcodec::{Error, FrameFeatures, FrameType};

use featfile::{FeatureFile, ParseError};

#[derive(Parser)]
#[command(name = "kpcodec", version, about = "Keypoint side-information codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode a feature file into a .kpb stream.
    Encode {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fraction of anchor features that must match for an S-frame.
        #[arg(long)]
        epsilon: Option<f64>,
        /// Stability window for the N-frame rule.
        #[arg(long)]
        ns: Option<usize>,
        /// Nearest-neighbour distance ratio threshold.
        #[arg(long)]
        nndr: Option<f64>,
        /// RANSAC seed.
        #[arg(long, env = "KPCODEC_SEED")]
        seed: Option<u64>,
        /// Translation range of the affine quantizer, pixels.
        #[arg(long)]
        tmax: Option<f64>,
        /// Per-frame CSV report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Decode a .kpb stream into a feature file without descriptors.
    Decode {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the header and record table of a .kpb stream.
    Inspect {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Run a synthetic scene through encode, decode and evaluation.
    Simulate {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: ParseError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Codec(#[from] Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Parse { .. } | CliError::Io { .. } => 2,
            CliError::Codec(e) => match e.root() {
                Error::CorruptStream { .. } => 3,
                Error::DegenerateTransform { .. }
                | Error::MissingDescriptors
                | Error::ScaleOutOfRange { .. }
                | Error::InsufficientSamples { .. }
                | Error::LocationOutOfGrid { .. }
                | Error::InvalidConfig(_)
                | Error::InvalidInput(_)
                | Error::Io(_) => 2,
                _ => 4,
            },
        }
    }
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T, CliError> {
    r.map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    io(path, std::fs::read(path))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    io(path, File::create(path)).map(BufWriter::new)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    io(path, std::fs::write(path, bytes))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Encode {
            features,
            out,
            epsilon,
            ns,
            nndr,
            seed,
            tmax,
            report,
        } => {
            let mut cfg = CodecConfig::default();
            if let Some(v) = epsilon {
                cfg.epsilon = v;
            }
            if let Some(v) = ns {
                cfg.n_s = v;
            }
            if let Some(v) = nndr {
                cfg.nndr = v;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            if let Some(v) = tmax {
                cfg.t_max = v;
            }
            cfg.validate()?;
            let text = io(&features, std::fs::read_to_string(&features))?;
            let file = FeatureFile::parse(&text).map_err(|source| CliError::Parse {
                path: features.clone(),
                source,
            })?;
            let encoded = encode_stream(&file.frames, &cfg)?;
            write_file(&out, &encoded.bitstream.bytes)?;
            if let Some(path) = report {
                let mut w = create(&path)?;
                encoded.report.write_csv(&mut w)?;
                io(&path, w.flush())?;
            }
            println!(
                "{} frames ({}), {} bits ({} header + {} payload), {} bytes",
                encoded.report.frames.len(),
                encoded.report.type_string(),
                encoded.bitstream.bit_len,
                encoded.report.header_bits,
                encoded.report.payload_bits(),
                encoded.bitstream.bytes.len()
            );
        }
        Command::Decode { input, out } => {
            let decoded = decode_stream(&read(&input)?)?;
            let frames = decoded
                .frames
                .iter()
                .map(|f| {
                    let features = f
                        .keypoints
                        .iter()
                        .map(|&keypoint| kpcodec::Feature {
                            keypoint,
                            descriptor: None,
                        })
                        .collect();
                    FrameFeatures::new(f.frame_index, decoded.header.width, decoded.header.height, features)
                })
                .collect();
            let file = FeatureFile {
                width: decoded.header.width,
                height: decoded.header.height,
                descriptor_dim: 0,
                frames,
            };
            write_file(&out, file.render().as_bytes())?;
            println!("{} frames decoded", decoded.frames.len());
        }
        Command::Inspect { input } => {
            let summary = inspect(&read(&input)?)?;
            print!("{}", render_summary(&summary));
        }
        Command::Simulate { scene, out_dir } => {
            let cfg = SceneConfig::load(&scene)?;
            let sim = simulate(&cfg, &CodecConfig::default())?;
            io(&out_dir, std::fs::create_dir_all(&out_dir))?;
            write_file(&out_dir.join("stream.kpb"), &sim.encoded.bitstream.bytes)?;
            let input = FeatureFile {
                width: cfg.width,
                height: cfg.height,
                descriptor_dim: cfg.descriptor_dim,
                frames: sim.generated.frames.clone(),
            };
            write_file(&out_dir.join("features.txt"), input.render().as_bytes())?;
            for (name, which) in [("report.csv", 0), ("metrics.csv", 1), ("summary.csv", 2)] {
                let path = out_dir.join(name);
                let mut w = create(&path)?;
                match which {
                    0 => sim.encoded.report.write_csv(&mut w)?,
                    1 => sim.metrics.write_frames_csv(&mut w)?,
                    _ => sim.metrics.write_summary_csv(&mut w)?,
                }
                io(&path, w.flush())?;
            }
            let s = &sim.metrics.summary;
            println!(
                "{} frames ({}), {} payload bits; survival {:.3}, location error {:.3} px",
                s.frames,
                sim.encoded.report.type_string(),
                s.total_bits,
                s.mean_surviving_fraction,
                s.mean_location_error
            );
        }
    }
    Ok(())
}

/// Header lines followed by one row per record; runs of identical S or N
/// records collapse into a single row.
fn render_summary(s: &StreamSummary) -> String {
    let h = &s.header;
    let mut out = String::new();
    let payload: usize = s.records.iter().map(|r| r.bits).sum();
    out += &format!(
        "stream    {}x{}, max {} features, {} frames from index {}\n",
        h.width, h.height, h.max_features, h.frame_count, h.first_frame_index
    );
    out += &format!(
        "quantizer f={} t={} T_max={} codebook [{}, {}]\n",
        h.location_factor, h.orientation_bits, h.t_max, h.codebook[0], h.codebook[1]
    );
    out += &format!("control   epsilon={} N_s={}\n", h.epsilon, h.n_s);
    out += &format!("context   range={} table={:08x}\n", h.context_range, h.context_table_id);
    out += &format!(
        "bits      {} header + {} payload\n",
        kpcodec::codec::HEADER_BITS,
        payload
    );
    out += "frames        type  offset    bits  intra\n";
    let mut i = 0;
    while i < s.records.len() {
        let r = &s.records[i];
        let run = s.records[i..]
            .iter()
            .take_while(|o| {
                matches!(r.frame_type, FrameType::S | FrameType::N) && o.frame_type == r.frame_type && o.bits == r.bits
            })
            .count()
            .max(1);
        out += &row(r, &s.records[i + run - 1], run);
        i += run;
    }
    out
}

fn row(first: &RecordInfo, last: &RecordInfo, run: usize) -> String {
    let intra = first.intra_count.map_or("-".to_string(), |n| n.to_string());
    if run == 1 {
        format!(
            "{:<13} {:<5} {:>6} {:>7}  {}\n",
            first.frame_index,
            first.frame_type.as_char(),
            first.bit_offset,
            first.bits,
            intra
        )
    } else {
        let frames = format!("{}-{}", first.frame_index, last.frame_index);
        let ty = format!("{} ×{run}", first.frame_type.as_char());
        format!(
            "{frames:<13} {ty:<5} {:>6} {:>7}  {intra} (each)\n",
            first.bit_offset, first.bits
        )
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("kpcodec: error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
