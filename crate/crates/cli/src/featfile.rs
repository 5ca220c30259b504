//! Plain-text feature files.
//!
//! ```text
//! # comments and blank lines are ignored
//! features <width> <height> <descriptor-dim>
//! frame <index> <count>
//! <x> <y> <sigma> <theta> <d1> ... <dk>     (count lines)
//! ```

use std::fmt::Write as _;

use kpcodec::{Feature, FrameFeatures, Keypoint};

#[derive(Debug, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

fn err(line: usize, message: impl Into<String>) -> ParseError {
    ParseError {
        line,
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub width: u32,
    pub height: u32,
    pub descriptor_dim: usize,
    pub frames: Vec<FrameFeatures>,
}

fn field<T: std::str::FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<T, ParseError> {
    let tok = tok.ok_or_else(|| err(line, format!("missing {what}")))?;
    tok.parse().map_err(|_| err(line, format!("bad {what} '{tok}'")))
}

fn number(tok: &str, line: usize, what: &str) -> Result<f64, ParseError> {
    match tok.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(err(line, format!("bad {what} '{tok}'"))),
    }
}

impl FeatureFile {
    pub fn parse(text: &str) -> Result<Self, ParseError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());

        let (n, first) = lines
            .next()
            .ok_or_else(|| err(1, "empty file, expected 'features W H DIM'"))?;
        let mut tok = first.split_whitespace();
        if tok.next() != Some("features") {
            return Err(err(n, "expected 'features W H DIM'"));
        }
        let width: u32 = field(tok.next(), n, "width")?;
        let height: u32 = field(tok.next(), n, "height")?;
        let descriptor_dim: usize = field(tok.next(), n, "descriptor dimension")?;
        if tok.next().is_some() {
            return Err(err(n, "unexpected tokens after descriptor dimension"));
        }
        if width == 0 || height == 0 || width > u16::MAX as u32 || height > u16::MAX as u32 {
            return Err(err(n, "width and height must lie in 1..=65535"));
        }

        let mut frames = Vec::new();
        while let Some((n, l)) = lines.next() {
            let mut tok = l.split_whitespace();
            if tok.next() != Some("frame") {
                return Err(err(n, "expected 'frame INDEX COUNT'"));
            }
            let index: u64 = field(tok.next(), n, "frame index")?;
            let count: usize = field(tok.next(), n, "feature count")?;
            if tok.next().is_some() {
                return Err(err(n, "unexpected tokens after feature count"));
            }
            let mut features = Vec::with_capacity(count.min(1 << 16));
            for k in 0..count {
                let (n, l) = lines
                    .next()
                    .ok_or_else(|| err(n, format!("frame {index} declares {count} features, found {k}")))?;
                let toks: Vec<&str> = l.split_whitespace().collect();
                if toks.first() == Some(&"frame") {
                    return Err(err(n, format!("frame {index} declares {count} features, found {k}")));
                }
                if toks.len() != 4 + descriptor_dim {
                    return Err(err(
                        n,
                        format!(
                            "expected {} fields (x y sigma theta + {descriptor_dim} descriptor values), found {}",
                            4 + descriptor_dim,
                            toks.len()
                        ),
                    ));
                }
                let kp = Keypoint::new(
                    number(toks[0], n, "x")?,
                    number(toks[1], n, "y")?,
                    number(toks[2], n, "sigma")?,
                    number(toks[3], n, "theta")?,
                );
                let descriptor = if descriptor_dim == 0 {
                    None
                } else {
                    Some(
                        toks[4..]
                            .iter()
                            .map(|t| {
                                t.parse::<f32>()
                                    .ok()
                                    .filter(|v| v.is_finite())
                                    .ok_or_else(|| err(n, format!("bad descriptor value '{t}'")))
                            })
                            .collect::<Result<Vec<_>, _>>()?,
                    )
                };
                features.push(Feature {
                    keypoint: kp,
                    descriptor,
                });
            }
            frames.push(FrameFeatures::new(index, width, height, features));
        }
        Ok(Self {
            width,
            height,
            descriptor_dim,
            frames,
        })
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        writeln!(s, "features {} {} {}", self.width, self.height, self.descriptor_dim).unwrap();
        for f in &self.frames {
            writeln!(s, "frame {} {}", f.frame_index, f.len()).unwrap();
            for feat in &f.features {
                let k = &feat.keypoint;
                write!(s, "{} {} {} {}", k.x, k.y, k.sigma, k.theta).unwrap();
                for v in feat.descriptor.iter().flatten() {
                    write!(s, " {v}").unwrap();
                }
                s.push('\n');
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# two frames
features 64 48 2
frame 0 2
1.5 2.25 2.0159 0.5 0.1 0.9
10 20 4.1 -1.0 0.7 0.2   # trailing comment

frame 1 0
";

    #[test]
    fn parses_sample() {
        let f = FeatureFile::parse(SAMPLE).unwrap();
        assert_eq!((f.width, f.height, f.descriptor_dim), (64, 48, 2));
        assert_eq!(f.frames.len(), 2);
        assert_eq!(f.frames[0].features[1].keypoint, Keypoint::new(10.0, 20.0, 4.1, -1.0));
        assert_eq!(f.frames[0].features[0].descriptor, Some(vec![0.1, 0.9]));
        assert!(f.frames[1].is_empty());
    }

    #[test]
    fn render_round_trips_exactly() {
        let f = FeatureFile::parse(SAMPLE).unwrap();
        let again = FeatureFile::parse(&f.render()).unwrap();
        assert_eq!(f, again);
        let tricky = FeatureFile {
            frames: vec![FrameFeatures::new(
                3,
                64,
                48,
                vec![Feature::new(
                    Keypoint::new(0.1 + 0.2, 1e-7, 2.0159 * 1.03, -4.5),
                    vec![1e-9, 0.3],
                )],
            )],
            ..f
        };
        assert_eq!(FeatureFile::parse(&tricky.render()).unwrap(), tricky);
        assert!(tricky.render().lines().skip(2).all(|l| !l.contains('e')));
    }

    #[test]
    fn missing_descriptor_columns_name_the_line() {
        let text = "features 64 48 2\nframe 0 2\n1 2 3 0.1 0.5 0.5\n1 2 3 0.1 0.5\n";
        let e = FeatureFile::parse(text).unwrap_err();
        assert_eq!(e.line, 4);
        assert!(e.message.contains("expected 6 fields"), "{e}");
    }

    #[test]
    fn count_mismatches_are_reported() {
        let e = FeatureFile::parse("features 64 48 0\nframe 0 2\n1 2 3 0\nframe 1 0\n").unwrap_err();
        assert_eq!(e.line, 4);
        let e = FeatureFile::parse("features 64 48 0\nframe 0 2\n1 2 3 0\n").unwrap_err();
        assert_eq!(e.line, 2);
    }

    #[test]
    fn rejects_bad_numbers_and_preamble() {
        assert_eq!(FeatureFile::parse("").unwrap_err().line, 1);
        assert_eq!(FeatureFile::parse("\n\nframes 1 2 3").unwrap_err().line, 3);
        assert!(FeatureFile::parse("features 0 48 0").is_err());
        let e = FeatureFile::parse("features 64 48 0\nframe 0 1\n1 nan 3 0\n").unwrap_err();
        assert_eq!(e.line, 3);
        assert!(e.message.contains("bad y"));
    }
}
