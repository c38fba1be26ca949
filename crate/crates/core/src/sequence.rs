//! Landmark sequences and their line-oriented text format.
//!
//! ```text
//! # expfit landmarks v1
//! # source <id>
//! # frames <F>
//! # columns: frame valid x0 y0 x1 y1 ... x67 y67
//! 0 1 101.5 88.25 ...
//! ```
//!
//! `valid` is `1` or `0`; invalid frames still carry 136 numbers (usually `NaN`).

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::model::LANDMARK_COUNT;

pub const HEADER: &str = "# expfit landmarks v1";

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSequence {
    pub frames: Vec<Vec<Vector2<f64>>>,
    pub valid: Vec<bool>,
    pub source_id: String,
}

impl LandmarkSequence {
    pub fn new(frames: Vec<Vec<Vector2<f64>>>, valid: Vec<bool>, source_id: impl Into<String>) -> Result<Self> {
        let seq = LandmarkSequence {
            frames,
            valid,
            source_id: source_id.into(),
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::EmptyInput(format!("sequence `{}` has no frames", self.source_id)));
        }
        if self.valid.len() != self.frames.len() {
            return Err(Error::DimensionMismatch {
                context: "validity flags",
                expected: self.frames.len(),
                actual: self.valid.len(),
            });
        }
        for (f, frame) in self.frames.iter().enumerate() {
            if frame.len() != LANDMARK_COUNT {
                return Err(Error::DimensionMismatch {
                    context: "landmarks per frame",
                    expected: LANDMARK_COUNT,
                    actual: frame.len(),
                });
            }
            if self.valid[f] && !frame.iter().all(|p| p.x.is_finite() && p.y.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "sequence `{}` frame {f} is valid but has non-finite coordinates",
                    self.source_id
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{HEADER}").unwrap();
        writeln!(out, "# source {}", self.source_id).unwrap();
        writeln!(out, "# frames {}", self.frames.len()).unwrap();
        writeln!(out, "# columns: frame valid x0 y0 ... x67 y67").unwrap();
        for (f, frame) in self.frames.iter().enumerate() {
            write!(out, "{f} {}", u8::from(self.valid[f])).unwrap();
            for p in frame {
                write!(out, " {} {}", p.x, p.y).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == HEADER => {}
            _ => return Err(Error::parse(format!("{origin}:1"), format!("missing `{HEADER}` header"))),
        }
        let mut source_id = String::new();
        let mut declared: Option<usize> = None;
        let mut frames = Vec::new();
        let mut valid = Vec::new();
        for (i, line) in lines {
            let loc = || format!("{origin}:{}", i + 1);
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(id) = rest.strip_prefix("source ") {
                    source_id = id.trim().to_string();
                } else if let Some(n) = rest.strip_prefix("frames ") {
                    declared = Some(n.trim().parse().map_err(|_| Error::parse(loc(), "bad frame count"))?);
                }
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 2 + 2 * LANDMARK_COUNT {
                return Err(Error::parse(
                    loc(),
                    format!("expected {} fields, found {}", 2 + 2 * LANDMARK_COUNT, fields.len()),
                ));
            }
            let index: usize = fields[0].parse().map_err(|_| Error::parse(loc(), "bad frame index"))?;
            if index != frames.len() {
                return Err(Error::parse(loc(), format!("frame index {index} out of order")));
            }
            let flag = match fields[1] {
                "1" => true,
                "0" => false,
                other => return Err(Error::parse(loc(), format!("bad valid flag `{other}`"))),
            };
            let mut pts = Vec::with_capacity(LANDMARK_COUNT);
            for pair in fields[2..].chunks_exact(2) {
                let x: f64 = pair[0].parse().map_err(|_| Error::parse(loc(), format!("bad number `{}`", pair[0])))?;
                let y: f64 = pair[1].parse().map_err(|_| Error::parse(loc(), format!("bad number `{}`", pair[1])))?;
                pts.push(Vector2::new(x, y));
            }
            frames.push(pts);
            valid.push(flag);
        }
        if let Some(n) = declared {
            if n != frames.len() {
                return Err(Error::parse(origin, format!("header declares {n} frames, found {}", frames.len())));
            }
        }
        LandmarkSequence::new(frames, valid, source_id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> LandmarkSequence {
        let frame = |o: f64| (0..LANDMARK_COUNT).map(|k| Vector2::new(k as f64 + o, 0.1 * k as f64 - o)).collect();
        let mut bad: Vec<Vector2<f64>> = frame(0.0);
        bad.iter_mut().for_each(|p| *p = Vector2::new(f64::NAN, f64::NAN));
        LandmarkSequence::new(vec![frame(0.5), bad, frame(1.0 / 3.0)], vec![true, false, true], "clip-7").unwrap()
    }

    #[test]
    fn text_round_trip() {
        let s = sample();
        let back = LandmarkSequence::from_text(&s.to_text(), "mem").unwrap();
        assert_eq!(back.source_id, "clip-7");
        assert_eq!(back.valid, s.valid);
        assert_eq!(back.frames[0], s.frames[0]);
        assert_eq!(back.frames[2], s.frames[2]);
        assert!(back.frames[1][0].x.is_nan());
        assert_eq!(back.to_text(), s.to_text());
    }

    #[test]
    fn rejects_short_rows() {
        let text = format!("{HEADER}\n0 1 1 2 3\n");
        assert!(matches!(LandmarkSequence::from_text(&text, "mem"), Err(Error::Parse { .. })));
    }

    #[test]
    fn valid_frame_must_be_finite() {
        let mut s = sample();
        s.valid[1] = true;
        assert!(s.validate().is_err());
    }
}
