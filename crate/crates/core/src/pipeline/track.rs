//! Detection tracks and the margin/gap filter applied before fitting.
//!
//! Track files are line-oriented:
//!
//! ```text
//! # expfit track v1
//! # source <id>
//! <frame> <n> [x y w h lx0 ly0 ... lx67 ly67] * n
//! ```
//!
//! A frame with `n = 0` has no detection. When a frame holds several faces,
//! the face with the largest box in the first frame is followed, and later
//! frames pick the detection whose centre is nearest the previous one.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::model::LANDMARK_COUNT;
use crate::sequence::LandmarkSequence;

pub const HEADER: &str = "# expfit track v1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl BoundingBox {
    pub fn center(&self) -> Vector2<f64> {
        Vector2::new(self.x + 0.5 * self.width, self.y + 0.5 * self.height)
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub landmarks: Vec<Vector2<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackParams {
    /// Allowed centre displacement between present frames, as a fraction of the box width.
    pub margin_fraction: f64,
    /// A run of this many missing frames ends the track.
    pub max_gap: usize,
    /// Frames to accumulate before the track is accepted as complete.
    pub target_frames: usize,
}

impl Default for TrackParams {
    fn default() -> Self {
        TrackParams {
            margin_fraction: 0.5,
            max_gap: 5,
            target_frames: 2000,
        }
    }
}

impl TrackParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin_fraction > 0.0 && self.margin_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "track: margin_fraction must lie in (0, 1], got {}",
                self.margin_fraction
            )));
        }
        if self.max_gap == 0 {
            return Err(Error::Config("track: max_gap must be at least 1".into()));
        }
        if self.target_frames == 0 {
            return Err(Error::Config("track: target_frames must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionTrack {
    pub source_id: String,
    pub frames: Vec<Option<Detection>>,
    pub params: TrackParams,
}

/// Why a track stopped where it did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackOutcome {
    /// Reached the target frame count or the end of the track.
    Complete,
    /// The box centre jumped by more than the margin.
    Margin,
    /// Too many consecutive frames without a detection.
    Gap,
    /// No detection in the first frame.
    NoFirstFace,
    Empty,
}

impl TrackOutcome {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrackOutcome::Complete => "complete",
            TrackOutcome::Margin => "margin",
            TrackOutcome::Gap => "gap",
            TrackOutcome::NoFirstFace => "no face in first frame",
            TrackOutcome::Empty => "empty track",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackDecision {
    pub kept: bool,
    /// Accepted prefix, with trailing missing frames removed.
    pub trimmed: DetectionTrack,
    pub outcome: TrackOutcome,
    /// Frame index at which the track was cut, if it was.
    pub cut_at: Option<usize>,
}

impl TrackDecision {
    pub fn reason(&self) -> String {
        match self.cut_at {
            Some(f) if !self.kept => format!("{} at frame {f}", self.outcome.as_str()),
            _ => self.outcome.as_str().to_string(),
        }
    }
}

impl DetectionTrack {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn present_count(&self) -> usize {
        self.frames.iter().filter(|d| d.is_some()).count()
    }

    /// Landmarks as a sequence; frames without a detection are invalid.
    pub fn to_sequence(&self) -> Result<LandmarkSequence> {
        let missing = vec![Vector2::new(f64::NAN, f64::NAN); LANDMARK_COUNT];
        let frames = self
            .frames
            .iter()
            .map(|d| d.as_ref().map_or_else(|| missing.clone(), |d| d.landmarks.clone()))
            .collect();
        let valid = self.frames.iter().map(Option::is_some).collect();
        LandmarkSequence::new(frames, valid, self.source_id.clone())
    }

    /// Builds a track from per-frame candidate lists, following the face with
    /// the largest first-frame box.
    pub fn from_candidates(source_id: impl Into<String>, candidates: Vec<Vec<Detection>>, params: TrackParams) -> Self {
        let mut previous: Option<Vector2<f64>> = None;
        let frames = candidates
            .into_iter()
            .map(|faces| {
                let pick = match previous {
                    None => faces
                        .into_iter()
                        .enumerate()
                        .max_by(|(i, a), (j, b)| a.bbox.area().total_cmp(&b.bbox.area()).then(j.cmp(i)))
                        .map(|(_, d)| d),
                    Some(c) => faces
                        .into_iter()
                        .enumerate()
                        .min_by(|(i, a), (j, b)| {
                            (a.bbox.center() - c)
                                .norm()
                                .total_cmp(&(b.bbox.center() - c).norm())
                                .then(i.cmp(j))
                        })
                        .map(|(_, d)| d),
                };
                if let Some(d) = &pick {
                    previous = Some(d.bbox.center());
                }
                pick
            })
            .collect();
        DetectionTrack {
            source_id: source_id.into(),
            frames,
            params,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{HEADER}").unwrap();
        writeln!(out, "# source {}", self.source_id).unwrap();
        for (f, d) in self.frames.iter().enumerate() {
            match d {
                None => writeln!(out, "{f} 0").unwrap(),
                Some(d) => {
                    let b = &d.bbox;
                    write!(out, "{f} 1 {} {} {} {}", b.x, b.y, b.width, b.height).unwrap();
                    for p in &d.landmarks {
                        write!(out, " {} {}", p.x, p.y).unwrap();
                    }
                    out.push('\n');
                }
            }
        }
        out
    }

    pub fn from_text(text: &str, origin: &str, params: TrackParams) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == HEADER => {}
            _ => return Err(Error::parse(format!("{origin}:1"), format!("missing `{HEADER}` header"))),
        }
        let per_face = 4 + 2 * LANDMARK_COUNT;
        let mut source_id = String::new();
        let mut candidates: Vec<Vec<Detection>> = Vec::new();
        for (i, line) in lines {
            let loc = || format!("{origin}:{}", i + 1);
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(id) = rest.trim().strip_prefix("source ") {
                    source_id = id.trim().to_string();
                }
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() < 2 {
                return Err(Error::parse(loc(), "expected `<frame> <count> ...`"));
            }
            let index: usize = fields[0].parse().map_err(|_| Error::parse(loc(), "bad frame index"))?;
            if index != candidates.len() {
                return Err(Error::parse(loc(), format!("frame index {index} out of order")));
            }
            let count: usize = fields[1].parse().map_err(|_| Error::parse(loc(), "bad face count"))?;
            if fields.len() != 2 + count * per_face {
                return Err(Error::parse(
                    loc(),
                    format!("expected {} fields for {count} faces, found {}", 2 + count * per_face, fields.len()),
                ));
            }
            let mut values = Vec::with_capacity(count * per_face);
            for tok in &fields[2..] {
                let v: f64 = tok.parse().map_err(|_| Error::parse(loc(), format!("bad number `{tok}`")))?;
                if !v.is_finite() {
                    return Err(Error::parse(loc(), "non-finite detection value"));
                }
                values.push(v);
            }
            let faces = values
                .chunks_exact(per_face)
                .map(|c| Detection {
                    bbox: BoundingBox {
                        x: c[0],
                        y: c[1],
                        width: c[2],
                        height: c[3],
                    },
                    landmarks: c[4..].chunks_exact(2).map(|p| Vector2::new(p[0], p[1])).collect(),
                })
                .collect::<Vec<_>>();
            if faces.iter().any(|d| d.bbox.width <= 0.0 || d.bbox.height <= 0.0) {
                return Err(Error::parse(loc(), "bounding box must have positive size"));
            }
            candidates.push(faces);
        }
        Ok(DetectionTrack::from_candidates(source_id, candidates, params))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, params: TrackParams) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string(), params)
    }
}

/// Scans the track forward and keeps the longest acceptable prefix.
///
/// The track is kept when it reaches `target_frames` present frames, or its
/// end, without a margin violation or a run of `max_gap` missing frames.
/// Consecutive present frames are compared across short gaps.
pub fn track_filter(track: &DetectionTrack) -> TrackDecision {
    let p = track.params;
    let finish = |kept: bool, end: usize, outcome: TrackOutcome, cut_at: Option<usize>| {
        let mut frames = track.frames[..end].to_vec();
        while matches!(frames.last(), Some(None)) {
            frames.pop();
        }
        TrackDecision {
            kept,
            trimmed: DetectionTrack {
                source_id: track.source_id.clone(),
                frames,
                params: p,
            },
            outcome,
            cut_at,
        }
    };
    match track.frames.first() {
        None => return finish(false, 0, TrackOutcome::Empty, None),
        Some(None) => return finish(false, 0, TrackOutcome::NoFirstFace, Some(0)),
        Some(Some(_)) => {}
    }

    let mut last_center: Option<Vector2<f64>> = None;
    let mut present = 0usize;
    let mut gap = 0usize;
    for (f, det) in track.frames.iter().enumerate() {
        match det {
            None => {
                gap += 1;
                if gap >= p.max_gap {
                    return finish(false, f + 1 - gap, TrackOutcome::Gap, Some(f + 1 - gap));
                }
            }
            Some(d) => {
                gap = 0;
                let c = d.bbox.center();
                if let Some(prev) = last_center {
                    if (c - prev).norm() > p.margin_fraction * d.bbox.width {
                        return finish(false, f, TrackOutcome::Margin, Some(f));
                    }
                }
                last_center = Some(c);
                present += 1;
                if present >= p.target_frames {
                    return finish(true, f + 1, TrackOutcome::Complete, None);
                }
            }
        }
    }
    finish(true, track.frames.len(), TrackOutcome::Complete, None)
}
