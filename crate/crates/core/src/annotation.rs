//! Per-video fit results and their text record format.
//!
//! ```text
//! # expfit annotation v1
//! video <source id>
//! status kept|auto_pruned|manually_pruned|track_lost
//! reason <free text, may be empty>
//! reprojection_px <mean per-landmark reprojection error>
//! identity <n_i> <values...>
//! frames <F> <n_e>
//! <f> <valid> <scale> <tx> <ty> <r00 r01 r02 r10 r11 r12 r20 r21 r22> <e_0 ... e_{n_e-1}>
//! ...
//! end
//! ```
//!
//! A file may hold several records back to back.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DVector, Matrix3, Rotation3, Vector2};

use crate::camera::CameraPose;
use crate::error::{Error, Result};

pub const HEADER: &str = "# expfit annotation v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PruneStatus {
    Kept,
    AutoPruned,
    ManuallyPruned,
    TrackLost,
}

impl PruneStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            PruneStatus::Kept => "kept",
            PruneStatus::AutoPruned => "auto_pruned",
            PruneStatus::ManuallyPruned => "manually_pruned",
            PruneStatus::TrackLost => "track_lost",
        }
    }
}

impl FromStr for PruneStatus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "kept" => PruneStatus::Kept,
            "auto_pruned" => PruneStatus::AutoPruned,
            "manually_pruned" => PruneStatus::ManuallyPruned,
            "track_lost" => PruneStatus::TrackLost,
            other => return Err(Error::InvalidArgument(format!("unknown prune status `{other}`"))),
        })
    }
}

impl std::fmt::Display for PruneStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Fit of one video: shared identity plus per-frame expressions and poses.
///
/// Videos rejected before fitting carry an empty identity and no frames.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoAnnotation {
    pub source_id: String,
    pub identity: DVector<f64>,
    pub expressions: Vec<DVector<f64>>,
    pub poses: Vec<CameraPose>,
    /// Whether each frame carried landmark data during the fit.
    pub frame_valid: Vec<bool>,
    pub mean_reprojection_px: f64,
    pub prune_status: PruneStatus,
    pub prune_reason: String,
}

impl VideoAnnotation {
    /// Placeholder record for a video that never reached the fitter.
    pub fn rejected(source_id: impl Into<String>, reason: impl Into<String>) -> Self {
        VideoAnnotation {
            source_id: source_id.into(),
            identity: DVector::zeros(0),
            expressions: Vec::new(),
            poses: Vec::new(),
            frame_valid: Vec::new(),
            mean_reprojection_px: f64::NAN,
            prune_status: PruneStatus::TrackLost,
            prune_reason: reason.into(),
        }
    }

    pub fn num_frames(&self) -> usize {
        self.expressions.len()
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.expressions.len();
        for (what, n) in [("poses", self.poses.len()), ("frame flags", self.frame_valid.len())] {
            if n != f {
                return Err(Error::Invariant(format!(
                    "annotation `{}`: {n} {what} for {f} frames",
                    self.source_id
                )));
            }
        }
        if let Some(first) = self.expressions.first() {
            if self.expressions.iter().any(|e| e.len() != first.len()) {
                return Err(Error::Invariant(format!(
                    "annotation `{}`: ragged expression vectors",
                    self.source_id
                )));
            }
        }
        if self.prune_status == PruneStatus::Kept && !self.mean_reprojection_px.is_finite() {
            return Err(Error::Invariant(format!(
                "annotation `{}` is kept but has no finite residual",
                self.source_id
            )));
        }
        Ok(())
    }

    pub fn write_record(&self, out: &mut String) {
        let ne = self.expressions.first().map_or(0, |e| e.len());
        writeln!(out, "video {}", self.source_id).unwrap();
        writeln!(out, "status {}", self.prune_status).unwrap();
        writeln!(out, "reason {}", self.prune_reason.replace('\n', " ")).unwrap();
        writeln!(out, "reprojection_px {}", self.mean_reprojection_px).unwrap();
        write!(out, "identity {}", self.identity.len()).unwrap();
        for v in self.identity.iter() {
            write!(out, " {v}").unwrap();
        }
        out.push('\n');
        writeln!(out, "frames {} {ne}", self.expressions.len()).unwrap();
        for (f, (e, pose)) in self.expressions.iter().zip(&self.poses).enumerate() {
            write!(
                out,
                "{f} {} {} {} {}",
                u8::from(self.frame_valid[f]),
                pose.scale,
                pose.translation.x,
                pose.translation.y
            )
            .unwrap();
            let r = pose.rotation.matrix();
            for i in 0..3 {
                for j in 0..3 {
                    write!(out, " {}", r[(i, j)]).unwrap();
                }
            }
            for v in e.iter() {
                write!(out, " {v}").unwrap();
            }
            out.push('\n');
        }
        out.push_str("end\n");
    }
}

pub fn annotations_to_text(records: &[VideoAnnotation]) -> String {
    let mut out = String::new();
    writeln!(out, "{HEADER}").unwrap();
    for r in records {
        r.write_record(&mut out);
    }
    out
}

fn field<'a>(line: Option<(usize, &'a str)>, key: &str, origin: &str) -> Result<(usize, &'a str)> {
    let (i, l) = line.ok_or_else(|| Error::parse(origin, format!("unexpected end of file, wanted `{key}`")))?;
    let rest = l
        .strip_prefix(key)
        .and_then(|r| if r.is_empty() { Some(r) } else { r.strip_prefix(' ') })
        .ok_or_else(|| Error::parse(format!("{origin}:{}", i + 1), format!("expected `{key}`")))?;
    Ok((i, rest))
}

fn num<T: FromStr>(s: &str, loc: &str) -> Result<T> {
    s.parse().map_err(|_| Error::parse(loc, format!("bad number `{s}`")))
}

pub fn annotations_from_text(text: &str, origin: &str) -> Result<Vec<VideoAnnotation>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, l)) if l.trim() == HEADER => {}
        _ => return Err(Error::parse(format!("{origin}:1"), format!("missing `{HEADER}` header"))),
    }
    let mut out = Vec::new();
    while let Some(first) = lines.next() {
        let (_, source_id) = field(Some(first), "video", origin)?;
        let (i, status) = field(lines.next(), "status", origin)?;
        let prune_status: PruneStatus = status
            .trim()
            .parse()
            .map_err(|e: Error| Error::parse(format!("{origin}:{}", i + 1), e.to_string()))?;
        let (_, reason) = field(lines.next(), "reason", origin)?;
        let (i, rep) = field(lines.next(), "reprojection_px", origin)?;
        let mean_reprojection_px: f64 = num(rep.trim(), &format!("{origin}:{}", i + 1))?;
        let (i, ident) = field(lines.next(), "identity", origin)?;
        let loc = format!("{origin}:{}", i + 1);
        let parts: Vec<&str> = ident.split_whitespace().collect();
        let ni: usize = num(parts.first().copied().unwrap_or(""), &loc)?;
        if parts.len() != ni + 1 {
            return Err(Error::parse(loc, format!("identity declares {ni} values, found {}", parts.len() - 1)));
        }
        let identity = DVector::from_iterator(ni, parts[1..].iter().map(|s| num::<f64>(s, &loc)).collect::<Result<Vec<_>>>()?);
        let (i, fr) = field(lines.next(), "frames", origin)?;
        let loc = format!("{origin}:{}", i + 1);
        let parts: Vec<&str> = fr.split_whitespace().collect();
        if parts.len() != 2 {
            return Err(Error::parse(loc, "expected `frames <F> <n_e>`"));
        }
        let (nf, ne): (usize, usize) = (num(parts[0], &loc)?, num(parts[1], &loc)?);
        let mut expressions = Vec::with_capacity(nf);
        let mut poses = Vec::with_capacity(nf);
        let mut frame_valid = Vec::with_capacity(nf);
        for f in 0..nf {
            let (i, l) = lines
                .next()
                .ok_or_else(|| Error::parse(origin, "unexpected end of file inside frame table"))?;
            let loc = format!("{origin}:{}", i + 1);
            let v: Vec<&str> = l.split_whitespace().collect();
            if v.len() != 14 + ne {
                return Err(Error::parse(loc, format!("expected {} fields, found {}", 14 + ne, v.len())));
            }
            if num::<usize>(v[0], &loc)? != f {
                return Err(Error::parse(loc, "frame index out of order"));
            }
            frame_valid.push(match v[1] {
                "1" => true,
                "0" => false,
                _ => return Err(Error::parse(loc, "bad valid flag")),
            });
            let scale: f64 = num(v[2], &loc)?;
            let t = Vector2::new(num(v[3], &loc)?, num(v[4], &loc)?);
            let mut r = Matrix3::zeros();
            for k in 0..9 {
                r[(k / 3, k % 3)] = num(v[5 + k], &loc)?;
            }
            let pose = CameraPose::new(Rotation3::from_matrix_unchecked(r), scale, t)
                .map_err(|e| Error::parse(loc.clone(), e.to_string()))?;
            poses.push(pose);
            let e: Vec<f64> = v[14..].iter().map(|s| num(s, &loc)).collect::<Result<_>>()?;
            expressions.push(DVector::from_vec(e));
        }
        let (i, l) = lines
            .next()
            .ok_or_else(|| Error::parse(origin, "missing `end`"))?;
        if l.trim() != "end" {
            return Err(Error::parse(format!("{origin}:{}", i + 1), "expected `end`"));
        }
        let ann = VideoAnnotation {
            source_id: source_id.to_string(),
            identity,
            expressions,
            poses,
            frame_valid,
            mean_reprojection_px,
            prune_status,
            prune_reason: reason.to_string(),
        };
        ann.validate()?;
        out.push(ann);
    }
    Ok(out)
}

pub fn save_annotations(records: &[VideoAnnotation], path: &Path) -> Result<()> {
    std::fs::write(path, annotations_to_text(records)).map_err(|e| Error::io(path, e))
}

pub fn load_annotations(path: &Path) -> Result<Vec<VideoAnnotation>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    annotations_from_text(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_round_trip() {
        let pose = CameraPose::new(
            Rotation3::from_euler_angles(0.1, -0.3, 0.2),
            81.5,
            Vector2::new(110.0, 99.25),
        )
        .unwrap();
        let a = VideoAnnotation {
            source_id: "vid-001".into(),
            identity: DVector::from_vec(vec![0.5, -1.25, 3.0]),
            expressions: vec![DVector::from_vec(vec![0.1, 0.2]), DVector::from_vec(vec![-0.3, 1.0 / 3.0])],
            poses: vec![pose, pose],
            frame_valid: vec![true, false],
            mean_reprojection_px: 0.75,
            prune_status: PruneStatus::Kept,
            prune_reason: String::new(),
        };
        let rejected = VideoAnnotation::rejected("vid-002", "margin at frame 4");
        let text = annotations_to_text(&[a.clone(), rejected.clone()]);
        let back = annotations_from_text(&text, "mem").unwrap();
        assert_eq!(back[0], a);
        assert_eq!(back[1].prune_status, PruneStatus::TrackLost);
        assert_eq!(back[1].prune_reason, "margin at frame 4");
        assert_eq!(annotations_to_text(&back), text);
    }

    #[test]
    fn status_parse() {
        assert_eq!("manually_pruned".parse::<PruneStatus>().unwrap(), PruneStatus::ManuallyPruned);
        assert!("nope".parse::<PruneStatus>().is_err());
    }
}
