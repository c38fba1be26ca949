//! Corpus annotation: track filter, smoothing, fit and pruning per video.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::annotation::{PruneStatus, VideoAnnotation};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::fitter::{fit_video, FitConfig};
use crate::model::ShapeModel;
use crate::pipeline::prune::{self, ManualFlags, PruneStats};
use crate::pipeline::smoothing::{smooth_landmarks_with, Smoothing};
use crate::pipeline::track::{track_filter, DetectionTrack, TrackParams};

pub const TRACK_EXTENSION: &str = "track";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusConfig {
    pub track: TrackParams,
    pub fit: FitConfig,
    pub percentile: f64,
    pub smoothing: Smoothing,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            track: TrackParams::default(),
            fit: FitConfig::default(),
            percentile: prune::DEFAULT_PERCENTILE,
            smoothing: Smoothing::Gcv,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        self.track.validate()?;
        self.fit.validate()?;
        prune::chi_square_threshold(1, self.percentile)?;
        if let Smoothing::Fixed(a) = self.smoothing {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::Config(format!("smoothing weight must be finite and >= 0, got {a}")));
            }
        }
        Ok(())
    }

    /// Reads `track.*`, `fit.*`, `prune.percentile` and `smoothing.alpha`
    /// (a number, or `gcv`) from a key-value file.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let mut c = CorpusConfig::default();
        kv.read_into("track.margin_fraction", &mut c.track.margin_fraction)?;
        kv.read_into("track.max_gap", &mut c.track.max_gap)?;
        kv.read_into("track.target_frames", &mut c.track.target_frames)?;
        kv.read_into("fit.lambda_identity", &mut c.fit.lambda_identity)?;
        kv.read_into("fit.lambda_expression", &mut c.fit.lambda_expression)?;
        kv.read_into("fit.lambda_temporal", &mut c.fit.lambda_temporal)?;
        kv.read_into("fit.outer_iterations", &mut c.fit.outer_iterations)?;
        kv.read_into("fit.convergence_tol", &mut c.fit.convergence_tol)?;
        kv.read_into("prune.percentile", &mut c.percentile)?;
        match kv.get_str("smoothing.alpha") {
            None | Some("gcv") => {}
            Some(_) => c.smoothing = Smoothing::Fixed(kv.get("smoothing.alpha")?.unwrap_or(0.0)),
        }
        c.validate()?;
        Ok(c)
    }

    pub fn write_key_values(&self, kv: &mut KeyValues) {
        kv.set("track.margin_fraction", self.track.margin_fraction);
        kv.set("track.max_gap", self.track.max_gap);
        kv.set("track.target_frames", self.track.target_frames);
        kv.set("fit.lambda_identity", self.fit.lambda_identity);
        kv.set("fit.lambda_expression", self.fit.lambda_expression);
        kv.set("fit.lambda_temporal", self.fit.lambda_temporal);
        kv.set("fit.outer_iterations", self.fit.outer_iterations);
        kv.set("fit.convergence_tol", self.fit.convergence_tol);
        kv.set("prune.percentile", self.percentile);
        match self.smoothing {
            Smoothing::Gcv => kv.set("smoothing.alpha", "gcv"),
            Smoothing::Fixed(a) => kv.set("smoothing.alpha", a),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CorpusResult {
    pub annotations: Vec<VideoAnnotation>,
    pub stats: PruneStats,
}

/// Runs one video through the pipeline. Failures become a `track_lost`
/// record carrying the reason instead of an error.
pub fn annotate_video(model: &ShapeModel, track: &DetectionTrack, config: &CorpusConfig, manual: bool) -> VideoAnnotation {
    let decision = track_filter(track);
    if !decision.kept {
        return VideoAnnotation::rejected(&track.source_id, decision.reason());
    }
    let fitted = decision
        .trimmed
        .to_sequence()
        .and_then(|seq| smooth_landmarks_with(&seq, config.track.max_gap, config.smoothing))
        .and_then(|seq| fit_video(model, &seq, &config.fit));
    let mut annotation = match fitted {
        Ok(a) => a,
        Err(e) => {
            log::warn!("{}: {e}", track.source_id);
            return VideoAnnotation::rejected(&track.source_id, e.to_string());
        }
    };
    if manual {
        prune::apply_manual_flag(&mut annotation);
    }
    if let Err(e) = prune::auto_prune(&mut annotation, config.percentile) {
        return VideoAnnotation::rejected(&track.source_id, e.to_string());
    }
    annotation
}

/// Annotates every track concurrently; output order follows input order.
pub fn annotate_corpus(
    model: &ShapeModel,
    tracks: &[DetectionTrack],
    config: &CorpusConfig,
    flags: &ManualFlags,
) -> Result<CorpusResult> {
    config.validate()?;
    let annotations: Vec<VideoAnnotation> = tracks
        .par_iter()
        .map(|t| annotate_video(model, t, config, flags.contains(&t.source_id)))
        .collect();
    let stats = PruneStats::from_annotations(&annotations);
    debug_assert!(stats.is_partition());
    Ok(CorpusResult { annotations, stats })
}

/// Track files in `dir`, sorted by file name.
pub fn track_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == TRACK_EXTENSION) {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

pub fn load_tracks(dir: &Path, params: TrackParams) -> Result<Vec<DetectionTrack>> {
    track_paths(dir)?
        .iter()
        .map(|p| DetectionTrack::load(p, params))
        .collect()
}

/// Writes `<source_id>.track` files; returns the paths written.
pub fn save_tracks(tracks: &[DetectionTrack], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    tracks
        .iter()
        .map(|t| {
            let path = dir.join(format!("{}.{TRACK_EXTENSION}", t.source_id));
            t.save(&path).map(|_| path)
        })
        .collect()
}

/// Annotations in `records` whose status is `kept`, in order.
pub fn kept(records: &[VideoAnnotation]) -> impl Iterator<Item = &VideoAnnotation> {
    records.iter().filter(|a| a.prune_status == PruneStatus::Kept)
}
