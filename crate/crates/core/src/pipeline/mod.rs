//! Pseudo-ground-truth annotation: track filtering, landmark smoothing,
//! batch fitting and pruning.

pub mod corpus;
pub mod prune;
pub mod smoothing;
pub mod track;

pub use corpus::{annotate_corpus, annotate_video, CorpusConfig, CorpusResult};
pub use prune::{auto_prune, ManualFlags, PruneDecision, PruneStats};
pub use smoothing::{smooth_landmarks, smooth_landmarks_with, Smoothing, SmoothingSpline};
pub use track::{track_filter, BoundingBox, Detection, DetectionTrack, TrackDecision, TrackParams};
