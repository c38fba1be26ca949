//! Statistical pruning of fitted identities and corpus bookkeeping.
//!
//! Identity coefficients are in σ-units, so for an in-model face `‖i‖²`
//! follows a χ² law with `n_i` degrees of freedom. Fits whose squared norm
//! lands beyond a chosen quantile are treated as off-model.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::annotation::{PruneStatus, VideoAnnotation};
use crate::error::{Error, Result};

pub const DEFAULT_PERCENTILE: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneDecision {
    pub pruned: bool,
    pub statistic: f64,
    pub threshold: f64,
}

/// Upper `percentile` quantile of χ² with `dof` degrees of freedom.
pub fn chi_square_threshold(dof: usize, percentile: f64) -> Result<f64> {
    if !(percentile > 0.0 && percentile < 1.0) {
        return Err(Error::Config(format!("prune percentile must lie in (0, 1), got {percentile}")));
    }
    if dof == 0 {
        return Err(Error::InvalidArgument("χ² threshold needs at least one degree of freedom".into()));
    }
    let dist = ChiSquared::new(dof as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(dist.inverse_cdf(percentile))
}

/// Tests `identity` without touching any annotation.
pub fn identity_outlier(identity: &[f64], percentile: f64) -> Result<PruneDecision> {
    let threshold = chi_square_threshold(identity.len(), percentile)?;
    let statistic: f64 = identity.iter().map(|v| v * v).sum();
    Ok(PruneDecision {
        pruned: statistic > threshold,
        statistic,
        threshold,
    })
}

/// Marks a kept annotation as auto-pruned when its identity is an outlier.
/// Annotations already pruned for another reason are left as they are.
pub fn auto_prune(annotation: &mut VideoAnnotation, percentile: f64) -> Result<PruneDecision> {
    let decision = identity_outlier(annotation.identity.as_slice(), percentile)?;
    if decision.pruned && annotation.prune_status == PruneStatus::Kept {
        annotation.prune_status = PruneStatus::AutoPruned;
        annotation.prune_reason = format!(
            "identity norm² {:.3} above χ²({}) {percentile} quantile {:.3}",
            decision.statistic,
            annotation.identity.len(),
            decision.threshold
        );
    }
    Ok(decision)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PruneStats {
    pub total: usize,
    pub track_pruned: usize,
    pub auto_pruned: usize,
    pub manual_pruned: usize,
    pub kept: usize,
}

impl PruneStats {
    pub fn from_annotations(annotations: &[VideoAnnotation]) -> Self {
        let mut s = PruneStats::default();
        for a in annotations {
            s.record(a.prune_status);
        }
        s
    }

    pub fn record(&mut self, status: PruneStatus) {
        self.total += 1;
        match status {
            PruneStatus::Kept => self.kept += 1,
            PruneStatus::AutoPruned => self.auto_pruned += 1,
            PruneStatus::ManuallyPruned => self.manual_pruned += 1,
            PruneStatus::TrackLost => self.track_pruned += 1,
        }
    }

    pub fn is_partition(&self) -> bool {
        self.kept + self.track_pruned + self.auto_pruned + self.manual_pruned == self.total
    }
}

impl fmt::Display for PruneStats {
    /// `key = value` lines, readable by [`crate::config::KeyValues`].
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "total = {}", self.total)?;
        writeln!(f, "kept = {}", self.kept)?;
        writeln!(f, "track_pruned = {}", self.track_pruned)?;
        writeln!(f, "auto_pruned = {}", self.auto_pruned)?;
        writeln!(f, "manual_pruned = {}", self.manual_pruned)
    }
}

pub const FLAGS_HEADER: &str = "# expfit manual prune v1";

/// Video ids a reviewer has marked for removal, one per line on disk.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ManualFlags {
    ids: BTreeSet<String>,
}

impl ManualFlags {
    pub fn contains(&self, id: &str) -> bool {
        self.ids.contains(id)
    }

    pub fn insert(&mut self, id: impl Into<String>) -> bool {
        self.ids.insert(id.into())
    }

    pub fn remove(&mut self, id: &str) -> bool {
        self.ids.remove(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.ids.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{FLAGS_HEADER}\n");
        for id in &self.ids {
            out.push_str(id);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Self {
        let ids = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect();
        ManualFlags { ids }
    }

    /// Missing file reads as no flags.
    pub fn load(path: &Path) -> Result<Self> {
        match std::fs::read_to_string(path) {
            Ok(text) => Ok(Self::from_text(&text)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Applies a manual flag to an annotation that is not already pruned.
pub fn apply_manual_flag(annotation: &mut VideoAnnotation) {
    if annotation.prune_status == PruneStatus::Kept {
        annotation.prune_status = PruneStatus::ManuallyPruned;
        annotation.prune_reason = "flagged by reviewer".into();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn kept(identity: Vec<f64>) -> VideoAnnotation {
        let mut a = VideoAnnotation::rejected("v", "");
        a.identity = DVector::from_vec(identity);
        a.prune_status = PruneStatus::Kept;
        a.mean_reprojection_px = 0.0;
        a
    }

    #[test]
    fn zero_identity_never_pruned() {
        let mut a = kept(vec![0.0; 157]);
        let d = auto_prune(&mut a, 0.99).unwrap();
        assert_eq!(d.statistic, 0.0);
        assert!(!d.pruned);
        assert_eq!(a.prune_status, PruneStatus::Kept);
    }

    #[test]
    fn large_coordinate_pruned() {
        let mut v = vec![0.0; 157];
        v[3] = 20.0;
        let mut a = kept(v);
        assert!(auto_prune(&mut a, 0.99).unwrap().pruned);
        assert_eq!(a.prune_status, PruneStatus::AutoPruned);
    }

    #[test]
    fn percentile_bounds() {
        assert!(chi_square_threshold(10, 0.0).is_err());
        assert!(chi_square_threshold(10, 1.0).is_err());
        assert!(chi_square_threshold(10, f64::NAN).is_err());
    }

    #[test]
    fn stats_partition() {
        let mut s = PruneStats::default();
        for st in [PruneStatus::Kept, PruneStatus::TrackLost, PruneStatus::AutoPruned, PruneStatus::Kept] {
            s.record(st);
        }
        assert!(s.is_partition());
        assert_eq!((s.total, s.kept), (4, 2));
    }

    #[test]
    fn flags_round_trip() {
        let mut f = ManualFlags::default();
        f.insert("b");
        f.insert("a");
        assert_eq!(ManualFlags::from_text(&f.to_text()), f);
    }
}
