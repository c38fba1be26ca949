//! Synthetic ground truth: shape models, landmark videos with exact
//! coefficients and poses, and labelled expression datasets.
//!
//! Everything is a pure function of the config and a 64-bit seed
//! (ChaCha8 streams), so outputs are byte-identical across runs.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Rotation3, Vector2, Vector3};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::annotation::{PruneStatus, VideoAnnotation};
use crate::camera::CameraPose;
use crate::classifier::LabeledExample;
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::model::{ShapeCoefficients, ShapeModel, LANDMARK_COUNT};
use crate::pipeline::track::{BoundingBox, Detection, DetectionTrack, TrackParams};
use crate::sequence::LandmarkSequence;

/// Generator settings. Every field can be set from a `key = value` file
/// under the `synth.` prefix (see [`SynthConfig::from_key_values`]).
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_vertices: usize,
    pub n_identity: usize,
    pub n_expression: usize,
    /// Standard deviation of identity mode 0, in model units; mode k is scaled by `identity_decay^k`.
    pub identity_scale: f64,
    pub identity_decay: f64,
    pub expression_scale: f64,
    pub expression_decay: f64,

    pub num_videos: usize,
    pub frames_per_video: usize,
    pub pixel_noise_sigma: f64,
    /// Number of dropped-frame runs injected per video.
    pub gap_count: usize,
    pub gap_min_len: usize,
    pub gap_max_len: usize,
    /// Mean-reversion rate of the per-frame expression process.
    pub ou_theta: f64,
    /// Innovation standard deviation of the expression process (σ-units).
    pub ou_sigma: f64,
    /// Emotion prototypes are shrunk by this factor to give video expression means.
    pub video_prototype_scale: f64,

    /// Pixels per model unit.
    pub camera_scale: f64,
    pub yaw_amplitude: f64,
    pub pitch_amplitude: f64,
    pub roll_amplitude: f64,
    pub static_camera: bool,

    pub num_classes: usize,
    /// Distance from each prototype to its bisector with any other, in units
    /// of `emotion_spread`; prototypes sit twice this far apart.
    pub emotion_margin: f64,
    pub emotion_spread: f64,
    pub samples_per_class: usize,
    pub num_subjects: usize,

    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_vertices: 200,
            n_identity: 157,
            n_expression: 28,
            identity_scale: 0.2,
            identity_decay: 0.97,
            expression_scale: 0.8,
            expression_decay: 0.96,
            num_videos: 20,
            frames_per_video: 100,
            pixel_noise_sigma: 1.0,
            gap_count: 0,
            gap_min_len: 1,
            gap_max_len: 3,
            ou_theta: 0.1,
            ou_sigma: 0.3,
            video_prototype_scale: 0.25,
            camera_scale: 80.0,
            yaw_amplitude: 0.6,
            pitch_amplitude: 0.25,
            roll_amplitude: 0.15,
            static_camera: false,
            num_classes: 7,
            emotion_margin: 6.0,
            emotion_spread: 1.0,
            samples_per_class: 60,
            num_subjects: 20,
            seed: 0,
        }
    }
}

macro_rules! config_fields {
    ($m:ident) => {
        $m!(
            num_vertices, n_identity, n_expression, identity_scale, identity_decay, expression_scale,
            expression_decay, num_videos, frames_per_video, pixel_noise_sigma, gap_count, gap_min_len,
            gap_max_len, ou_theta, ou_sigma, video_prototype_scale, camera_scale, yaw_amplitude,
            pitch_amplitude, roll_amplitude, static_camera, num_classes, emotion_margin, emotion_spread,
            samples_per_class, num_subjects, seed
        )
    };
}

impl SynthConfig {
    /// Reads `<prefix>field = value` overrides on top of the defaults.
    pub fn from_key_values(kv: &KeyValues, prefix: &str) -> Result<Self> {
        let mut cfg = SynthConfig::default();
        macro_rules! read {
            ($($f:ident),*) => {
                $( kv.read_into(&format!("{prefix}{}", stringify!($f)), &mut cfg.$f)?; )*
            };
        }
        config_fields!(read);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write_key_values(&self, kv: &mut KeyValues, prefix: &str) {
        macro_rules! write {
            ($($f:ident),*) => {
                $( kv.set(&format!("{prefix}{}", stringify!($f)), self.$f); )*
            };
        }
        config_fields!(write);
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.num_vertices < LANDMARK_COUNT {
            return bad("num_vertices must be at least 68");
        }
        if self.n_identity == 0 || self.n_expression == 0 {
            return bad("mode counts must be positive");
        }
        for (name, v) in [
            ("identity_scale", self.identity_scale),
            ("expression_scale", self.expression_scale),
            ("camera_scale", self.camera_scale),
            ("emotion_spread", self.emotion_spread),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be positive"));
            }
        }
        for (name, v) in [("identity_decay", self.identity_decay), ("expression_decay", self.expression_decay)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(&format!("{name} must lie in (0, 1)"));
            }
        }
        if !(self.ou_theta > 0.0 && self.ou_theta <= 1.0) {
            return bad("ou_theta must lie in (0, 1]");
        }
        if self.pixel_noise_sigma < 0.0 || self.ou_sigma < 0.0 || self.emotion_margin < 0.0 {
            return bad("noise levels and margin must be non-negative");
        }
        if self.frames_per_video == 0 {
            return bad("frames_per_video must be positive");
        }
        if self.gap_min_len == 0 || self.gap_min_len > self.gap_max_len {
            return bad("gap lengths must satisfy 1 <= gap_min_len <= gap_max_len");
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        Ok(())
    }
}

/// Independent deterministic stream `stream` under `seed`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

pub fn gaussian_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Orthonormal columns spanning a random `cols`-dimensional subspace.
fn random_orthonormal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let q = gaussian_matrix(rng, rows, cols).qr().q();
    q.columns(0, cols).into_owned()
}

/// Approximate 68-point face layout (jaw, brows, nose, eyes, lips) on a
/// curved surface, in model units: the face spans about 2 units across.
fn canonical_face() -> Vec<Vector3<f64>> {
    let mut pts = Vec::with_capacity(LANDMARK_COUNT);
    for k in 0..17 {
        let a = PI * (1.0 - k as f64 / 16.0);
        let s = a.sin();
        pts.push(Vector3::new(a.cos(), 0.3 - 1.4 * s, -0.6 + 0.5 * s));
    }
    for side in [-1.0, 1.0] {
        for k in 0..5 {
            let t = k as f64 / 4.0;
            let x = if side < 0.0 { -0.85 + 0.65 * t } else { 0.2 + 0.65 * t };
            let bump = 0.1 * (PI * t).sin();
            pts.push(Vector3::new(x, 0.55 + bump, 0.25));
        }
    }
    for k in 0..4 {
        let t = k as f64 / 3.0;
        pts.push(Vector3::new(0.0, 0.35 - 0.5 * t, 0.45 + 0.3 * t));
    }
    for k in 0..5 {
        let x = -0.25 + 0.125 * k as f64;
        pts.push(Vector3::new(x, -0.3 + 0.03 * (x / 0.25).powi(2), 0.5 + 0.1 * (1.0 - (x / 0.25).abs())));
    }
    for cx in [-0.45, 0.45] {
        for k in 0..6 {
            let a = PI - k as f64 * PI / 3.0;
            pts.push(Vector3::new(cx + 0.2 * a.cos(), 0.3 + 0.07 * a.sin(), 0.3));
        }
    }
    for k in 0..12 {
        let a = PI - k as f64 * PI / 6.0;
        let x = 0.45 * a.cos();
        pts.push(Vector3::new(x, -0.65 + 0.18 * a.sin(), 0.4 - 0.2 * (x / 0.45).powi(2)));
    }
    for k in 0..8 {
        let a = PI - k as f64 * PI / 4.0;
        let x = 0.3 * a.cos();
        pts.push(Vector3::new(x, -0.65 + 0.06 * a.sin(), 0.42 - 0.2 * (x / 0.45).powi(2)));
    }
    debug_assert_eq!(pts.len(), LANDMARK_COUNT);
    pts
}

/// Random model: face-like mean, random orthonormal identity and expression
/// bases (via QR of Gaussian matrices), geometrically decaying scales, and
/// the landmarks placed at shuffled vertex indices.
pub fn gen_model(config: &SynthConfig, seed: u64) -> Result<ShapeModel> {
    config.validate()?;
    let n = config.num_vertices;
    let dim = 3 * n;
    if config.n_identity + config.n_expression > dim {
        return Err(Error::InvalidArgument(format!(
            "{} identity + {} expression modes exceed 3N = {dim}",
            config.n_identity, config.n_expression
        )));
    }
    let mut rng = rng_for(seed, 1);

    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let landmark_ids: Vec<usize> = order[..LANDMARK_COUNT].to_vec();

    let mut mean = DVector::zeros(dim);
    for (k, p) in canonical_face().iter().enumerate() {
        let jitter = Vector3::new(
            rng.random_range(-0.02..0.02),
            rng.random_range(-0.02..0.02),
            rng.random_range(-0.02..0.02),
        );
        mean.fixed_rows_mut::<3>(3 * landmark_ids[k]).copy_from(&(p + jitter));
    }
    for &v in &order[LANDMARK_COUNT..] {
        let x: f64 = rng.random_range(-1.0..1.0);
        let y: f64 = rng.random_range(-1.2..0.9);
        let z = 0.5 * (1.0 - x * x) - 0.1 * y * y;
        mean.fixed_rows_mut::<3>(3 * v).copy_from(&Vector3::new(x, y, z));
    }

    let identity_basis = random_orthonormal(&mut rng, dim, config.n_identity);
    let expression_basis = random_orthonormal(&mut rng, dim, config.n_expression);
    let decay = |s0: f64, r: f64, k: usize| DVector::from_fn(k, |i, _| s0 * r.powi(i as i32));
    ShapeModel::new(
        mean,
        identity_basis,
        decay(config.identity_scale, config.identity_decay, config.n_identity),
        expression_basis,
        decay(config.expression_scale, config.expression_decay, config.n_expression),
        landmark_ids,
    )
}

/// Emotion prototypes: `num_classes` mutually orthogonal directions in
/// expression space, placed so every pair sits `margin * spread` apart.
pub fn emotion_prototypes(config: &SynthConfig, seed: u64) -> Result<DMatrix<f64>> {
    let (c, ne) = (config.num_classes, config.n_expression);
    if c > ne {
        return Err(Error::InvalidArgument(format!("{c} prototypes do not fit in {ne} dimensions")));
    }
    let mut rng = rng_for(seed, 2);
    let dirs = random_orthonormal(&mut rng, ne, c);
    let radius = config.emotion_margin * config.emotion_spread * 2f64.sqrt();
    Ok(dirs.transpose() * radius)
}

/// Ground-truth description of one video before rendering.
#[derive(Debug, Clone)]
pub struct VideoRecipe {
    pub source_id: String,
    pub identity: DVector<f64>,
    pub expressions: Vec<DVector<f64>>,
    pub poses: Vec<CameraPose>,
    /// Frames whose landmarks are dropped (missing detections).
    pub dropped: Vec<bool>,
    pub emotion_class: usize,
}

/// Rotation with yaw about the vertical axis, pitch about the horizontal,
/// roll in the image plane.
pub fn head_rotation(yaw: f64, pitch: f64, roll: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::z_axis(), roll)
        * Rotation3::from_axis_angle(&Vector3::y_axis(), yaw)
        * Rotation3::from_axis_angle(&Vector3::x_axis(), pitch)
}

/// Smooth head path: sinusoidal yaw/pitch/roll with random phase and
/// frequency, slowly breathing scale and drifting translation.
pub fn sample_camera_path(config: &SynthConfig, frames: usize, rng: &mut ChaCha8Rng) -> Vec<CameraPose> {
    let centre = Vector2::new(112.0, 112.0);
    if config.static_camera {
        let rot = head_rotation(
            rng.random_range(-0.3..0.3) * config.yaw_amplitude,
            rng.random_range(-0.3..0.3) * config.pitch_amplitude,
            rng.random_range(-0.3..0.3) * config.roll_amplitude,
        );
        let pose = CameraPose {
            rotation: rot,
            scale: config.camera_scale,
            translation: centre,
        };
        return vec![pose; frames];
    }
    let mut wave = |amp: f64| {
        let cycles: f64 = rng.random_range(0.5..1.5);
        let phase: f64 = rng.random_range(0.0..2.0 * PI);
        (amp, cycles, phase)
    };
    let yaw = wave(config.yaw_amplitude);
    let pitch = wave(config.pitch_amplitude);
    let roll = wave(config.roll_amplitude);
    let breath = wave(0.08);
    let drift_x = wave(8.0);
    let drift_y = wave(8.0);
    let at = |(amp, cycles, phase): (f64, f64, f64), f: usize| {
        amp * (2.0 * PI * cycles * f as f64 / frames.max(2) as f64 + phase).sin()
    };
    (0..frames)
        .map(|f| CameraPose {
            rotation: head_rotation(at(yaw, f), at(pitch, f), at(roll, f)),
            scale: config.camera_scale * (1.0 + at(breath, f)),
            translation: centre + Vector2::new(at(drift_x, f), at(drift_y, f)),
        })
        .collect()
}

/// Mean-reverting expression trajectory around `mean`, started in its
/// stationary distribution.
pub fn sample_expression_path(
    config: &SynthConfig,
    mean: &DVector<f64>,
    frames: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<DVector<f64>> {
    let theta = config.ou_theta;
    let stationary = config.ou_sigma / (1.0 - (1.0 - theta).powi(2)).max(1e-12).sqrt();
    let mut e = mean + gaussian_vector(rng, mean.len()) * stationary;
    let mut out = Vec::with_capacity(frames);
    for _ in 0..frames {
        out.push(e.clone());
        e = &e + (mean - &e) * theta + gaussian_vector(rng, mean.len()) * config.ou_sigma;
    }
    out
}

fn sample_gaps(config: &SynthConfig, frames: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut dropped = vec![false; frames];
    for _ in 0..config.gap_count {
        let len = rng.random_range(config.gap_min_len..=config.gap_max_len);
        if frames < len + 2 {
            continue;
        }
        let start = rng.random_range(1..=frames - len - 1);
        dropped[start..start + len].iter_mut().for_each(|d| *d = true);
    }
    dropped
}

/// Samples the ground truth of one video: standard-normal identity,
/// expressions mean-reverting around a (shrunk) emotion prototype, smooth
/// camera path and dropped-frame runs per `gap_count`.
pub fn sample_video(model: &ShapeModel, config: &SynthConfig, seed: u64) -> Result<VideoRecipe> {
    let mut rng = rng_for(seed, 3);
    let frames = config.frames_per_video;
    let protos = emotion_prototypes(
        &SynthConfig {
            n_expression: model.expression_dim(),
            num_classes: config.num_classes.min(model.expression_dim()),
            ..config.clone()
        },
        config.seed,
    )?;
    let class = rng.random_range(0..protos.nrows());
    let mean = protos.row(class).transpose() * config.video_prototype_scale;
    let identity = gaussian_vector(&mut rng, model.identity_dim());
    let expressions = sample_expression_path(config, &mean, frames, &mut rng);
    let poses = sample_camera_path(config, frames, &mut rng);
    let dropped = sample_gaps(config, frames, &mut rng);
    Ok(VideoRecipe {
        source_id: format!("synth-{seed:08}"),
        identity,
        expressions,
        poses,
        dropped,
        emotion_class: class,
    })
}

/// Noise-free landmarks of one frame.
pub fn render_frame(
    model: &ShapeModel,
    identity: &DVector<f64>,
    expression: &DVector<f64>,
    pose: &CameraPose,
) -> Result<Vec<Vector2<f64>>> {
    let coeffs = ShapeCoefficients {
        identity: identity.clone(),
        expression: expression.clone(),
    };
    Ok(pose.project(&model.landmarks_3d(&coeffs)?))
}

impl VideoRecipe {
    /// Projects the recipe to landmarks with i.i.d. Gaussian pixel noise.
    /// Dropped frames are marked invalid and filled with `NaN`.
    pub fn render(&self, model: &ShapeModel, noise_sigma: f64, seed: u64) -> Result<(LandmarkSequence, VideoAnnotation)> {
        let mut rng = rng_for(seed, 4);
        let noise = Normal::new(0.0, noise_sigma.max(0.0)).expect("non-negative sigma");
        let mut frames = Vec::with_capacity(self.poses.len());
        for (f, pose) in self.poses.iter().enumerate() {
            let mut pts = render_frame(model, &self.identity, &self.expressions[f], pose)?;
            for p in pts.iter_mut() {
                let dx = noise.sample(&mut rng);
                let dy = noise.sample(&mut rng);
                if noise_sigma > 0.0 {
                    *p += Vector2::new(dx, dy);
                }
                if self.dropped[f] {
                    *p = Vector2::new(f64::NAN, f64::NAN);
                }
            }
            frames.push(pts);
        }
        let valid: Vec<bool> = self.dropped.iter().map(|d| !d).collect();
        let seq = LandmarkSequence::new(frames, valid.clone(), self.source_id.clone())?;
        let truth = VideoAnnotation {
            source_id: self.source_id.clone(),
            identity: self.identity.clone(),
            expressions: self.expressions.clone(),
            poses: self.poses.clone(),
            frame_valid: valid,
            mean_reprojection_px: 0.0,
            prune_status: PruneStatus::Kept,
            prune_reason: String::new(),
        };
        Ok((seq, truth))
    }
}

/// One rendered video together with its exact ground truth.
pub fn gen_video(model: &ShapeModel, config: &SynthConfig, seed: u64) -> Result<(LandmarkSequence, VideoAnnotation)> {
    sample_video(model, config, seed)?.render(model, config.pixel_noise_sigma, seed)
}

/// Wraps a landmark sequence as a single-face detection track, with each
/// bounding box the landmarks' extent padded by 10%.
pub fn sequence_to_track(seq: &LandmarkSequence, params: TrackParams) -> DetectionTrack {
    let frames = seq
        .frames
        .iter()
        .zip(&seq.valid)
        .map(|(pts, &ok)| {
            ok.then(|| {
                let (mut lo, mut hi) = (Vector2::repeat(f64::INFINITY), Vector2::repeat(f64::NEG_INFINITY));
                for p in pts {
                    lo = lo.inf(p);
                    hi = hi.sup(p);
                }
                let pad = (hi - lo) * 0.1;
                Detection {
                    bbox: BoundingBox {
                        x: lo.x - pad.x,
                        y: lo.y - pad.y,
                        width: (hi.x - lo.x) + 2.0 * pad.x,
                        height: (hi.y - lo.y) + 2.0 * pad.y,
                    },
                    landmarks: pts.clone(),
                }
            })
        })
        .collect();
    DetectionTrack {
        source_id: seq.source_id.clone(),
        frames,
        params,
    }
}

/// Labelled expression vectors scattered around the emotion prototypes.
/// Samples are dealt to subjects round-robin, so each subject shows every class.
pub fn gen_emotion_dataset(config: &SynthConfig, seed: u64) -> Result<Vec<LabeledExample>> {
    if config.num_subjects == 0 {
        return Err(Error::Config("synth: num_subjects must be positive".into()));
    }
    let protos = emotion_prototypes(config, seed)?;
    let mut rng = rng_for(seed, 5);
    let mut out = Vec::with_capacity(config.num_classes * config.samples_per_class);
    let mut counter = 0usize;
    for _ in 0..config.samples_per_class {
        for c in 0..config.num_classes {
            let x = protos.row(c).transpose() + gaussian_vector(&mut rng, config.n_expression) * config.emotion_spread;
            out.push(LabeledExample {
                expression: x,
                label: c,
                subject_id: format!("s{:03}", counter % config.num_subjects),
            });
            counter += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            num_vertices: 100,
            n_identity: 20,
            n_expression: 10,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn model_passes_invariants_for_many_seeds() {
        for seed in 0..5 {
            let m = gen_model(&small(), seed).unwrap();
            assert!(m.report().passes());
        }
    }

    #[test]
    fn model_is_deterministic() {
        let a = gen_model(&small(), 42).unwrap();
        let b = gen_model(&small(), 42).unwrap();
        assert_eq!(a.to_container().to_bytes(), b.to_container().to_bytes());
        let c = gen_model(&small(), 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn scales_decay_monotonically() {
        let m = gen_model(&small(), 1).unwrap();
        for s in [m.identity_scales(), m.expression_scales()] {
            assert!(s.as_slice().windows(2).all(|w| w[1] < w[0]));
        }
    }

    #[test]
    fn too_many_modes_is_infeasible() {
        let cfg = SynthConfig {
            num_vertices: 70,
            n_identity: 200,
            n_expression: 20,
            ..SynthConfig::default()
        };
        assert!(matches!(gen_model(&cfg, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn prototypes_are_margin_apart() {
        let cfg = small();
        let p = emotion_prototypes(&cfg, 3).unwrap();
        for i in 0..cfg.num_classes {
            for j in 0..i {
                let d = (p.row(i) - p.row(j)).norm();
                assert!((d - 2.0 * cfg.emotion_margin * cfg.emotion_spread).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn video_truth_reprojects_exactly_without_noise() {
        let cfg = SynthConfig {
            pixel_noise_sigma: 0.0,
            frames_per_video: 5,
            ..small()
        };
        let m = gen_model(&cfg, 0).unwrap();
        let (seq, truth) = gen_video(&m, &cfg, 9).unwrap();
        for f in 0..5 {
            let pts = render_frame(&m, &truth.identity, &truth.expressions[f], &truth.poses[f]).unwrap();
            assert_eq!(pts, seq.frames[f]);
        }
    }

    #[test]
    fn single_frame_video() {
        let cfg = SynthConfig {
            frames_per_video: 1,
            ..small()
        };
        let m = gen_model(&cfg, 0).unwrap();
        let (seq, truth) = gen_video(&m, &cfg, 1).unwrap();
        assert_eq!(seq.len(), 1);
        assert_eq!(truth.poses.len(), 1);
    }

    #[test]
    fn gaps_are_injected() {
        let cfg = SynthConfig {
            gap_count: 2,
            gap_min_len: 3,
            gap_max_len: 3,
            ..small()
        };
        let m = gen_model(&cfg, 0).unwrap();
        let (seq, _) = gen_video(&m, &cfg, 5).unwrap();
        let missing = seq.valid.iter().filter(|v| !**v).count();
        assert!((3..=6).contains(&missing));
        assert!(seq.valid[0] && seq.valid[seq.len() - 1]);
    }

    #[test]
    fn emotion_dataset_shape() {
        let cfg = small();
        let data = gen_emotion_dataset(&cfg, 2).unwrap();
        assert_eq!(data.len(), cfg.num_classes * cfg.samples_per_class);
        assert!(data.iter().all(|e| e.expression.len() == cfg.n_expression && e.label < cfg.num_classes));
        let subjects: std::collections::BTreeSet<_> = data.iter().map(|e| e.subject_id.clone()).collect();
        assert_eq!(subjects.len(), cfg.num_subjects);
    }

    #[test]
    fn config_round_trips_through_key_values() {
        let cfg = SynthConfig {
            num_videos: 3,
            pixel_noise_sigma: 0.25,
            static_camera: true,
            seed: 77,
            ..small()
        };
        let mut kv = KeyValues::default();
        cfg.write_key_values(&mut kv, "synth.");
        let text = kv.to_text();
        let back = SynthConfig::from_key_values(&KeyValues::parse(&text, "mem").unwrap(), "synth.").unwrap();
        assert_eq!(back, cfg);
    }
}
