use expfit::camera::{CameraPose, Similarity2D};
use expfit::fitter::{evaluate_energy, fit_video, fit_video_traced, init_cameras, FitConfig};
use expfit::annotation::VideoAnnotation;
use expfit::model::{ShapeCoefficients, ShapeModel};
use expfit::sequence::LandmarkSequence;
use expfit::synth::{gen_model, gen_video, sample_video, SynthConfig};
use nalgebra::{DMatrix, DVector, Vector2};
use proptest::prelude::*;
use std::sync::OnceLock;

fn small_cfg() -> SynthConfig {
    SynthConfig {
        num_vertices: 150,
        n_identity: 40,
        n_expression: 12,
        frames_per_video: 40,
        ..SynthConfig::default()
    }
}

fn small_model() -> &'static ShapeModel {
    static M: OnceLock<ShapeModel> = OnceLock::new();
    M.get_or_init(|| gen_model(&small_cfg(), 11).unwrap())
}

fn tight(lambda: f64) -> FitConfig {
    FitConfig {
        lambda_identity: lambda,
        lambda_expression: lambda,
        lambda_temporal: lambda,
        outer_iterations: 100,
        convergence_tol: 1e-13,
    }
}

fn expression_mse(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    let n = a[0].len() as f64;
    a.iter().zip(b).map(|(x, y)| (x - y).norm_squared() / n).sum::<f64>() / a.len() as f64
}

fn reprojection_rms(model: &ShapeModel, seq: &LandmarkSequence, identity: &DVector<f64>, expr: &[DVector<f64>], poses: &[CameraPose]) -> f64 {
    let mut sse = 0.0;
    let mut n = 0.0;
    for f in 0..seq.len() {
        let c = ShapeCoefficients { identity: identity.clone(), expression: expr[f].clone() };
        for (p, q) in poses[f].project(&model.landmarks_3d(&c).unwrap()).iter().zip(&seq.frames[f]) {
            sse += (p - q).norm_squared();
            n += 1.0;
        }
    }
    (sse / n).sqrt()
}

#[test]
fn rigid_video_is_recovered_by_initialisation() {
    let m = small_model();
    let mut recipe = sample_video(m, &small_cfg(), 3).unwrap();
    for e in &mut recipe.expressions {
        e.fill(0.0);
    }
    let (seq, truth) = recipe.render(m, 0.0, 3).unwrap();
    let init = init_cameras(m, &seq, &tight(1e-10)).unwrap();
    let zeros = vec![DVector::zeros(m.expression_dim()); seq.len()];
    assert!(reprojection_rms(m, &seq, &init.identity, &zeros, &init.poses) < 1e-6);
    assert!((&init.identity - &truth.identity).amax() < 1e-5);
    for (p, t) in init.poses.iter().zip(&truth.poses) {
        assert!(p.rotation_angle_to(t) < 1e-6);
    }
}

/// Ridge solution for the identity given one fixed pose, built densely.
fn single_image_ridge(model: &ShapeModel, pose: &CameraPose, target: &[Vector2<f64>], lambda: f64) -> DVector<f64> {
    let a = pose.linear();
    let b = model.landmark_identity_basis();
    let mean = model.landmark_mean();
    let rows = 2 * target.len();
    let mut j = DMatrix::zeros(rows, b.ncols());
    let mut r = DVector::zeros(rows);
    for (k, q) in target.iter().enumerate() {
        j.rows_mut(2 * k, 2).copy_from(&(a * b.rows(3 * k, 3)));
        let m3 = mean.fixed_rows::<3>(3 * k);
        let v = q - pose.translation - a * m3;
        r[2 * k] = v.x;
        r[2 * k + 1] = v.y;
    }
    let lhs = j.transpose() * &j + DMatrix::identity(b.ncols(), b.ncols()) * lambda;
    lhs.lu().solve(&(j.transpose() * r)).unwrap()
}

#[test]
fn single_frame_initialisation_is_a_ridge_fit() {
    let m = small_model();
    let cfg = SynthConfig { frames_per_video: 1, ..small_cfg() };
    let (seq, _) = gen_video(m, &cfg, 8).unwrap();
    let fc = FitConfig { outer_iterations: 200, convergence_tol: 1e-15, ..FitConfig::default() };
    let init = init_cameras(m, &seq, &fc).unwrap();
    let ridge = single_image_ridge(m, &init.poses[0], &seq.frames[0], fc.lambda_identity);
    assert!((&init.identity - &ridge).amax() < 1e-6, "{:e}", (&init.identity - &ridge).amax());
}

#[test]
fn multi_frame_identity_beats_best_single_frame() {
    let m = small_model();
    let cfg = SynthConfig { frames_per_video: 50, static_camera: true, pixel_noise_sigma: 1.0, ..small_cfg() };
    let fc = FitConfig::default();
    let (mut multi, mut best_single) = (0.0, 0.0);
    for seed in 0..20 {
        let mut recipe = sample_video(m, &cfg, 500 + seed).unwrap();
        for e in &mut recipe.expressions {
            e.fill(0.0);
        }
        let (seq, truth) = recipe.render(m, cfg.pixel_noise_sigma, 500 + seed).unwrap();
        let err = |id: &DVector<f64>| (id - &truth.identity).norm_squared();
        multi += err(&init_cameras(m, &seq, &fc).unwrap().identity);
        let mut best = f64::INFINITY;
        for f in 0..seq.len() {
            let one = LandmarkSequence::new(vec![seq.frames[f].clone()], vec![true], "one").unwrap();
            best = best.min(err(&init_cameras(m, &one, &fc).unwrap().identity));
        }
        best_single += best;
    }
    assert!(multi < best_single, "multi {multi} vs best single {best_single}");
}

#[test]
fn noise_free_expressive_video_is_recovered() {
    let m = small_model();
    let cfg = SynthConfig { pixel_noise_sigma: 0.0, ..small_cfg() };
    for seed in 0..3 {
        let (seq, truth) = gen_video(m, &cfg, 40 + seed).unwrap();
        let (fit, trace) = fit_video_traced(m, &seq, &tight(1e-8)).unwrap();
        assert!(trace.is_monotone());
        assert!(expression_mse(&fit.expressions, &truth.expressions) < 1e-6);
        for (p, t) in fit.poses.iter().zip(&truth.poses) {
            assert!(p.rotation_angle_to(t) < 1e-4);
        }
    }
}

#[test]
fn fit_energy_does_not_exceed_ground_truth_energy() {
    let m = small_model();
    let cfg = SynthConfig { pixel_noise_sigma: 1.0, ..small_cfg() };
    let fc = FitConfig::default();
    for seed in 0..3 {
        let (seq, truth) = gen_video(m, &cfg, 70 + seed).unwrap();
        let fit = fit_video(m, &seq, &fc).unwrap();
        let e_fit = evaluate_energy(m, &seq, &fit, &fc).unwrap();
        let e_truth = evaluate_energy(m, &seq, &truth, &fc).unwrap();
        assert!(e_fit <= e_truth * (1.0 + 1e-9), "{e_fit} > {e_truth}");
    }
}

#[test]
fn huge_expression_weight_reduces_to_the_rigid_fit() {
    let m = small_model();
    let (seq, _) = gen_video(m, &small_cfg(), 21).unwrap();
    let fc = FitConfig { lambda_expression: 1e12, outer_iterations: 50, convergence_tol: 1e-12, ..FitConfig::default() };
    let fit = fit_video(m, &seq, &fc).unwrap();
    assert!(fit.expressions.iter().all(|e| e.amax() < 1e-6));
    let rigid = init_cameras(m, &seq, &FitConfig { outer_iterations: 200, convergence_tol: 1e-14, ..fc }).unwrap();
    assert!((&fit.identity - &rigid.identity).amax() < 1e-4);
}

fn moved(seq: &LandmarkSequence, sim: &Similarity2D) -> LandmarkSequence {
    LandmarkSequence::new(seq.frames.iter().map(|f| sim.apply_all(f)).collect(), seq.valid.clone(), "moved").unwrap()
}

fn assert_same_shape(a: &VideoAnnotation, b: &VideoAnnotation) {
    assert!((&a.identity - &b.identity).amax() < 1e-6, "{:e}", (&a.identity - &b.identity).amax());
    assert!(expression_mse(&a.expressions, &b.expressions) < 1e-12);
}

#[test]
fn image_isometry_changes_only_poses() {
    let m = small_model();
    let (seq, _) = gen_video(m, &small_cfg(), 31).unwrap();
    let sim = Similarity2D { scale: 1.0, rotation_angle: 0.6, translation: Vector2::new(-40.0, 25.0) };
    let fc = FitConfig { outer_iterations: 60, convergence_tol: 1e-13, ..FitConfig::default() };
    let a = fit_video(m, &seq, &fc).unwrap();
    let b = fit_video(m, &moved(&seq, &sim), &fc).unwrap();
    assert_same_shape(&a, &b);
    for (p, q) in a.poses.iter().zip(&b.poses) {
        assert!((q.scale - p.scale).abs() < 1e-8 * p.scale);
    }
}

// The data term is in pixels and the prior in sigma units, so an image
// rescale by s is matched by dividing every weight by s squared.
#[test]
fn image_rescale_is_absorbed_by_the_weights() {
    let m = small_model();
    let (seq, _) = gen_video(m, &small_cfg(), 33).unwrap();
    let s = 1.7;
    let sim = Similarity2D { scale: s, rotation_angle: -0.4, translation: Vector2::new(10.0, -5.0) };
    let fc = FitConfig { outer_iterations: 60, convergence_tol: 1e-13, ..FitConfig::default() };
    let scaled = FitConfig {
        lambda_identity: fc.lambda_identity * s * s,
        lambda_expression: fc.lambda_expression * s * s,
        lambda_temporal: fc.lambda_temporal * s * s,
        ..fc
    };
    let a = fit_video(m, &seq, &fc).unwrap();
    let b = fit_video(m, &moved(&seq, &sim), &scaled).unwrap();
    assert_same_shape(&a, &b);
    for (p, q) in a.poses.iter().zip(&b.poses) {
        assert!((q.scale / p.scale - s).abs() < 1e-6);
    }
}

#[test]
fn frame_permutation_without_temporal_term() {
    let m = small_model();
    let (seq, _) = gen_video(m, &small_cfg(), 32).unwrap();
    let n = seq.len();
    let perm: Vec<usize> = (0..n).map(|f| (f * 7 + 3) % n).collect();
    let shuffled = LandmarkSequence::new(perm.iter().map(|&f| seq.frames[f].clone()).collect(), vec![true; n], "perm").unwrap();
    let fc = FitConfig { lambda_temporal: 0.0, outer_iterations: 60, convergence_tol: 1e-13, ..FitConfig::default() };
    let a = fit_video(m, &seq, &fc).unwrap();
    let b = fit_video(m, &shuffled, &fc).unwrap();
    assert!((&a.identity - &b.identity).amax() < 1e-5);
    for (g, &f) in perm.iter().enumerate() {
        assert!((&b.expressions[g] - &a.expressions[f]).amax() < 1e-5);
        assert!(b.poses[g].rotation_angle_to(&a.poses[f]) < 1e-6);
    }
}

#[test]
fn expressions_shrink_as_their_weight_grows() {
    let m = small_model();
    for seed in 0..3 {
        let (seq, _) = gen_video(m, &small_cfg(), 90 + seed).unwrap();
        let norms: Vec<Vec<f64>> = [0.1, 1.0, 10.0]
            .iter()
            .map(|&l| {
                let fc = FitConfig { lambda_expression: l, lambda_temporal: 0.0, outer_iterations: 60, convergence_tol: 1e-13, ..FitConfig::default() };
                fit_video(m, &seq, &fc).unwrap().expressions.iter().map(|e| e.norm()).collect()
            })
            .collect();
        for ((weak, mid), strong) in norms[0].iter().zip(&norms[1]).zip(&norms[2]) {
            assert!(mid <= &(weak + 1e-8) && strong <= &(mid + 1e-8));
        }
    }
}

#[test]
fn noisy_long_video_expression_error_is_small() {
    let cfg = SynthConfig { frames_per_video: 200, ..SynthConfig::default() };
    let m = gen_model(&cfg, 0).unwrap();
    let mut total = 0.0;
    for seed in 0..3 {
        let (seq, truth) = gen_video(&m, &cfg, 300 + seed).unwrap();
        total += expression_mse(&fit_video(&m, &seq, &FitConfig::default()).unwrap().expressions, &truth.expressions);
    }
    assert!(total / 3.0 <= 0.01, "{}", total / 3.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn energy_never_rises(seed in 0u64..10_000, noise in 0.0..3.0f64, lt in 0.0..2.0f64) {
        let m = small_model();
        let cfg = SynthConfig { pixel_noise_sigma: noise, frames_per_video: 20, gap_count: 1, ..small_cfg() };
        let (seq, _) = gen_video(m, &cfg, seed).unwrap();
        let fc = FitConfig { lambda_temporal: lt, ..FitConfig::default() };
        let (_, trace) = fit_video_traced(m, &seq, &fc).unwrap();
        prop_assert!(trace.is_monotone());
    }
}
