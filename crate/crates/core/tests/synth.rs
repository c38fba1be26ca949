use expfit::classifier::cv::{cross_validate, CvConfig};
use expfit::classifier::svm::train_binary_svm;
use expfit::classifier::LabeledExample;
use expfit::model::ShapeModel;
use expfit::pipeline::track::{track_filter, TrackOutcome, TrackParams};
use expfit::sequence::LandmarkSequence;
use expfit::synth::{emotion_prototypes, gen_emotion_dataset, gen_model, gen_video, sequence_to_track, SynthConfig};
use minilp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn small() -> SynthConfig {
    SynthConfig { num_vertices: 120, n_identity: 20, n_expression: 10, frames_per_video: 30, ..SynthConfig::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generated_models_are_valid_and_reproducible(seed in any::<u64>()) {
        let a = gen_model(&small(), seed).unwrap();
        prop_assert!(a.report().passes());
        for s in [a.identity_scales(), a.expression_scales()] {
            prop_assert!(s.as_slice().windows(2).all(|w| w[1] < w[0]));
        }
        prop_assert_eq!(gen_model(&small(), seed).unwrap(), a);
    }

    #[test]
    fn videos_are_reproducible(seed in any::<u64>()) {
        let m = gen_model(&small(), 1).unwrap();
        let (s1, t1) = gen_video(&m, &small(), seed).unwrap();
        let (s2, t2) = gen_video(&m, &small(), seed).unwrap();
        prop_assert_eq!(s1.to_text(), s2.to_text());
        prop_assert_eq!(t1.identity, t2.identity);
    }
}

#[test]
fn too_many_modes_for_the_mesh_is_rejected() {
    let cfg = SynthConfig { num_vertices: 70, n_identity: 200, n_expression: 20, ..SynthConfig::default() };
    assert!(gen_model(&cfg, 0).is_err());
}

#[test]
fn single_frame_videos_are_generated() {
    let cfg = SynthConfig { frames_per_video: 1, ..small() };
    let m = gen_model(&cfg, 2).unwrap();
    let (seq, truth): (LandmarkSequence, _) = gen_video(&m, &cfg, 3).unwrap();
    assert_eq!(seq.len(), 1);
    assert_eq!(truth.expressions.len(), 1);
}

#[test]
fn long_generated_gaps_end_the_track() {
    let k = 5;
    for (len, kept) in [(k - 1, true), (k, false), (k + 2, false)] {
        let cfg = SynthConfig { gap_count: 1, gap_min_len: len, gap_max_len: len, frames_per_video: 60, ..small() };
        let m: ShapeModel = gen_model(&cfg, 4).unwrap();
        let (seq, _) = gen_video(&m, &cfg, 5).unwrap();
        assert_eq!(seq.len() - seq.valid_count(), len);
        let params = TrackParams { max_gap: k, ..TrackParams::default() };
        let d = track_filter(&sequence_to_track(&seq, params));
        assert_eq!(d.kept, kept, "gap {len}");
        if !kept {
            assert_eq!(d.outcome, TrackOutcome::Gap);
        }
    }
}

fn lp_separable(x: &DMatrix<f64>, y: &[f64]) -> bool {
    let mut p = Problem::new(OptimizationDirection::Minimize);
    let w: Vec<_> = (0..x.ncols()).map(|_| p.add_var(0.0, (f64::NEG_INFINITY, f64::INFINITY))).collect();
    let b = p.add_var(0.0, (f64::NEG_INFINITY, f64::INFINITY));
    for i in 0..y.len() {
        let mut row: Vec<_> = w.iter().enumerate().map(|(k, &v)| (v, y[i] * x[(i, k)])).collect();
        row.push((b, y[i]));
        p.add_constraint(row.as_slice(), ComparisonOp::Ge, 1.0);
    }
    p.solve().is_ok()
}

fn features(data: &[LabeledExample]) -> DMatrix<f64> {
    DMatrix::from_fn(data.len(), data[0].expression.len(), |r, c| data[r].expression[c])
}

#[test]
fn default_margin_gives_one_vs_all_separable_classes() {
    let data = gen_emotion_dataset(&SynthConfig::default(), 8).unwrap();
    let x = features(&data);
    for c in 0..7 {
        let y: Vec<f64> = data.iter().map(|e| if e.label == c { 1.0 } else { -1.0 }).collect();
        assert!(lp_separable(&x, &y), "class {c}");
    }
}

#[test]
fn zero_margin_is_at_chance() {
    let cfg = SynthConfig { emotion_margin: 0.0, samples_per_class: 30, ..SynthConfig::default() };
    let data = gen_emotion_dataset(&cfg, 9).unwrap();
    let names: Vec<String> = (0..7).map(|c| c.to_string()).collect();
    let report = cross_validate(&data, &names, &CvConfig { k: 5, c_grid: vec![1.0], repeats: 2, ..CvConfig::default() }).unwrap();
    assert!((report.mean - 1.0 / 7.0).abs() <= 3.0 * report.std.max(0.02), "{} ± {}", report.mean, report.std);
}

#[test]
fn symmetric_pair_direction_is_learned() {
    // Two classes with prototypes p and -p: shift the two generated prototypes to their midpoint.
    let cfg = SynthConfig { num_classes: 2, samples_per_class: 200, emotion_margin: 40.0, ..SynthConfig::default() };
    let protos = emotion_prototypes(&cfg, 10).unwrap();
    let mid = (protos.row(0) + protos.row(1)).transpose() / 2.0;
    let p = (protos.row(0).transpose() - &mid).normalize();
    let data: Vec<LabeledExample> = gen_emotion_dataset(&cfg, 10)
        .unwrap()
        .into_iter()
        .map(|e| LabeledExample { expression: &e.expression - &mid, ..e })
        .collect();
    let y: Vec<f64> = data.iter().map(|e| if e.label == 0 { 1.0 } else { -1.0 }).collect();
    let m = train_binary_svm(&features(&data), &y, 1.0).unwrap();
    let angle = m.weights.normalize().dot(&p).clamp(-1.0, 1.0).acos().to_degrees();
    assert!(angle < 5.0, "{angle} degrees");
}

#[test]
fn subjects_are_dealt_round_robin() {
    let cfg = SynthConfig { num_subjects: 9, samples_per_class: 9, ..SynthConfig::default() };
    let data = gen_emotion_dataset(&cfg, 11).unwrap();
    let mut subjects: Vec<&str> = data.iter().map(|e| e.subject_id.as_str()).collect();
    subjects.sort_unstable();
    subjects.dedup();
    assert_eq!(subjects.len(), 9);
}
