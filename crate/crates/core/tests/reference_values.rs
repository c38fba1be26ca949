//! Constants fixed by the reference method rather than chosen here.

use expfit::camera::TEMPLATE_CANVAS;
use expfit::classifier::cv::CvConfig;
use expfit::harness::FRAME_BUDGET_MS;
use expfit::model::LANDMARK_COUNT;
use expfit::pipeline::track::TrackParams;
use expfit::regressor::FEATURE_DIM;
use expfit::synth::SynthConfig;

#[test]
fn default_model_dimensions() {
    let c = SynthConfig::default();
    assert_eq!((c.n_identity, c.n_expression), (157, 28));
    assert_eq!(LANDMARK_COUNT, 68);
    assert_eq!(FEATURE_DIM, 2 * 68);
}

#[test]
fn tracking_limits() {
    let p = TrackParams::default();
    assert_eq!(p.max_gap, 5);
    assert_eq!(p.margin_fraction, 0.5);
}

#[test]
fn template_canvas_and_frame_budget() {
    assert_eq!(TEMPLATE_CANVAS, 224.0);
    assert_eq!(FRAME_BUDGET_MS, 0.02 * 1e3);
}

#[test]
fn stress_protocol_uses_five_grouped_folds() {
    let c = CvConfig::stress_protocol(0);
    assert_eq!((c.k, c.grouped), (5, true));
    assert_eq!(SynthConfig::default().num_classes, 7);
}
