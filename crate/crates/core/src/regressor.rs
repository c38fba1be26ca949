//! Single-frame expression regression from template-registered landmarks.
//!
//! A frame's 68 landmarks are registered to the template by a 2D similarity,
//! and the residual against the template, divided by the template's
//! bounding-box diagonal, forms a 136-long feature. A backend maps features
//! to expression coefficients. The default backend is ridge regression with
//! an unpenalised intercept.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector2};
use rand::seq::SliceRandom;

use crate::annotation::{PruneStatus, VideoAnnotation};
use crate::camera::register_to_template;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::LANDMARK_COUNT;
use crate::sequence::LandmarkSequence;
use crate::synth::rng_for;

pub const FEATURE_DIM: usize = 2 * LANDMARK_COUNT;
pub const CONTAINER_KIND: &str = "expression_regressor";
pub const LINEAR_RIDGE: &str = "linear-ridge";

fn bbox_diagonal(points: &[Vector2<f64>]) -> f64 {
    let (mut lo, mut hi) = (Vector2::repeat(f64::INFINITY), Vector2::repeat(f64::NEG_INFINITY));
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (hi - lo).norm()
}

/// Registered landmarks minus the template, scaled by the template's
/// bounding-box diagonal and flattened as `x0 y0 x1 y1 ...`.
pub fn featurize(landmarks: &[Vector2<f64>], template: &[Vector2<f64>]) -> Result<DVector<f64>> {
    let (_, registered) = register_to_template(landmarks, template)?;
    let diag = bbox_diagonal(template);
    if !(diag > 0.0) {
        return Err(Error::Degenerate {
            context: "template bounding box",
            singular_values: vec![diag],
        });
    }
    Ok(DVector::from_iterator(
        FEATURE_DIM,
        registered
            .iter()
            .zip(template)
            .flat_map(|(r, t)| [(r.x - t.x) / diag, (r.y - t.y) / diag]),
    ))
}

/// Maps features to expression coefficients. Implementations expose their
/// parameters as named arrays so any backend fits the model container.
pub trait RegressorBackend: fmt::Debug + Send + Sync {
    fn tag(&self) -> &'static str;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn predict(&self, feature: &DVector<f64>) -> DVector<f64>;
    fn parameters(&self) -> Vec<(String, DMatrix<f64>)>;
}

/// `e = Wᵀx + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRidge {
    /// input_dim × output_dim.
    pub weights: DMatrix<f64>,
    pub intercept: DVector<f64>,
}

impl LinearRidge {
    /// Minimises `‖X W + 1 bᵀ − E‖_F² + λ‖W‖_F²` with the intercept left
    /// unpenalised (solved on centred data).
    pub fn fit(x: &DMatrix<f64>, e: &DMatrix<f64>, lambda: f64) -> Result<Self> {
        if x.nrows() != e.nrows() {
            return Err(Error::DimensionMismatch {
                context: "regression rows",
                expected: x.nrows(),
                actual: e.nrows(),
            });
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("ridge lambda must be finite and >= 0, got {lambda}")));
        }
        if x.nrows() == 0 {
            return Err(Error::EmptyInput("no training rows".into()));
        }
        let x_mean = x.row_mean();
        let e_mean = e.row_mean();
        let mut xc = x.clone();
        let mut ec = e.clone();
        for mut r in xc.row_iter_mut() {
            r -= &x_mean;
        }
        for mut r in ec.row_iter_mut() {
            r -= &e_mean;
        }
        let mut gram = xc.transpose() * &xc;
        for j in 0..gram.nrows() {
            gram[(j, j)] += lambda;
        }
        let rhs = xc.transpose() * &ec;
        let weights = linalg::factor_spd(gram, "ridge normal equations")?.solve(&rhs);
        let intercept = (e_mean - x_mean * &weights).transpose();
        Ok(LinearRidge { weights, intercept })
    }
}

impl RegressorBackend for LinearRidge {
    fn tag(&self) -> &'static str {
        LINEAR_RIDGE
    }

    fn input_dim(&self) -> usize {
        self.weights.nrows()
    }

    fn output_dim(&self) -> usize {
        self.weights.ncols()
    }

    fn predict(&self, feature: &DVector<f64>) -> DVector<f64> {
        self.weights.tr_mul(feature) + &self.intercept
    }

    fn parameters(&self) -> Vec<(String, DMatrix<f64>)> {
        vec![
            ("weights".into(), self.weights.clone()),
            ("intercept".into(), DMatrix::from_column_slice(self.intercept.len(), 1, self.intercept.as_slice())),
        ]
    }
}

fn backend_from_parameters(tag: &str, c: &Container) -> Result<Box<dyn RegressorBackend>> {
    match tag {
        LINEAR_RIDGE => {
            let weights = c.array("weights")?.clone();
            let b = c.array("intercept")?;
            if b.ncols() != 1 || b.nrows() != weights.ncols() {
                return Err(Error::Format {
                    offset: 0,
                    message: "intercept shape does not match weights".into(),
                });
            }
            Ok(Box::new(LinearRidge {
                weights,
                intercept: b.column(0).into_owned(),
            }))
        }
        other => Err(Error::Format {
            offset: 0,
            message: format!("unknown regressor backend `{other}`"),
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.7,
            val: 0.15,
            seed: 0,
        }
    }
}

impl SplitSpec {
    /// Shuffled `(train, val, test)` row indices; test takes the remainder.
    pub fn partition(&self, rows: usize) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
        if !(self.train > 0.0 && self.val >= 0.0 && self.train + self.val <= 1.0) {
            return Err(Error::Config(format!(
                "split fractions must satisfy 0 < train, 0 <= val, train + val <= 1 (got {}, {})",
                self.train, self.val
            )));
        }
        let mut idx: Vec<usize> = (0..rows).collect();
        idx.shuffle(&mut rng_for(self.seed, 7));
        let n_train = ((rows as f64) * self.train).round() as usize;
        let n_val = (((rows as f64) * self.val).round() as usize).min(rows - n_train);
        let test = idx.split_off(n_train + n_val);
        let val = idx.split_off(n_train);
        Ok((idx, val, test))
    }
}

/// Per-coefficient mean squared errors on each split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingReport {
    pub train_mse: f64,
    pub val_mse: f64,
    pub test_mse: f64,
    pub train_rows: usize,
    pub val_rows: usize,
    pub test_rows: usize,
    pub ridge_lambda: f64,
    /// Closed-form solve counts as one iteration.
    pub iterations: usize,
}

impl fmt::Display for TrainingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# mse = mean over rows and coefficients of squared error (sigma-units^2)")?;
        writeln!(f, "train_rows = {}", self.train_rows)?;
        writeln!(f, "val_rows = {}", self.val_rows)?;
        writeln!(f, "test_rows = {}", self.test_rows)?;
        writeln!(f, "ridge_lambda = {}", self.ridge_lambda)?;
        writeln!(f, "train_mse = {}", self.train_mse)?;
        writeln!(f, "val_mse = {}", self.val_mse)?;
        writeln!(f, "test_mse = {}", self.test_mse)
    }
}

#[derive(Debug)]
pub struct RegressorModel {
    backend: Box<dyn RegressorBackend>,
    template: Vec<Vector2<f64>>,
    pub report: TrainingReport,
}

/// Mean over rows and coefficients of the squared difference.
pub fn per_coefficient_mse(pred: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    if pred.is_empty() {
        return f64::NAN;
    }
    (pred - truth).norm_squared() / pred.len() as f64
}

fn rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    m.select_rows(idx)
}

pub fn train_regressor(
    features: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    template: &[Vector2<f64>],
    split: SplitSpec,
    ridge_lambda: f64,
) -> Result<RegressorModel> {
    if features.nrows() != targets.nrows() {
        return Err(Error::DimensionMismatch {
            context: "feature rows vs target rows",
            expected: features.nrows(),
            actual: targets.nrows(),
        });
    }
    if template.len() != LANDMARK_COUNT || features.ncols() != FEATURE_DIM {
        return Err(Error::DimensionMismatch {
            context: "regressor feature width",
            expected: FEATURE_DIM,
            actual: features.ncols(),
        });
    }
    let need = 10 * targets.ncols();
    if features.nrows() < need {
        return Err(Error::InsufficientData(format!(
            "{} training rows; at least {need} are needed for {} outputs",
            features.nrows(),
            targets.ncols()
        )));
    }
    let (tr, va, te) = split.partition(features.nrows())?;
    let backend = LinearRidge::fit(&rows(features, &tr), &rows(targets, &tr), ridge_lambda)?;
    let mse = |idx: &[usize]| {
        if idx.is_empty() {
            return f64::NAN;
        }
        let x = rows(features, idx);
        let mut pred = DMatrix::zeros(idx.len(), targets.ncols());
        for (r, row) in x.row_iter().enumerate() {
            pred.set_row(r, &backend.predict(&row.transpose()).transpose());
        }
        per_coefficient_mse(&pred, &rows(targets, idx))
    };
    let report = TrainingReport {
        train_mse: mse(&tr),
        val_mse: mse(&va),
        test_mse: mse(&te),
        train_rows: tr.len(),
        val_rows: va.len(),
        test_rows: te.len(),
        ridge_lambda,
        iterations: 1,
    };
    Ok(RegressorModel {
        backend: Box::new(backend),
        template: template.to_vec(),
        report,
    })
}

impl RegressorModel {
    pub fn from_backend(backend: Box<dyn RegressorBackend>, template: Vec<Vector2<f64>>, report: TrainingReport) -> Result<Self> {
        if backend.input_dim() != FEATURE_DIM || template.len() != LANDMARK_COUNT {
            return Err(Error::DimensionMismatch {
                context: "regressor backend input",
                expected: FEATURE_DIM,
                actual: backend.input_dim(),
            });
        }
        Ok(RegressorModel {
            backend,
            template,
            report,
        })
    }

    pub fn backend_tag(&self) -> &'static str {
        self.backend.tag()
    }

    pub fn backend(&self) -> &dyn RegressorBackend {
        self.backend.as_ref()
    }

    pub fn output_dim(&self) -> usize {
        self.backend.output_dim()
    }

    pub fn template(&self) -> &[Vector2<f64>] {
        &self.template
    }

    pub fn predict_feature(&self, feature: &DVector<f64>) -> Result<DVector<f64>> {
        if feature.len() != self.backend.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "regressor feature",
                expected: self.backend.input_dim(),
                actual: feature.len(),
            });
        }
        Ok(self.backend.predict(feature))
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(CONTAINER_KIND);
        c.set("backend", self.backend.tag());
        c.set("input_dim", self.backend.input_dim());
        c.set("output_dim", self.backend.output_dim());
        let r = &self.report;
        for (k, v) in [
            ("report.train_mse", r.train_mse),
            ("report.val_mse", r.val_mse),
            ("report.test_mse", r.test_mse),
            ("report.ridge_lambda", r.ridge_lambda),
        ] {
            c.set(k, format!("{v:e}"));
        }
        for (k, v) in [
            ("report.train_rows", r.train_rows),
            ("report.val_rows", r.val_rows),
            ("report.test_rows", r.test_rows),
            ("report.iterations", r.iterations),
        ] {
            c.set(k, v);
        }
        let t = DMatrix::from_fn(LANDMARK_COUNT, 2, |i, j| self.template[i][j]);
        c.push("template", t);
        for (name, array) in self.backend.parameters() {
            c.push(&name, array);
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(CONTAINER_KIND)?;
        let backend = backend_from_parameters(c.meta("backend")?, c)?;
        if backend.output_dim() != c.meta_usize("output_dim")? || backend.input_dim() != c.meta_usize("input_dim")? {
            return Err(Error::Format {
                offset: 0,
                message: "regressor dimensions disagree with stored parameters".into(),
            });
        }
        let t = c.array("template")?;
        if t.shape() != (LANDMARK_COUNT, 2) {
            return Err(Error::Format {
                offset: 0,
                message: "template must be 68x2".into(),
            });
        }
        let template = (0..LANDMARK_COUNT).map(|i| Vector2::new(t[(i, 0)], t[(i, 1)])).collect();
        let real = |k: &str| -> Result<f64> {
            c.meta(k)?.parse().map_err(|_| Error::Format {
                offset: 0,
                message: format!("bad number for `{k}`"),
            })
        };
        let report = TrainingReport {
            train_mse: real("report.train_mse")?,
            val_mse: real("report.val_mse")?,
            test_mse: real("report.test_mse")?,
            ridge_lambda: real("report.ridge_lambda")?,
            train_rows: c.meta_usize("report.train_rows")?,
            val_rows: c.meta_usize("report.val_rows")?,
            test_rows: c.meta_usize("report.test_rows")?,
            iterations: c.meta_usize("report.iterations")?,
        };
        Self::from_backend(backend, template, report)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write_file(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read_file(path)?)
    }
}

/// Expression coefficients for one frame of landmarks.
pub fn regress_expression(model: &RegressorModel, landmarks: &[Vector2<f64>]) -> Result<DVector<f64>> {
    if landmarks.len() != LANDMARK_COUNT {
        return Err(Error::DimensionMismatch {
            context: "regressor landmarks",
            expected: LANDMARK_COUNT,
            actual: landmarks.len(),
        });
    }
    model.predict_feature(&featurize(landmarks, &model.template)?)
}

/// Training pairs from kept annotations: each frame that carried landmarks
/// in the original sequence contributes its raw landmarks and fitted expression.
pub fn dataset_from_annotations(
    sequences: &[LandmarkSequence],
    annotations: &[VideoAnnotation],
    template: &[Vector2<f64>],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let mut feats: Vec<DVector<f64>> = Vec::new();
    let mut targets: Vec<DVector<f64>> = Vec::new();
    for a in annotations.iter().filter(|a| a.prune_status == PruneStatus::Kept) {
        let Some(seq) = sequences.iter().find(|s| s.source_id == a.source_id) else {
            return Err(Error::InvalidArgument(format!("no landmark sequence for `{}`", a.source_id)));
        };
        for f in 0..a.num_frames().min(seq.len()) {
            if seq.valid[f] && a.frame_valid[f] {
                feats.push(featurize(&seq.frames[f], template)?);
                targets.push(a.expressions[f].clone());
            }
        }
    }
    if feats.is_empty() {
        return Err(Error::EmptyInput("no kept frames to train on".into()));
    }
    let ne = targets[0].len();
    let x = DMatrix::from_fn(feats.len(), FEATURE_DIM, |r, c| feats[r][c]);
    let e = DMatrix::from_fn(targets.len(), ne, |r, c| targets[r][c]);
    Ok((x, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{template_from_model, Similarity2D};
    use crate::synth::{gen_model, SynthConfig};

    fn template() -> Vec<Vector2<f64>> {
        let cfg = SynthConfig {
            num_vertices: 100,
            n_identity: 10,
            n_expression: 5,
            ..SynthConfig::default()
        };
        template_from_model(&gen_model(&cfg, 3).unwrap())
    }

    #[test]
    fn template_feature_is_zero() {
        let t = template();
        assert!(featurize(&t, &t).unwrap().norm() < 1e-12);
    }

    #[test]
    fn similarity_invariant_feature() {
        let t = template();
        let base: Vec<Vector2<f64>> = t.iter().enumerate().map(|(k, p)| p + Vector2::new((k as f64).sin(), (k as f64 * 0.3).cos())).collect();
        let f0 = featurize(&base, &t).unwrap();
        let s = Similarity2D {
            scale: 0.37,
            rotation_angle: 2.1,
            translation: Vector2::new(-40.0, 13.0),
        };
        let f1 = featurize(&s.apply_all(&base), &t).unwrap();
        assert!((f0 - f1).amax() < 1e-9);
    }

    #[test]
    fn mirror_changes_feature() {
        let t = template();
        let base: Vec<Vector2<f64>> = t.iter().enumerate().map(|(k, p)| p + Vector2::new((k as f64).sin(), 0.0)).collect();
        let mirrored: Vec<Vector2<f64>> = base.iter().map(|p| Vector2::new(-p.x, p.y)).collect();
        let d = featurize(&base, &t).unwrap() - featurize(&mirrored, &t).unwrap();
        assert!(d.norm() > 1e-3);
    }

    #[test]
    fn zero_lambda_on_collinear_features_is_rank_deficient() {
        let x = DMatrix::from_fn(30, 3, |r, c| if c == 2 { r as f64 } else { (r * (c + 1)) as f64 });
        let e = DMatrix::zeros(30, 1);
        assert!(matches!(LinearRidge::fit(&x, &e, 0.0), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn split_fractions() {
        let (a, b, c) = SplitSpec::default().partition(100).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (70, 15, 15));
        let mut all: Vec<usize> = a.into_iter().chain(b).chain(c).collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }
}
