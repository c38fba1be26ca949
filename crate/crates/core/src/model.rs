//! Linear identity/expression shape model.
//!
//! A shape is `mean + U_id (σ_id ⊙ i) + U_exp (σ_exp ⊙ e)` where the
//! coefficient vectors `i`, `e` are in standard-deviation units. The two
//! bases are each orthonormal but not assumed orthogonal to one another.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::linalg;

/// Number of sparse landmarks tracked on the face.
pub const LANDMARK_COUNT: usize = 68;

/// Orthonormality tolerance for the bases.
pub const ORTHONORMALITY_TOL: f64 = 1e-8;

const CONTAINER_KIND: &str = "shape_model";

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeModel {
    mean_shape: DVector<f64>,
    identity_basis: DMatrix<f64>,
    identity_scales: DVector<f64>,
    expression_basis: DMatrix<f64>,
    expression_scales: DVector<f64>,
    landmark_vertex_ids: Vec<usize>,
    // Landmark rows of the mean and of the scaled bases, 3*68 rows each.
    landmark_mean: DVector<f64>,
    landmark_identity: DMatrix<f64>,
    landmark_expression: DMatrix<f64>,
}

/// Identity and expression coefficients in standard-deviation units.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeCoefficients {
    pub identity: DVector<f64>,
    pub expression: DVector<f64>,
}

impl ShapeCoefficients {
    pub fn zeros(model: &ShapeModel) -> Self {
        ShapeCoefficients {
            identity: DVector::zeros(model.identity_dim()),
            expression: DVector::zeros(model.expression_dim()),
        }
    }
}

/// Result of projecting an arbitrary shape onto the model.
#[derive(Debug, Clone)]
pub struct Projection {
    pub coefficients: ShapeCoefficients,
    /// Euclidean norm of the part of `shape - mean` the model cannot express.
    pub residual_norm: f64,
    /// Condition number of the concatenated scaled basis.
    pub condition: f64,
}

/// Outcome of every invariant check, as printed by `model inspect`.
#[derive(Debug, Clone)]
pub struct ModelReport {
    pub num_vertices: usize,
    pub identity_dim: usize,
    pub expression_dim: usize,
    pub identity_orthonormality_defect: f64,
    pub expression_orthonormality_defect: f64,
    pub identity_condition: f64,
    pub expression_condition: f64,
    pub joint_condition: f64,
    pub scales_positive: bool,
    pub landmarks_valid: bool,
}

impl ModelReport {
    pub fn passes(&self) -> bool {
        self.identity_orthonormality_defect <= ORTHONORMALITY_TOL
            && self.expression_orthonormality_defect <= ORTHONORMALITY_TOL
            && self.scales_positive
            && self.landmarks_valid
    }
}

impl std::fmt::Display for ModelReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = |ok: bool| if ok { "ok" } else { "FAIL" };
        writeln!(f, "vertices            {}", self.num_vertices)?;
        writeln!(f, "identity modes      {}", self.identity_dim)?;
        writeln!(f, "expression modes    {}", self.expression_dim)?;
        writeln!(
            f,
            "identity basis      max|UᵀU-I| = {:.3e} [{}]",
            self.identity_orthonormality_defect,
            verdict(self.identity_orthonormality_defect <= ORTHONORMALITY_TOL)
        )?;
        writeln!(
            f,
            "expression basis    max|UᵀU-I| = {:.3e} [{}]",
            self.expression_orthonormality_defect,
            verdict(self.expression_orthonormality_defect <= ORTHONORMALITY_TOL)
        )?;
        writeln!(f, "cond(U_id)          {:.6e}", self.identity_condition)?;
        writeln!(f, "cond(U_exp)         {:.6e}", self.expression_condition)?;
        writeln!(f, "cond(scaled joint)  {:.6e}", self.joint_condition)?;
        writeln!(f, "scales positive     [{}]", verdict(self.scales_positive))?;
        write!(f, "landmark indices    [{}]", verdict(self.landmarks_valid))
    }
}

fn scaled_columns(basis: &DMatrix<f64>, scales: &DVector<f64>) -> DMatrix<f64> {
    let mut out = basis.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col *= scales[j];
    }
    out
}

fn gather_rows(m: &DMatrix<f64>, vertex_ids: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(3 * vertex_ids.len(), m.ncols(), |r, c| {
        m[(3 * vertex_ids[r / 3] + r % 3, c)]
    })
}

impl ShapeModel {
    /// Builds a model, validating every invariant.
    pub fn new(
        mean_shape: DVector<f64>,
        identity_basis: DMatrix<f64>,
        identity_scales: DVector<f64>,
        expression_basis: DMatrix<f64>,
        expression_scales: DVector<f64>,
        landmark_vertex_ids: Vec<usize>,
    ) -> Result<Self> {
        let dim = mean_shape.len();
        if dim == 0 || !dim.is_multiple_of(3) {
            return Err(Error::Invariant(format!(
                "mean shape length {dim} is not a positive multiple of 3"
            )));
        }
        let n = dim / 3;
        for (name, basis, scales) in [
            ("identity", &identity_basis, &identity_scales),
            ("expression", &expression_basis, &expression_scales),
        ] {
            if basis.nrows() != dim {
                return Err(Error::Invariant(format!(
                    "{name} basis has {} rows, expected {dim}",
                    basis.nrows()
                )));
            }
            if basis.ncols() == 0 {
                return Err(Error::Invariant(format!("{name} basis has no modes")));
            }
            if scales.len() != basis.ncols() {
                return Err(Error::Invariant(format!(
                    "{name} scales length {} differs from {} modes",
                    scales.len(),
                    basis.ncols()
                )));
            }
            if let Some(s) = scales.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
                return Err(Error::Invariant(format!("{name} scale {s} is not positive")));
            }
            if basis.iter().any(|v| !v.is_finite()) || mean_shape.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invariant(format!("{name} model arrays contain non-finite values")));
            }
            let defect = linalg::orthonormality_defect(basis);
            if defect > ORTHONORMALITY_TOL {
                return Err(Error::Invariant(format!(
                    "{name} basis not orthonormal: max|UᵀU-I| = {defect:e}"
                )));
            }
        }
        if landmark_vertex_ids.len() != LANDMARK_COUNT {
            return Err(Error::Invariant(format!(
                "expected {LANDMARK_COUNT} landmark indices, got {}",
                landmark_vertex_ids.len()
            )));
        }
        let mut seen = vec![false; n];
        for &id in &landmark_vertex_ids {
            if id >= n {
                return Err(Error::Invariant(format!("landmark index {id} >= {n} vertices")));
            }
            if seen[id] {
                return Err(Error::Invariant(format!("landmark index {id} repeated")));
            }
            seen[id] = true;
        }

        let mean_matrix = DMatrix::from_column_slice(dim, 1, mean_shape.as_slice());
        let landmark_mean = gather_rows(&mean_matrix, &landmark_vertex_ids).column(0).into_owned();
        let landmark_identity =
            gather_rows(&scaled_columns(&identity_basis, &identity_scales), &landmark_vertex_ids);
        let landmark_expression =
            gather_rows(&scaled_columns(&expression_basis, &expression_scales), &landmark_vertex_ids);
        Ok(ShapeModel {
            mean_shape,
            identity_basis,
            identity_scales,
            expression_basis,
            expression_scales,
            landmark_vertex_ids,
            landmark_mean,
            landmark_identity,
            landmark_expression,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.mean_shape.len() / 3
    }

    pub fn identity_dim(&self) -> usize {
        self.identity_basis.ncols()
    }

    pub fn expression_dim(&self) -> usize {
        self.expression_basis.ncols()
    }

    pub fn mean_shape(&self) -> &DVector<f64> {
        &self.mean_shape
    }

    pub fn identity_basis(&self) -> &DMatrix<f64> {
        &self.identity_basis
    }

    pub fn identity_scales(&self) -> &DVector<f64> {
        &self.identity_scales
    }

    pub fn expression_basis(&self) -> &DMatrix<f64> {
        &self.expression_basis
    }

    pub fn expression_scales(&self) -> &DVector<f64> {
        &self.expression_scales
    }

    pub fn landmark_vertex_ids(&self) -> &[usize] {
        &self.landmark_vertex_ids
    }

    /// Landmark rows (x,y,z interleaved) of the mean shape.
    pub fn landmark_mean(&self) -> &DVector<f64> {
        &self.landmark_mean
    }

    /// Landmark rows of `U_id diag(σ_id)`.
    pub fn landmark_identity_basis(&self) -> &DMatrix<f64> {
        &self.landmark_identity
    }

    /// Landmark rows of `U_exp diag(σ_exp)`.
    pub fn landmark_expression_basis(&self) -> &DMatrix<f64> {
        &self.landmark_expression
    }

    fn check_dims(&self, coeffs: &ShapeCoefficients) -> Result<()> {
        if coeffs.identity.len() != self.identity_dim() {
            return Err(Error::DimensionMismatch {
                context: "identity coefficients",
                expected: self.identity_dim(),
                actual: coeffs.identity.len(),
            });
        }
        if coeffs.expression.len() != self.expression_dim() {
            return Err(Error::DimensionMismatch {
                context: "expression coefficients",
                expected: self.expression_dim(),
                actual: coeffs.expression.len(),
            });
        }
        Ok(())
    }

    /// Full 3N-vector for the given coefficients.
    pub fn synthesize(&self, coeffs: &ShapeCoefficients) -> Result<DVector<f64>> {
        self.check_dims(coeffs)?;
        let id = coeffs.identity.component_mul(&self.identity_scales);
        let ex = coeffs.expression.component_mul(&self.expression_scales);
        Ok(&self.mean_shape + &self.identity_basis * id + &self.expression_basis * ex)
    }

    /// Stacked landmark coordinates (length 3*68) for the given coefficients.
    pub fn landmark_shape(&self, identity: &DVector<f64>, expression: &DVector<f64>) -> DVector<f64> {
        &self.landmark_mean + &self.landmark_identity * identity + &self.landmark_expression * expression
    }

    /// The 68 landmark vertices of `synthesize(coeffs)`.
    pub fn landmarks_3d(&self, coeffs: &ShapeCoefficients) -> Result<Vec<Vector3<f64>>> {
        self.check_dims(coeffs)?;
        Ok(stacked_to_points(&self.landmark_shape(&coeffs.identity, &coeffs.expression)))
    }

    fn joint_scaled_basis(&self) -> DMatrix<f64> {
        let (ni, ne) = (self.identity_dim(), self.expression_dim());
        let mut b = DMatrix::zeros(self.mean_shape.len(), ni + ne);
        b.columns_mut(0, ni)
            .copy_from(&scaled_columns(&self.identity_basis, &self.identity_scales));
        b.columns_mut(ni, ne)
            .copy_from(&scaled_columns(&self.expression_basis, &self.expression_scales));
        b
    }

    /// Least-squares coefficients of an arbitrary shape under the joint basis.
    pub fn project_coefficients(&self, shape: &DVector<f64>) -> Result<Projection> {
        if shape.len() != self.mean_shape.len() {
            return Err(Error::DimensionMismatch {
                context: "shape vector",
                expected: self.mean_shape.len(),
                actual: shape.len(),
            });
        }
        let b = self.joint_scaled_basis();
        let svd = b.clone().svd(true, true);
        let hi = svd.singular_values.max();
        let lo = svd.singular_values.min();
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        if !(condition < 1e12) {
            return Err(Error::RankDeficient {
                context: "joint identity/expression basis",
                condition,
            });
        }
        let delta = shape - &self.mean_shape;
        let coeffs = svd
            .solve(&delta, 0.0)
            .map_err(|e| Error::Solver(format!("basis projection: {e}")))?;
        let residual_norm = (&delta - &b * &coeffs).norm();
        let ni = self.identity_dim();
        Ok(Projection {
            coefficients: ShapeCoefficients {
                identity: coeffs.rows(0, ni).into_owned(),
                expression: coeffs.rows(ni, self.expression_dim()).into_owned(),
            },
            residual_norm,
            condition,
        })
    }

    pub fn report(&self) -> ModelReport {
        ModelReport {
            num_vertices: self.num_vertices(),
            identity_dim: self.identity_dim(),
            expression_dim: self.expression_dim(),
            identity_orthonormality_defect: linalg::orthonormality_defect(&self.identity_basis),
            expression_orthonormality_defect: linalg::orthonormality_defect(&self.expression_basis),
            identity_condition: linalg::condition_number(&self.identity_basis),
            expression_condition: linalg::condition_number(&self.expression_basis),
            joint_condition: linalg::condition_number(&self.joint_scaled_basis()),
            scales_positive: self.identity_scales.iter().all(|&s| s > 0.0)
                && self.expression_scales.iter().all(|&s| s > 0.0),
            landmarks_valid: self.landmark_vertex_ids.len() == LANDMARK_COUNT,
        }
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(CONTAINER_KIND);
        c.set("num_vertices", self.num_vertices());
        c.set("n_identity", self.identity_dim());
        c.set("n_expression", self.expression_dim());
        let col = |v: &DVector<f64>| DMatrix::from_column_slice(v.len(), 1, v.as_slice());
        c.push("mean_shape", col(&self.mean_shape));
        c.push("identity_basis", self.identity_basis.clone());
        c.push("identity_scales", col(&self.identity_scales));
        c.push("expression_basis", self.expression_basis.clone());
        c.push("expression_scales", col(&self.expression_scales));
        let ids: Vec<f64> = self.landmark_vertex_ids.iter().map(|&i| i as f64).collect();
        c.push("landmark_vertex_ids", DMatrix::from_column_slice(ids.len(), 1, &ids));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(CONTAINER_KIND)?;
        let n = c.meta_usize("num_vertices")?;
        let ni = c.meta_usize("n_identity")?;
        let ne = c.meta_usize("n_expression")?;
        let shaped = |name: &str, rows: usize, cols: usize| -> Result<DMatrix<f64>> {
            let a = c.array(name)?;
            if a.shape() != (rows, cols) {
                return Err(Error::Format {
                    offset: 0,
                    message: format!(
                        "array `{name}` has shape {:?}, metadata implies ({rows}, {cols})",
                        a.shape()
                    ),
                });
            }
            Ok(a.clone())
        };
        let vec = |m: DMatrix<f64>| DVector::from_column_slice(m.as_slice());
        let ids = shaped("landmark_vertex_ids", LANDMARK_COUNT, 1)?;
        let mut landmark_vertex_ids = Vec::with_capacity(LANDMARK_COUNT);
        for &v in ids.iter() {
            if v < 0.0 || v.fract() != 0.0 || !v.is_finite() {
                return Err(Error::Invariant(format!("landmark index {v} is not a vertex id")));
            }
            landmark_vertex_ids.push(v as usize);
        }
        ShapeModel::new(
            vec(shaped("mean_shape", 3 * n, 1)?),
            shaped("identity_basis", 3 * n, ni)?,
            vec(shaped("identity_scales", ni, 1)?),
            shaped("expression_basis", 3 * n, ne)?,
            vec(shaped("expression_scales", ne, 1)?),
            landmark_vertex_ids,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write_file(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read_file(path)?)
    }
}

/// Splits a stacked `[x0,y0,z0,x1,...]` vector into points.
pub fn stacked_to_points(v: &DVector<f64>) -> Vec<Vector3<f64>> {
    v.as_slice()
        .chunks_exact(3)
        .map(|c| Vector3::new(c[0], c[1], c[2]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_model, SynthConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn small_model() -> ShapeModel {
        let cfg = SynthConfig {
            num_vertices: 90,
            n_identity: 12,
            n_expression: 6,
            ..SynthConfig::default()
        };
        gen_model(&cfg, 3).unwrap()
    }

    fn random_coeffs(model: &ShapeModel, seed: u64) -> ShapeCoefficients {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n| DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        ShapeCoefficients {
            identity: draw(model.identity_dim()),
            expression: draw(model.expression_dim()),
        }
    }

    #[test]
    fn zero_coefficients_give_mean() {
        let m = small_model();
        let s = m.synthesize(&ShapeCoefficients::zeros(&m)).unwrap();
        assert_eq!(&s, m.mean_shape());
    }

    #[test]
    fn single_expression_mode_offsets_by_scaled_column() {
        let m = small_model();
        let mut c = ShapeCoefficients::zeros(&m);
        c.expression[1] = 1.0;
        let s = m.synthesize(&c).unwrap();
        let want = m.mean_shape() + m.expression_basis().column(1) * m.expression_scales()[1];
        assert!((s - want).amax() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let m = small_model();
        let mut c = ShapeCoefficients::zeros(&m);
        c.expression = DVector::zeros(3);
        assert!(matches!(m.synthesize(&c), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn landmarks_are_row_gather_of_synthesis() {
        let m = small_model();
        let c = random_coeffs(&m, 11);
        let full = m.synthesize(&c).unwrap();
        let lm = m.landmarks_3d(&c).unwrap();
        for (k, &vid) in m.landmark_vertex_ids().iter().enumerate() {
            for a in 0..3 {
                assert!((lm[k][a] - full[3 * vid + a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn landmark_gather_on_hand_built_model() {
        // Vertices at (v, 10v, 100v); landmarks picked in reverse order.
        let n = 70;
        let mean = DVector::from_fn(3 * n, |r, _| (r / 3) as f64 * [1.0, 10.0, 100.0][r % 3]);
        let mut id = DMatrix::zeros(3 * n, 1);
        id[(0, 0)] = 1.0;
        let mut ex = DMatrix::zeros(3 * n, 1);
        ex[(1, 0)] = 1.0;
        let ids: Vec<usize> = (0..LANDMARK_COUNT).rev().map(|k| k + 2).collect();
        let m = ShapeModel::new(
            mean,
            id,
            DVector::from_element(1, 1.0),
            ex,
            DVector::from_element(1, 1.0),
            ids.clone(),
        )
        .unwrap();
        let lm = m.landmarks_3d(&ShapeCoefficients::zeros(&m)).unwrap();
        for (k, p) in lm.iter().enumerate() {
            let v = ids[k] as f64;
            assert_eq!(*p, Vector3::new(v, 10.0 * v, 100.0 * v));
        }
    }

    #[test]
    fn projection_round_trip() {
        let m = small_model();
        let c = random_coeffs(&m, 5);
        let p = m.project_coefficients(&m.synthesize(&c).unwrap()).unwrap();
        assert!((p.coefficients.identity - c.identity).amax() < 1e-8);
        assert!((p.coefficients.expression - c.expression).amax() < 1e-8);
        assert!(p.residual_norm < 1e-10);
    }

    #[test]
    fn projection_of_mean_is_zero() {
        let m = small_model();
        let p = m.project_coefficients(m.mean_shape()).unwrap();
        assert!(p.coefficients.identity.amax() < 1e-12);
        assert!(p.coefficients.expression.amax() < 1e-12);
    }

    #[test]
    fn projection_ignores_orthogonal_residual() {
        let m = small_model();
        let c = random_coeffs(&m, 8);
        // Build a direction orthogonal to both bases by projecting out the joint span.
        let b = m.joint_scaled_basis();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let g = DVector::from_fn(b.nrows(), |_, _| StandardNormal.sample(&mut rng));
        let q = b.clone().qr().q();
        let orth = &g - &q * (q.transpose() * &g);
        let orth = orth.normalize() * 0.75;
        let shape = m.synthesize(&c).unwrap() + &orth;
        let p = m.project_coefficients(&shape).unwrap();
        assert!((p.coefficients.identity - c.identity).amax() < 1e-8);
        assert!((p.coefficients.expression - c.expression).amax() < 1e-8);
        assert!((p.residual_norm - 0.75).abs() < 1e-9);
    }

    #[test]
    fn rank_deficient_joint_basis_is_flagged() {
        let m = small_model();
        // Expression basis = first identity columns: joint basis is rank deficient.
        let ex = m.identity_basis().columns(0, 2).into_owned();
        let bad = ShapeModel::new(
            m.mean_shape().clone(),
            m.identity_basis().clone(),
            m.identity_scales().clone(),
            ex,
            DVector::from_element(2, 1.0),
            m.landmark_vertex_ids().to_vec(),
        )
        .unwrap();
        let err = bad.project_coefficients(bad.mean_shape()).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { .. }));
    }

    #[test]
    fn save_load_bit_exact() {
        let m = small_model();
        let bytes = m.to_container().to_bytes();
        let back = ShapeModel::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_container().to_bytes(), bytes);
    }

    #[test]
    fn perturbed_basis_fails_on_load() {
        let m = small_model();
        let mut c = m.to_container();
        for (name, a) in c.arrays.iter_mut() {
            if name == "expression_basis" {
                a[(0, 0)] += 1e-4;
            }
        }
        let err = ShapeModel::from_container(&Container::from_bytes(&c.to_bytes()).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Invariant(_)), "{err}");
    }

    #[test]
    fn duplicate_landmark_rejected() {
        let m = small_model();
        let mut ids = m.landmark_vertex_ids().to_vec();
        ids[1] = ids[0];
        let err = ShapeModel::new(
            m.mean_shape().clone(),
            m.identity_basis().clone(),
            m.identity_scales().clone(),
            m.expression_basis().clone(),
            m.expression_scales().clone(),
            ids,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Invariant(_)));
    }

    #[test]
    fn report_passes_for_generated_model() {
        let r = small_model().report();
        assert!(r.passes());
        assert!(r.joint_condition.is_finite());
    }
}
