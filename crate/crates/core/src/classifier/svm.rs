//! Soft-margin linear SVM trained in the dual by SMO.
//!
//! Dual problem (as a minimisation):
//!
//! ```text
//! min ½ αᵀQα − Σα   s.t.  0 ≤ α ≤ C,  Σ y_i α_i = 0,   Q_ij = y_i y_j x_iᵀx_j
//! ```
//!
//! Pairs are chosen by the maximal-violating pair with second-order
//! selection for the partner. The solver runs until the primal/dual gap
//! is below the requested fraction of the primal objective, tightening the
//! pair-violation threshold as needed.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Above this many samples the Gram matrix is not cached.
const GRAM_CACHE_LIMIT: usize = 2500;
const TAU: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmConfig {
    pub c: f64,
    /// Required `(primal − dual) / max(1, |primal|)`.
    pub gap_tolerance: f64,
    pub max_iterations: usize,
}

impl SvmConfig {
    pub fn new(c: f64) -> Self {
        SvmConfig {
            c,
            gap_tolerance: 1e-6,
            max_iterations: 10_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvm {
    pub weights: DVector<f64>,
    pub bias: f64,
    pub c: f64,
}

impl LinearSvm {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }

    pub fn negated(&self) -> LinearSvm {
        LinearSvm {
            weights: -&self.weights,
            bias: -self.bias,
            c: self.c,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SvmSolution {
    pub model: LinearSvm,
    pub alpha: Vec<f64>,
    pub primal: f64,
    pub dual: f64,
    pub iterations: usize,
}

impl SvmSolution {
    /// Indices with non-zero dual weight.
    pub fn support_vectors(&self, rel_tol: f64) -> Vec<usize> {
        let cut = rel_tol * self.model.c;
        (0..self.alpha.len()).filter(|&i| self.alpha[i] > cut).collect()
    }
}

/// `½‖w‖² + C Σ max(0, 1 − y_i(wᵀx_i + b))`.
pub fn primal_objective(x: &DMatrix<f64>, y: &[f64], w: &DVector<f64>, b: f64, c: f64) -> f64 {
    let scores = x * w;
    let hinge: f64 = scores
        .iter()
        .zip(y)
        .map(|(s, yi)| (1.0 - yi * (s + b)).max(0.0))
        .sum();
    0.5 * w.norm_squared() + c * hinge
}

fn check_inputs(x: &DMatrix<f64>, y: &[f64], c: f64) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            context: "svm labels",
            expected: x.nrows(),
            actual: y.len(),
        });
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidArgument(format!("svm regularisation must be positive, got {c}")));
    }
    if y.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(Error::InvalidArgument("svm labels must be +1 or -1".into()));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument("svm features must be finite".into()));
    }
    if !(y.contains(&1.0) && y.contains(&-1.0)) {
        return Err(Error::Training("binary svm needs both classes present".into()));
    }
    Ok(())
}

pub fn train_binary_svm(x: &DMatrix<f64>, y: &[f64], c: f64) -> Result<LinearSvm> {
    solve_svm(x, y, &SvmConfig::new(c)).map(|s| s.model)
}

struct Kernel<'a> {
    x: &'a DMatrix<f64>,
    gram: Option<DMatrix<f64>>,
}

impl<'a> Kernel<'a> {
    fn new(x: &'a DMatrix<f64>) -> Self {
        let gram = (x.nrows() <= GRAM_CACHE_LIMIT).then(|| x * x.transpose());
        Kernel { x, gram }
    }

    fn row(&self, i: usize) -> DVector<f64> {
        match &self.gram {
            Some(g) => g.column(i).into_owned(),
            None => self.x * self.x.row(i).transpose(),
        }
    }

    fn diag(&self) -> Vec<f64> {
        (0..self.x.nrows()).map(|i| self.x.row(i).norm_squared()).collect()
    }
}

pub fn solve_svm(x: &DMatrix<f64>, y: &[f64], config: &SvmConfig) -> Result<SvmSolution> {
    let c = config.c;
    check_inputs(x, y, c)?;
    let n = y.len();
    let kernel = Kernel::new(x);
    let kd = kernel.diag();
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let mut eps = 1e-3;
    let mut iterations = 0usize;

    loop {
        // SMO sweep at the current violation threshold.
        while let Some((i, j)) = select_pair(&alpha, &grad, y, c, eps, &kd, &kernel) {
            iterations += 1;
            if iterations > config.max_iterations {
                return Err(Error::Training(format!(
                    "svm did not converge in {} iterations",
                    config.max_iterations
                )));
            }
            let ki = kernel.row(i);
            let kj = kernel.row(j);
            let (old_i, old_j) = (alpha[i], alpha[j]);
            update_pair(&mut alpha, &grad, y, c, i, j, kd[i] + kd[j] - 2.0 * ki[j]);
            let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
            for t in 0..n {
                grad[t] += y[t] * (y[i] * ki[t] * di + y[j] * kj[t] * dj);
            }
        }

        let mut w = DVector::zeros(x.ncols());
        for i in 0..n {
            if alpha[i] != 0.0 {
                w += x.row(i).transpose() * (alpha[i] * y[i]);
            }
        }
        let scores = x * &w;
        let bias = optimal_bias(&scores, y, &alpha, &grad, c);
        let primal = primal_objective(x, y, &w, bias, c);
        let dual = alpha.iter().sum::<f64>() - 0.5 * w.norm_squared();
        if primal - dual <= config.gap_tolerance * primal.abs().max(1.0) {
            return Ok(SvmSolution {
                model: LinearSvm { weights: w, bias, c },
                alpha,
                primal,
                dual,
                iterations,
            });
        }
        if eps < 1e-14 {
            return Err(Error::Training(format!(
                "svm duality gap {:e} stalled above tolerance",
                primal - dual
            )));
        }
        eps *= 0.1;
    }
}

fn in_up(a: f64, y: f64, c: f64) -> bool {
    (y > 0.0 && a < c) || (y < 0.0 && a > 0.0)
}

fn in_low(a: f64, y: f64, c: f64) -> bool {
    (y > 0.0 && a > 0.0) || (y < 0.0 && a < c)
}

fn select_pair(
    alpha: &[f64],
    grad: &[f64],
    y: &[f64],
    c: f64,
    eps: f64,
    kd: &[f64],
    kernel: &Kernel<'_>,
) -> Option<(usize, usize)> {
    let n = alpha.len();
    let mut gmax = f64::NEG_INFINITY;
    let mut i = None;
    for t in 0..n {
        if in_up(alpha[t], y[t], c) {
            let v = -y[t] * grad[t];
            if v >= gmax {
                gmax = v;
                i = Some(t);
            }
        }
    }
    let i = i?;
    let ki = kernel.row(i);
    let mut gmin = f64::INFINITY;
    let mut best = f64::INFINITY;
    let mut j = None;
    for t in 0..n {
        if !in_low(alpha[t], y[t], c) {
            continue;
        }
        let v = -y[t] * grad[t];
        gmin = gmin.min(v);
        let diff = gmax - v;
        if diff > 0.0 {
            let mut quad = kd[i] + kd[t] - 2.0 * ki[t];
            if quad <= 0.0 {
                quad = TAU;
            }
            let obj = -diff * diff / quad;
            if obj <= best {
                best = obj;
                j = Some(t);
            }
        }
    }
    if gmax - gmin < eps {
        return None;
    }
    j.map(|j| (i, j))
}

fn update_pair(alpha: &mut [f64], grad: &[f64], y: &[f64], c: f64, i: usize, j: usize, quad: f64) {
    let quad = if quad > 0.0 { quad } else { TAU };
    let (mut ai, mut aj) = (alpha[i], alpha[j]);
    if y[i] != y[j] {
        let delta = (-grad[i] - grad[j]) / quad;
        let diff = ai - aj;
        ai += delta;
        aj += delta;
        if diff > 0.0 {
            if aj < 0.0 {
                aj = 0.0;
                ai = diff;
            }
        } else if ai < 0.0 {
            ai = 0.0;
            aj = -diff;
        }
        if diff > 0.0 {
            if ai > c {
                ai = c;
                aj = c - diff;
            }
        } else if aj > c {
            aj = c;
            ai = c + diff;
        }
    } else {
        let delta = (grad[i] - grad[j]) / quad;
        let sum = ai + aj;
        ai -= delta;
        aj += delta;
        if sum > c {
            if ai > c {
                ai = c;
                aj = sum - c;
            }
        } else if aj < 0.0 {
            aj = 0.0;
            ai = sum;
        }
        if sum > c {
            if aj > c {
                aj = c;
                ai = sum - c;
            }
        } else if ai < 0.0 {
            ai = 0.0;
            aj = sum;
        }
    }
    alpha[i] = ai;
    alpha[j] = aj;
}

/// Bias from the free multipliers, clamped into the interval of biases that
/// minimise the primal for the current weights.
fn optimal_bias(scores: &DVector<f64>, y: &[f64], alpha: &[f64], grad: &[f64], c: f64) -> f64 {
    let mut free_sum = 0.0;
    let mut free = 0usize;
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in 0..y.len() {
        let yg = y[t] * grad[t];
        if alpha[t] > 0.0 && alpha[t] < c {
            free_sum += -yg;
            free += 1;
        } else {
            // Bounds on b = −y G implied by multipliers stuck at a bound.
            let at_upper = alpha[t] >= c;
            if (y[t] > 0.0) != at_upper {
                lb = lb.max(-yg);
            } else {
                ub = ub.min(-yg);
            }
        }
    }
    let kkt = if free > 0 {
        free_sum / free as f64
    } else if lb.is_finite() && ub.is_finite() {
        0.5 * (lb + ub)
    } else if lb.is_finite() {
        lb
    } else {
        ub
    };

    // Hinge breakpoints b = y_i − s_i; the slope rises by one at each, from −n₊.
    let mut breaks: Vec<f64> = scores.iter().zip(y).map(|(s, yi)| yi - s).collect();
    breaks.sort_by(f64::total_cmp);
    let positives = y.iter().filter(|&&v| v > 0.0).count();
    let lo = breaks[positives - 1];
    let hi = breaks[positives];
    kkt.clamp(lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_points_bisector() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, -1.0]);
        let s = train_binary_svm(&x, &[1.0, -1.0], 10.0).unwrap();
        let d = nalgebra::Vector2::new(1.0 - 3.0, 2.0 + 1.0);
        let w = nalgebra::Vector2::new(s.weights[0], s.weights[1]);
        assert!((w.normalize() - d.normalize()).norm() < 1e-6);
        let mid = [2.0, 0.5];
        assert!(s.decision(&mid).abs() < 1e-6);
    }

    #[test]
    fn single_class_is_an_error() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        assert!(matches!(train_binary_svm(&x, &[1.0, 1.0], 1.0), Err(Error::Training(_))));
    }

    #[test]
    fn gap_closes() {
        let x = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        let s = solve_svm(&x, &[1.0, 1.0, -1.0, -1.0], &SvmConfig::new(1.0)).unwrap();
        assert!(s.primal - s.dual <= 1e-6 * s.primal.max(1.0));
        assert!(s.alpha.iter().all(|&a| (0.0..=1.0).contains(&a)));
    }
}
