use expfit::classifier::svm::primal_objective;
use expfit::synth::{gaussian_vector, rng_for};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;

/// Exact soft-margin optimum for a handful of points.
///
/// Every optimum puts each point strictly inside its margin, on it, or
/// beyond it. For each of the 3^n assignments, the on-margin equalities and
/// the balance condition fix the free dual weights (least squares through an
/// SVD); the resulting `w` is scored with its best bias. Any `(w, b)` upper
/// bounds the optimum and the true assignment attains it, so the minimum
/// over all assignments is the optimum.
pub fn brute_force_svm(x: &DMatrix<f64>, y: &[f64], c: f64) -> (f64, DVector<f64>, f64) {
    let n = y.len();
    let gram = x * x.transpose();
    let mut best = (f64::INFINITY, DVector::zeros(x.ncols()), 0.0);
    for code in 0..3usize.pow(n as u32) {
        let state: Vec<usize> = (0..n).map(|i| code / 3usize.pow(i as u32) % 3).collect();
        let margin: Vec<usize> = (0..n).filter(|&i| state[i] == 1).collect();
        let mut alpha: Vec<f64> = (0..n).map(|i| if state[i] == 2 { c } else { 0.0 }).collect();
        if !margin.is_empty() {
            let m = margin.len();
            let mut a = DMatrix::zeros(m + 1, m + 1);
            let mut rhs = DVector::zeros(m + 1);
            for (r, &i) in margin.iter().enumerate() {
                let fixed: f64 = (0..n).filter(|&j| state[j] == 2).map(|j| c * y[j] * gram[(j, i)]).sum();
                for (s, &j) in margin.iter().enumerate() {
                    a[(r, s)] = y[i] * y[j] * gram[(j, i)];
                }
                a[(r, m)] = y[i];
                rhs[r] = 1.0 - y[i] * fixed;
            }
            for (s, &j) in margin.iter().enumerate() {
                a[(m, s)] = y[j];
            }
            rhs[m] = -(0..n).filter(|&j| state[j] == 2).map(|j| c * y[j]).sum::<f64>();
            let sol = a.svd(true, true).solve(&rhs, 1e-12).unwrap();
            for (s, &j) in margin.iter().enumerate() {
                alpha[j] = sol[s];
            }
        }
        let w = (0..n).fold(DVector::zeros(x.ncols()), |acc, j| acc + x.row(j).transpose() * (alpha[j] * y[j]));
        let scores = x * &w;
        // The objective is piecewise linear in b, so a breakpoint is optimal.
        for i in 0..n {
            let b = y[i] - scores[i];
            let p = primal_objective(x, y, &w, b, c);
            if p < best.0 {
                best = (p, w.clone(), b);
            }
        }
    }
    best
}

/// `n` Gaussian points in `dim` dimensions with balanced, shuffled labels.
pub fn small_problem(seed: u64, n: usize, dim: usize) -> (DMatrix<f64>, Vec<f64>) {
    let mut rng = rng_for(seed, 0);
    let x = DMatrix::from_column_slice(n, dim, gaussian_vector(&mut rng, n * dim).as_slice());
    let mut y: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    y.shuffle(&mut rng);
    (x, y)
}
