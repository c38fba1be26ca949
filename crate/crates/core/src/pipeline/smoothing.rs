//! Cubic smoothing splines for landmark traces, with the smoothing weight
//! picked per trace by generalised cross-validation.
//!
//! A trace `y` observed at knots `x` is fitted by the natural cubic spline
//! `g` minimising `Σ (y_j − g(x_j))² + α ∫ g''²`. In Reinsch form, with the
//! band matrices `Q` (n×(n−2)) and `R` ((n−2)×(n−2)), the second derivatives
//! at interior knots solve `(R + α QᵀQ) γ = Qᵀy` and the knot values are
//! `g = y − α Q γ`. `R + α QᵀQ` is pentadiagonal, so a fit is O(n), and the
//! band of its inverse (enough for the trace of the hat matrix) is also O(n).

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::model::LANDMARK_COUNT;
use crate::sequence::LandmarkSequence;

/// log10 α search range and grid step for GCV.
const LOG_ALPHA_MIN: f64 = -4.0;
const LOG_ALPHA_MAX: f64 = 10.0;
const LOG_ALPHA_STEP: f64 = 0.25;
const GOLDEN_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Smoothing {
    /// Fixed weight; `Fixed(0.0)` interpolates.
    Fixed(f64),
    /// Per-trace generalised cross-validation.
    Gcv,
}

/// Knot geometry shared by every trace sampled on the same frames.
#[derive(Debug, Clone)]
struct Knots {
    x: Vec<f64>,
    h: Vec<f64>,
    /// Columns of Q: entries at rows j, j+1, j+2 of column j.
    qa: Vec<f64>,
    qb: Vec<f64>,
    qc: Vec<f64>,
}

impl Knots {
    fn new(x: &[f64]) -> Result<Self> {
        if x.len() < 4 {
            return Err(Error::InsufficientData(format!(
                "smoothing spline needs at least 4 knots, got {}",
                x.len()
            )));
        }
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        if h.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::InvalidArgument("spline knots must be strictly increasing".into()));
        }
        let m = x.len() - 2;
        let qa = (0..m).map(|j| 1.0 / h[j]).collect();
        let qb = (0..m).map(|j| -1.0 / h[j] - 1.0 / h[j + 1]).collect();
        let qc = (0..m).map(|j| 1.0 / h[j + 1]).collect();
        Ok(Knots {
            x: x.to_vec(),
            h,
            qa,
            qb,
            qc,
        })
    }

    fn interior(&self) -> usize {
        self.x.len() - 2
    }

    /// Bands (diagonal, first, second off-diagonal) of QᵀQ.
    fn qtq(&self) -> [Vec<f64>; 3] {
        let m = self.interior();
        let (a, b, c) = (&self.qa, &self.qb, &self.qc);
        let d0 = (0..m).map(|j| a[j] * a[j] + b[j] * b[j] + c[j] * c[j]).collect();
        let d1 = (0..m.saturating_sub(1)).map(|j| b[j] * a[j + 1] + c[j] * b[j + 1]).collect();
        let d2 = (0..m.saturating_sub(2)).map(|j| c[j] * a[j + 2]).collect();
        [d0, d1, d2]
    }

    fn system(&self, alpha: f64) -> Pentadiagonal {
        let m = self.interior();
        let [p0, p1, p2] = self.qtq();
        let d0 = (0..m).map(|j| (self.h[j] + self.h[j + 1]) / 3.0 + alpha * p0[j]).collect();
        let d1 = (0..m.saturating_sub(1)).map(|j| self.h[j + 1] / 6.0 + alpha * p1[j]).collect();
        let d2 = p2.iter().map(|v| alpha * v).collect();
        Pentadiagonal { d0, d1, d2 }
    }

    fn qt_apply(&self, y: &[f64]) -> Vec<f64> {
        (0..self.interior())
            .map(|j| self.qa[j] * y[j] + self.qb[j] * y[j + 1] + self.qc[j] * y[j + 2])
            .collect()
    }

    fn q_apply(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.x.len()];
        for (j, &v) in g.iter().enumerate() {
            out[j] += self.qa[j] * v;
            out[j + 1] += self.qb[j] * v;
            out[j + 2] += self.qc[j] * v;
        }
        out
    }

    /// Trace of the hat matrix `I − α Q M⁻¹ Qᵀ`.
    fn hat_trace(&self, alpha: f64) -> Result<f64> {
        let n = self.x.len() as f64;
        if alpha == 0.0 {
            return Ok(n);
        }
        let inv = self.system(alpha).factor()?.inverse_band();
        let [p0, p1, p2] = self.qtq();
        let mut t: f64 = inv.d0.iter().zip(&p0).map(|(s, p)| s * p).sum();
        t += 2.0 * inv.d1.iter().zip(&p1).map(|(s, p)| s * p).sum::<f64>();
        t += 2.0 * inv.d2.iter().zip(&p2).map(|(s, p)| s * p).sum::<f64>();
        Ok(n - alpha * t)
    }
}

/// Symmetric pentadiagonal matrix stored by bands.
#[derive(Debug, Clone)]
struct Pentadiagonal {
    d0: Vec<f64>,
    d1: Vec<f64>,
    d2: Vec<f64>,
}

/// `M = L D Lᵀ` with unit lower-triangular `L` of bandwidth 2.
struct BandLdl {
    d: Vec<f64>,
    l1: Vec<f64>,
    l2: Vec<f64>,
}

impl Pentadiagonal {
    fn factor(&self) -> Result<BandLdl> {
        let m = self.d0.len();
        let mut d = vec![0.0; m];
        let mut l1 = vec![0.0; m.saturating_sub(1)];
        let mut l2 = vec![0.0; m.saturating_sub(2)];
        for i in 0..m {
            let mut di = self.d0[i];
            if i >= 1 {
                di -= l1[i - 1] * l1[i - 1] * d[i - 1];
            }
            if i >= 2 {
                di -= l2[i - 2] * l2[i - 2] * d[i - 2];
            }
            if !(di > 0.0) || !di.is_finite() {
                return Err(Error::RankDeficient {
                    context: "smoothing spline system",
                    condition: f64::INFINITY,
                });
            }
            d[i] = di;
            if i + 1 < m {
                let mut v = self.d1[i];
                if i >= 1 {
                    v -= l2[i - 1] * l1[i - 1] * d[i - 1];
                }
                l1[i] = v / di;
            }
            if i + 2 < m {
                l2[i] = self.d2[i] / di;
            }
        }
        Ok(BandLdl { d, l1, l2 })
    }
}

impl BandLdl {
    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let m = self.d.len();
        let mut z = b.to_vec();
        for i in 0..m {
            if i >= 1 {
                z[i] -= self.l1[i - 1] * z[i - 1];
            }
            if i >= 2 {
                z[i] -= self.l2[i - 2] * z[i - 2];
            }
        }
        for (zi, di) in z.iter_mut().zip(&self.d) {
            *zi /= di;
        }
        for i in (0..m).rev() {
            if i + 1 < m {
                z[i] -= self.l1[i] * z[i + 1];
            }
            if i + 2 < m {
                z[i] -= self.l2[i] * z[i + 2];
            }
        }
        z
    }

    /// Central band of `M⁻¹` from `S = D⁻¹L⁻¹ + (I − Lᵀ)S`, run backwards.
    fn inverse_band(&self) -> Pentadiagonal {
        let m = self.d.len();
        let mut s0 = vec![0.0; m];
        let mut s1 = vec![0.0; m.saturating_sub(1)];
        let mut s2 = vec![0.0; m.saturating_sub(2)];
        for i in (0..m).rev() {
            let l1 = if i + 1 < m { self.l1[i] } else { 0.0 };
            let l2 = if i + 2 < m { self.l2[i] } else { 0.0 };
            let s11 = if i + 1 < m { s0[i + 1] } else { 0.0 };
            let s22 = if i + 2 < m { s0[i + 2] } else { 0.0 };
            let s12 = if i + 2 < m { s1[i + 1] } else { 0.0 };
            if i + 2 < m {
                s2[i] = -l1 * s12 - l2 * s22;
            }
            if i + 1 < m {
                s1[i] = -l1 * s11 - l2 * s12;
            }
            let s_i1 = if i + 1 < m { s1[i] } else { 0.0 };
            let s_i2 = if i + 2 < m { s2[i] } else { 0.0 };
            s0[i] = 1.0 / self.d[i] - l1 * s_i1 - l2 * s_i2;
        }
        Pentadiagonal { d0: s0, d1: s1, d2: s2 }
    }
}

/// A fitted natural cubic smoothing spline.
#[derive(Debug, Clone)]
pub struct SmoothingSpline {
    knots: Vec<f64>,
    values: Vec<f64>,
    /// Second derivatives at all knots (zero at both ends).
    second: Vec<f64>,
    pub alpha: f64,
    /// GCV score at `alpha` (NaN for an interpolating fit).
    pub gcv: f64,
}

impl SmoothingSpline {
    pub fn fit(x: &[f64], y: &[f64], alpha: f64) -> Result<Self> {
        let knots = Knots::new(x)?;
        fit_on(&knots, y, alpha)
    }

    /// Fit with α chosen by minimising the GCV score.
    pub fn fit_gcv(x: &[f64], y: &[f64]) -> Result<Self> {
        let knots = Knots::new(x)?;
        fit_gcv_on(&knots, y, &GcvCache::new(&knots)?)
    }

    pub fn knot_values(&self) -> &[f64] {
        &self.values
    }

    /// Evaluates the spline inside the knot range; clamps outside it.
    pub fn evaluate(&self, t: f64) -> f64 {
        let n = self.knots.len();
        let i = match self.knots.partition_point(|&k| k <= t) {
            0 => 0,
            p if p >= n => n - 2,
            p => p - 1,
        };
        let (x0, x1) = (self.knots[i], self.knots[i + 1]);
        let t = t.clamp(self.knots[0], self.knots[n - 1]);
        let h = x1 - x0;
        let (u, v) = (t - x0, x1 - t);
        (u * self.values[i + 1] + v * self.values[i]) / h
            - u * v / 6.0 * ((1.0 + u / h) * self.second[i + 1] + (1.0 + v / h) * self.second[i])
    }
}

fn check_trace(knots: &Knots, y: &[f64]) -> Result<()> {
    if y.len() != knots.x.len() {
        return Err(Error::DimensionMismatch {
            context: "spline values",
            expected: knots.x.len(),
            actual: y.len(),
        });
    }
    if !y.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument("spline values must be finite".into()));
    }
    Ok(())
}

fn fit_on(knots: &Knots, y: &[f64], alpha: f64) -> Result<SmoothingSpline> {
    check_trace(knots, y)?;
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("smoothing weight must be finite and >= 0, got {alpha}")));
    }
    let gamma = knots.system(alpha).factor()?.solve(&knots.qt_apply(y));
    let values = if alpha == 0.0 {
        y.to_vec()
    } else {
        let qg = knots.q_apply(&gamma);
        y.iter().zip(&qg).map(|(yi, q)| yi - alpha * q).collect()
    };
    let mut second = Vec::with_capacity(y.len());
    second.push(0.0);
    second.extend_from_slice(&gamma);
    second.push(0.0);
    Ok(SmoothingSpline {
        knots: knots.x.clone(),
        values,
        second,
        alpha,
        gcv: f64::NAN,
    })
}

/// Hat-matrix traces depend only on knots and α, so they are shared by all
/// traces on the same knots.
struct GcvCache {
    grid: Vec<(f64, f64)>,
}

impl GcvCache {
    fn new(knots: &Knots) -> Result<Self> {
        let steps = ((LOG_ALPHA_MAX - LOG_ALPHA_MIN) / LOG_ALPHA_STEP).round() as usize;
        let grid = (0..=steps)
            .map(|k| {
                let la = LOG_ALPHA_MIN + k as f64 * LOG_ALPHA_STEP;
                knots.hat_trace(10f64.powf(la)).map(|t| (la, t))
            })
            .collect::<Result<_>>()?;
        Ok(GcvCache { grid })
    }
}

fn gcv_score(knots: &Knots, y: &[f64], alpha: f64, trace: f64) -> Result<(f64, SmoothingSpline)> {
    let fit = fit_on(knots, y, alpha)?;
    let n = y.len() as f64;
    let rss: f64 = y.iter().zip(&fit.values).map(|(a, b)| (a - b) * (a - b)).sum();
    let dof = n - trace;
    Ok((n * rss / (dof * dof), fit))
}

fn fit_gcv_on(knots: &Knots, y: &[f64], cache: &GcvCache) -> Result<SmoothingSpline> {
    check_trace(knots, y)?;
    let mut best = (f64::INFINITY, 0usize);
    for (k, &(la, tr)) in cache.grid.iter().enumerate() {
        let (score, _) = gcv_score(knots, y, 10f64.powf(la), tr)?;
        if score < best.0 {
            best = (score, k);
        }
    }
    let eval = |la: f64| -> Result<(f64, SmoothingSpline)> {
        let alpha = 10f64.powf(la);
        gcv_score(knots, y, alpha, knots.hat_trace(alpha)?)
    };
    let centre = cache.grid[best.1].0;
    let (mut lo, mut hi) = (centre - LOG_ALPHA_STEP, centre + LOG_ALPHA_STEP);
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - ratio * (hi - lo);
    let mut b = lo + ratio * (hi - lo);
    let mut fa = eval(a)?.0;
    let mut fb = eval(b)?.0;
    while hi - lo > GOLDEN_TOL {
        if fa <= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - ratio * (hi - lo);
            fa = eval(a)?.0;
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + ratio * (hi - lo);
            fb = eval(b)?.0;
        }
    }
    let candidates = [(centre, best.0), (a, fa), (b, fb)];
    let la = candidates
        .iter()
        .filter(|c| c.1.is_finite())
        .min_by(|p, q| p.1.total_cmp(&q.1))
        .map_or(centre, |c| c.0);
    let (score, mut fit) = eval(la)?;
    fit.gcv = score;
    Ok(fit)
}

/// Smooths every coordinate trace over the valid frames and fills interior
/// gaps shorter than `max_gap` frames. Longer gaps, and gaps before the
/// first or after the last valid frame, stay invalid.
pub fn smooth_landmarks(seq: &LandmarkSequence, max_gap: usize) -> Result<LandmarkSequence> {
    smooth_landmarks_with(seq, max_gap, Smoothing::Gcv)
}

pub fn smooth_landmarks_with(seq: &LandmarkSequence, max_gap: usize, smoothing: Smoothing) -> Result<LandmarkSequence> {
    seq.validate()?;
    if max_gap == 0 {
        return Err(Error::Config("smoothing: max_gap must be at least 1".into()));
    }
    let valid_idx: Vec<usize> = (0..seq.len()).filter(|&f| seq.valid[f]).collect();
    if valid_idx.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "sequence `{}` has {} valid frames; smoothing needs 4",
            seq.source_id,
            valid_idx.len()
        )));
    }
    let x: Vec<f64> = valid_idx.iter().map(|&f| f as f64).collect();
    let knots = Knots::new(&x)?;
    let cache = match smoothing {
        Smoothing::Gcv => Some(GcvCache::new(&knots)?),
        Smoothing::Fixed(_) => None,
    };

    let mut valid = seq.valid.clone();
    for w in valid_idx.windows(2) {
        let gap = w[1] - w[0] - 1;
        if gap > 0 && gap < max_gap {
            valid[w[0] + 1..w[1]].iter_mut().for_each(|v| *v = true);
        }
    }
    let mut frames = vec![vec![Vector2::new(f64::NAN, f64::NAN); LANDMARK_COUNT]; seq.len()];
    for k in 0..LANDMARK_COUNT {
        for axis in 0..2 {
            let y: Vec<f64> = valid_idx.iter().map(|&f| seq.frames[f][k][axis]).collect();
            let spline = match (smoothing, &cache) {
                (Smoothing::Gcv, Some(c)) => fit_gcv_on(&knots, &y, c)?,
                (Smoothing::Fixed(alpha), _) => fit_on(&knots, &y, alpha)?,
                (Smoothing::Gcv, None) => unreachable!("cache built for GCV"),
            };
            let mut knot_iter = valid_idx.iter().zip(spline.knot_values()).peekable();
            for f in 0..seq.len() {
                if !valid[f] {
                    continue;
                }
                let v = match knot_iter.peek() {
                    Some((&kf, &kv)) if kf == f => {
                        knot_iter.next();
                        kv
                    }
                    _ => spline.evaluate(f as f64),
                };
                frames[f][k][axis] = v;
            }
        }
    }
    LandmarkSequence::new(frames, valid, seq.source_id.clone())
}
