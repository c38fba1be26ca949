//! Batch fitting of one identity, per-frame expressions and per-frame
//! weak-perspective poses to a landmark sequence.
//!
//! The energy is
//!
//! ```text
//! E = Σ_f ‖project(c_f, landmarks(i, e_f)) − L_f‖²
//!   + λ_i ‖i‖² + λ_e Σ_f ‖e_f‖² + λ_t Σ_f ‖e_{f+1} − e_f‖²
//! ```
//!
//! with the data term summed over frames that carry landmarks. With poses
//! fixed the projection is linear in the shape, so the identity block is a
//! single ridge solve and the expression block is one block-tridiagonal
//! solve. Each accepted block update is checked to not raise `E`.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Rotation3, Vector2, Vector3};

use crate::annotation::{PruneStatus, VideoAnnotation};
use crate::camera::{self, CameraPose};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{stacked_to_points, ShapeModel, LANDMARK_COUNT};
use crate::sequence::LandmarkSequence;

/// Iterations of Levenberg–Marquardt polish per pose update.
const POSE_REFINE_ITERATIONS: usize = 8;
/// Rotation (3), scale and translation (2) per frame in the joint step.
const POSE_DOF: usize = 6;
/// Damping attempts per joint step before giving up for the cycle.
const JOINT_ATTEMPTS: usize = 8;
/// Loosest relative tolerance of the rigid stage inside a full fit. There it
/// only seeds the joint refinement, and on non-rigid data it would crawl.
const SEED_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub lambda_identity: f64,
    pub lambda_expression: f64,
    pub lambda_temporal: f64,
    pub outer_iterations: usize,
    /// Stop once a full cycle lowers the energy by less than this fraction.
    pub convergence_tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            lambda_identity: 1.0,
            lambda_expression: 1.0,
            lambda_temporal: 0.5,
            outer_iterations: 10,
            convergence_tol: 1e-6,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_identity", self.lambda_identity),
            ("lambda_expression", self.lambda_expression),
            ("lambda_temporal", self.lambda_temporal),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("fit: {name} must be finite and non-negative")));
            }
        }
        if self.outer_iterations == 0 {
            return Err(Error::Config("fit: outer_iterations must be positive".into()));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::Config("fit: convergence_tol must be positive".into()));
        }
        Ok(())
    }
}

/// Which parameter block an energy sample was taken after.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Initial,
    Poses,
    Identity,
    Expressions,
    /// Damped Gauss–Newton step over all blocks at once.
    Joint,
}

/// Energy after every block update of a fit.
#[derive(Debug, Clone, Default)]
pub struct EnergyTrace {
    pub samples: Vec<(Block, f64)>,
    pub cycles: usize,
    pub converged: bool,
}

impl EnergyTrace {
    /// True when no sample exceeds its predecessor.
    pub fn is_monotone(&self) -> bool {
        self.samples.windows(2).all(|w| w[1].1 <= w[0].1)
    }

    pub fn final_energy(&self) -> f64 {
        self.samples.last().map_or(f64::NAN, |s| s.1)
    }
}

/// Output of the rigid initialisation stage.
#[derive(Debug, Clone)]
pub struct RigidInit {
    pub identity: DVector<f64>,
    pub poses: Vec<CameraPose>,
    /// Frames that contributed data (valid and pose-estimable).
    pub active: Vec<bool>,
    pub trace: EnergyTrace,
}

struct Problem<'a> {
    model: &'a ShapeModel,
    targets: Vec<Vec<Vector2<f64>>>,
    config: FitConfig,
    /// Σ_f ‖L_f − mean(L_f)‖² over valid frames; sets the float resolution of E.
    data_scale: f64,
}

struct FrameSystem {
    h: DMatrix<f64>,
    h_id: DMatrix<f64>,
    g: DVector<f64>,
    g_id: DVector<f64>,
    gram: Matrix3<f64>,
}

#[derive(Clone)]
struct State {
    identity: DVector<f64>,
    expressions: Vec<DVector<f64>>,
    poses: Vec<CameraPose>,
    active: Vec<bool>,
}

fn block_diag_apply(g: &Matrix3<f64>, basis: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(basis.nrows(), basis.ncols());
    for k in 0..basis.nrows() / 3 {
        let rows = basis.rows(3 * k, 3);
        out.rows_mut(3 * k, 3).copy_from(&(g * rows));
    }
    out
}

impl<'a> Problem<'a> {
    fn new(model: &'a ShapeModel, seq: &LandmarkSequence, config: FitConfig) -> Result<Self> {
        config.validate()?;
        seq.validate()?;
        if seq.valid_count() == 0 {
            return Err(Error::EmptyInput(format!("sequence `{}` has no valid frames", seq.source_id)));
        }
        let mut data_scale = 0.0;
        for (frame, &ok) in seq.frames.iter().zip(&seq.valid) {
            if ok {
                let c = frame.iter().sum::<Vector2<f64>>() / LANDMARK_COUNT as f64;
                data_scale += frame.iter().map(|p| (p - c).norm_squared()).sum::<f64>();
            }
        }
        Ok(Problem {
            model,
            targets: seq.frames.clone(),
            config,
            data_scale: data_scale.max(1.0),
        })
    }

    fn frames(&self) -> usize {
        self.targets.len()
    }

    fn frame_points(&self, identity: &DVector<f64>, expression: &DVector<f64>) -> Vec<Vector3<f64>> {
        stacked_to_points(&self.model.landmark_shape(identity, expression))
    }

    fn frame_sse(&self, state: &State, f: usize) -> f64 {
        let pts = self.frame_points(&state.identity, &state.expressions[f]);
        camera::reprojection_sse(&state.poses[f], &pts, &self.targets[f], &[1.0; LANDMARK_COUNT])
    }

    fn data_term(&self, state: &State) -> f64 {
        (0..self.frames())
            .filter(|&f| state.active[f])
            .map(|f| self.frame_sse(state, f))
            .sum()
    }

    fn energy(&self, state: &State) -> f64 {
        let c = &self.config;
        let mut e = self.data_term(state) + c.lambda_identity * state.identity.norm_squared();
        e += c.lambda_expression * state.expressions.iter().map(|x| x.norm_squared()).sum::<f64>();
        if c.lambda_temporal > 0.0 {
            e += c.lambda_temporal
                * state
                    .expressions
                    .windows(2)
                    .map(|w| (&w[1] - &w[0]).norm_squared())
                    .sum::<f64>();
        }
        e
    }

    /// Floating-point slack allowed when comparing energies.
    fn slack(&self, energy: f64) -> f64 {
        1e-10 * energy.abs() + 1e-14 * self.data_scale
    }

    /// Per-landmark back-projected targets `A_fᵀ(L_fk − t_f) − G_f b_k` stacked to 3*68,
    /// where `b` is the part of the shape held fixed.
    fn backprojected(&self, pose: &CameraPose, f: usize, fixed: &DVector<f64>) -> DVector<f64> {
        let a: Matrix2x3<f64> = pose.linear();
        let g = a.transpose() * a;
        let mut z = DVector::zeros(3 * LANDMARK_COUNT);
        for (k, q) in self.targets[f].iter().enumerate() {
            let b = fixed.fixed_rows::<3>(3 * k);
            let v = a.transpose() * (q - pose.translation) - g * b;
            z.fixed_rows_mut::<3>(3 * k).copy_from(&v);
        }
        z
    }

    fn solve_identity(&self, state: &State, lambda: f64) -> Result<DVector<f64>> {
        let basis = self.model.landmark_identity_basis();
        let mut gsum = Matrix3::zeros();
        let mut z = DVector::zeros(3 * LANDMARK_COUNT);
        for f in 0..self.frames() {
            if !state.active[f] {
                continue;
            }
            let pose = &state.poses[f];
            let a = pose.linear();
            gsum += a.transpose() * a;
            let fixed = self.model.landmark_mean() + self.model.landmark_expression_basis() * &state.expressions[f];
            z += self.backprojected(pose, f, &fixed);
        }
        let mut h = basis.transpose() * block_diag_apply(&gsum, basis);
        for j in 0..h.nrows() {
            h[(j, j)] += lambda;
        }
        linalg::solve_spd(h, &(basis.transpose() * z), "identity normal equations")
    }

    fn solve_expressions(&self, state: &State) -> Result<Vec<DVector<f64>>> {
        let c = &self.config;
        let basis = self.model.landmark_expression_basis();
        let ne = basis.ncols();
        let frames = self.frames();
        let fixed = self.model.landmark_mean() + self.model.landmark_identity_basis() * &state.identity;
        let mut diag = Vec::with_capacity(frames);
        let mut rhs = Vec::with_capacity(frames);
        for f in 0..frames {
            let neighbours = usize::from(f > 0) + usize::from(f + 1 < frames);
            let mut d = DMatrix::identity(ne, ne) * (c.lambda_expression + c.lambda_temporal * neighbours as f64);
            let mut r = DMatrix::zeros(ne, 1);
            if state.active[f] {
                let pose = &state.poses[f];
                let a = pose.linear();
                let g = a.transpose() * a;
                d += basis.transpose() * block_diag_apply(&g, basis);
                r.column_mut(0).copy_from(&(basis.transpose() * self.backprojected(pose, f, &fixed)));
            }
            diag.push(d);
            rhs.push(r);
        }
        let x = linalg::solve_block_tridiagonal(&diag, c.lambda_temporal, &rhs, "expression normal equations")?;
        Ok(x.into_iter().map(|m| m.column(0).into_owned()).collect())
    }

    /// Best pose per active frame among the polished current pose and a
    /// polished fresh estimate; never worse than the current pose.
    fn update_poses(&self, state: &mut State) {
        let w = [1.0; LANDMARK_COUNT];
        for f in 0..self.frames() {
            if !state.active[f] {
                continue;
            }
            let pts = self.frame_points(&state.identity, &state.expressions[f]);
            let target = &self.targets[f];
            let current = state.poses[f];
            let mut best = camera::refine_pose(&current, &pts, target, &w, POSE_REFINE_ITERATIONS);
            let mut best_sse = camera::reprojection_sse(&best, &pts, target, &w);
            if let Ok(fresh) = camera::estimate_pose(&pts, target, &w) {
                let fresh = camera::refine_pose(&fresh, &pts, target, &w, POSE_REFINE_ITERATIONS);
                let sse = camera::reprojection_sse(&fresh, &pts, target, &w);
                if sse < best_sse {
                    best = fresh;
                    best_sse = sse;
                }
            }
            if best_sse <= camera::reprojection_sse(&current, &pts, target, &w) {
                state.poses[f] = best;
            }
        }
    }

    /// Accepts `candidate` if it does not raise the energy. A rise within
    /// floating-point slack keeps the previous state; a larger rise means a
    /// broken solve.
    fn accept(&self, state: &mut State, candidate: State, previous: f64, block: Block) -> Result<f64> {
        let e = self.energy(&candidate);
        if !e.is_finite() {
            return Err(Error::Solver(format!("{block:?} update produced non-finite energy")));
        }
        if e <= previous {
            *state = candidate;
            return Ok(e);
        }
        if e - previous <= self.slack(previous) {
            return Ok(previous);
        }
        Err(Error::Solver(format!(
            "{block:?} update raised the energy from {previous:e} to {e:e}"
        )))
    }

    /// Gauss–Newton system for one frame's pose and expression, plus its
    /// coupling to the identity.
    fn frame_system(&self, state: &State, f: usize) -> FrameSystem {
        let c = &self.config;
        let ne = self.model.expression_dim();
        let ni = self.model.identity_dim();
        let local = POSE_DOF + ne;
        let mut sys = FrameSystem {
            h: DMatrix::zeros(local, local),
            h_id: DMatrix::zeros(local, ni),
            g: DVector::zeros(local),
            g_id: DVector::zeros(ni),
            gram: Matrix3::zeros(),
        };
        let frames = self.frames();
        if state.active[f] {
            let pose = &state.poses[f];
            let rot = *pose.rotation.matrix();
            let s = pose.scale;
            let a = pose.linear();
            let pts = self.frame_points(&state.identity, &state.expressions[f]);
            let rows = 2 * LANDMARK_COUNT;
            let mut j_local = DMatrix::zeros(rows, local);
            let mut j_id = DMatrix::zeros(rows, ni);
            let mut r = DVector::zeros(rows);
            let bi = self.model.landmark_identity_basis();
            let be = self.model.landmark_expression_basis();
            for (k, (p, q)) in pts.iter().zip(&self.targets[f]).enumerate() {
                let u = rot * p;
                let res = Vector2::new(u.x, u.y) * s + pose.translation - q;
                let (r0, r1) = (2 * k, 2 * k + 1);
                r[r0] = res.x;
                r[r1] = res.y;
                let pose_rows = [
                    [0.0, s * u.z, -s * u.y, u.x, 1.0, 0.0],
                    [-s * u.z, 0.0, s * u.x, u.y, 0.0, 1.0],
                ];
                for (row, vals) in [r0, r1].into_iter().zip(pose_rows) {
                    for (col, v) in vals.into_iter().enumerate() {
                        j_local[(row, col)] = v;
                    }
                }
                j_local
                    .view_mut((r0, POSE_DOF), (2, ne))
                    .copy_from(&(a * be.rows(3 * k, 3)));
                j_id.rows_mut(r0, 2).copy_from(&(a * bi.rows(3 * k, 3)));
            }
            sys.h = j_local.tr_mul(&j_local);
            sys.h_id = j_local.tr_mul(&j_id);
            sys.g = j_local.tr_mul(&r);
            sys.g_id = j_id.tr_mul(&r);
            sys.gram = a.transpose() * a;
        } else {
            // No data: pose entries get a unit curvature and zero gradient, so they stay put.
            for d in 0..POSE_DOF {
                sys.h[(d, d)] = 1.0;
            }
        }
        let e = &state.expressions;
        let neighbours = usize::from(f > 0) + usize::from(f + 1 < frames);
        let mut ge = &e[f] * (c.lambda_expression + c.lambda_temporal * neighbours as f64);
        if f > 0 {
            ge -= &e[f - 1] * c.lambda_temporal;
        }
        if f + 1 < frames {
            ge -= &e[f + 1] * c.lambda_temporal;
        }
        let mut tail = sys.g.rows_mut(POSE_DOF, ne);
        tail += ge;
        for d in 0..ne {
            sys.h[(POSE_DOF + d, POSE_DOF + d)] += c.lambda_expression + c.lambda_temporal * neighbours as f64;
        }
        sys
    }

    /// One Levenberg–Marquardt step over poses, identity and expressions.
    /// Per-frame blocks are eliminated onto the identity (Schur complement).
    fn joint_step(&self, state: &State, systems: &[FrameSystem], mu: f64) -> Result<State> {
        let c = &self.config;
        let ne = self.model.expression_dim();
        let ni = self.model.identity_dim();
        let frames = self.frames();
        let damp = |h: &mut DMatrix<f64>| {
            for d in 0..h.nrows() {
                h[(d, d)] += mu * h[(d, d)] + 1e-12;
            }
        };

        let mut gram = Matrix3::zeros();
        let mut g_id = &state.identity * c.lambda_identity;
        let mut diag = Vec::with_capacity(frames);
        let mut rhs = Vec::with_capacity(frames);
        for sys in systems {
            gram += sys.gram;
            g_id += &sys.g_id;
            let mut h = sys.h.clone();
            damp(&mut h);
            diag.push(h);
            let mut r = DMatrix::zeros(POSE_DOF + ne, ni + 1);
            r.columns_mut(0, ni).copy_from(&sys.h_id);
            r.column_mut(ni).copy_from(&sys.g);
            rhs.push(r);
        }
        let bi = self.model.landmark_identity_basis();
        let mut h_id = bi.transpose() * block_diag_apply(&gram, bi);
        for d in 0..ni {
            h_id[(d, d)] += c.lambda_identity;
        }
        damp(&mut h_id);

        let coupling = DVector::from_fn(POSE_DOF + ne, |d, _| if d < POSE_DOF { 0.0 } else { c.lambda_temporal });
        let solved = linalg::solve_block_tridiagonal_diag(&diag, &coupling, &rhs, "joint frame blocks")?;
        let mut reduced = h_id;
        let mut reduced_rhs = -g_id;
        for (sys, x) in systems.iter().zip(&solved) {
            reduced -= sys.h_id.tr_mul(&x.columns(0, ni));
            reduced_rhs += sys.h_id.tr_mul(&x.column(ni));
        }
        // Symmetrise against round-off before factoring.
        let reduced = (&reduced + reduced.transpose()) * 0.5;
        let d_id = linalg::factor_spd(reduced, "joint identity system")?.solve(&reduced_rhs);

        let mut next = state.clone();
        next.identity += &d_id;
        for (f, x) in solved.iter().enumerate() {
            let dx: DVector<f64> = -(x.column(ni) + x.columns(0, ni) * &d_id);
            next.expressions[f] += dx.rows(POSE_DOF, ne);
            if state.active[f] {
                let pose = &mut next.poses[f];
                let omega = Vector3::new(dx[0], dx[1], dx[2]);
                let mut rot = Rotation3::from_scaled_axis(omega) * pose.rotation;
                rot.renormalize();
                pose.rotation = rot;
                pose.scale += dx[3];
                pose.translation += Vector2::new(dx[4], dx[5]);
                if !(pose.scale > 0.0) {
                    return Err(Error::Solver("joint step produced a non-positive scale".into()));
                }
            }
        }
        Ok(next)
    }

    fn fill_inactive_poses(&self, state: &mut State) {
        let frames = self.frames();
        for f in 0..frames {
            if state.active[f] {
                continue;
            }
            let nearest = (1..frames).find_map(|d| {
                [f.checked_sub(d), Some(f + d)]
                    .into_iter()
                    .flatten()
                    .find(|&g| g < frames && state.active[g])
            });
            if let Some(g) = nearest {
                state.poses[f] = state.poses[g];
            }
        }
    }

    fn mean_reprojection(&self, state: &State) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for f in 0..self.frames() {
            if !state.active[f] {
                continue;
            }
            let pts = self.frame_points(&state.identity, &state.expressions[f]);
            for (p, q) in state.poses[f].project(&pts).iter().zip(&self.targets[f]) {
                total += (p - q).norm();
                count += 1;
            }
        }
        total / count.max(1) as f64
    }
}

fn rigid_stage(problem: &Problem<'_>, seq: &LandmarkSequence, tol: f64) -> Result<(State, EnergyTrace)> {
    let model = problem.model;
    let frames = problem.frames();
    let zero_e = DVector::zeros(model.expression_dim());
    let mut state = State {
        identity: DVector::zeros(model.identity_dim()),
        expressions: vec![zero_e.clone(); frames],
        poses: vec![CameraPose::identity(); frames],
        active: seq.valid.clone(),
    };
    let mean_pts = problem.frame_points(&state.identity, &zero_e);
    let w = [1.0; LANDMARK_COUNT];
    for f in 0..frames {
        if !state.active[f] {
            continue;
        }
        match camera::estimate_pose(&mean_pts, &problem.targets[f], &w) {
            Ok(p) => state.poses[f] = p,
            Err(e) => {
                log::debug!("{}: frame {f} demoted during init: {e}", seq.source_id);
                state.active[f] = false;
            }
        }
    }
    if !state.active.iter().any(|&a| a) {
        return Err(Error::InitFailure(format!(
            "pose estimation degenerate on every frame of `{}`",
            seq.source_id
        )));
    }

    let lambda = problem.config.lambda_identity;
    let rigid_energy = |s: &State| problem.data_term(s) + lambda * s.identity.norm_squared();
    let mut trace = EnergyTrace::default();
    let mut energy = rigid_energy(&state);
    trace.samples.push((Block::Initial, energy));
    for _ in 0..problem.config.outer_iterations {
        let start = energy;
        let mut candidate = state.clone();
        candidate.identity = problem.solve_identity(&state, lambda)?;
        let e = rigid_energy(&candidate);
        if e <= energy {
            state = candidate;
            energy = e;
        } else if e - energy > problem.slack(energy) {
            return Err(Error::Solver(format!("rigid identity update raised energy {energy:e} -> {e:e}")));
        }
        trace.samples.push((Block::Identity, energy));

        let mut candidate = state.clone();
        problem.update_poses(&mut candidate);
        let e = rigid_energy(&candidate);
        if e <= energy {
            state = candidate;
            energy = e;
        }
        trace.samples.push((Block::Poses, energy));
        trace.cycles += 1;
        if start - energy <= tol * start {
            trace.converged = true;
            break;
        }
    }
    Ok((state, trace))
}

/// Rigid initialisation: expressions frozen at zero, alternating per-frame
/// pose estimation and a ridge solve for the shared identity.
pub fn init_cameras(model: &ShapeModel, seq: &LandmarkSequence, config: &FitConfig) -> Result<RigidInit> {
    let problem = Problem::new(model, seq, *config)?;
    let (mut state, trace) = rigid_stage(&problem, seq, config.convergence_tol)?;
    problem.fill_inactive_poses(&mut state);
    Ok(RigidInit {
        identity: state.identity,
        poses: state.poses,
        active: state.active,
        trace,
    })
}

/// Full fit; see [`fit_video_traced`] for the energy history.
pub fn fit_video(model: &ShapeModel, seq: &LandmarkSequence, config: &FitConfig) -> Result<VideoAnnotation> {
    fit_video_traced(model, seq, config).map(|(a, _)| a)
}

/// Rigid initialisation followed by block-coordinate descent over poses,
/// identity and expressions until the relative energy decrease of a cycle
/// drops below `convergence_tol` or `outer_iterations` cycles have run.
pub fn fit_video_traced(
    model: &ShapeModel,
    seq: &LandmarkSequence,
    config: &FitConfig,
) -> Result<(VideoAnnotation, EnergyTrace)> {
    let problem = Problem::new(model, seq, *config)?;
    let (mut state, _) = rigid_stage(&problem, seq, config.convergence_tol.max(SEED_TOL))?;

    let mut trace = EnergyTrace::default();
    let mut energy = problem.energy(&state);
    let mut mu = 1e-3;
    trace.samples.push((Block::Initial, energy));
    for _ in 0..config.outer_iterations {
        let start = energy;

        let mut candidate = state.clone();
        problem.update_poses(&mut candidate);
        energy = problem.accept(&mut state, candidate, energy, Block::Poses)?;
        trace.samples.push((Block::Poses, energy));

        let mut candidate = state.clone();
        candidate.identity = problem.solve_identity(&state, config.lambda_identity)?;
        energy = problem.accept(&mut state, candidate, energy, Block::Identity)?;
        trace.samples.push((Block::Identity, energy));

        let mut candidate = state.clone();
        candidate.expressions = problem.solve_expressions(&state)?;
        energy = problem.accept(&mut state, candidate, energy, Block::Expressions)?;
        trace.samples.push((Block::Expressions, energy));

        let systems: Vec<FrameSystem> = (0..problem.frames())
            .map(|f| problem.frame_system(&state, f))
            .collect();
        for _ in 0..JOINT_ATTEMPTS {
            let step = match problem.joint_step(&state, &systems, mu) {
                Ok(candidate) => Some(candidate),
                Err(Error::RankDeficient { .. } | Error::Solver(_)) => None,
                Err(e) => return Err(e),
            };
            if let Some(candidate) = step {
                let e = problem.energy(&candidate);
                if e < energy {
                    state = candidate;
                    energy = e;
                    mu = (mu * 0.1).max(1e-12);
                    break;
                }
            }
            mu *= 10.0;
        }
        trace.samples.push((Block::Joint, energy));

        trace.cycles += 1;
        if start - energy > problem.slack(start) + config.convergence_tol * start {
            continue;
        }
        if energy > start + problem.slack(start) {
            return Err(Error::Solver(format!(
                "energy rose across a full cycle ({start:e} -> {energy:e})"
            )));
        }
        trace.converged = true;
        break;
    }

    problem.fill_inactive_poses(&mut state);
    let annotation = VideoAnnotation {
        source_id: seq.source_id.clone(),
        mean_reprojection_px: problem.mean_reprojection(&state),
        identity: state.identity,
        expressions: state.expressions,
        poses: state.poses,
        frame_valid: state.active,
        prune_status: PruneStatus::Kept,
        prune_reason: String::new(),
    };
    Ok((annotation, trace))
}

/// Energy of an arbitrary annotation under `config`, with the data term over
/// the sequence's valid frames. Useful for comparing fits against ground truth.
pub fn evaluate_energy(
    model: &ShapeModel,
    seq: &LandmarkSequence,
    annotation: &VideoAnnotation,
    config: &FitConfig,
) -> Result<f64> {
    let problem = Problem::new(model, seq, *config)?;
    if annotation.expressions.len() != seq.len() || annotation.poses.len() != seq.len() {
        return Err(Error::DimensionMismatch {
            context: "annotation frames",
            expected: seq.len(),
            actual: annotation.expressions.len(),
        });
    }
    let state = State {
        identity: annotation.identity.clone(),
        expressions: annotation.expressions.clone(),
        poses: annotation.poses.clone(),
        active: seq.valid.clone(),
    };
    Ok(problem.energy(&state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_model, sample_video, SynthConfig};

    fn cfg() -> SynthConfig {
        SynthConfig {
            num_vertices: 120,
            n_identity: 30,
            n_expression: 10,
            frames_per_video: 30,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn energy_trace_is_monotone_on_noisy_data() {
        let sc = cfg();
        let model = gen_model(&sc, 0).unwrap();
        let (seq, _) = crate::synth::gen_video(&model, &sc, 1).unwrap();
        let (_, trace) = fit_video_traced(&model, &seq, &FitConfig { outer_iterations: 15, ..Default::default() }).unwrap();
        assert!(trace.is_monotone(), "{:?}", trace.samples);
        assert!(trace.cycles >= 1);
    }

    #[test]
    fn all_invalid_is_empty_input() {
        let sc = cfg();
        let model = gen_model(&sc, 0).unwrap();
        let (mut seq, _) = crate::synth::gen_video(&model, &sc, 1).unwrap();
        seq.valid.iter_mut().for_each(|v| *v = false);
        assert!(matches!(
            init_cameras(&model, &seq, &FitConfig::default()),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn invalid_frames_are_infilled_by_temporal_term() {
        let sc = SynthConfig {
            pixel_noise_sigma: 0.0,
            ..cfg()
        };
        let model = gen_model(&sc, 0).unwrap();
        let mut recipe = sample_video(&model, &sc, 2).unwrap();
        recipe.dropped[10] = true;
        recipe.dropped[11] = true;
        let (seq, _) = recipe.render(&model, 0.0, 2).unwrap();
        let fc = FitConfig {
            lambda_expression: 1e-6,
            lambda_temporal: 1.0,
            outer_iterations: 30,
            ..Default::default()
        };
        let ann = fit_video(&model, &seq, &fc).unwrap();
        // With a first-difference prior and negligible shrinkage, the infill is
        // the straight line between the neighbouring frames.
        let a = &ann.expressions[9];
        let b = &ann.expressions[12];
        let want10 = a + (b - a) / 3.0;
        assert!((&ann.expressions[10] - want10).norm() < 1e-4 * (1.0 + a.norm()));
        assert!(!ann.frame_valid[10]);
        assert_eq!(ann.poses[10], ann.poses[9]);
    }

    #[test]
    fn config_validation() {
        let bad = FitConfig {
            lambda_identity: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
