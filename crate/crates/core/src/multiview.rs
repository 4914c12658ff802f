//! Registration of N cameras standing on a common horizontal plane.
//!
//! Each camera is described by a yaw angle `theta_i` (rotation
//! `R_i = Rz(theta_i)`, mapping world to camera directions) and a center with
//! `z = 0`. Pairwise epipoles are first turned into yaw angles, then into
//! centers, and finally points tracked across views are triangulated.
//!
//! Gauge: `theta_0 = 0`, `C_0` at the origin and `|C_1 - C_0| = 1`.

use std::collections::{BTreeMap, VecDeque};
use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::epipolar::{closest_approach, TwoViewSolution};
use crate::sphere_cam::{pixel_to_bearing, Bearing, CameraPose, ImageSize, PixelCoord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MultiviewError {
    #[error("camera graph is disconnected")]
    DisconnectedGraph,
    #[error("rotation search did not converge (gradient norm {gradient_norm:.3e})")]
    NonConvergence { thetas: Vec<f64>, gradient_norm: f64 },
    #[error("camera {0} is collinear with its anchor cameras")]
    CollinearCamera(usize),
    #[error("track rays are parallel or too few")]
    DegenerateTrack,
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl MultiviewError {
    pub fn category(&self) -> &'static str {
        match self {
            Self::DisconnectedGraph => "DisconnectedGraph",
            Self::NonConvergence { .. } => "NonConvergence",
            Self::CollinearCamera(_) => "CollinearCamera",
            Self::DegenerateTrack => "DegenerateTrack",
            Self::InvalidInput(_) => "InvalidInput",
        }
    }
}

/// Epipoles of one camera pair: `e_ij` is camera `j`'s center seen from `i`,
/// `e_ji` camera `i`'s center seen from `j`. Both are sign resolved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairEstimate {
    pub i: usize,
    pub j: usize,
    pub e_ij: Bearing,
    pub e_ji: Bearing,
    pub weight: f64,
}

impl PairEstimate {
    /// Epipoles of a solved pair, weighted by its inlier count.
    pub fn from_solution(i: usize, j: usize, solution: &TwoViewSolution) -> Self {
        Self {
            i,
            j,
            e_ij: solution.e1,
            e_ji: solution.e2,
            weight: solution.inlier_count().max(1) as f64,
        }
    }
}

/// Rotation about +Z by `theta`.
pub fn yaw_matrix(theta: f64) -> Matrix3<f64> {
    let (s, c) = theta.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(TAU) - PI;
    if w <= -PI {
        w + TAU
    } else {
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanarRig {
    pub thetas: Vec<f64>,
    pub centers: Vec<Vector3<f64>>,
}

impl PlanarRig {
    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }

    pub fn pose(&self, k: usize) -> CameraPose {
        CameraPose {
            rotation: yaw_matrix(self.thetas[k]),
            center: self.centers[k],
        }
    }

    pub fn poses(&self) -> Vec<CameraPose> {
        (0..self.len()).map(|k| self.pose(k)).collect()
    }
}

/// Observations of one scene point, keyed by camera index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Track {
    pub id: usize,
    pub observations: BTreeMap<usize, PixelCoord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiviewPoint {
    pub point: Vector3<f64>,
    /// Distance along each observing ray, paired with the camera index.
    pub ranges: Vec<(usize, f64)>,
    pub rms_residual: f64,
}

impl MultiviewPoint {
    /// Whether the point lies in front of every observing camera.
    pub fn in_front(&self) -> bool {
        self.ranges.iter().all(|&(_, r)| r > 0.0)
    }
}

fn validate_pairs(pairs: &[PairEstimate], n: usize) -> Result<(), MultiviewError> {
    if n < 2 {
        return Err(MultiviewError::InvalidInput("need at least two cameras".into()));
    }
    for p in pairs {
        if p.i == p.j || p.i >= n || p.j >= n {
            return Err(MultiviewError::InvalidInput(format!(
                "bad camera pair ({}, {})",
                p.i, p.j
            )));
        }
        if !(p.weight > 0.0) {
            return Err(MultiviewError::InvalidInput("pair weights must be positive".into()));
        }
    }
    let mut adjacency = vec![Vec::new(); n];
    for p in pairs {
        adjacency[p.i].push(p.j);
        adjacency[p.j].push(p.i);
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    while let Some(k) = queue.pop_front() {
        for &m in &adjacency[k] {
            if !seen[m] {
                seen[m] = true;
                queue.push_back(m);
            }
        }
    }
    if seen.iter().all(|&s| s) {
        Ok(())
    } else {
        Err(MultiviewError::DisconnectedGraph)
    }
}

/// Per-pair terms of the rotation objective. With `a = e_ij`, `b = e_ji`,
/// `g = (R_iᵀa)·(R_jᵀb) = k0 + k cos(phi)` and `phi = alpha - beta - theta_i + theta_j`.
struct PairTerm {
    i: usize,
    j: usize,
    k0: f64,
    k: f64,
    delta: f64,
    weight: f64,
}

impl PairTerm {
    fn new(p: &PairEstimate) -> Self {
        let (a, b) = (p.e_ij.vector(), p.e_ji.vector());
        Self {
            i: p.i,
            j: p.j,
            k0: a.z * b.z,
            k: a.x.hypot(a.y) * b.x.hypot(b.y),
            delta: a.y.atan2(a.x) - b.y.atan2(b.x),
            weight: p.weight,
        }
    }

    fn phi(&self, thetas: &[f64]) -> f64 {
        self.delta - thetas[self.i] + thetas[self.j]
    }

    fn dot(&self, thetas: &[f64]) -> f64 {
        self.k0 + self.k * self.phi(thetas).cos()
    }
}

fn rotation_objective(terms: &[PairTerm], thetas: &[f64]) -> f64 {
    terms
        .iter()
        .map(|t| {
            let g = t.dot(thetas);
            t.weight * (1.0 - g * g)
        })
        .sum()
}

/// Gradient and Hessian with respect to `theta_1..theta_{n-1}`.
fn rotation_derivatives(terms: &[PairTerm], thetas: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let m = thetas.len() - 1;
    let mut grad = DVector::zeros(m);
    let mut hess = DMatrix::zeros(m, m);
    for t in terms {
        let phi = t.phi(thetas);
        let (s, c) = phi.sin_cos();
        let g = t.k0 + t.k * c;
        // d g / d(theta_i, theta_j) and the second derivatives
        let dg = [(t.i, t.k * s), (t.j, -t.k * s)];
        let d2g = [
            ((t.i, t.i), -t.k * c),
            ((t.j, t.j), -t.k * c),
            ((t.i, t.j), t.k * c),
            ((t.j, t.i), t.k * c),
        ];
        for &(a, da) in &dg {
            if a == 0 {
                continue;
            }
            grad[a - 1] += -2.0 * t.weight * g * da;
            for &(b, db) in &dg {
                if b != 0 {
                    hess[(a - 1, b - 1)] += -2.0 * t.weight * da * db;
                }
            }
        }
        for &((a, b), v) in &d2g {
            if a != 0 && b != 0 {
                hess[(a - 1, b - 1)] += -2.0 * t.weight * g * v;
            }
        }
    }
    (grad, hess)
}

struct NewtonOutcome {
    thetas: Vec<f64>,
    objective: f64,
    gradient_norm: f64,
    iterations: usize,
}

const GRADIENT_TOL: f64 = 1e-10;

fn damped_newton(terms: &[PairTerm], start: Vec<f64>, max_iterations: usize) -> NewtonOutcome {
    let mut thetas = start;
    let mut f = rotation_objective(terms, &thetas);
    let noise = 64.0 * f64::EPSILON * terms.iter().map(|t| t.weight).sum::<f64>();
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut gradient_norm = f64::INFINITY;
    while iterations < max_iterations {
        let (grad, hess) = rotation_derivatives(terms, &thetas);
        gradient_norm = grad.norm();
        if gradient_norm < GRADIENT_TOL {
            break;
        }
        iterations += 1;
        let mut accepted = false;
        for _ in 0..40 {
            let mut damped = hess.clone();
            for d in 0..damped.nrows() {
                damped[(d, d)] += lambda;
            }
            let Some(chol) = damped.cholesky() else {
                lambda = (lambda * 10.0).max(1e-12);
                continue;
            };
            let step = chol.solve(&(-&grad));
            let mut trial = thetas.clone();
            for (k, s) in step.iter().enumerate() {
                trial[k + 1] += s;
            }
            let f_trial = rotation_objective(terms, &trial);
            // near the optimum the decrease drops below the rounding noise of
            // the objective, so a smaller gradient decides there
            let within_noise = f_trial <= f + noise
                && rotation_derivatives(terms, &trial).0.norm() < gradient_norm;
            if f_trial <= f || within_noise {
                thetas = trial;
                f = f_trial;
                lambda = (lambda / 10.0).max(1e-15);
                accepted = true;
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    let (grad, _) = rotation_derivatives(terms, &thetas);
    gradient_norm = gradient_norm.min(grad.norm());
    NewtonOutcome {
        thetas,
        objective: f,
        gradient_norm,
        iterations,
    }
}

/// Yaw angles that best align the world-frame epipole directions.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationEstimate {
    pub thetas: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

/// Minimizes `sum w (1 - (R_iᵀe_ij · R_jᵀe_ji)²)` over the yaw angles by damped
/// Newton from several starts, then picks for each camera the half turn that
/// makes the signed epipoles point at each other.
pub fn estimate_rotations(
    pairs: &[PairEstimate],
    n_cameras: usize,
) -> Result<RotationEstimate, MultiviewError> {
    validate_pairs(pairs, n_cameras)?;
    let terms: Vec<PairTerm> = pairs.iter().map(PairTerm::new).collect();

    let best = rotation_starts(pairs, n_cameras)
        .into_iter()
        .map(|start| damped_newton(&terms, start, 100))
        .min_by(|a, b| a.objective.total_cmp(&b.objective))
        .expect("at least one start");

    if best.gradient_norm >= GRADIENT_TOL {
        return Err(MultiviewError::NonConvergence {
            thetas: resolve_half_turns(pairs, best.thetas),
            gradient_norm: best.gradient_norm,
        });
    }
    Ok(RotationEstimate {
        thetas: resolve_half_turns(pairs, best.thetas),
        objective: best.objective,
        iterations: best.iterations,
    })
}

fn rotation_starts(pairs: &[PairEstimate], n: usize) -> Vec<Vec<f64>> {
    let grid: Vec<f64> = (0..8).map(|k| k as f64 * TAU / 8.0).collect();
    match n {
        2 => grid.iter().map(|&a| vec![0.0, a]).collect(),
        3 => grid
            .iter()
            .flat_map(|&a| grid.iter().map(move |&b| vec![0.0, a, b]))
            .collect(),
        _ => {
            let mut starts = vec![spanning_tree_start(pairs, n)];
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
            for _ in 0..8 * (n - 1) {
                let mut s = vec![0.0; n];
                for v in s.iter_mut().skip(1) {
                    *v = rng.random_range(0.0..TAU);
                }
                starts.push(s);
            }
            starts
        }
    }
}

/// Angles that zero every spanning-tree edge's term exactly.
fn spanning_tree_start(pairs: &[PairEstimate], n: usize) -> Vec<f64> {
    let mut thetas = vec![f64::NAN; n];
    thetas[0] = 0.0;
    let mut changed = true;
    while changed {
        changed = false;
        for p in pairs {
            let t = PairTerm::new(p);
            // phi = 0 aligns the horizontal parts
            if thetas[p.i].is_finite() && !thetas[p.j].is_finite() {
                thetas[p.j] = thetas[p.i] - t.delta;
                changed = true;
            } else if thetas[p.j].is_finite() && !thetas[p.i].is_finite() {
                thetas[p.i] = thetas[p.j] + t.delta;
                changed = true;
            }
        }
    }
    thetas.iter().map(|t| if t.is_finite() { *t } else { 0.0 }).collect()
}

/// Adds a half turn to cameras (breadth first from camera 0) whenever that
/// makes the signed world epipoles of its pairs more anti-parallel.
fn resolve_half_turns(pairs: &[PairEstimate], mut thetas: Vec<f64>) -> Vec<f64> {
    let n = thetas.len();
    let mut fixed = vec![false; n];
    fixed[0] = true;
    let mut order = VecDeque::from([0usize]);
    while let Some(k) = order.pop_front() {
        for p in pairs {
            let other = if p.i == k {
                p.j
            } else if p.j == k {
                p.i
            } else {
                continue;
            };
            if fixed[other] {
                continue;
            }
            // signed agreement of `other` with every already fixed neighbour
            let agreement: f64 = pairs
                .iter()
                .filter(|q| {
                    (q.i == other && fixed[q.j]) || (q.j == other && fixed[q.i])
                })
                .map(|q| {
                    let di = yaw_matrix(thetas[q.i]).transpose() * q.e_ij.vector();
                    let dj = yaw_matrix(thetas[q.j]).transpose() * q.e_ji.vector();
                    -q.weight * di.dot(&dj)
                })
                .sum();
            if agreement < 0.0 {
                thetas[other] += PI;
            }
            fixed[other] = true;
            order.push_back(other);
        }
    }
    thetas[0] = 0.0;
    thetas.into_iter().map(wrap_angle).collect()
}

/// World-frame unit direction from camera `from` to camera `to`, flattened to
/// the ground plane, averaged over both epipoles of the pair.
fn world_direction(
    pairs: &[PairEstimate],
    thetas: &[f64],
    from: usize,
    to: usize,
) -> Option<(Vector3<f64>, f64)> {
    let p = pairs
        .iter()
        .find(|p| (p.i == from && p.j == to) || (p.i == to && p.j == from))?;
    let d_ij = yaw_matrix(thetas[p.i]).transpose() * p.e_ij.vector();
    let d_ji = yaw_matrix(thetas[p.j]).transpose() * p.e_ji.vector();
    // a pair whose two signs disagree still fixes the line; keep e_ij's sense
    let back = if d_ij.dot(&d_ji) > 0.0 { d_ji } else { -d_ji };
    let mut d = d_ij + back;
    d.z = 0.0;
    let d = d.try_normalize(1e-12)?;
    Some((if p.i == from { d } else { -d }, p.weight))
}

/// Camera centers with the gauge baseline between cameras 0 and 1.
pub fn estimate_positions(
    thetas: &[f64],
    pairs: &[PairEstimate],
) -> Result<Vec<Vector3<f64>>, MultiviewError> {
    estimate_positions_with_baseline(thetas, pairs, (0, 1))
}

/// Camera centers with `C_a` at the origin and `C_b` one unit away along the
/// measured `a -> b` direction. Every other camera is intersected from the two
/// baseline cameras when it is paired with both, and otherwise from its best
/// conditioned pair of already placed neighbours.
pub fn estimate_positions_with_baseline(
    thetas: &[f64],
    pairs: &[PairEstimate],
    baseline: (usize, usize),
) -> Result<Vec<Vector3<f64>>, MultiviewError> {
    let n = thetas.len();
    validate_pairs(pairs, n)?;
    let (a, b) = baseline;
    if a == b || a >= n || b >= n {
        return Err(MultiviewError::InvalidInput("bad baseline pair".into()));
    }
    let (d_ab, _) = world_direction(pairs, thetas, a, b).ok_or_else(|| {
        MultiviewError::InvalidInput(format!("baseline cameras ({a}, {b}) are not paired"))
    })?;
    let mut centers: Vec<Option<Vector3<f64>>> = vec![None; n];
    centers[a] = Some(Vector3::zeros());
    centers[b] = Some(d_ab);

    let min_sin = 1e-6f64.sin();
    while centers.iter().any(Option::is_none) {
        let mut choice: Option<(usize, usize, usize, f64)> = None;
        for k in (0..n).filter(|&k| centers[k].is_none()) {
            let placed: Vec<(usize, Vector3<f64>, f64)> = (0..n)
                .filter(|&m| centers[m].is_some())
                .filter_map(|m| world_direction(pairs, thetas, m, k).map(|(d, w)| (m, d, w)))
                .collect();
            let gauge: Vec<_> = placed.iter().filter(|x| x.0 == a || x.0 == b).collect();
            let anchors = if gauge.len() == 2 {
                Some((gauge[0], gauge[1]))
            } else {
                let mut best: Option<(&(usize, Vector3<f64>, f64), &(usize, Vector3<f64>, f64))> = None;
                let mut best_key = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                for (x, p) in placed.iter().enumerate() {
                    for q in &placed[x + 1..] {
                        let key = (p.1.cross(&q.1).norm(), p.2 + q.2);
                        if key > best_key {
                            best_key = key;
                            best = Some((p, q));
                        }
                    }
                }
                best
            };
            let Some((p, q)) = anchors else { continue };
            let sin = p.1.cross(&q.1).norm();
            if choice.is_none_or(|c| sin > c.3) {
                choice = Some((k, p.0, q.0, sin));
            }
        }
        let (k, p, q, sin) = choice.ok_or(MultiviewError::DisconnectedGraph)?;
        if sin < min_sin {
            return Err(MultiviewError::CollinearCamera(k));
        }
        let (dp, _) = world_direction(pairs, thetas, p, k).unwrap();
        let (dq, _) = world_direction(pairs, thetas, q, k).unwrap();
        let cp = centers[p].unwrap();
        let cq = centers[q].unwrap();
        let hit = closest_approach(&cp, &dp, &cq, &dq)
            .map_err(|_| MultiviewError::CollinearCamera(k))?;
        let mut c = hit.midpoint;
        c.z = 0.0;
        centers[k] = Some(c);
    }
    Ok(centers.into_iter().map(Option::unwrap).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineParams {
    pub max_steps: usize,
    pub gradient_tol: f64,
    pub initial_step: f64,
    /// Cameras held fixed to preserve the gauge.
    pub fixed: (usize, usize),
}

impl Default for RefineParams {
    fn default() -> Self {
        Self {
            max_steps: 500,
            gradient_tol: 1e-10,
            initial_step: 0.1,
            fixed: (0, 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutcome {
    pub centers: Vec<Vector3<f64>>,
    pub objective: f64,
    pub steps: usize,
}

fn direction_objective(
    centers: &[Vector3<f64>],
    measured: &[(usize, usize, Vector3<f64>, f64)],
) -> f64 {
    measured
        .iter()
        .map(|&(i, j, d, w)| {
            let v = centers[j] - centers[i];
            let g = v.dot(&d) / v.norm();
            w * (1.0 - g * g)
        })
        .sum()
}

fn direction_gradient(
    centers: &[Vector3<f64>],
    measured: &[(usize, usize, Vector3<f64>, f64)],
) -> Vec<Vector3<f64>> {
    let mut grad = vec![Vector3::zeros(); centers.len()];
    for &(i, j, d, w) in measured {
        let v = centers[j] - centers[i];
        let len = v.norm();
        let u = v / len;
        let g = u.dot(&d);
        let dv = (d - u * g) * (-2.0 * w * g / len);
        grad[j] += dv;
        grad[i] -= dv;
    }
    grad
}

/// Gradient descent on `sum w (1 - (unit(C_j - C_i) · d_ij)²)` over the
/// non-gauge centers, with a backtracking step so the objective never grows.
pub fn refine_positions(
    centers: &[Vector3<f64>],
    thetas: &[f64],
    pairs: &[PairEstimate],
    params: &RefineParams,
) -> Result<RefineOutcome, MultiviewError> {
    validate_pairs(pairs, thetas.len())?;
    if centers.len() != thetas.len() {
        return Err(MultiviewError::InvalidInput("centers and thetas differ in length".into()));
    }
    let measured: Vec<(usize, usize, Vector3<f64>, f64)> = pairs
        .iter()
        .filter_map(|p| world_direction(pairs, thetas, p.i, p.j).map(|(d, w)| (p.i, p.j, d, w)))
        .collect();
    let free = |k: usize| k != params.fixed.0 && k != params.fixed.1;

    let mut current = centers.to_vec();
    let mut f = direction_objective(&current, &measured);
    let mut step = params.initial_step;
    let mut steps = 0;
    while steps < params.max_steps {
        let mut grad = direction_gradient(&current, &measured);
        for (k, g) in grad.iter_mut().enumerate() {
            g.z = 0.0;
            if !free(k) {
                *g = Vector3::zeros();
            }
        }
        let gnorm = grad.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt();
        if gnorm < params.gradient_tol {
            break;
        }
        steps += 1;
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<_> = current.iter().zip(&grad).map(|(c, g)| c - g * step).collect();
            let f_trial = direction_objective(&trial, &measured);
            if f_trial <= f && f_trial.is_finite() {
                current = trial;
                f = f_trial;
                step *= 2.0;
                accepted = true;
                break;
            }
            step /= 2.0;
        }
        if !accepted {
            break;
        }
    }
    Ok(RefineOutcome {
        centers: current,
        objective: f,
        steps,
    })
}

/// Rotations, then positions, then refinement.
pub fn register_planar(
    pairs: &[PairEstimate],
    n_cameras: usize,
    refine: &RefineParams,
) -> Result<PlanarRig, MultiviewError> {
    let rotations = match estimate_rotations(pairs, n_cameras) {
        Ok(r) => r.thetas,
        Err(MultiviewError::NonConvergence { thetas, .. }) => thetas,
        Err(e) => return Err(e),
    };
    let centers = estimate_positions(&rotations, pairs)?;
    let refined = refine_positions(&centers, &rotations, pairs, refine)?;
    Ok(PlanarRig {
        thetas: rotations,
        centers: refined.centers,
    })
}

/// Joint least squares over the point and the ray ranges:
/// `min sum |o_i + r_i d_i - P|²`. The optimal `P` is the mean of the
/// per-ray points, so this is the same as minimizing their spread.
pub fn triangulate_rays(
    rays: &[(usize, Vector3<f64>, Vector3<f64>)],
) -> Result<MultiviewPoint, MultiviewError> {
    if rays.len() < 2 {
        return Err(MultiviewError::DegenerateTrack);
    }
    let dirs: Vec<Vector3<f64>> = rays.iter().map(|r| r.2.normalize()).collect();
    let spread = dirs
        .iter()
        .enumerate()
        .flat_map(|(x, a)| dirs[x + 1..].iter().map(move |b| a.cross(b).norm()))
        .fold(0.0, f64::max);
    if spread < 1e-9 {
        return Err(MultiviewError::DegenerateTrack);
    }
    let mut m = Matrix3::zeros();
    let mut rhs = Vector3::zeros();
    for ((_, o, _), d) in rays.iter().zip(&dirs) {
        let proj = Matrix3::identity() - d * d.transpose();
        m += proj;
        rhs += proj * o;
    }
    let point = m
        .cholesky()
        .map(|c| c.solve(&rhs))
        .ok_or(MultiviewError::DegenerateTrack)?;
    let mut sq = 0.0;
    let ranges = rays
        .iter()
        .zip(&dirs)
        .map(|((cam, o, _), d)| {
            let r = d.dot(&(point - o));
            sq += (o + d * r - point).norm_squared();
            (*cam, r)
        })
        .collect();
    Ok(MultiviewPoint {
        point,
        ranges,
        rms_residual: (sq / rays.len() as f64).sqrt(),
    })
}

/// Triangulates a pixel track given every camera's pose and image size.
pub fn triangulate_multiview(
    track: &Track,
    poses: &[CameraPose],
    sizes: &[ImageSize],
) -> Result<MultiviewPoint, MultiviewError> {
    let rays = track
        .observations
        .iter()
        .map(|(&cam, &px)| {
            let (pose, size) = poses.get(cam).zip(sizes.get(cam)).ok_or_else(|| {
                MultiviewError::InvalidInput(format!("track {} references camera {cam}", track.id))
            })?;
            let b = pixel_to_bearing(px, *size);
            Ok((cam, pose.center, pose.ray_direction(&b)))
        })
        .collect::<Result<Vec<_>, MultiviewError>>()?;
    triangulate_rays(&rays)
}

/// Pair estimate built from exact poses. Handy for tests and fixtures.
pub fn exact_pair_estimate(poses: &[CameraPose], i: usize, j: usize) -> Option<PairEstimate> {
    let d = poses[j].center - poses[i].center;
    Some(PairEstimate {
        i,
        j,
        e_ij: Bearing::new(poses[i].rotation * d)?,
        e_ji: Bearing::new(poses[j].rotation * -d)?,
        weight: 1.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::{aligned_rmse, umeyama};
    use crate::epipolar::triangulate_two_view;
    use approx::assert_abs_diff_eq;

    fn rig(thetas: &[f64], centers: &[(f64, f64)]) -> Vec<CameraPose> {
        thetas
            .iter()
            .zip(centers)
            .map(|(&t, &(x, y))| CameraPose {
                rotation: yaw_matrix(t),
                center: Vector3::new(x, y, 0.0),
            })
            .collect()
    }

    fn all_pairs(poses: &[CameraPose]) -> Vec<PairEstimate> {
        let n = poses.len();
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| exact_pair_estimate(poses, i, j).unwrap())
            .collect()
    }

    fn random_rig(seed: u64, n: usize) -> Vec<CameraPose> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let thetas: Vec<f64> = (0..n).map(|_| rng.random_range(-PI..PI)).collect();
        let centers: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
            .collect();
        rig(&thetas, &centers)
    }

    #[test]
    fn two_cameras_recover_yaw() {
        let poses = rig(&[0.0, PI / 6.0], &[(0.0, 0.0), (1.0, 0.5)]);
        let est = estimate_rotations(&all_pairs(&poses), 2).unwrap();
        assert_eq!(est.thetas[0], 0.0);
        assert_abs_diff_eq!(est.thetas[1], PI / 6.0, epsilon = 1e-8);
    }

    #[test]
    fn aligned_cameras_have_zero_angles() {
        let poses = rig(&[0.0; 4], &[(0.0, 0.0), (1.0, 0.0), (0.4, 1.0), (-1.0, 0.7)]);
        let est = estimate_rotations(&all_pairs(&poses), 4).unwrap();
        for t in &est.thetas {
            assert_abs_diff_eq!(*t, 0.0, epsilon = 1e-9);
        }
        assert!(est.objective < 1e-20);
    }

    #[test]
    fn six_cameras_exact() {
        for seed in 0..5 {
            let poses = random_rig(seed, 6);
            let pairs = all_pairs(&poses);
            let est = estimate_rotations(&pairs, 6).unwrap();
            assert!(est.objective < 1e-12);
            let truth: Vec<f64> = {
                let t0 = poses[0].rotation[(1, 0)].atan2(poses[0].rotation[(0, 0)]);
                poses
                    .iter()
                    .map(|p| wrap_angle(p.rotation[(1, 0)].atan2(p.rotation[(0, 0)]) - t0))
                    .collect()
            };
            for (a, b) in est.thetas.iter().zip(&truth) {
                assert!(wrap_angle(a - b).abs() < 1e-6, "seed {seed}: {a} vs {b}");
            }
            let terms: Vec<PairTerm> = pairs.iter().map(PairTerm::new).collect();
            assert!(est.objective <= rotation_objective(&terms, &truth) + 1e-12);
        }
    }

    #[test]
    fn disconnected_graph_is_rejected() {
        let poses = random_rig(1, 4);
        let pairs = vec![
            exact_pair_estimate(&poses, 0, 1).unwrap(),
            exact_pair_estimate(&poses, 2, 3).unwrap(),
        ];
        assert_eq!(
            estimate_rotations(&pairs, 4),
            Err(MultiviewError::DisconnectedGraph)
        );
    }

    #[test]
    fn positions_of_third_camera() {
        let poses = rig(&[0.0, 0.4, -1.0], &[(0.0, 0.0), (1.0, 0.0), (0.5, 0.8)]);
        let pairs = all_pairs(&poses);
        let thetas = estimate_rotations(&pairs, 3).unwrap().thetas;
        let centers = estimate_positions(&thetas, &pairs).unwrap();
        assert_abs_diff_eq!(centers[2], Vector3::new(0.5, 0.8, 0.0), epsilon = 1e-9);
    }

    #[test]
    fn two_cameras_fixed_by_gauge() {
        let poses = rig(&[0.0, 0.3], &[(0.0, 0.0), (0.0, 3.0)]);
        let pairs = all_pairs(&poses);
        let centers = estimate_positions(&[0.0, 0.3], &pairs).unwrap();
        assert_eq!(centers[0], Vector3::zeros());
        assert_abs_diff_eq!(centers[1], Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn camera_on_baseline_is_collinear() {
        let poses = rig(&[0.0, 0.0, 0.0], &[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]);
        let pairs = all_pairs(&poses);
        assert_eq!(
            estimate_positions(&[0.0, 0.0, 0.0], &pairs),
            Err(MultiviewError::CollinearCamera(2))
        );
    }

    #[test]
    fn cameras_missing_gauge_pairs_are_placed_from_neighbours() {
        let poses = random_rig(7, 5);
        let thetas: Vec<f64> = {
            let t0 = poses[0].rotation[(1, 0)].atan2(poses[0].rotation[(0, 0)]);
            poses
                .iter()
                .map(|p| p.rotation[(1, 0)].atan2(p.rotation[(0, 0)]) - t0)
                .collect()
        };
        // camera 4 only sees cameras 2 and 3
        let pairs: Vec<_> = all_pairs(&poses)
            .into_iter()
            .filter(|p| !(p.j == 4 && p.i < 2))
            .collect();
        // rotate the world so camera 0 has zero yaw
        let r0 = poses[0].rotation;
        let c0 = poses[0].center;
        let truth: Vec<_> = poses.iter().map(|p| r0 * (p.center - c0)).collect();
        let centers = estimate_positions(&thetas, &pairs).unwrap();
        let sim = umeyama(&centers, &truth).unwrap();
        assert!(aligned_rmse(&sim, &centers, &truth) < 1e-9);
    }

    #[test]
    fn pair_with_one_flipped_epipole_keeps_its_direction() {
        let poses = random_rig(4, 5);
        let mut pairs = all_pairs(&poses);
        let thetas = estimate_rotations(&pairs, 5).unwrap().thetas;
        let k = pairs.iter().position(|p| p.i == 1 && p.j == 3).unwrap();
        let (clean, _) = world_direction(&pairs, &thetas, 1, 3).unwrap();
        pairs[k].e_ji = -pairs[k].e_ji;
        let (flipped, _) = world_direction(&pairs, &thetas, 1, 3).unwrap();
        assert_abs_diff_eq!(flipped, clean, epsilon = 1e-12);
    }

    #[test]
    fn refine_keeps_exact_solution() {
        let poses = random_rig(3, 5);
        let pairs = all_pairs(&poses);
        let thetas = estimate_rotations(&pairs, 5).unwrap().thetas;
        let centers = estimate_positions(&thetas, &pairs).unwrap();
        let out = refine_positions(&centers, &thetas, &pairs, &RefineParams::default()).unwrap();
        for (a, b) in out.centers.iter().zip(&centers) {
            assert!((a - b).norm() < 1e-10);
        }
        assert!(out.objective < 1e-20);
    }

    #[test]
    fn refine_recovers_perturbed_camera() {
        let poses = rig(&[0.0, 0.4, -1.0, 2.0], &[(0.0, 0.0), (1.0, 0.0), (0.5, 0.8), (-0.4, 1.1)]);
        let pairs = all_pairs(&poses);
        let thetas = estimate_rotations(&pairs, 4).unwrap().thetas;
        let mut centers = estimate_positions(&thetas, &pairs).unwrap();
        let truth = centers.clone();
        centers[2] += Vector3::new(0.05, 0.0, 0.0);
        let before = direction_objective_for(&centers, &thetas, &pairs);
        let out = refine_positions(&centers, &thetas, &pairs, &RefineParams::default()).unwrap();
        assert!(out.objective <= before);
        for (a, b) in out.centers.iter().zip(&truth) {
            assert!((a - b).norm() < 1e-6, "{a} vs {b}");
        }
    }

    fn direction_objective_for(c: &[Vector3<f64>], thetas: &[f64], pairs: &[PairEstimate]) -> f64 {
        let measured: Vec<_> = pairs
            .iter()
            .filter_map(|p| world_direction(pairs, thetas, p.i, p.j).map(|(d, w)| (p.i, p.j, d, w)))
            .collect();
        direction_objective(c, &measured)
    }

    #[test]
    fn baseline_choice_is_consistent() {
        let poses = random_rig(11, 6);
        let pairs = all_pairs(&poses);
        let thetas = estimate_rotations(&pairs, 6).unwrap().thetas;
        let a = estimate_positions_with_baseline(&thetas, &pairs, (0, 1)).unwrap();
        let b = estimate_positions_with_baseline(&thetas, &pairs, (0, 2)).unwrap();
        let sim = umeyama(&b, &a).unwrap();
        assert!(aligned_rmse(&sim, &b, &a) < 1e-6);
    }

    #[test]
    fn multiview_triangulation() {
        let poses = rig(&[0.0, 1.0, -2.0], &[(0.0, 0.0), (1.0, 0.0), (0.2, 1.5)]);
        let p = Vector3::new(1.0, 2.0, 0.5);
        let rays: Vec<_> = poses
            .iter()
            .enumerate()
            .map(|(k, pose)| {
                let b = pose.project(&p).unwrap();
                (k, pose.center, pose.ray_direction(&b))
            })
            .collect();
        let out = triangulate_rays(&rays).unwrap();
        assert_abs_diff_eq!(out.point, p, epsilon = 1e-12);
        assert!(out.rms_residual < 1e-12);
        assert!(out.in_front());
        for (k, r) in &out.ranges {
            assert_abs_diff_eq!(*r, (p - poses[*k].center).norm(), epsilon = 1e-12);
        }
    }

    #[test]
    fn two_rays_match_two_view_midpoint() {
        let r = yaw(0.7);
        let e1 = Bearing::from_xyz(0.6, 0.8, 0.0).unwrap();
        let z1 = Bearing::from_xyz(0.1, 0.9, 0.3).unwrap();
        let z2 = Bearing::from_xyz(-0.4, 0.5, 0.2).unwrap();
        let two = triangulate_two_view(&z1, &z2, &r, &e1).unwrap();
        let rays = [
            (0, Vector3::zeros(), *z1.vector()),
            (1, *e1.vector(), r.transpose() * z2.vector()),
        ];
        let multi = triangulate_rays(&rays).unwrap();
        assert!((multi.point - two.point).norm() < 1e-9);
        assert_abs_diff_eq!(multi.ranges[0].1, two.a, epsilon = 1e-9);
        assert_abs_diff_eq!(multi.ranges[1].1, two.b, epsilon = 1e-9);
    }

    fn yaw(t: f64) -> Matrix3<f64> {
        yaw_matrix(t)
    }

    #[test]
    fn degenerate_tracks() {
        let one = [(0, Vector3::zeros(), Vector3::x())];
        assert_eq!(triangulate_rays(&one), Err(MultiviewError::DegenerateTrack));
        let parallel = [
            (0, Vector3::zeros(), Vector3::x()),
            (1, Vector3::y(), Vector3::x() * 2.0),
        ];
        assert_eq!(triangulate_rays(&parallel), Err(MultiviewError::DegenerateTrack));
        let mut track = Track::default();
        track.observations.insert(0, PixelCoord::new(10.0, 10.0));
        let size = ImageSize::new(64, 32).unwrap();
        assert_eq!(
            triangulate_multiview(&track, &[CameraPose::identity()], &[size]),
            Err(MultiviewError::DegenerateTrack)
        );
    }

    #[test]
    fn negative_ranges_are_flagged() {
        // rays that meet behind the second camera
        let rays = [
            (0, Vector3::zeros(), Vector3::new(1.0, 1.0, 0.0)),
            (1, Vector3::new(2.0, 0.0, 0.0), Vector3::new(1.0, -1.0, 0.0)),
        ];
        let out = triangulate_rays(&rays).unwrap();
        assert!(!out.in_front());
    }

    #[test]
    fn wrap_angle_range() {
        assert_abs_diff_eq!(wrap_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(-PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(0.5 - TAU), 0.5, epsilon = 1e-12);
    }
}
