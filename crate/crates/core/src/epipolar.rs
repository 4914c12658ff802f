//! Two-view epipolar geometry on the unit sphere.
//!
//! Camera 1 defines the world frame. Camera 2 sits at `T` with rotation `R`,
//! so a scene point `P` is seen as `z1 = P/|P|` and `z2 = R(P - T)/|P - T|`.
//! Coplanarity of the two rays with the baseline gives `z1ᵀ F z2 = 0` with
//! `F = [T]x Rᵀ`. The scale of `T` is unobservable; it is fixed to one, which
//! makes the camera-1 epipole `e1` equal to `T` itself.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::sphere_cam::{bearing_to_pixel, Bearing, ImageSize, PixelCoord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EpipolarError {
    #[error("need at least {needed} correspondences, got {got}")]
    InsufficientPairs { needed: usize, got: usize },
    #[error("correspondences do not determine a unique fundamental matrix")]
    DegenerateConfiguration,
    #[error("no consensus: best model has {best} inliers, {required} required")]
    NoConsensus { best: usize, required: usize },
    #[error("fundamental matrix has rank below two")]
    RankDeficient,
    #[error("epipole signs cannot be resolved from the sample points")]
    AmbiguousCheirality,
    #[error("viewing rays are parallel")]
    ParallelRays,
    #[error("bearing is the epipole; every point satisfies the constraint")]
    DegenerateCurve,
    #[error("invalid parameter: {0}")]
    InvalidParams(&'static str),
}

impl EpipolarError {
    pub fn category(&self) -> &'static str {
        match self {
            Self::InsufficientPairs { .. } => "InsufficientPairs",
            Self::DegenerateConfiguration => "DegenerateConfiguration",
            Self::NoConsensus { .. } => "NoConsensus",
            Self::RankDeficient => "RankDeficient",
            Self::AmbiguousCheirality => "AmbiguousCheirality",
            Self::ParallelRays => "ParallelRays",
            Self::DegenerateCurve => "DegenerateCurve",
            Self::InvalidParams(_) => "InvalidParams",
        }
    }
}

/// Corresponding bearings, each in its own camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BearingPair {
    pub z1: Bearing,
    pub z2: Bearing,
}

impl BearingPair {
    pub fn new(z1: Bearing, z2: Bearing) -> Self {
        Self { z1, z2 }
    }

    pub fn swapped(&self) -> Self {
        Self::new(self.z2, self.z1)
    }
}

/// A fundamental matrix with unit Frobenius norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FundamentalMatrix(Matrix3<f64>);

impl FundamentalMatrix {
    /// Projects `m` to rank two, normalizes it and fixes its sign so that the
    /// largest-magnitude entry is positive.
    pub fn from_matrix(m: &Matrix3<f64>) -> Result<Self, EpipolarError> {
        let svd = m.svd(true, true);
        let (u, v_t) = match (svd.u, svd.v_t) {
            (Some(u), Some(v_t)) => (u, v_t),
            _ => return Err(EpipolarError::RankDeficient),
        };
        let mut s = svd.singular_values;
        let smallest = s.imin();
        s[smallest] = 0.0;
        let projected = u * Matrix3::from_diagonal(&s) * v_t;
        let norm = projected.norm();
        if !(norm > 1e-300) {
            return Err(EpipolarError::RankDeficient);
        }
        Ok(Self(canonical_sign(projected / norm)))
    }

    /// Wraps `m` without normalization or rank projection.
    pub fn from_raw(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// The matrix for the same camera pair with the roles of the views swapped.
    pub fn transposed(&self) -> Self {
        Self(self.0.transpose())
    }

    /// Ground-truth `F = [T]x Rᵀ`, normalized.
    pub fn from_pose(rotation: &Matrix3<f64>, baseline: &Vector3<f64>) -> Result<Self, EpipolarError> {
        Self::from_matrix(&(baseline.cross_matrix() * rotation.transpose()))
    }
}

fn canonical_sign(m: Matrix3<f64>) -> Matrix3<f64> {
    let max = m.amax();
    // near-ties resolve to the first entry in row-major order
    let pivot = (0..3)
        .flat_map(|r| (0..3).map(move |c| (r, c)))
        .map(|(r, c)| m[(r, c)])
        .find(|v| v.abs() >= max * (1.0 - 1e-9))
        .unwrap_or(0.0);
    if pivot < 0.0 {
        -m
    } else {
        m
    }
}

/// Epipoles as unit null vectors of `Fᵀ` (camera 1) and `F` (camera 2).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpipolePair {
    pub e1: Bearing,
    pub e2: Bearing,
    pub sign_resolved: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoViewSolution {
    pub f: FundamentalMatrix,
    /// Unit baseline direction in camera 1; also the camera-2 center.
    pub e1: Bearing,
    pub e2: Bearing,
    /// Maps camera-1 directions to camera-2 directions.
    pub rotation: Matrix3<f64>,
    pub inlier_mask: Vec<bool>,
}

impl TwoViewSolution {
    pub fn inlier_count(&self) -> usize {
        self.inlier_mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacParams {
    /// Inlier threshold on `|z1ᵀ F z2|` with `|F| = 1`.
    pub threshold: f64,
    pub max_iterations: usize,
    pub seed: u64,
    pub min_inliers: usize,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            threshold: 0.01,
            max_iterations: 2000,
            seed: 0,
            min_inliers: 12,
        }
    }
}

impl RansacParams {
    fn validate(&self) -> Result<(), EpipolarError> {
        if !(self.threshold > 0.0) {
            return Err(EpipolarError::InvalidParams("threshold must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(EpipolarError::InvalidParams("max_iterations must be at least 1"));
        }
        Ok(())
    }
}

/// Algebraic epipolar error `|z1ᵀ F z2|`.
pub fn epipolar_residual(pair: &BearingPair, f: &FundamentalMatrix) -> f64 {
    pair.z1.vector().dot(&(f.0 * pair.z2.vector())).abs()
}

/// Linear eight-point estimate from `n >= 8` bearing pairs.
///
/// Each pair contributes the row `kron(z1, z2)` to `A`, and `vec(F)` (row
/// major) is the right singular vector of the smallest singular value.
pub fn estimate_f_linear(pairs: &[BearingPair]) -> Result<FundamentalMatrix, EpipolarError> {
    if pairs.len() < 8 {
        return Err(EpipolarError::InsufficientPairs {
            needed: 8,
            got: pairs.len(),
        });
    }
    // pad to 9 rows so the full right singular basis is available
    let rows = pairs.len().max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, p) in pairs.iter().enumerate() {
        let (z1, z2) = (p.z1.vector(), p.z2.vector());
        for r in 0..3 {
            for c in 0..3 {
                a[(i, 3 * r + c)] = z1[r] * z2[c];
            }
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(EpipolarError::DegenerateConfiguration)?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
    let largest = sv[order[0]];
    let second_smallest = sv[order[7]];
    if !(largest > 0.0) || second_smallest < 1e-10 * largest {
        return Err(EpipolarError::DegenerateConfiguration);
    }
    let null = v_t.row(order[8]);
    let m = Matrix3::from_fn(|r, c| null[3 * r + c]);
    FundamentalMatrix::from_matrix(&m).map_err(|_| EpipolarError::DegenerateConfiguration)
}

/// RANSAC over eight-point samples. Sample `k` is drawn from a generator seeded
/// by `(seed, k)`, so results do not depend on evaluation order.
pub fn estimate_f_ransac(
    pairs: &[BearingPair],
    params: &RansacParams,
) -> Result<(FundamentalMatrix, Vec<bool>), EpipolarError> {
    params.validate()?;
    if pairs.len() < 8 {
        return Err(EpipolarError::InsufficientPairs {
            needed: 8,
            got: pairs.len(),
        });
    }
    let n = pairs.len();
    let count_inliers = |f: &FundamentalMatrix| {
        pairs
            .iter()
            .filter(|p| epipolar_residual(p, f) < params.threshold)
            .count()
    };

    let mut best: Option<(FundamentalMatrix, usize)> = None;
    let mut budget = params.max_iterations;
    let mut k = 0;
    while k < budget {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(k as u64);
        k += 1;
        let sample: Vec<BearingPair> = rand::seq::index::sample(&mut rng, n, 8)
            .into_iter()
            .map(|i| pairs[i])
            .collect();
        let Ok(f) = estimate_f_linear(&sample) else {
            continue;
        };
        let count = count_inliers(&f);
        if best.as_ref().is_none_or(|(_, c)| count > *c) {
            best = Some((f, count));
            budget = budget.min(adaptive_iterations(count, n).max(k));
        }
    }

    let (mut model, mut count) = best.ok_or(EpipolarError::NoConsensus {
        best: 0,
        required: params.min_inliers,
    })?;
    let inliers: Vec<BearingPair> = pairs
        .iter()
        .filter(|p| epipolar_residual(p, &model) < params.threshold)
        .copied()
        .collect();
    if let Ok(refit) = estimate_f_linear(&inliers) {
        let refit_count = count_inliers(&refit);
        if refit_count >= count {
            model = refit;
            count = refit_count;
        }
    }
    if count < params.min_inliers {
        return Err(EpipolarError::NoConsensus {
            best: count,
            required: params.min_inliers,
        });
    }
    let mask = pairs
        .iter()
        .map(|p| epipolar_residual(p, &model) < params.threshold)
        .collect();
    Ok((model, mask))
}

/// Iterations needed to draw one all-inlier sample with 99.9% confidence.
fn adaptive_iterations(inliers: usize, total: usize) -> usize {
    let w = inliers as f64 / total as f64;
    let p_good = w.powi(8);
    if p_good >= 1.0 {
        return 1;
    }
    if p_good <= 0.0 {
        return usize::MAX;
    }
    let iters = (1.0f64 - 0.999).ln() / (1.0 - p_good).ln();
    if iters.is_finite() {
        iters.ceil() as usize
    } else {
        usize::MAX
    }
}

pub fn epipoles_from_f(f: &FundamentalMatrix) -> Result<EpipolePair, EpipolarError> {
    let svd = f.0.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(EpipolarError::RankDeficient),
    };
    let s = svd.singular_values;
    if s.iter().filter(|&&x| x < 1e-10).count() >= 2 {
        return Err(EpipolarError::RankDeficient);
    }
    let k = s.imin();
    let e1 = Bearing::new(u.column(k).into_owned()).ok_or(EpipolarError::RankDeficient)?;
    let e2 = Bearing::new(v_t.row(k).transpose()).ok_or(EpipolarError::RankDeficient)?;
    Ok(EpipolePair {
        e1,
        e2,
        sign_resolved: false,
    })
}

/// Minimal rotation taking `-e1` onto `e2`, so that `-R e1 = e2`.
///
/// With `v = (-e1) x e2`, `s = |v|`, `c = -e1·e2` this is
/// `I + [v]x + [v]x² (1 - c)/s²`, evaluated in axis-angle form.
pub fn rotation_from_epipoles(e1: &Bearing, e2: &Bearing) -> Matrix3<f64> {
    let a = -*e1.vector();
    let b = *e2.vector();
    let v = a.cross(&b);
    let s = v.norm();
    let c = a.dot(&b);
    if s < 1e-9 {
        if c > 0.0 {
            return Matrix3::identity();
        }
        let axis = e1.vector().cross(&least_aligned_axis(e1.vector())).normalize();
        return 2.0 * axis * axis.transpose() - Matrix3::identity();
    }
    let k = (v / s).cross_matrix();
    let angle = s.atan2(c);
    Matrix3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos())
}

fn least_aligned_axis(v: &Vector3<f64>) -> Vector3<f64> {
    let i = v.iamin();
    let mut axis = Vector3::zeros();
    axis[i] = 1.0;
    axis
}

/// Closest approach between the lines `o1 + t1 d1` and `o2 + t2 d2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosestApproach {
    pub t1: f64,
    pub t2: f64,
    /// Midpoint of the shortest connecting segment.
    pub midpoint: Vector3<f64>,
    /// Length of the shortest connecting segment.
    pub gap: f64,
}

pub fn closest_approach(
    o1: &Vector3<f64>,
    d1: &Vector3<f64>,
    o2: &Vector3<f64>,
    d2: &Vector3<f64>,
) -> Result<ClosestApproach, EpipolarError> {
    let (n1, n2) = (d1.norm(), d2.norm());
    if d1.cross(d2).norm() <= 1e-9 * n1 * n2 {
        return Err(EpipolarError::ParallelRays);
    }
    // normal equations of min |t1 d1 - t2 d2 - (o2 - o1)|
    let rhs = o2 - o1;
    let a11 = d1.dot(d1);
    let a22 = d2.dot(d2);
    let a12 = -d1.dot(d2);
    let b1 = d1.dot(&rhs);
    let b2 = -d2.dot(&rhs);
    let det = a11 * a22 - a12 * a12;
    let t1 = (a22 * b1 - a12 * b2) / det;
    let t2 = (a11 * b2 - a12 * b1) / det;
    let p1 = o1 + d1 * t1;
    let p2 = o2 + d2 * t2;
    Ok(ClosestApproach {
        t1,
        t2,
        midpoint: (p1 + p2) / 2.0,
        gap: (p1 - p2).norm(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoViewPoint {
    pub point: Vector3<f64>,
    /// Range along `z1`.
    pub a: f64,
    /// Range along the camera-2 ray.
    pub b: f64,
    pub gap: f64,
}

/// Midpoint triangulation of `a z1` and `e1 + b Rᵀ z2` in the camera-1 frame.
pub fn triangulate_two_view(
    z1: &Bearing,
    z2: &Bearing,
    rotation: &Matrix3<f64>,
    e1: &Bearing,
) -> Result<TwoViewPoint, EpipolarError> {
    let ray2 = rotation.transpose() * z2.vector();
    let ca = closest_approach(&Vector3::zeros(), z1.vector(), e1.vector(), &ray2)?;
    Ok(TwoViewPoint {
        point: ca.midpoint,
        a: ca.t1,
        b: ca.t2,
        gap: ca.gap,
    })
}

/// The epipole sign choice picked by cheirality voting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignResolution {
    pub e1: Bearing,
    pub e2: Bearing,
    pub rotation: Matrix3<f64>,
    /// Samples triangulated in front of both cameras.
    pub in_front: usize,
    pub mean_gap: f64,
}

/// Chooses among `(±e1, ±e2)` the combination that puts the most sample points
/// in front of both cameras, breaking ties by the smaller mean gap.
pub fn resolve_signs(
    e1: &Bearing,
    e2: &Bearing,
    samples: &[BearingPair],
) -> Result<SignResolution, EpipolarError> {
    if samples.is_empty() {
        return Err(EpipolarError::InsufficientPairs { needed: 1, got: 0 });
    }
    let mut candidates: Vec<SignResolution> = [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)]
        .iter()
        .map(|&(s1, s2)| {
            let c1 = Bearing::new(e1.vector() * s1).unwrap();
            let c2 = Bearing::new(e2.vector() * s2).unwrap();
            let rotation = rotation_from_epipoles(&c1, &c2);
            let mut in_front = 0;
            let mut gap_sum = 0.0;
            let mut solved = 0;
            for s in samples {
                if let Ok(t) = triangulate_two_view(&s.z1, &s.z2, &rotation, &c1) {
                    solved += 1;
                    gap_sum += t.gap;
                    if t.a > 0.0 && t.b > 0.0 {
                        in_front += 1;
                    }
                }
            }
            let mean_gap = if solved > 0 {
                gap_sum / solved as f64
            } else {
                f64::INFINITY
            };
            SignResolution {
                e1: c1,
                e2: c2,
                rotation,
                in_front,
                mean_gap,
            }
        })
        .collect();
    candidates.sort_by(|a, b| {
        b.in_front
            .cmp(&a.in_front)
            .then(a.mean_gap.total_cmp(&b.mean_gap))
    });
    let (best, runner_up) = (&candidates[0], &candidates[1]);
    let same_gap = best.mean_gap == runner_up.mean_gap
        || (best.mean_gap - runner_up.mean_gap).abs() <= 1e-12 * best.mean_gap.abs();
    if best.in_front == runner_up.in_front && same_gap {
        return Err(EpipolarError::AmbiguousCheirality);
    }
    Ok(*best)
}

/// Keeps the pairs whose residual under `f` is below `epsilon`, in input order.
pub fn filter_matches_by_f(
    pairs: &[BearingPair],
    f: &FundamentalMatrix,
    epsilon: f64,
) -> Vec<BearingPair> {
    pairs
        .iter()
        .filter(|p| epipolar_residual(p, f) < epsilon)
        .copied()
        .collect()
}

/// The epipolar great circle in image 2 for bearing `z1`, sampled at
/// `n_samples` evenly spaced points and split at the horizontal seam.
pub fn epipolar_curve(
    f: &FundamentalMatrix,
    z1: &Bearing,
    size: ImageSize,
    n_samples: usize,
) -> Result<Vec<Vec<PixelCoord>>, EpipolarError> {
    if n_samples < 2 {
        return Err(EpipolarError::InvalidParams("n_samples must be at least 2"));
    }
    let normal = f.0.transpose() * z1.vector();
    if normal.norm() < 1e-12 {
        return Err(EpipolarError::DegenerateCurve);
    }
    let normal = normal.normalize();
    let u = normal.cross(&least_aligned_axis(&normal)).normalize();
    let v = normal.cross(&u);
    let points: Vec<PixelCoord> = (0..n_samples)
        .map(|k| {
            let t = TAU * k as f64 / n_samples as f64;
            let b = Bearing::new(u * t.cos() + v * t.sin()).unwrap();
            bearing_to_pixel(&b, size)
        })
        .collect();

    let half = size.width() as f64 / 2.0;
    let mut segments: Vec<Vec<PixelCoord>> = vec![vec![points[0]]];
    for w in points.windows(2) {
        if (w[1].x - w[0].x).abs() > half {
            segments.push(Vec::new());
        }
        segments.last_mut().unwrap().push(w[1]);
    }
    // the circle closes: join the tail onto the head unless the closure crosses the seam
    let (first, last) = (points[0], points[n_samples - 1]);
    if segments.len() > 1 && (first.x - last.x).abs() <= half {
        let mut tail = segments.pop().unwrap();
        tail.extend(segments.remove(0));
        segments.insert(0, tail);
    }
    Ok(segments)
}

/// Which correspondences drive the fundamental-matrix fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FitMethod {
    /// Eight-point fit on every pair; all pairs count as inliers.
    Linear,
    Ransac(RansacParams),
}

/// Fits `F`, extracts epipoles, resolves their signs on the inliers and
/// recovers the relative rotation.
pub fn solve_two_view(
    pairs: &[BearingPair],
    method: FitMethod,
) -> Result<TwoViewSolution, EpipolarError> {
    let (f, inlier_mask) = match method {
        FitMethod::Linear => (estimate_f_linear(pairs)?, vec![true; pairs.len()]),
        FitMethod::Ransac(params) => estimate_f_ransac(pairs, &params)?,
    };
    let epipoles = epipoles_from_f(&f)?;
    let inliers: Vec<BearingPair> = pairs
        .iter()
        .zip(&inlier_mask)
        .filter(|(_, &m)| m)
        .map(|(p, _)| *p)
        .collect();
    let signs = resolve_signs(&epipoles.e1, &epipoles.e2, &inliers)?;
    Ok(TwoViewSolution {
        f,
        e1: signs.e1,
        e2: signs.e2,
        rotation: signs.rotation,
        inlier_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere_cam::{pixel_to_bearing, project_point, rotation_error, CameraPose};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn yaw(theta: f64) -> Matrix3<f64> {
        let (s, c) = theta.sin_cos();
        Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
    }

    fn random_unit(rng: &mut impl Rng) -> Bearing {
        loop {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if v.norm() > 0.1 && v.norm() <= 1.0 {
                return Bearing::new(v).unwrap();
            }
        }
    }

    /// Scene points in camera-1 coordinates and their bearing pairs.
    fn scene(
        rng: &mut impl Rng,
        n: usize,
        rotation: &Matrix3<f64>,
        t: &Vector3<f64>,
    ) -> (Vec<Vector3<f64>>, Vec<BearingPair>) {
        let cam2 = CameraPose::new(*rotation, *t).unwrap();
        let mut pts = Vec::new();
        let mut pairs = Vec::new();
        while pts.len() < n {
            let p = random_unit(rng).vector() * rng.random_range(2.0..6.0);
            let z1 = project_point(&p, &CameraPose::identity()).unwrap();
            let z2 = project_point(&p, &cam2).unwrap();
            pts.push(p);
            pairs.push(BearingPair::new(z1, z2));
        }
        (pts, pairs)
    }

    #[test]
    fn residual_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = yaw(0.4);
        let t = Vector3::new(0.8, 0.6, 0.0);
        let f = FundamentalMatrix::from_pose(&r, &t).unwrap();
        let (_, pairs) = scene(&mut rng, 20, &r, &t);
        for p in &pairs {
            assert!(epipolar_residual(p, &f) < 1e-12);
        }
        // the epipole annihilates the cross product for any z2
        let e1 = Bearing::new(t).unwrap();
        for _ in 0..20 {
            let z2 = random_unit(&mut rng);
            assert!(epipolar_residual(&BearingPair::new(e1, z2), &f) < 1e-15);
        }
        // Cauchy-Schwarz bound for arbitrary normalized F
        for _ in 0..50 {
            let m = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let f = FundamentalMatrix::from_matrix(&m).unwrap();
            let pair = BearingPair::new(random_unit(&mut rng), random_unit(&mut rng));
            let res = epipolar_residual(&pair, &f);
            assert!((0.0..=1.0).contains(&res));
        }
    }

    #[test]
    fn linear_fit_recovers_pure_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = Vector3::new(1.0, 0.0, 0.0);
        let (_, pairs) = scene(&mut rng, 20, &Matrix3::identity(), &t);
        let f = estimate_f_linear(&pairs).unwrap();
        // [T]x for T = x-axis, sign-canonicalized and normalized
        let s = 1.0 / 2f64.sqrt();
        let expected = Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, s, 0.0, -s, 0.0);
        assert_abs_diff_eq!(*f.matrix(), expected, epsilon = 1e-10);
        for p in &pairs {
            assert!(epipolar_residual(p, &f) < 1e-10);
        }
    }

    #[test]
    fn linear_fit_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (_, pairs) = scene(&mut rng, 8, &yaw(0.2), &Vector3::new(0.0, 1.0, 0.0));
        assert_eq!(
            estimate_f_linear(&pairs[..7]),
            Err(EpipolarError::InsufficientPairs { needed: 8, got: 7 })
        );
        let copies = vec![pairs[0]; 8];
        assert_eq!(
            estimate_f_linear(&copies),
            Err(EpipolarError::DegenerateConfiguration)
        );
    }

    #[test]
    fn linear_fit_is_order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = yaw(-1.1);
        let t = Vector3::new(-0.3, 0.9, 0.0);
        let (_, mut pairs) = scene(&mut rng, 30, &r, &t);
        let a = estimate_f_linear(&pairs).unwrap();
        pairs.reverse();
        pairs.swap(3, 17);
        let b = estimate_f_linear(&pairs).unwrap();
        assert_abs_diff_eq!(*a.matrix(), *b.matrix(), epsilon = 1e-12);
        let truth = FundamentalMatrix::from_pose(&r, &t).unwrap();
        assert_abs_diff_eq!(*a.matrix(), *truth.matrix(), epsilon = 1e-8);
    }

    #[test]
    fn ransac_clean_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (_, pairs) = scene(&mut rng, 40, &yaw(0.7), &Vector3::new(0.5, -0.5, 0.1));
        let (f, mask) = estimate_f_ransac(&pairs, &RansacParams::default()).unwrap();
        assert!(mask.iter().all(|&m| m));
        let linear = estimate_f_linear(&pairs).unwrap();
        assert_abs_diff_eq!(*f.matrix(), *linear.matrix(), epsilon = 1e-9);
    }

    #[test]
    fn ransac_rejects_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (_, mut pairs) = scene(&mut rng, 30, &yaw(1.3), &Vector3::new(0.2, 1.0, 0.0));
        for _ in 0..12 {
            pairs.push(BearingPair::new(random_unit(&mut rng), random_unit(&mut rng)));
        }
        let params = RansacParams {
            seed: 42,
            ..Default::default()
        };
        let (_, mask) = estimate_f_ransac(&pairs, &params).unwrap();
        let true_kept = mask[..30].iter().filter(|&&m| m).count();
        let junk_kept = mask[30..].iter().filter(|&&m| m).count();
        assert!(true_kept >= 28, "{true_kept}");
        assert!(junk_kept <= 1, "{junk_kept}");

        // bit-reproducible
        let (f2, mask2) = estimate_f_ransac(&pairs, &params).unwrap();
        let (f3, mask3) = estimate_f_ransac(&pairs, &params).unwrap();
        assert_eq!(f2, f3);
        assert_eq!(mask2, mask3);
    }

    #[test]
    fn ransac_on_noise_finds_no_consensus() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pairs: Vec<_> = (0..16)
            .map(|_| BearingPair::new(random_unit(&mut rng), random_unit(&mut rng)))
            .collect();
        let err = estimate_f_ransac(&pairs, &RansacParams::default()).unwrap_err();
        assert!(matches!(err, EpipolarError::NoConsensus { .. }), "{err:?}");
    }

    #[test]
    fn epipoles_of_pure_translation() {
        let f = FundamentalMatrix::from_pose(&Matrix3::identity(), &Vector3::x()).unwrap();
        let ep = epipoles_from_f(&f).unwrap();
        assert_abs_diff_eq!(ep.e1.x().abs(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ep.e2.x().abs(), 1.0, epsilon = 1e-12);
        assert!(!ep.sign_resolved);
        assert!((f.matrix().transpose() * ep.e1.vector()).norm() < 1e-10);
        assert!((f.matrix() * ep.e2.vector()).norm() < 1e-10);

        let zero = FundamentalMatrix::from_raw(Matrix3::zeros());
        assert_eq!(epipoles_from_f(&zero), Err(EpipolarError::RankDeficient));
    }

    #[test]
    fn rotation_from_epipoles_examples() {
        let ex = Bearing::PLUS_X;
        assert_eq!(rotation_from_epipoles(&ex, &-ex), Matrix3::identity());

        let r = rotation_from_epipoles(&ex, &Bearing::PLUS_Y);
        let expected = Matrix3::new(0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_abs_diff_eq!(r, expected, epsilon = 1e-15);
        assert_abs_diff_eq!(-(r * ex.vector()), *Bearing::PLUS_Y.vector(), epsilon = 1e-15);

        // antiparallel branch
        let r = rotation_from_epipoles(&ex, &ex);
        assert_abs_diff_eq!(-(r * ex.vector()), *ex.vector(), epsilon = 1e-15);
        assert!(rotation_error(&r) < 1e-12);
    }

    #[test]
    fn triangulation_example() {
        let z1 = Bearing::from_xyz(0.5, 1.0, 0.0).unwrap();
        let z2 = Bearing::from_xyz(-0.5, 1.0, 0.0).unwrap();
        let t = triangulate_two_view(&z1, &z2, &Matrix3::identity(), &Bearing::PLUS_X).unwrap();
        assert_abs_diff_eq!(t.point, Vector3::new(0.5, 1.0, 0.0), epsilon = 1e-12);
        assert!(t.gap < 1e-12);
        assert_abs_diff_eq!(t.a, 1.25f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(t.b, 1.25f64.sqrt(), epsilon = 1e-12);

        let r = yaw(0.3);
        let w = Bearing::from_xyz(0.2, 0.4, 0.5).unwrap();
        let z2 = w.rotate(&r);
        assert_eq!(
            triangulate_two_view(&w, &z2, &r, &Bearing::PLUS_X),
            Err(EpipolarError::ParallelRays)
        );
    }

    #[test]
    fn triangulation_random_noiseless() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = yaw(2.0);
        let t = Vector3::new(-0.6, 0.8, 0.0);
        let (pts, pairs) = scene(&mut rng, 100, &r, &t);
        let e1 = Bearing::new(t).unwrap();
        for (p, pair) in pts.iter().zip(&pairs) {
            let tri = triangulate_two_view(&pair.z1, &pair.z2, &r, &e1).unwrap();
            assert!((tri.point - p).norm() / p.norm() < 1e-9);
            assert!(tri.gap < 1e-9);
        }
    }

    #[test]
    fn sign_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = yaw(-0.8);
        let t = Vector3::new(0.6, 0.8, 0.0);
        let (_, pairs) = scene(&mut rng, 25, &r, &t);
        let f = estimate_f_linear(&pairs).unwrap();
        let ep = epipoles_from_f(&f).unwrap();
        let res = resolve_signs(&ep.e1, &ep.e2, &pairs).unwrap();
        assert_abs_diff_eq!(*res.e1.vector(), t, epsilon = 1e-9);
        assert_abs_diff_eq!(*res.e2.vector(), -(r * t), epsilon = 1e-9);
        assert_eq!(res.in_front, 25);

        // the mirrored candidate puts every point behind the cameras
        let mirrored = resolve_signs(&-res.e1, &-res.e2, &pairs).unwrap();
        assert_eq!(mirrored.e1, res.e1);
        let flipped_rot = rotation_from_epipoles(&-res.e1, &-res.e2);
        let behind = pairs
            .iter()
            .filter(|p| {
                let tri = triangulate_two_view(&p.z1, &p.z2, &flipped_rot, &-res.e1).unwrap();
                tri.a > 0.0 && tri.b > 0.0
            })
            .count();
        assert_eq!(behind, 0);
    }

    #[test]
    fn sign_resolution_on_baseline_is_ambiguous() {
        let e1 = Bearing::PLUS_X;
        let e2 = -Bearing::PLUS_X;
        let sample = BearingPair::new(e1, e2);
        assert_eq!(
            resolve_signs(&e1, &e2, &[sample]),
            Err(EpipolarError::AmbiguousCheirality)
        );
    }

    #[test]
    fn filter_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let r = yaw(0.1);
        let t = Vector3::new(0.0, 1.0, 0.0);
        let f = FundamentalMatrix::from_pose(&r, &t).unwrap();
        let (_, pairs) = scene(&mut rng, 15, &r, &t);
        assert_eq!(filter_matches_by_f(&pairs, &f, 1e-6), pairs);
        assert!(filter_matches_by_f(&[], &f, 1e-6).is_empty());
        let exact = BearingPair::new(Bearing::new(t).unwrap(), random_unit(&mut rng));
        let mut mixed = pairs.clone();
        mixed.insert(0, exact);
        let zero_eps: Vec<_> = filter_matches_by_f(&mixed, &f, 0.0);
        assert!(zero_eps.is_empty());
        let kept = filter_matches_by_f(&mixed, &f, f64::MIN_POSITIVE);
        assert!(kept.iter().all(|p| epipolar_residual(p, &f) == 0.0));
    }

    #[test]
    fn curve_points_satisfy_constraint() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let size = ImageSize::new(2048, 1024).unwrap();
        let r = yaw(0.9);
        let t = Vector3::new(0.7, -0.7, 0.0).normalize();
        let f = FundamentalMatrix::from_pose(&r, &t).unwrap();
        let (_, pairs) = scene(&mut rng, 5, &r, &t);
        for pair in &pairs {
            let segs = epipolar_curve(&f, &pair.z1, size, 4096).unwrap();
            assert_eq!(segs.iter().map(Vec::len).sum::<usize>(), 4096);
            for q in segs.iter().flatten() {
                let z2 = pixel_to_bearing(*q, size);
                assert!(epipolar_residual(&BearingPair::new(pair.z1, z2), &f) < 1e-6);
            }
            for seg in &segs {
                for w in seg.windows(2) {
                    assert!((w[1].x - w[0].x).abs() < 1024.0);
                }
            }
            // true correspondence sits on the polyline
            let truth = bearing_to_pixel(&pair.z2, size);
            let d = segs
                .iter()
                .flat_map(|s| s.windows(2))
                .map(|w| point_segment_distance(truth, w[0], w[1]))
                .fold(f64::INFINITY, f64::min);
            assert!(d < 0.5, "{d}");
        }
        let e1 = Bearing::new(t).unwrap();
        assert_eq!(
            epipolar_curve(&f, &e1, size, 100),
            Err(EpipolarError::DegenerateCurve)
        );
    }

    fn point_segment_distance(p: PixelCoord, a: PixelCoord, b: PixelCoord) -> f64 {
        let (abx, aby) = (b.x - a.x, b.y - a.y);
        let len2 = abx * abx + aby * aby;
        let t = if len2 > 0.0 {
            (((p.x - a.x) * abx + (p.y - a.y) * aby) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (p.x - a.x - t * abx).hypot(p.y - a.y - t * aby)
    }

    #[test]
    fn solve_two_view_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let r = yaw(0.5);
        let t = Vector3::new(0.3, 0.9, 0.0).normalize();
        let (_, pairs) = scene(&mut rng, 30, &r, &t);
        let sol = solve_two_view(&pairs, FitMethod::Linear).unwrap();
        let f = sol.f.matrix();
        assert!((f.transpose() * sol.e1.vector()).norm() < 1e-9);
        assert!((f * sol.e2.vector()).norm() < 1e-9);
        assert!((-(sol.rotation * sol.e1.vector()) - sol.e2.vector()).norm() < 1e-9);
        assert_abs_diff_eq!(sol.rotation, r, epsilon = 1e-8);
        assert_eq!(sol.inlier_count(), 30);
    }

    fn unit() -> impl Strategy<Value = Bearing> {
        (0.0f64..TAU, -1.0f64..1.0).prop_map(|(theta, z)| {
            let r = (1.0 - z * z).sqrt();
            Bearing::from_xyz(r * theta.cos(), r * theta.sin(), z).unwrap()
        })
    }

    proptest! {
        #[test]
        fn rotation_from_epipoles_is_proper(e1 in unit(), e2 in unit()) {
            let r = rotation_from_epipoles(&e1, &e2);
            prop_assert!(rotation_error(&r) < 1e-9);
            prop_assert!((-(r * e1.vector()) - e2.vector()).norm() < 1e-9);
        }

        #[test]
        fn rotation_degenerate_branches_are_proper(e in unit()) {
            for other in [e, -e] {
                let r = rotation_from_epipoles(&e, &other);
                prop_assert!(rotation_error(&r) < 1e-9);
                prop_assert!((-(r * e.vector()) - other.vector()).norm() < 1e-9);
            }
        }

        #[test]
        fn midpoint_is_equidistant(z1 in unit(), z2 in unit(), e in unit(), angle in 0.0f64..TAU) {
            let r = yaw(angle);
            if let Ok(t) = triangulate_two_view(&z1, &z2, &r, &e) {
                let ray2 = r.transpose() * z2.vector();
                let d1 = line_distance(&t.point, &Vector3::zeros(), z1.vector());
                let d2 = line_distance(&t.point, e.vector(), &ray2);
                let scale = 1.0 + t.point.norm();
                prop_assert!((d1 - t.gap / 2.0).abs() < 1e-12 * scale * scale.max(t.a.abs() + t.b.abs()));
                prop_assert!((d2 - t.gap / 2.0).abs() < 1e-12 * scale * scale.max(t.a.abs() + t.b.abs()));
            }
        }
    }

    fn line_distance(p: &Vector3<f64>, o: &Vector3<f64>, d: &Vector3<f64>) -> f64 {
        let d = d.normalize();
        let v = p - o;
        (v - d * v.dot(&d)).norm()
    }
}
