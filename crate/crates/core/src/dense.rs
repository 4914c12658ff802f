//! Spherical rectification, scanline disparity and law-of-sines depth.
//!
//! Both view spheres are rotated so the baseline becomes the +Z axis. A
//! direction is then described by its latitude from the baseline `x` in
//! `[0, pi]` and its longitude about the baseline `psi` in `[0, 2pi)`.
//! Epipolar planes contain the baseline, so every epipolar curve becomes a
//! line of constant `psi`.
//!
//! Rectified rasters are stored transposed so those lines are rows: for a
//! rectified size `W x H` (2:1) the raster has `H` columns indexed by `x`
//! (`x = pi * col / H`) and `W` rows indexed by `psi` (`psi = 2pi * row / W`),
//! using continuous coordinates with pixel centers at `+0.5`.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::epipolar::TwoViewSolution;
use crate::raster::Raster;
use crate::sphere_cam::{
    angles_to_bearing, to_rgb8, Bearing, EquirectImage, ImageSize, Rgb, SphericalAngles,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DenseError {
    #[error("disparity {d} at latitude {x1} does not give a finite range")]
    DegenerateDisparity { x1: f64, d: f64 },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

impl DenseError {
    pub fn category(&self) -> &'static str {
        match self {
            Self::DegenerateDisparity { .. } => "DegenerateDisparity",
            Self::InvalidParams(_) => "InvalidParams",
            Self::DimensionMismatch(_) => "DimensionMismatch",
        }
    }
}

/// Rotations taking camera-1 and camera-2 directions into the shared
/// rectified frame, where the baseline `e1` is +Z.
///
/// The rectified X axis is world +Z projected onto the plane orthogonal to
/// `e1`. When `e1` is within 1e-9 of ±Z that projection vanishes and world +X
/// is used instead.
pub fn rectification_rotations(e1: &Bearing, rotation: &Matrix3<f64>) -> (Matrix3<f64>, Matrix3<f64>) {
    let z = *e1.vector();
    let up = Vector3::z();
    let projected = up - z * z.dot(&up);
    let x_axis = if projected.norm() > 1e-9 {
        projected.normalize()
    } else {
        let fallback = Vector3::x();
        (fallback - z * z.dot(&fallback)).normalize()
    };
    let y_axis = z.cross(&x_axis);
    let r1 = Matrix3::from_rows(&[x_axis.transpose(), y_axis.transpose(), z.transpose()]);
    (r1, r1 * rotation.transpose())
}

/// Continuous `(row, col)` of a rectified-frame bearing.
pub fn rectified_coords(b: &Bearing, rect_size: ImageSize) -> (f64, f64) {
    let v = b.vector();
    let x = v.z.clamp(-1.0, 1.0).acos();
    let psi = v.y.atan2(v.x).rem_euclid(TAU);
    (
        psi * rect_size.width() as f64 / TAU,
        x * rect_size.height() as f64 / PI,
    )
}

/// Rectified-frame bearing at continuous `(row, col)`.
pub fn rectified_bearing(row: f64, col: f64, rect_size: ImageSize) -> Bearing {
    angles_to_bearing(SphericalAngles {
        theta: TAU * row / rect_size.width() as f64,
        phi: PI * col / rect_size.height() as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RectifiedPair {
    pub rect1: Raster,
    pub rect2: Raster,
    pub r_rect1: Matrix3<f64>,
    pub r_rect2: Matrix3<f64>,
    pub rect_size: ImageSize,
}

impl RectifiedPair {
    /// Raster columns (latitude samples).
    pub fn cols(&self) -> u32 {
        self.rect_size.height()
    }

    /// Raster rows (longitude samples).
    pub fn rows(&self) -> u32 {
        self.rect_size.width()
    }
}

fn rectify_one(img: &EquirectImage, r_rect: &Matrix3<f64>, rect_size: ImageSize) -> Raster {
    let (cols, rows) = (rect_size.height(), rect_size.width());
    let back = r_rect.transpose();
    let pixels: Vec<Rgb> = (0..rows)
        .into_par_iter()
        .flat_map_iter(|j| {
            (0..cols).map(move |i| {
                let b = rectified_bearing(j as f64 + 0.5, i as f64 + 0.5, rect_size);
                let cam = Bearing::new(back * b.vector()).expect("rotation keeps unit length");
                to_rgb8(img.sample_bearing(&cam))
            })
        })
        .collect();
    Raster::from_pixels(cols, rows, pixels).expect("raster size matches")
}

pub fn rectify_pair(
    img1: &EquirectImage,
    img2: &EquirectImage,
    solution: &TwoViewSolution,
    rect_size: ImageSize,
) -> RectifiedPair {
    rectify_with(img1, img2, &solution.e1, &solution.rotation, rect_size)
}

/// Rectifies with an explicit baseline direction `e1` and rotation `R`.
pub fn rectify_with(
    img1: &EquirectImage,
    img2: &EquirectImage,
    e1: &Bearing,
    rotation: &Matrix3<f64>,
    rect_size: ImageSize,
) -> RectifiedPair {
    let (r_rect1, r_rect2) = rectification_rotations(e1, rotation);
    RectifiedPair {
        rect1: rectify_one(img1, &r_rect1, rect_size),
        rect2: rectify_one(img2, &r_rect2, rect_size),
        r_rect1,
        r_rect2,
        rect_size,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisparityParams {
    /// Odd block size.
    pub window: u32,
    pub d_min: u32,
    /// Defaults to a quarter of the raster width.
    pub d_max: Option<u32>,
    pub ncc_floor: f64,
    pub lr_tolerance: f64,
    /// Fraction of columns masked next to each epipole.
    pub mask_fraction: f64,
}

impl Default for DisparityParams {
    fn default() -> Self {
        Self {
            window: 11,
            d_min: 1,
            d_max: None,
            ncc_floor: 0.5,
            lr_tolerance: 1.0,
            mask_fraction: 0.02,
        }
    }
}

/// Per-pixel disparity in rectified pixels, `NaN` where invalid. Indexed like
/// the rectified raster: `width` latitude columns by `height` longitude rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl DisparityMap {
    pub fn get(&self, col: u32, row: u32) -> Option<f64> {
        let v = self.data[row as usize * self.width as usize + col as usize];
        v.is_finite().then_some(v as f64)
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|v| v.is_finite()).count()
    }

    pub fn radians_per_pixel(&self) -> f64 {
        PI / self.width as f64
    }
}

/// Centered box sums of width `2 * half + 1` along one row; `NaN` where the box
/// leaves `[0, len)`.
fn row_box(values: &[f64], half: usize, out: &mut [f64]) {
    let n = values.len();
    let mut prefix = vec![0.0; n + 1];
    for (k, v) in values.iter().enumerate() {
        prefix[k + 1] = prefix[k] + v;
    }
    for c in 0..n {
        out[c] = if c >= half && c + half < n {
            prefix[c + half + 1] - prefix[c - half]
        } else {
            f64::NAN
        };
    }
}

/// Block matching with zero-mean normalized cross-correlation.
///
/// For each rectified pixel `(row, c)` of image 1 the match is searched at
/// `(row, c + d)` in image 2 for `d` in `[d_min, d_max]`. Rows wrap around in
/// longitude. A pixel is valid when its best score reaches the NCC floor, the
/// right-to-left best agrees within the LR tolerance, neither column lies in
/// the epipole masks, and both windows have texture. The winner is refined
/// with a parabola through its neighbours.
pub fn compute_disparity(
    pair: &RectifiedPair,
    params: &DisparityParams,
) -> Result<DisparityMap, DenseError> {
    let (w, h) = (pair.cols() as usize, pair.rows() as usize);
    if params.window % 2 == 0 || params.window as usize > w.min(h) {
        return Err(DenseError::InvalidParams("window must be odd and fit the raster".into()));
    }
    let d_max = params.d_max.unwrap_or(pair.cols() / 4) as usize;
    let d_min = params.d_min as usize;
    if d_min > d_max || d_max >= w {
        return Err(DenseError::InvalidParams(format!(
            "bad disparity range [{d_min}, {d_max}]"
        )));
    }
    let half = params.window as usize / 2;
    let n_win = (params.window * params.window) as f64;
    let mask = (params.mask_fraction * w as f64).ceil() as usize;
    let in_mask = |c: usize| c < mask || c + mask >= w;

    let l1: Vec<f64> = pair.rect1.luma().into_iter().map(f64::from).collect();
    let l2: Vec<f64> = pair.rect2.luma().into_iter().map(f64::from).collect();

    // sum over the window rows (wrapping) of f(row), per column
    let column_sums = |row: usize, f: &dyn Fn(usize, usize) -> f64, shift: usize| -> Vec<f64> {
        let mut acc = vec![0.0; w];
        for k in 0..params.window as usize {
            let r = (row + h + k - half) % h;
            for (c, a) in acc.iter_mut().enumerate().take(w - shift) {
                *a += f(r, c);
            }
        }
        acc
    };
    let stats = |img: &[f64], row: usize| {
        let s = column_sums(row, &|r, c| img[r * w + c], 0);
        let s2 = column_sums(row, &|r, c| img[r * w + c] * img[r * w + c], 0);
        let (mut bs, mut bs2) = (vec![0.0; w], vec![0.0; w]);
        row_box(&s, half, &mut bs);
        row_box(&s2, half, &mut bs2);
        let mean: Vec<f64> = bs.iter().map(|v| v / n_win).collect();
        let sd: Vec<f64> = bs2
            .iter()
            .zip(&mean)
            .map(|(v, m)| {
                let var = v / n_win - m * m;
                // flat windows carry no information
                if var > 1e-4 {
                    var.sqrt()
                } else {
                    f64::NAN
                }
            })
            .collect();
        (mean, sd)
    };

    let n_d = d_max - d_min + 1;
    let rows: Vec<Vec<f32>> = (0..h)
        .into_par_iter()
        .map(|row| {
            let (m1, s1) = stats(&l1, row);
            let (m2, s2) = stats(&l2, row);
            // score[k][c] for d = d_min + k
            let mut score = vec![vec![f64::NAN; w]; n_d];
            let mut boxed = vec![0.0; w];
            for (k, sc) in score.iter_mut().enumerate() {
                let d = d_min + k;
                let prod = column_sums(row, &|r, c| l1[r * w + c] * l2[r * w + c + d], d);
                row_box(&prod, half, &mut boxed);
                for c in 0..w - d {
                    let c2 = c + d;
                    if c2 + half >= w {
                        break;
                    }
                    let v = (boxed[c] / n_win - m1[c] * m2[c2]) / (s1[c] * s2[c2]);
                    if v.is_finite() {
                        sc[c] = v;
                    }
                }
            }
            let best_left = |c: usize| -> Option<usize> {
                let mut best: Option<(usize, f64)> = None;
                for (k, sc) in score.iter().enumerate() {
                    let v = sc[c];
                    if v.is_finite() && best.is_none_or(|b| v > b.1) {
                        best = Some((k, v));
                    }
                }
                best.map(|b| b.0)
            };
            let best_right = |c2: usize| -> Option<usize> {
                let mut best: Option<(usize, f64)> = None;
                for (k, sc) in score.iter().enumerate() {
                    let d = d_min + k;
                    if d > c2 {
                        break;
                    }
                    let v = sc[c2 - d];
                    if v.is_finite() && best.is_none_or(|b| v > b.1) {
                        best = Some((k, v));
                    }
                }
                best.map(|b| b.0)
            };
            (0..w)
                .map(|c| {
                    if in_mask(c) {
                        return f32::NAN;
                    }
                    let Some(k) = best_left(c) else { return f32::NAN };
                    let s0 = score[k][c];
                    let d = d_min + k;
                    if s0 < params.ncc_floor || in_mask(c + d) {
                        return f32::NAN;
                    }
                    let Some(kr) = best_right(c + d) else { return f32::NAN };
                    if (kr as f64 - k as f64).abs() > params.lr_tolerance {
                        return f32::NAN;
                    }
                    let mut sub = 0.0;
                    if k > 0 && k + 1 < n_d {
                        let (sm, sp) = (score[k - 1][c], score[k + 1][c]);
                        let denom = sm - 2.0 * s0 + sp;
                        if sm.is_finite() && sp.is_finite() && denom < 0.0 {
                            sub = ((sm - sp) / (2.0 * denom)).clamp(-0.5, 0.5);
                        }
                    }
                    let value = d as f64 + sub;
                    // keep x2 = x1 + d strictly inside (0, pi)
                    if c as f64 + 0.5 + value >= w as f64 || (d_min > 0 && value <= 0.0) {
                        return f32::NAN;
                    }
                    value as f32
                })
                .collect()
        })
        .collect();
    Ok(DisparityMap {
        width: w as u32,
        height: h as u32,
        data: rows.concat(),
    })
}

/// Ranges from camera 1 and camera 2 to the point seen at latitude `x1` from
/// camera 1 with angular disparity `d`, for baseline length `t`.
pub fn disparity_to_range(x1: f64, d: f64, t: f64) -> Result<(f64, f64), DenseError> {
    let x2 = x1 + d;
    if !(d > 1e-9) || !(x1 > 0.0) || !(x2 < PI) {
        return Err(DenseError::DegenerateDisparity { x1, d });
    }
    let s = d.sin();
    Ok((t * x2.sin() / s, t * x1.sin() / s))
}

/// Colored 3D point in the camera-1 frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensePoint {
    pub position: Vector3<f64>,
    pub color: Rgb,
}

/// One point per valid disparity pixel that yields a finite range, in
/// row-major raster order.
pub fn dense_cloud(
    disp: &DisparityMap,
    pair: &RectifiedPair,
    baseline: f64,
) -> Result<Vec<DensePoint>, DenseError> {
    if disp.width != pair.cols() || disp.height != pair.rows() {
        return Err(DenseError::DimensionMismatch(format!(
            "disparity {}x{} vs rectified {}x{}",
            disp.width,
            disp.height,
            pair.cols(),
            pair.rows()
        )));
    }
    let back = pair.r_rect1.transpose();
    let rad = disp.radians_per_pixel();
    let mut out = Vec::new();
    for row in 0..disp.height {
        for col in 0..disp.width {
            let Some(d) = disp.get(col, row) else { continue };
            let (r, c) = (row as f64 + 0.5, col as f64 + 0.5);
            let Ok((range1, _)) = disparity_to_range(c * rad, d * rad, baseline) else {
                continue;
            };
            let b = rectified_bearing(r, c, pair.rect_size);
            out.push(DensePoint {
                position: back * b.vector() * range1,
                color: pair.rect1.get(col, row),
            });
        }
    }
    Ok(out)
}
