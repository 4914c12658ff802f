//! Unit-sphere camera model for equirectangular panoramas.
//!
//! Pixel `x` encodes longitude `theta = 2*pi*x/width` and pixel `y` encodes
//! colatitude `phi = pi*y/height`, with `phi = 0` at the +Z pole. Coordinates
//! are continuous: the center of pixel `(i, j)` sits at `(i + 0.5, j + 0.5)`.
//!
//! A bearing is the unit direction `(sin(phi)cos(theta), sin(phi)sin(theta), cos(phi))`.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Rgb = [u8; 3];

#[derive(Debug, Error)]
pub enum SphereCamError {
    #[error("equirectangular images must be 2:1, got {width}x{height}")]
    InvalidSize { width: u32, height: u32 },
    #[error("pixel buffer holds {got} samples, expected {expected}")]
    PixelCount { expected: usize, got: usize },
    #[error("point coincides with the camera center")]
    DegeneratePoint,
    #[error("matrix is not a proper rotation (orthonormality error {0:.3e})")]
    InvalidRotation(f64),
    #[error("image decode/encode failed: {0}")]
    Image(#[from] image::ImageError),
}

impl SphereCamError {
    pub fn category(&self) -> &'static str {
        match self {
            Self::InvalidSize { .. } => "InvalidSize",
            Self::PixelCount { .. } => "PixelCount",
            Self::DegeneratePoint => "DegeneratePoint",
            Self::InvalidRotation(_) => "InvalidRotation",
            Self::Image(_) => "ImageError",
        }
    }
}

/// Panorama dimensions. Always 2:1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawSize", into = "RawSize")]
pub struct ImageSize {
    width: u32,
    height: u32,
}

#[derive(Serialize, Deserialize)]
struct RawSize {
    width: u32,
    height: u32,
}

impl TryFrom<RawSize> for ImageSize {
    type Error = SphereCamError;

    fn try_from(raw: RawSize) -> Result<Self, Self::Error> {
        Self::new(raw.width, raw.height)
    }
}

impl From<ImageSize> for RawSize {
    fn from(s: ImageSize) -> Self {
        Self {
            width: s.width,
            height: s.height,
        }
    }
}

impl ImageSize {
    pub fn new(width: u32, height: u32) -> Result<Self, SphereCamError> {
        if height < 1 || width != 2 * height {
            return Err(SphereCamError::InvalidSize { width, height });
        }
        Ok(Self { width, height })
    }

    /// Size with the given height and twice that width.
    pub fn from_height(height: u32) -> Result<Self, SphereCamError> {
        Self::new(height.saturating_mul(2), height)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelCoord {
    pub x: f64,
    pub y: f64,
}

impl PixelCoord {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Center of the integer pixel `(i, j)`.
    pub fn center_of(i: u32, j: u32) -> Self {
        Self::new(i as f64 + 0.5, j as f64 + 0.5)
    }

    /// Distance to `other` taking the horizontal wrap into account.
    pub fn wrapped_distance(&self, other: &PixelCoord, size: ImageSize) -> f64 {
        let w = size.width as f64;
        let mut dx = (self.x - other.x).rem_euclid(w);
        if dx > w / 2.0 {
            dx = w - dx;
        }
        dx.hypot(self.y - other.y)
    }
}

/// Longitude `theta` in `[0, 2pi)` and colatitude `phi` in `[0, pi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalAngles {
    pub theta: f64,
    pub phi: f64,
}

/// A unit direction on the viewing sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bearing(Vector3<f64>);

impl Bearing {
    pub const PLUS_X: Bearing = Bearing(Vector3::new(1.0, 0.0, 0.0));
    pub const PLUS_Y: Bearing = Bearing(Vector3::new(0.0, 1.0, 0.0));
    pub const PLUS_Z: Bearing = Bearing(Vector3::new(0.0, 0.0, 1.0));

    /// Normalizes `v`; `None` for zero or non-finite vectors.
    pub fn new(v: Vector3<f64>) -> Option<Self> {
        let n = v.norm();
        if n > 0.0 && n.is_finite() {
            Some(Self(v / n))
        } else {
            None
        }
    }

    pub fn from_xyz(x: f64, y: f64, z: f64) -> Option<Self> {
        Self::new(Vector3::new(x, y, z))
    }

    pub fn vector(&self) -> &Vector3<f64> {
        &self.0
    }

    pub fn x(&self) -> f64 {
        self.0.x
    }

    pub fn y(&self) -> f64 {
        self.0.y
    }

    pub fn z(&self) -> f64 {
        self.0.z
    }

    pub fn dot(&self, other: &Bearing) -> f64 {
        self.0.dot(&other.0)
    }

    /// Applies a rotation. The result is renormalized to absorb rounding.
    pub fn rotate(&self, r: &Matrix3<f64>) -> Bearing {
        Bearing(r * self.0).renormalized()
    }

    fn renormalized(self) -> Bearing {
        Bearing(self.0 / self.0.norm())
    }
}

impl std::ops::Neg for Bearing {
    type Output = Bearing;

    fn neg(self) -> Bearing {
        Bearing(-self.0)
    }
}

impl From<Bearing> for Vector3<f64> {
    fn from(b: Bearing) -> Self {
        b.0
    }
}

/// Camera orientation and position. `rotation` maps world directions into the
/// camera frame; `center` is the camera position in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub center: Vector3<f64>,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, center: Vector3<f64>) -> Result<Self, SphereCamError> {
        let err = rotation_error(&rotation);
        if err > 1e-9 {
            return Err(SphereCamError::InvalidRotation(err));
        }
        Ok(Self { rotation, center })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            center: Vector3::zeros(),
        }
    }

    /// Direction of world point `p` in this camera's frame.
    pub fn project(&self, p: &Vector3<f64>) -> Result<Bearing, SphereCamError> {
        project_point(p, self)
    }

    /// World direction of a camera-frame bearing.
    pub fn ray_direction(&self, b: &Bearing) -> Vector3<f64> {
        self.rotation.transpose() * b.0
    }
}

/// Max of `|RᵀR - I|` entries and `|det R - 1|`.
pub fn rotation_error(r: &Matrix3<f64>) -> f64 {
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    ortho.max((r.determinant() - 1.0).abs())
}

pub fn pixel_to_angles(p: PixelCoord, size: ImageSize) -> SphericalAngles {
    let theta = (TAU * p.x / size.width as f64).rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    let theta = if theta >= TAU { 0.0 } else { theta };
    let phi = (PI * p.y / size.height as f64).clamp(0.0, PI);
    SphericalAngles { theta, phi }
}

pub fn angles_to_pixel(a: SphericalAngles, size: ImageSize) -> PixelCoord {
    let w = size.width as f64;
    let mut x = a.theta.rem_euclid(TAU) * w / TAU;
    if x >= w {
        x -= w;
    }
    PixelCoord::new(x, a.phi * size.height as f64 / PI)
}

pub fn angles_to_bearing(a: SphericalAngles) -> Bearing {
    let (sp, cp) = a.phi.sin_cos();
    let (st, ct) = a.theta.sin_cos();
    Bearing(Vector3::new(sp * ct, sp * st, cp))
}

/// Inverse of [`angles_to_bearing`]. At the poles longitude is reported as 0.
pub fn bearing_to_angles(b: &Bearing) -> SphericalAngles {
    let v = b.vector();
    let horiz = v.x.hypot(v.y);
    if horiz == 0.0 {
        let phi = if v.z >= 0.0 { 0.0 } else { PI };
        return SphericalAngles { theta: 0.0, phi };
    }
    // atan2 keeps full precision near the poles where acos(z) does not
    let phi = horiz.atan2(v.z);
    let mut theta = v.y.atan2(v.x);
    if theta < 0.0 {
        theta += TAU;
    }
    if theta >= TAU {
        theta = 0.0;
    }
    SphericalAngles { theta, phi }
}

pub fn pixel_to_bearing(p: PixelCoord, size: ImageSize) -> Bearing {
    angles_to_bearing(pixel_to_angles(p, size))
}

pub fn bearing_to_pixel(b: &Bearing, size: ImageSize) -> PixelCoord {
    angles_to_pixel(bearing_to_angles(b), size)
}

/// Bearing of world point `p` seen from `pose`: `R (p - C) / |p - C|`.
pub fn project_point(p: &Vector3<f64>, pose: &CameraPose) -> Result<Bearing, SphereCamError> {
    let d = p - pose.center;
    let n = d.norm();
    if n < 1e-12 || !n.is_finite() {
        return Err(SphereCamError::DegeneratePoint);
    }
    Ok(Bearing(pose.rotation * (d / n)).renormalized())
}

/// Orthographic projection of the sphere onto the `z = 0` disk (the circular
/// fisheye view). Kept for display and debugging.
pub fn bearing_to_disk(b: &Bearing) -> Vector2<f64> {
    Vector2::new(b.0.x, b.0.y)
}

/// An 8-bit RGB panorama stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EquirectImage {
    size: ImageSize,
    pixels: Vec<Rgb>,
}

impl EquirectImage {
    pub fn new(size: ImageSize, pixels: Vec<Rgb>) -> Result<Self, SphereCamError> {
        if pixels.len() != size.pixel_count() {
            return Err(SphereCamError::PixelCount {
                expected: size.pixel_count(),
                got: pixels.len(),
            });
        }
        Ok(Self { size, pixels })
    }

    pub fn filled(size: ImageSize, color: Rgb) -> Self {
        Self {
            size,
            pixels: vec![color; size.pixel_count()],
        }
    }

    /// Builds an image by evaluating `f` at every integer pixel `(i, j)`.
    pub fn from_fn(size: ImageSize, mut f: impl FnMut(u32, u32) -> Rgb) -> Self {
        let mut pixels = Vec::with_capacity(size.pixel_count());
        for j in 0..size.height {
            for i in 0..size.width {
                pixels.push(f(i, j));
            }
        }
        Self { size, pixels }
    }

    pub fn size(&self) -> ImageSize {
        self.size
    }

    pub fn pixels(&self) -> &[Rgb] {
        &self.pixels
    }

    pub fn get(&self, i: u32, j: u32) -> Rgb {
        self.pixels[j as usize * self.size.width as usize + i as usize]
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SphereCamError> {
        let img = image::open(path)?.to_rgb8();
        Self::from_rgb_image(&img)
    }

    pub fn from_rgb_image(img: &image::RgbImage) -> Result<Self, SphereCamError> {
        let size = ImageSize::new(img.width(), img.height())?;
        let pixels = img.pixels().map(|p| p.0).collect();
        Ok(Self { size, pixels })
    }

    pub fn to_rgb_image(&self) -> image::RgbImage {
        raster_to_rgb_image(self.size.width, self.size.height, &self.pixels)
    }

    /// Bilinear sample on the sample grid, where pixel `(i, j)` sits at
    /// `(u, v) = (i, j)`. `u` wraps around the seam; `v` clamps at the poles.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> [f64; 3] {
        let w = self.size.width as usize;
        let h = self.size.height as usize;
        let u = u.rem_euclid(w as f64);
        let v = v.clamp(0.0, (h - 1) as f64);
        let u0 = u.floor();
        let v0 = v.floor();
        let fu = u - u0;
        let fv = v - v0;
        let i0 = (u0 as usize) % w;
        let i1 = (i0 + 1) % w;
        let j0 = v0 as usize;
        let j1 = (j0 + 1).min(h - 1);
        let px = |i: usize, j: usize| self.pixels[j * w + i];
        let (a, b, c, d) = (px(i0, j0), px(i1, j0), px(i0, j1), px(i1, j1));
        let mut out = [0.0; 3];
        for k in 0..3 {
            let top = a[k] as f64 * (1.0 - fu) + b[k] as f64 * fu;
            let bottom = c[k] as f64 * (1.0 - fu) + d[k] as f64 * fu;
            out[k] = top * (1.0 - fv) + bottom * fv;
        }
        out
    }

    /// Bilinear sample at a continuous pixel coordinate (pixel centers at +0.5).
    pub fn sample(&self, p: PixelCoord) -> [f64; 3] {
        self.sample_bilinear(p.x - 0.5, p.y - 0.5)
    }

    /// Color seen along `b`.
    pub fn sample_bearing(&self, b: &Bearing) -> [f64; 3] {
        self.sample(bearing_to_pixel(b, self.size))
    }
}

pub(crate) fn raster_to_rgb_image(width: u32, height: u32, pixels: &[Rgb]) -> image::RgbImage {
    let mut buf = Vec::with_capacity(pixels.len() * 3);
    for p in pixels {
        buf.extend_from_slice(p);
    }
    image::RgbImage::from_raw(width, height, buf).expect("raster dimensions match buffer")
}

pub fn to_rgb8(c: [f64; 3]) -> Rgb {
    c.map(|v| v.round().clamp(0.0, 255.0) as u8)
}

/// Rec. 601 luma.
pub fn luma(c: Rgb) -> f32 {
    0.299 * c[0] as f32 + 0.587 * c[1] as f32 + 0.114 * c[2] as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn size() -> ImageSize {
        ImageSize::new(2048, 1024).unwrap()
    }

    #[test]
    fn size_must_be_two_to_one() {
        assert!(ImageSize::new(2048, 1024).is_ok());
        assert!(ImageSize::new(2, 1).is_ok());
        assert!(ImageSize::new(2000, 1024).is_err());
        assert!(ImageSize::new(0, 0).is_err());
    }

    #[test]
    fn pixel_to_angles_examples() {
        let a = pixel_to_angles(PixelCoord::new(0.0, 0.0), size());
        assert_eq!((a.theta, a.phi), (0.0, 0.0));
        let a = pixel_to_angles(PixelCoord::new(1024.0, 512.0), size());
        assert_abs_diff_eq!(a.theta, PI, epsilon = 1e-15);
        assert_abs_diff_eq!(a.phi, PI / 2.0, epsilon = 1e-15);
        let a = pixel_to_angles(PixelCoord::new(512.0, 256.0), size());
        assert_abs_diff_eq!(a.theta, PI / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(a.phi, PI / 4.0, epsilon = 1e-15);
    }

    #[test]
    fn angles_to_bearing_examples() {
        let b = angles_to_bearing(SphericalAngles { theta: 0.0, phi: PI / 2.0 });
        assert_abs_diff_eq!(*b.vector(), Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-15);
        let b = angles_to_bearing(SphericalAngles { theta: PI / 2.0, phi: PI / 2.0 });
        assert_abs_diff_eq!(*b.vector(), Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-15);
        // sin(pi/4)cos(pi/3), sin(pi/4)sin(pi/3), cos(pi/4)
        let b = angles_to_bearing(SphericalAngles { theta: PI / 3.0, phi: PI / 4.0 });
        let expected = Vector3::new(0.353553390593, 0.612372435696, 0.707106781187);
        assert_abs_diff_eq!(*b.vector(), expected, epsilon = 1e-11);
        assert_abs_diff_eq!(b.vector().norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn bearing_to_angles_examples() {
        let a = bearing_to_angles(&Bearing::PLUS_Z);
        assert_eq!((a.theta, a.phi), (0.0, 0.0));
        let a = bearing_to_angles(&-Bearing::PLUS_Z);
        assert_eq!((a.theta, a.phi), (0.0, PI));
        let a = bearing_to_angles(&-Bearing::PLUS_X);
        assert_abs_diff_eq!(a.theta, PI, epsilon = 1e-15);
        assert_abs_diff_eq!(a.phi, PI / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn bearing_pixel_examples() {
        let p = bearing_to_pixel(&Bearing::PLUS_Z, size());
        assert_eq!((p.x, p.y), (0.0, 0.0));

        let b = pixel_to_bearing(PixelCoord::new(1536.0, 512.0), size());
        assert_abs_diff_eq!(*b.vector(), Vector3::new(0.0, -1.0, 0.0), epsilon = 1e-15);
        let p = bearing_to_pixel(&b, size());
        assert_abs_diff_eq!(p.x, 1536.0, epsilon = 1e-9);
        assert_abs_diff_eq!(p.y, 512.0, epsilon = 1e-9);

        for (x, b) in [
            (0.0, Bearing::PLUS_X),
            (512.0, Bearing::PLUS_Y),
            (1024.0, -Bearing::PLUS_X),
            (1536.0, -Bearing::PLUS_Y),
        ] {
            let p = bearing_to_pixel(&b, size());
            assert_eq!(p, PixelCoord::new(x, 512.0));
            let back = pixel_to_bearing(p, size());
            assert_abs_diff_eq!(*back.vector(), *b.vector(), epsilon = 1e-15);
        }
    }

    #[test]
    fn project_point_examples() {
        let pose = CameraPose::identity();
        let b = project_point(&Vector3::new(0.0, 0.0, 5.0), &pose).unwrap();
        assert_eq!(*b.vector(), Vector3::new(0.0, 0.0, 1.0));
        let b = project_point(&Vector3::new(3.0, 4.0, 0.0), &pose).unwrap();
        assert_abs_diff_eq!(*b.vector(), Vector3::new(0.6, 0.8, 0.0), epsilon = 1e-15);
        let err = project_point(&Vector3::zeros(), &pose).unwrap_err();
        assert!(matches!(err, SphereCamError::DegeneratePoint));
    }

    #[test]
    fn camera_pose_rejects_non_rotations() {
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(CameraPose::new(m, Vector3::zeros()).is_err());
        assert!(CameraPose::new(Matrix3::identity() * 2.0, Vector3::zeros()).is_err());
    }

    #[test]
    fn disk_projection() {
        assert_eq!(bearing_to_disk(&Bearing::PLUS_Z), Vector2::new(0.0, 0.0));
        assert_eq!(bearing_to_disk(&Bearing::PLUS_X), Vector2::new(1.0, 0.0));
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let tilted = Bearing::from_xyz(0.6 * c, 0.8 * c, s).unwrap();
        let flat = Bearing::from_xyz(0.6, 0.8, 0.0).unwrap();
        let ratio = bearing_to_disk(&tilted).norm() / bearing_to_disk(&flat).norm();
        assert_abs_diff_eq!(ratio, c, epsilon = 1e-15);
        assert_abs_diff_eq!(
            bearing_to_disk(&tilted).normalize(),
            bearing_to_disk(&flat),
            epsilon = 1e-15
        );
    }

    #[test]
    fn sampling_exact_at_grid_points() {
        let size = ImageSize::new(8, 4).unwrap();
        let img = EquirectImage::from_fn(size, |i, j| [i as u8 * 10, j as u8 * 20, 7]);
        for j in 0..4 {
            for i in 0..8 {
                let s = img.sample_bilinear(i as f64, j as f64);
                assert_eq!(to_rgb8(s), img.get(i, j));
                assert_eq!(to_rgb8(img.sample(PixelCoord::center_of(i, j))), img.get(i, j));
            }
        }
    }

    #[test]
    fn sampling_uniform_image() {
        let img = EquirectImage::filled(ImageSize::new(16, 8).unwrap(), [12, 200, 99]);
        for (u, v) in [(0.3, 0.1), (15.7, 7.9), (-3.2, 100.0), (8.0, -5.0)] {
            let s = img.sample_bilinear(u, v);
            for k in 0..3 {
                assert_abs_diff_eq!(s[k], img.get(0, 0)[k] as f64, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn sampling_wraps_across_seam() {
        // 2x1 image: column 0 black, column 1 white
        let img = EquirectImage::new(ImageSize::new(2, 1).unwrap(), vec![[0; 3], [200; 3]]).unwrap();
        let s = img.sample_bilinear(2.0 - 0.5, 0.0);
        assert_abs_diff_eq!(s[0], 100.0, epsilon = 1e-12);
        // three quarters of the way from column 1 back to column 0
        let s = img.sample_bilinear(1.75, 0.0);
        assert_abs_diff_eq!(s[0], 50.0, epsilon = 1e-12);
    }

    fn unit_vector() -> impl Strategy<Value = Bearing> {
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
            .prop_filter_map("zero", |(x, y, z)| {
                let v = Vector3::new(x, y, z);
                (v.norm() > 1e-3).then(|| Bearing::new(v).unwrap())
            })
    }

    proptest! {
        #[test]
        fn bearing_angle_round_trip(b in unit_vector()) {
            let back = angles_to_bearing(bearing_to_angles(&b));
            prop_assert!((back.vector() - b.vector()).norm() < 1e-12);
            prop_assert!((back.vector().norm() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn pixel_round_trip(x in 0.0f64..2048.0, y in 1.0f64..1023.0) {
            let p = PixelCoord::new(x, y);
            let back = bearing_to_pixel(&pixel_to_bearing(p, size()), size());
            prop_assert!(back.wrapped_distance(&p, size()) < 1e-9);
        }

        #[test]
        fn projection_is_scale_invariant(d in unit_vector(), s in 0.01f64..100.0, yaw in 0.0f64..TAU) {
            let (sn, cs) = yaw.sin_cos();
            let r = Matrix3::new(cs, -sn, 0.0, sn, cs, 0.0, 0.0, 0.0, 1.0);
            let pose = CameraPose::new(r, Vector3::new(0.3, -1.0, 2.0)).unwrap();
            let a = project_point(&(pose.center + d.vector()), &pose).unwrap();
            let b = project_point(&(pose.center + d.vector() * s), &pose).unwrap();
            prop_assert!((a.vector() - b.vector()).norm() < 1e-12);
            prop_assert!((b.vector().norm() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn disk_norm_is_sin_phi(b in unit_vector()) {
            let phi = bearing_to_angles(&b).phi;
            prop_assert!((bearing_to_disk(&b).norm() - phi.sin()).abs() < 1e-12);
        }
    }
}
