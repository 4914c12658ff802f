//! Reconstruction from full-view spherical (equirectangular) cameras.
//!
//! The crate covers the unit-sphere camera model, two-view epipolar geometry on
//! bearings, planar multi-camera registration, correspondence management, and
//! spherical rectification with dense disparity and depth.

pub mod align;
pub mod epipolar;
pub mod correspondence;
pub mod dense;
pub mod multiview;
pub mod pfm;
pub mod ply;
pub mod raster;
pub mod sphere_cam;
pub mod synth;

pub use sphere_cam::{
    angles_to_bearing, bearing_to_angles, bearing_to_disk, bearing_to_pixel, pixel_to_angles,
    pixel_to_bearing, project_point, Bearing, CameraPose, EquirectImage, ImageSize, PixelCoord,
    Rgb, SphericalAngles,
};
