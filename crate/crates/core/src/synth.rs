//! Synthetic scenes with known geometry: random planar rigs and points, and a
//! textured box room that can be ray cast for images and exact depth.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::multiview::{yaw_matrix, PlanarRig};
use crate::sphere_cam::{
    pixel_to_bearing, to_rgb8, CameraPose, EquirectImage, ImageSize, PixelCoord, Rgb,
};

/// `n` cameras at random yaws within a disk of `radius` on the `z = 0` plane.
/// Cameras keep at least `radius / 4` apart and no camera is within 5° of the
/// line through an earlier pair, so every triangle in the rig is well shaped.
pub fn random_planar_rig(rng: &mut impl Rng, n: usize, radius: f64) -> PlanarRig {
    let mut centers: Vec<Vector3<f64>> = Vec::with_capacity(n);
    while centers.len() < n {
        let r = radius * rng.random::<f64>().sqrt();
        let a = rng.random_range(0.0..2.0 * PI);
        let c = Vector3::new(r * a.cos(), r * a.sin(), 0.0);
        let spaced = centers.iter().all(|o| (o - c).norm() > radius / 4.0);
        let off_lines = centers.iter().enumerate().all(|(i, p)| {
            centers[i + 1..].iter().all(|q| {
                let (u, v) = ((c - p).normalize(), (c - q).normalize());
                u.cross(&v).norm() > 5f64.to_radians().sin()
            })
        });
        if spaced && off_lines {
            centers.push(c);
        }
    }
    let thetas = (0..n).map(|_| rng.random_range(-PI..PI)).collect();
    PlanarRig { thetas, centers }
}

/// Moves the rig so camera 0 is at the origin with zero yaw. Returns the
/// world-to-new-frame map to apply to scene points.
pub fn to_camera0_frame(rig: &PlanarRig) -> (PlanarRig, impl Fn(&Vector3<f64>) -> Vector3<f64>) {
    let r0 = yaw_matrix(rig.thetas[0]);
    let c0 = rig.centers[0];
    let map = move |p: &Vector3<f64>| r0 * (p - c0);
    let moved = PlanarRig {
        thetas: rig
            .thetas
            .iter()
            .map(|t| crate::multiview::wrap_angle(t - rig.thetas[0]))
            .collect(),
        centers: rig.centers.iter().map(map).collect(),
    };
    (moved, map)
}

/// Random points around the rig, each at least `min_range` from every camera.
pub fn random_points(
    rng: &mut impl Rng,
    n: usize,
    poses: &[CameraPose],
    extent: f64,
    min_range: f64,
) -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let p = Vector3::new(
            rng.random_range(-extent..extent),
            rng.random_range(-extent..extent),
            rng.random_range(-extent / 2.0..extent / 2.0),
        );
        if poses.iter().all(|c| (p - c.center).norm() > min_range) {
            out.push(p);
        }
    }
    out
}

/// Adds isotropic Gaussian pixel noise, wrapping `x` and clamping `y`.
pub fn jitter(rng: &mut impl Rng, p: PixelCoord, sigma: f64, size: ImageSize) -> PixelCoord {
    if sigma <= 0.0 {
        return p;
    }
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    let x = (p.x + normal.sample(rng)).rem_euclid(size.width() as f64);
    let y = (p.y + normal.sample(rng)).clamp(0.0, size.height() as f64);
    PixelCoord::new(x, y)
}

/// Axis-aligned box centered on the origin, textured with colored value
/// noise on every wall, seen from the inside.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxRoom {
    pub half_extents: Vector3<f64>,
    pub seed: u64,
    /// Lattice cells per scene unit of the coarsest noise octave.
    pub frequency: f64,
}

impl Default for BoxRoom {
    fn default() -> Self {
        Self {
            half_extents: Vector3::new(4.0, 3.0, 2.0),
            seed: 7,
            frequency: 4.0,
        }
    }
}

fn hash3(x: i64, y: i64, z: i64, seed: u64) -> f64 {
    // splitmix64 over the packed lattice coordinate
    let mut h = seed
        ^ (x as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (y as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
        ^ (z as u64).wrapping_mul(0x1656_67b1_9e37_79f9);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^= h >> 31;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(p: Vector3<f64>, seed: u64) -> f64 {
    let base = p.map(f64::floor);
    let f = p - base;
    let s = f.map(|t| t * t * (3.0 - 2.0 * t));
    let (ix, iy, iz) = (base.x as i64, base.y as i64, base.z as i64);
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let w = (if dx == 1 { s.x } else { 1.0 - s.x })
                    * (if dy == 1 { s.y } else { 1.0 - s.y })
                    * (if dz == 1 { s.z } else { 1.0 - s.z });
                acc += w * hash3(ix + dx, iy + dy, iz + dz, seed);
            }
        }
    }
    acc
}

impl BoxRoom {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|k| p[k].abs() < self.half_extents[k])
    }

    /// Distance along unit `dir` from an interior `origin` to the walls.
    pub fn ray_depth(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        if !self.contains(origin) {
            return None;
        }
        (0..3)
            .filter(|&k| dir[k] != 0.0)
            .map(|k| (self.half_extents[k] * dir[k].signum() - origin[k]) / dir[k])
            .min_by(f64::total_cmp)
    }

    pub fn color_at(&self, p: &Vector3<f64>) -> [f64; 3] {
        let mut c = [0.0; 3];
        for (ch, v) in c.iter_mut().enumerate() {
            let seed = self.seed.wrapping_add(ch as u64 * 1_000_003);
            let mut amp = 0.5;
            let mut freq = self.frequency;
            let mut sum = 0.0;
            for octave in 0..3 {
                sum += amp * value_noise(p * freq, seed.wrapping_add(octave * 77));
                amp *= 0.5;
                freq *= 2.0;
            }
            *v = 255.0 * sum / 0.875;
        }
        c
    }

    /// Equirectangular render with `ss x ss` supersampling per pixel.
    pub fn render(&self, pose: &CameraPose, size: ImageSize, ss: u32) -> EquirectImage {
        let ss = ss.max(1);
        let w = size.width();
        let pixels: Vec<Rgb> = (0..size.height())
            .into_par_iter()
            .flat_map_iter(|j| {
                (0..w).map(move |i| {
                    let mut acc = [0.0; 3];
                    for sj in 0..ss {
                        for si in 0..ss {
                            let px = PixelCoord::new(
                                i as f64 + (si as f64 + 0.5) / ss as f64,
                                j as f64 + (sj as f64 + 0.5) / ss as f64,
                            );
                            let dir = pose.ray_direction(&pixel_to_bearing(px, size));
                            let t = self.ray_depth(&pose.center, &dir).unwrap_or(0.0);
                            let c = self.color_at(&(pose.center + dir * t));
                            for k in 0..3 {
                                acc[k] += c[k];
                            }
                        }
                    }
                    to_rgb8(acc.map(|v| v / (ss * ss) as f64))
                })
            })
            .collect();
        EquirectImage::new(size, pixels).expect("render size matches")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rig_respects_spacing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rig = random_planar_rig(&mut rng, 6, 2.0);
        assert_eq!(rig.len(), 6);
        for (k, c) in rig.centers.iter().enumerate() {
            assert_eq!(c.z, 0.0);
            for o in &rig.centers[k + 1..] {
                assert!((c - o).norm() > 0.5);
            }
        }
    }

    #[test]
    fn camera0_frame_gauge() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rig = random_planar_rig(&mut rng, 4, 2.0);
        let p = Vector3::new(1.0, 2.0, 0.3);
        let (moved, map) = to_camera0_frame(&rig);
        assert_eq!(moved.thetas[0], 0.0);
        assert_abs_diff_eq!(moved.centers[0], Vector3::zeros(), epsilon = 1e-15);
        // bearings are unchanged by the change of frame
        for k in 0..4 {
            let a = rig.pose(k).project(&p).unwrap();
            let b = moved.pose(k).project(&map(&p)).unwrap();
            assert_abs_diff_eq!(*a.vector(), *b.vector(), epsilon = 1e-12);
        }
    }

    #[test]
    fn depth_hits_walls() {
        let room = BoxRoom::default();
        let o = Vector3::new(1.0, 0.5, 0.0);
        assert_abs_diff_eq!(room.ray_depth(&o, &Vector3::x()).unwrap(), 3.0);
        assert_abs_diff_eq!(room.ray_depth(&o, &-Vector3::z()).unwrap(), 2.0);
        let d = Vector3::new(1.0, 1.0, 0.0).normalize();
        let t = room.ray_depth(&o, &d).unwrap();
        let hit = o + d * t;
        assert_abs_diff_eq!(hit.y, 3.0, epsilon = 1e-12);
        assert!(room.ray_depth(&Vector3::new(9.0, 0.0, 0.0), &d).is_none());
    }

    #[test]
    fn texture_is_deterministic_and_varied() {
        let room = BoxRoom::default();
        let p = Vector3::new(4.0, 0.3, -0.7);
        assert_eq!(room.color_at(&p), room.color_at(&p));
        let samples: Vec<f64> = (0..200)
            .map(|k| room.color_at(&Vector3::new(4.0, k as f64 * 0.029, 0.1))[0])
            .collect();
        let mean = samples.iter().sum::<f64>() / 200.0;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 200.0;
        assert!(var.sqrt() > 10.0);
        assert!(samples.iter().all(|v| (0.0..=255.0).contains(v)));
    }

    #[test]
    fn render_matches_ray_cast() {
        let room = BoxRoom::default();
        let pose = CameraPose {
            rotation: yaw_matrix(0.4),
            center: Vector3::new(0.5, -0.2, 0.1),
        };
        let size = ImageSize::new(64, 32).unwrap();
        let img = room.render(&pose, size, 1);
        let b = pixel_to_bearing(PixelCoord::center_of(10, 12), size);
        let dir = pose.ray_direction(&b);
        let t = room.ray_depth(&pose.center, &dir).unwrap();
        assert_eq!(img.get(10, 12), to_rgb8(room.color_at(&(pose.center + dir * t))));
    }
}
