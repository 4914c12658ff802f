//! Synthetic fixtures with exact ground truth: rendered room panoramas, exact
//! match files and a `truth.json` describing cameras and points.

use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use spheresfm_core::correspondence::{write_matches, MatchRecord};
use spheresfm_core::multiview::{yaw_matrix, PlanarRig};
use spheresfm_core::synth::{random_planar_rig, BoxRoom};
use spheresfm_core::{bearing_to_pixel, CameraPose, ImageSize};

use crate::error::{CliError, Result};
use crate::project::{matrix_to_rows, write_atomic};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixtureKind {
    /// Two random cameras, 50 wall points.
    TwoView,
    /// Six random cameras, 12 wall points seen by all.
    SixView,
    /// Two fixed cameras with a wide baseline for dense matching, 50 points.
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthCamera {
    pub id: String,
    pub image: String,
    pub theta: f64,
    pub center: [f64; 3],
    /// World to camera, row major.
    pub rotation: [f64; 9],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub kind: String,
    pub width: u32,
    pub height: u32,
    pub cameras: Vec<TruthCamera>,
    pub points: Vec<[f64; 3]>,
    /// Match files, one per camera pair.
    pub matches: Vec<String>,
}

impl Truth {
    pub fn poses(&self) -> Vec<CameraPose> {
        self.cameras
            .iter()
            .map(|c| CameraPose {
                rotation: yaw_matrix(c.theta),
                center: Vector3::from(c.center),
            })
            .collect()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("truth.json");
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(path.display(), e))?;
        serde_json::from_str(&text).map_err(|e| CliError::malformed(e.to_string()))
    }
}

fn wall_points(rng: &mut ChaCha8Rng, room: &BoxRoom, origin: &Vector3<f64>, n: usize) -> Vec<Vector3<f64>> {
    (0..n)
        .map(|_| loop {
            let d = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if let Some(d) = d.try_normalize(1e-3) {
                break origin + d * room.ray_depth(origin, &d).expect("origin inside the room");
            }
        })
        .collect()
}

/// Writes the fixture into `dir` and returns its description.
pub fn generate(dir: &Path, kind: FixtureKind, width: u32, seed: u64) -> Result<Truth> {
    let size = ImageSize::new(width, width / 2)?;
    let room = BoxRoom::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rig, n_points, name) = match kind {
        FixtureKind::TwoView => (random_planar_rig(&mut rng, 2, 1.5), 50, "two-view"),
        FixtureKind::SixView => (random_planar_rig(&mut rng, 6, 1.5), 12, "six-view"),
        FixtureKind::Dense => (
            PlanarRig {
                thetas: vec![0.0, 0.35],
                centers: vec![Vector3::new(-0.4, -0.2, 0.0), Vector3::new(0.4, 0.3, 0.0)],
            },
            50,
            "dense",
        ),
    };
    let poses = rig.poses();
    let centroid = rig.centers.iter().sum::<Vector3<f64>>() / rig.len() as f64;
    let points = wall_points(&mut rng, &room, &centroid, n_points);

    let mut cameras = Vec::new();
    for (k, pose) in poses.iter().enumerate() {
        let id = format!("cam{k}");
        let image = format!("images/{id}.png");
        let img = room.render(pose, size, 2);
        let mut buf = std::io::Cursor::new(Vec::new());
        image::DynamicImage::from(img.to_rgb_image()).write_to(&mut buf, image::ImageFormat::Png)?;
        write_atomic(&dir.join(&image), &buf.into_inner())?;
        cameras.push(TruthCamera {
            id,
            image,
            theta: rig.thetas[k],
            center: rig.centers[k].into(),
            rotation: matrix_to_rows(&pose.rotation),
        });
    }

    let mut matches = Vec::new();
    for i in 0..poses.len() {
        for j in i + 1..poses.len() {
            let records: Vec<MatchRecord> = points
                .iter()
                .map(|p| {
                    let pa = bearing_to_pixel(&poses[i].project(p).expect("points are off-center"), size);
                    let pb = bearing_to_pixel(&poses[j].project(p).expect("points are off-center"), size);
                    MatchRecord {
                        image_a: cameras[i].id.clone(),
                        image_b: cameras[j].id.clone(),
                        xa: pa.x,
                        ya: pa.y,
                        xb: pb.x,
                        yb: pb.y,
                        face_a: None,
                        face_b: None,
                        face_size: None,
                        score: None,
                    }
                })
                .collect();
            let rel = format!("matches/{}__{}.jsonl", cameras[i].id, cameras[j].id);
            write_atomic(&dir.join(&rel), write_matches(&records).as_bytes())?;
            matches.push(rel);
        }
    }

    let truth = Truth {
        kind: name.to_owned(),
        width: size.width(),
        height: size.height(),
        cameras,
        points: points.iter().map(|p| (*p).into()).collect(),
        matches,
    };
    let mut text = serde_json::to_string_pretty(&truth).expect("truth serializes");
    text.push('\n');
    write_atomic(&dir.join("truth.json"), text.as_bytes())?;
    Ok(truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use spheresfm_core::correspondence::import_matches;
    use spheresfm_core::pixel_to_bearing;

    #[test]
    fn six_view_matches_are_exact() {
        let dir = tempfile::tempdir().unwrap();
        let truth = generate(dir.path(), FixtureKind::SixView, 64, 3).unwrap();
        assert_eq!(truth.cameras.len(), 6);
        assert_eq!(truth.matches.len(), 15);
        let size = ImageSize::new(64, 32).unwrap();
        let text = std::fs::read_to_string(dir.path().join(&truth.matches[4])).unwrap();
        let corrs = import_matches(&text, |_| Some(size)).unwrap();
        assert_eq!(corrs.len(), 12);
        let poses = truth.poses();
        let ia: usize = corrs[0].image_a[3..].parse().unwrap();
        for (c, p) in corrs.iter().zip(&truth.points) {
            let b = pixel_to_bearing(c.pa, size);
            let expected = poses[ia].project(&Vector3::from(*p)).unwrap();
            assert!((b.vector() - expected.vector()).norm() < 1e-12);
        }
        assert!(dir.path().join("images/cam5.png").is_file());
        assert_eq!(Truth::load(dir.path()).unwrap(), truth);
    }

    #[test]
    fn same_seed_same_bytes() {
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate(d1.path(), FixtureKind::TwoView, 32, 9).unwrap();
        generate(d2.path(), FixtureKind::TwoView, 32, 9).unwrap();
        for f in ["truth.json", "images/cam1.png", "matches/cam0__cam1.jsonl"] {
            assert_eq!(
                std::fs::read(d1.path().join(f)).unwrap(),
                std::fs::read(d2.path().join(f)).unwrap()
            );
        }
    }
}
