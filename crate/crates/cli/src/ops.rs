//! Pipeline steps over a loaded project. Every step computes its results
//! before touching disk, writes products atomically and saves the project
//! last, so a failed step leaves the previous state intact.

use std::io::Cursor;
use std::path::Path;

use nalgebra::Vector3;
use serde_json::{json, Value};

use spheresfm_core::correspondence::{augment_pool, build_tracks, import_matches, Source};
use spheresfm_core::dense::{compute_disparity, dense_cloud, rectification_rotations, rectify_pair, RectifiedPair};
use spheresfm_core::epipolar::{epipolar_curve, solve_two_view, BearingPair, FitMethod};
use spheresfm_core::multiview::{register_planar, triangulate_multiview, yaw_matrix, PairEstimate, RefineParams};
use spheresfm_core::pfm::{disparity_preview, read_pfm, write_pfm};
use spheresfm_core::ply::{read_ply, write_ply};
use spheresfm_core::raster::Raster;
use spheresfm_core::sphere_cam::to_rgb8;
use spheresfm_core::{pixel_to_bearing, CameraPose, EquirectImage, ImageSize, PixelCoord, Rgb};

use crate::config::{Config, EstimateMethod};
use crate::error::{CliError, ErrorKind, Result};
use crate::project::{
    matrix_to_rows, normalize_pair, write_atomic, DenseEntry, ImageEntry, Observation, PointEntry, Project,
    ProjectState, RigEntry, StoredSolution, TrackEntry,
};

pub const POSES_FILE: &str = "poses.json";

fn encode_png(img: image::DynamicImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

fn check_pixel(p: PixelCoord, size: ImageSize, what: &str) -> Result<()> {
    let inside = p.x.is_finite()
        && p.y.is_finite()
        && (0.0..=size.width() as f64).contains(&p.x)
        && (0.0..=size.height() as f64).contains(&p.y);
    if inside {
        Ok(())
    } else {
        Err(CliError::malformed(format!("{what} ({}, {}) is outside the image", p.x, p.y)))
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.')
        && !id.starts_with('.')
}

/// Copies `file` into `images/` under `id` (the file stem by default).
pub fn add_image(project: &mut Project, file: &Path, id: Option<&str>) -> Result<ImageEntry> {
    let id = match id {
        Some(id) => id.to_owned(),
        None => file
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    if !valid_id(&id) {
        return Err(CliError::malformed(format!(
            "image id {id:?} must be non-empty ASCII letters, digits, '-', '_' or '.'"
        )));
    }
    if project.state.images.iter().any(|i| i.id == id) {
        return Err(CliError::new(ErrorKind::Malformed, "DuplicateId", format!("image {id} already exists")));
    }
    let bytes = std::fs::read(file).map_err(|e| CliError::io(file.display(), e))?;
    let img = image::load_from_memory(&bytes)?;
    let size = ImageSize::new(img.width(), img.height())?;
    let ext = file
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_else(|| "png".into());
    let rel = format!("images/{id}.{ext}");
    write_atomic(&project.path(&rel), &bytes)?;
    let entry = ImageEntry {
        id,
        path: rel,
        width: size.width(),
        height: size.height(),
    };
    project.state.images.push(entry.clone());
    project.save()?;
    Ok(entry)
}

/// Appends a manual pair with `pa` in image `a`. Returns the new id.
pub fn add_correspondence(project: &mut Project, a: &str, b: &str, pa: PixelCoord, pb: PixelCoord) -> Result<u64> {
    check_pixel(pa, project.state.image(a)?.size(), "point a")?;
    check_pixel(pb, project.state.image(b)?.size(), "point b")?;
    let (_, _, swapped) = normalize_pair(a, b);
    let (pa, pb) = if swapped { (pb, pa) } else { (pa, pb) };
    let id = project.state.pair_mut(a, b)?.push(pa, pb, Source::Manual);
    project.save()?;
    Ok(id)
}

pub fn delete_correspondence(project: &mut Project, a: &str, b: &str, id: u64) -> Result<()> {
    let pair = project.state.pair_mut(a, b)?;
    let before = pair.correspondences.len();
    pair.correspondences.retain(|c| c.id != id);
    if pair.correspondences.len() == before {
        return Err(CliError::not_found("correspondence", id));
    }
    project.save()
}

/// Correspondences of a pair oriented as the caller asked, with inlier flags
/// from the current solution.
pub fn list_correspondences(state: &ProjectState, a: &str, b: &str) -> Result<Value> {
    state.image(a)?;
    state.image(b)?;
    let (_, _, swapped) = normalize_pair(a, b);
    let Some(pair) = state.pair(a, b) else {
        return Ok(json!({ "a": a, "b": b, "correspondences": [] }));
    };
    let list: Vec<Value> = pair
        .correspondences
        .iter()
        .map(|c| {
            let (pa, pb) = if swapped { (c.pb, c.pa) } else { (c.pa, c.pb) };
            let inlier = pair.solution.as_ref().and_then(|s| {
                s.correspondence_ids
                    .iter()
                    .position(|&i| i == c.id)
                    .map(|k| s.inlier_mask[k])
            });
            json!({
                "id": c.id, "pa": pa, "pb": pb, "source": c.source,
                "residual": c.residual, "inlier": inlier,
            })
        })
        .collect();
    Ok(json!({ "a": a, "b": b, "correspondences": list }))
}

/// Imports a matches file for the pair `(a, b)`. Every record must belong to
/// that pair, in either orientation.
pub fn import_pair_matches(project: &mut Project, a: &str, b: &str, text: &str, manual: bool) -> Result<usize> {
    project.state.image(a)?;
    project.state.image(b)?;
    let state = &project.state;
    let parsed = import_matches(text, |id| state.image(id).ok().map(|i| i.size()))?;
    let (na, nb, _) = normalize_pair(a, b);
    let mut oriented = Vec::with_capacity(parsed.len());
    for (k, c) in parsed.into_iter().enumerate() {
        let c = if c.image_a == na && c.image_b == nb {
            c
        } else if c.image_a == nb && c.image_b == na {
            c.swapped()
        } else {
            return Err(CliError::new(
                ErrorKind::Malformed,
                "PairMismatch",
                format!("record {} is for ({}, {}), not ({a}, {b})", k + 1, c.image_a, c.image_b),
            ));
        };
        oriented.push(c);
    }
    let source = if manual { Source::Manual } else { Source::Imported };
    let pair = project.state.pair_mut(a, b)?;
    for c in &oriented {
        pair.push(c.pa, c.pb, source);
    }
    project.save()?;
    Ok(oriented.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimateMode {
    /// Linear fit on manual and augmented matches.
    Linear,
    /// Linear fit on manual matches only.
    ManualOnly,
    /// RANSAC over every match.
    Ransac,
}

impl EstimateMode {
    pub fn from_config(config: &Config) -> Self {
        match config.estimate {
            EstimateMethod::Linear => Self::Linear,
            EstimateMethod::Ransac => Self::Ransac,
        }
    }
}

pub fn solution_json(a: &str, b: &str, s: &StoredSolution) -> Value {
    json!({
        "a": a, "b": b, "method": s.method,
        "f": s.f, "e1": s.e1, "e2": s.e2, "rotation": s.rotation,
        "correspondence_ids": s.correspondence_ids,
        "inlier_mask": s.inlier_mask,
        "inliers": s.inlier_mask.iter().filter(|&&m| m).count(),
    })
}

/// Fits the pair's geometry and stores it in the pair's storage orientation.
pub fn estimate_pair(project: &mut Project, config: &Config, a: &str, b: &str, mode: EstimateMode) -> Result<Value> {
    let state = &project.state;
    let (na, nb, _) = normalize_pair(a, b);
    let (size_a, size_b) = (state.image(na)?.size(), state.image(nb)?.size());
    let empty = crate::project::PairEntry::new(na, nb);
    let pair = state.pair(na, nb).unwrap_or(&empty);
    let used: Vec<_> = pair
        .correspondences
        .iter()
        .filter(|c| match mode {
            EstimateMode::ManualOnly => c.source == Source::Manual,
            EstimateMode::Linear => c.source != Source::Imported,
            EstimateMode::Ransac => true,
        })
        .collect();
    let bearings: Vec<BearingPair> = used
        .iter()
        .map(|c| BearingPair::new(pixel_to_bearing(c.pa, size_a), pixel_to_bearing(c.pb, size_b)))
        .collect();
    let (method, fit) = match mode {
        EstimateMode::Ransac => ("ransac", FitMethod::Ransac(config.ransac_params())),
        _ => ("linear", FitMethod::Linear),
    };
    let solution = solve_two_view(&bearings, fit)?;
    let stored = StoredSolution::new(method, &solution, used.iter().map(|c| c.id).collect());
    let out = solution_json(na, nb, &stored);
    project.state.pair_mut(na, nb)?.solution = Some(stored);
    project.state.invalidate_pair_products(na, nb);
    project.save()?;
    Ok(out)
}

/// Re-screens the pair's imported and augmented matches against the current
/// solution. Admitted ones become augmented, the rest revert to imported.
pub fn augment(project: &mut Project, config: &Config, a: &str, b: &str, epsilon: Option<f64>) -> Result<Value> {
    let epsilon = epsilon.unwrap_or(config.filter_epsilon);
    if !(epsilon > 0.0) {
        return Err(CliError::malformed("epsilon must be positive"));
    }
    let (na, nb, _) = normalize_pair(a, b);
    let (size_a, size_b) = (project.state.image(na)?.size(), project.state.image(nb)?.size());
    let pair = project
        .state
        .pair(na, nb)
        .ok_or_else(|| CliError::prerequisite(format!("pair ({na}, {nb}) has no solution; run estimate-pair")))?;
    let solution = pair
        .solution
        .as_ref()
        .ok_or_else(|| CliError::prerequisite(format!("pair ({na}, {nb}) has no solution; run estimate-pair")))?
        .to_solution();
    let manual: Vec<_> = pair
        .correspondences
        .iter()
        .filter(|c| c.source == Source::Manual)
        .map(|c| pair.to_correspondence(c))
        .collect();
    let candidates: Vec<_> = pair
        .correspondences
        .iter()
        .filter(|c| c.source != Source::Manual)
        .collect();
    let imported: Vec<_> = candidates.iter().map(|c| pair.to_correspondence(c)).collect();
    let pool = augment_pool(&manual, &imported, &solution.f, epsilon, size_a, size_b);
    // augment_pool keeps manual matches first and admitted ones in input order
    let mut admitted = pool[manual.len()..].iter().peekable();
    let mut verdicts = Vec::with_capacity(candidates.len());
    for c in &candidates {
        let hit = admitted.next_if(|k| k.pa == c.pa && k.pb == c.pb);
        verdicts.push(hit.and_then(|k| k.residual));
    }
    let n_candidates = candidates.len();
    let residual = |p: PixelCoord, q: PixelCoord| {
        spheresfm_core::epipolar::epipolar_residual(
            &BearingPair::new(pixel_to_bearing(p, size_a), pixel_to_bearing(q, size_b)),
            &solution.f,
        )
    };
    let pair = project.state.pair_mut(na, nb)?;
    let mut k = 0;
    let mut n_admitted = 0;
    for c in pair.correspondences.iter_mut() {
        c.residual = Some(residual(c.pa, c.pb));
        if c.source == Source::Manual {
            continue;
        }
        c.source = if verdicts[k].is_some() {
            n_admitted += 1;
            Source::Augmented
        } else {
            Source::Imported
        };
        k += 1;
    }
    project.save()?;
    Ok(json!({
        "a": na, "b": nb, "epsilon": epsilon,
        "candidates": n_candidates, "augmented": n_admitted,
        "rejected": n_candidates - n_admitted,
    }))
}

fn rig_poses_json(rig: &RigEntry) -> Value {
    let cameras: Vec<Value> = rig
        .images
        .iter()
        .enumerate()
        .map(|(k, id)| {
            json!({
                "id": id, "theta": rig.thetas[k], "center": rig.centers[k],
                "rotation": matrix_to_rows(&yaw_matrix(rig.thetas[k])),
            })
        })
        .collect();
    json!({ "frame": "rig", "gauge": [rig.images[0], rig.images[1]], "cameras": cameras })
}

/// Registers every image from the solved pairs. Image 0 is the origin and
/// the unit baseline runs from image 0 to image 1.
pub fn register(project: &mut Project) -> Result<Value> {
    let state = &project.state;
    let n = state.images.len();
    if n < 2 {
        return Err(CliError::prerequisite("register needs at least two images"));
    }
    let mut estimates = Vec::new();
    for p in &state.pairs {
        if let Some(s) = &p.solution {
            let (i, j) = (state.image_index(&p.a)?, state.image_index(&p.b)?);
            estimates.push(PairEstimate::from_solution(i, j, &s.to_solution()));
        }
    }
    if estimates.is_empty() {
        return Err(CliError::prerequisite("no solved pairs; run estimate-pair first"));
    }
    let rig = register_planar(&estimates, n, &RefineParams::default())?;
    let entry = RigEntry::from_rig(state.images.iter().map(|i| i.id.clone()).collect(), &rig);
    let poses = rig_poses_json(&entry);
    let mut text = serde_json::to_string_pretty(&poses).expect("poses serialize");
    text.push('\n');
    write_atomic(&project.path(POSES_FILE), text.as_bytes())?;
    project.state.rig = Some(entry);
    project.save()?;
    Ok(poses)
}

/// Cameras used for triangulation: the registered rig, or the two cameras of
/// the only solved pair with the first at the origin.
fn camera_set(state: &ProjectState) -> Result<(Vec<String>, Vec<CameraPose>, String)> {
    if let Some(rig) = &state.rig {
        return Ok((rig.images.clone(), rig.to_rig().poses(), "rig".into()));
    }
    let solved: Vec<_> = state.pairs.iter().filter(|p| p.solution.is_some()).collect();
    match solved[..] {
        [p] => {
            let s = p.solution.as_ref().unwrap().to_solution();
            let second = CameraPose {
                rotation: s.rotation,
                center: *s.e1.vector(),
            };
            Ok((
                vec![p.a.clone(), p.b.clone()],
                vec![CameraPose::identity(), second],
                format!("pair:{}:{}", p.a, p.b),
            ))
        }
        [] => Err(CliError::prerequisite("no solved pairs; run estimate-pair first")),
        _ => Err(CliError::prerequisite("several solved pairs; run register first")),
    }
}

fn pose_json(id: &str, pose: &CameraPose) -> Value {
    json!({
        "id": id, "center": <[f64; 3]>::from(pose.center),
        "rotation": matrix_to_rows(&pose.rotation),
    })
}

/// Builds tracks from manual and augmented matches and triangulates each one
/// seen by at least two cameras.
pub fn triangulate(project: &mut Project) -> Result<Value> {
    let state = &project.state;
    let (ids, poses, frame) = camera_set(state)?;
    let images: Vec<(String, ImageSize)> = ids
        .iter()
        .map(|id| Ok((id.clone(), state.image(id)?.size())))
        .collect::<Result<_>>()?;
    let corrs: Vec<_> = state
        .pairs
        .iter()
        .filter(|p| ids.contains(&p.a) && ids.contains(&p.b))
        .flat_map(|p| {
            p.correspondences
                .iter()
                .filter(|c| c.source != Source::Imported)
                .map(|c| p.to_correspondence(c))
        })
        .collect();
    let set = build_tracks(&corrs, &images)?;
    let sizes: Vec<ImageSize> = images.iter().map(|i| i.1).collect();
    let mut loaded: Vec<Option<EquirectImage>> = vec![None; ids.len()];
    let mut tracks = Vec::new();
    let mut points = Vec::new();
    let mut failed = 0;
    for t in &set.tracks {
        tracks.push(TrackEntry {
            id: t.id,
            observations: t
                .observations
                .iter()
                .map(|(&cam, p)| Observation {
                    image: ids[cam].clone(),
                    x: p.x,
                    y: p.y,
                })
                .collect(),
            inconsistent: set.inconsistent.contains(&t.id),
        });
        if t.observations.len() < 2 {
            continue;
        }
        let Ok(mp) = triangulate_multiview(t, &poses, &sizes) else {
            failed += 1;
            continue;
        };
        let (&cam, &px) = t.observations.iter().next().unwrap();
        if loaded[cam].is_none() {
            loaded[cam] = Some(project.load_image(&ids[cam])?);
        }
        let color = to_rgb8(loaded[cam].as_ref().unwrap().sample(px));
        points.push(PointEntry {
            track: t.id,
            position: mp.point.into(),
            color,
            rms_residual: mp.rms_residual,
        });
    }
    let summary = json!({
        "frame": frame, "tracks": tracks.len(), "inconsistent": set.inconsistent.len(),
        "points": points.len(), "failed": failed,
    });
    project.state.tracks = tracks;
    project.state.points = points;
    project.state.points_frame = Some(frame);
    project.save()?;
    Ok(summary)
}

/// Sparse cloud with the cameras of its frame.
pub fn pointcloud(state: &ProjectState) -> Result<Value> {
    let cameras: Vec<Value> = match (&state.points_frame, &state.rig) {
        (None, None) => Vec::new(),
        _ => {
            let (ids, poses, _) = camera_set(state)?;
            ids.iter().zip(&poses).map(|(id, p)| pose_json(id, p)).collect()
        }
    };
    let points: Vec<Value> = state
        .points
        .iter()
        .map(|p| {
            let observations = state
                .tracks
                .iter()
                .find(|t| t.id == p.track)
                .map(|t| t.observations.clone())
                .unwrap_or_default();
            json!({
                "track": p.track, "position": p.position, "color": p.color,
                "rms_residual": p.rms_residual, "observations": observations,
            })
        })
        .collect();
    Ok(json!({ "frame": state.points_frame, "cameras": cameras, "points": points }))
}

/// Polyline segments in image `b` for a click at `(x, y)` in image `a`.
pub fn curve(state: &ProjectState, config: &Config, a: &str, b: &str, p: PixelCoord) -> Result<Value> {
    let (size_a, size_b) = (state.image(a)?.size(), state.image(b)?.size());
    check_pixel(p, size_a, "click")?;
    let solution = state
        .pair(a, b)
        .and_then(|pair| pair.solution.as_ref())
        .ok_or_else(|| CliError::prerequisite(format!("pair ({a}, {b}) has no solution; solve first")))?
        .to_solution();
    let (_, _, swapped) = normalize_pair(a, b);
    let f = if swapped { solution.f.transposed() } else { solution.f };
    let segments = epipolar_curve(&f, &pixel_to_bearing(p, size_a), size_b, config.curve_samples)?;
    Ok(json!({ "a": a, "b": b, "x": p.x, "y": p.y, "segments": segments }))
}

pub fn summary(state: &ProjectState) -> Value {
    let images: Vec<Value> = state
        .images
        .iter()
        .map(|i| json!({ "id": i.id, "width": i.width, "height": i.height }))
        .collect();
    let pairs: Vec<Value> = state
        .pairs
        .iter()
        .map(|p| {
            let count = |s: Source| p.correspondences.iter().filter(|c| c.source == s).count();
            json!({
                "a": p.a, "b": p.b,
                "correspondences": p.correspondences.len(),
                "manual": count(Source::Manual),
                "imported": count(Source::Imported),
                "augmented": count(Source::Augmented),
                "solved": p.solution.is_some(),
                "inliers": p.solution.as_ref().map(|s| s.inlier_mask.iter().filter(|&&m| m).count()),
            })
        })
        .collect();
    let dense: Vec<Value> = state
        .dense
        .iter()
        .map(|d| {
            json!({
                "a": d.a, "b": d.b, "rectified": true,
                "disparity": d.disparity.is_some(), "valid_pixels": d.valid_pixels,
                "cloud": d.cloud.is_some(), "cloud_points": d.cloud_points,
            })
        })
        .collect();
    json!({
        "images": images, "pairs": pairs,
        "registered": state.rig.is_some(),
        "tracks": state.tracks.len(), "points": state.points.len(),
        "points_frame": state.points_frame, "dense": dense,
    })
}

fn dense_dir(a: &str, b: &str) -> String {
    format!("dense/{a}__{b}")
}

fn solved_pair(state: &ProjectState, a: &str, b: &str) -> Result<(String, String, StoredSolution)> {
    let (na, nb, _) = normalize_pair(a, b);
    state.image(na)?;
    state.image(nb)?;
    let s = state
        .pair(na, nb)
        .and_then(|p| p.solution.clone())
        .ok_or_else(|| CliError::prerequisite(format!("pair ({na}, {nb}) has no solution; run estimate-pair")))?;
    Ok((na.to_owned(), nb.to_owned(), s))
}

/// Rectifies the pair into `dense/<a>__<b>/rect_{a,b}.png`.
pub fn rectify(project: &mut Project, config: &Config, a: &str, b: &str) -> Result<Value> {
    let (a, b, s) = solved_pair(&project.state, a, b)?;
    let rect_size = config.rect_size.unwrap_or(project.state.image(&a)?.size());
    let (img1, img2) = (project.load_image(&a)?, project.load_image(&b)?);
    let pair = rectify_pair(&img1, &img2, &s.to_solution(), rect_size);
    let dir = dense_dir(&a, &b);
    let entry = DenseEntry {
        a: a.clone(),
        b: b.clone(),
        rect_width: rect_size.width(),
        rect_height: rect_size.height(),
        rect_a: format!("{dir}/rect_a.png"),
        rect_b: format!("{dir}/rect_b.png"),
        disparity: None,
        preview: None,
        valid_pixels: None,
        cloud: None,
        cloud_points: None,
        cloud_frame: None,
    };
    write_atomic(&project.path(&entry.rect_a), &encode_png(pair.rect1.to_rgb_image().into())?)?;
    write_atomic(&project.path(&entry.rect_b), &encode_png(pair.rect2.to_rgb_image().into())?)?;
    let out = json!({
        "a": a, "b": b, "rect_a": entry.rect_a, "rect_b": entry.rect_b,
        "columns": pair.cols(), "rows": pair.rows(),
    });
    project.state.invalidate_pair_products(&a, &b);
    project.state.dense.push(entry);
    project.state.dense.sort_by(|p, q| (&p.a, &p.b).cmp(&(&q.a, &q.b)));
    project.save()?;
    Ok(out)
}

fn load_raster(path: &Path) -> Result<Raster> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Raster::from_pixels(w, h, img.pixels().map(|p| p.0).collect())
        .ok_or_else(|| CliError::malformed(format!("{} has inconsistent dimensions", path.display())))
}

fn rectified(project: &Project, a: &str, b: &str) -> Result<(DenseEntry, RectifiedPair, StoredSolution)> {
    let (a, b, s) = solved_pair(&project.state, a, b)?;
    let entry = project
        .state
        .dense_entry(&a, &b)
        .cloned()
        .ok_or_else(|| CliError::prerequisite(format!("pair ({a}, {b}) is not rectified; run rectify")))?;
    let rect_size = ImageSize::new(entry.rect_width, entry.rect_height)?;
    let solution = s.to_solution();
    let (r_rect1, r_rect2) = rectification_rotations(&solution.e1, &solution.rotation);
    let pair = RectifiedPair {
        rect1: load_raster(&project.path(&entry.rect_a))?,
        rect2: load_raster(&project.path(&entry.rect_b))?,
        r_rect1,
        r_rect2,
        rect_size,
    };
    Ok((entry, pair, s))
}

fn replace_dense(project: &mut Project, entry: DenseEntry) {
    if let Some(slot) = project.state.dense.iter_mut().find(|d| d.a == entry.a && d.b == entry.b) {
        *slot = entry;
    }
}

/// Block matching on the rectified pair; writes the PFM map and a PNG preview.
pub fn disparity(project: &mut Project, config: &Config, a: &str, b: &str) -> Result<Value> {
    let (mut entry, pair, _) = rectified(project, a, b)?;
    let map = compute_disparity(&pair, &config.dense.params())?;
    let dir = dense_dir(&entry.a, &entry.b);
    let pfm = format!("{dir}/disparity.pfm");
    let preview = format!("{dir}/disparity.png");
    write_atomic(&project.path(&pfm), &write_pfm(&map))?;
    write_atomic(&project.path(&preview), &encode_png(disparity_preview(&map).into())?)?;
    let valid = map.valid_count();
    let out = json!({
        "a": entry.a, "b": entry.b, "disparity": pfm, "preview": preview,
        "valid_pixels": valid, "total_pixels": map.data.len(),
    });
    entry.disparity = Some(pfm);
    entry.preview = Some(preview);
    entry.valid_pixels = Some(valid);
    entry.cloud = None;
    entry.cloud_points = None;
    entry.cloud_frame = None;
    replace_dense(project, entry);
    project.save()?;
    Ok(out)
}

/// Dense cloud of the pair. With a registered rig it is placed in the rig
/// frame at the rig's baseline length, otherwise it stays in camera `a`'s
/// frame with a unit baseline.
pub fn dense(project: &mut Project, a: &str, b: &str) -> Result<Value> {
    let (mut entry, pair, _) = rectified(project, a, b)?;
    let pfm = entry
        .disparity
        .clone()
        .ok_or_else(|| CliError::prerequisite(format!("pair ({}, {}) has no disparity; run disparity", entry.a, entry.b)))?;
    let bytes = std::fs::read(project.path(&pfm)).map_err(|e| CliError::io(&pfm, e))?;
    let map = read_pfm(&bytes)?;
    let rig = project.state.rig.as_ref().and_then(|r| {
        let ia = r.images.iter().position(|i| *i == entry.a)?;
        let ib = r.images.iter().position(|i| *i == entry.b)?;
        let rig = r.to_rig();
        Some((rig.pose(ia), rig.pose(ib)))
    });
    let (baseline, frame) = match &rig {
        Some((pa, pb)) => ((pb.center - pa.center).norm(), "rig".to_owned()),
        None => (1.0, format!("pair:{}:{}", entry.a, entry.b)),
    };
    let cloud = dense_cloud(&map, &pair, baseline)?;
    let points: Vec<(Vector3<f64>, Rgb)> = cloud
        .iter()
        .map(|p| {
            let pos = match &rig {
                Some((pa, _)) => pa.center + pa.rotation.transpose() * p.position,
                None => p.position,
            };
            (pos, p.color)
        })
        .collect();
    let text = write_ply(&points, "dense", &frame)?;
    let rel = format!("{}/cloud.ply", dense_dir(&entry.a, &entry.b));
    write_atomic(&project.path(&rel), text.as_bytes())?;
    let out = json!({
        "a": entry.a, "b": entry.b, "cloud": rel, "points": points.len(),
        "valid_pixels": map.valid_count(), "frame": frame, "baseline": baseline,
    });
    entry.cloud = Some(rel);
    entry.cloud_points = Some(points.len());
    entry.cloud_frame = Some(frame);
    replace_dense(project, entry);
    project.save()?;
    Ok(out)
}

/// The stored dense PLY of a pair.
pub fn dense_ply(project: &Project, a: &str, b: &str) -> Result<Vec<u8>> {
    let (na, nb, _) = normalize_pair(a, b);
    project.state.image(na)?;
    project.state.image(nb)?;
    let rel = project
        .state
        .dense_entry(na, nb)
        .and_then(|d| d.cloud.clone())
        .ok_or_else(|| CliError::prerequisite(format!("pair ({na}, {nb}) has no dense cloud; run dense")))?;
    std::fs::read(project.path(&rel)).map_err(|e| CliError::io(rel, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyKind {
    Sparse,
    Dense,
}

/// PLY text of the sparse points, or of every dense cloud concatenated in
/// pair order. Dense clouds must share a frame.
pub fn export_ply(project: &Project, kind: PlyKind) -> Result<String> {
    match kind {
        PlyKind::Sparse => {
            let points: Vec<(Vector3<f64>, Rgb)> = project
                .state
                .points
                .iter()
                .map(|p| (Vector3::from(p.position), p.color))
                .collect();
            let frame = project.state.points_frame.as_deref().unwrap_or("none");
            Ok(write_ply(&points, "sparse", frame)?)
        }
        PlyKind::Dense => {
            let clouds: Vec<&DenseEntry> = project.state.dense.iter().filter(|d| d.cloud.is_some()).collect();
            let frames: Vec<String> = clouds
                .iter()
                .map(|d| d.cloud_frame.clone().unwrap_or_else(|| format!("pair:{}:{}", d.a, d.b)))
                .collect();
            if frames.windows(2).any(|w| w[0] != w[1]) {
                return Err(CliError::prerequisite(
                    "dense clouds are in different frames; register the cameras and rerun dense",
                ));
            }
            let mut points = Vec::new();
            for d in &clouds {
                let rel = d.cloud.as_ref().unwrap();
                let text = std::fs::read_to_string(project.path(rel)).map_err(|e| CliError::io(rel, e))?;
                points.extend(read_ply(&text)?.into_iter().map(|v| (v.position.cast::<f64>(), v.color)));
            }
            let frame = frames.first().map(String::as_str).unwrap_or("none");
            Ok(write_ply(&points, "dense", frame)?)
        }
    }
}
