//! The on-disk project: `project.json` plus the rasters and products it
//! references by path relative to the project directory.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use spheresfm_core::correspondence::{Correspondence, Source};
use spheresfm_core::epipolar::{FundamentalMatrix, TwoViewSolution};
use spheresfm_core::multiview::PlanarRig;
use spheresfm_core::sphere_cam::rotation_error;
use spheresfm_core::{Bearing, EquirectImage, ImageSize, PixelCoord, Rgb};

use crate::error::{CliError, ErrorKind, Result};

pub const PROJECT_FILE: &str = "project.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    /// Relative to the project directory, `/` separated.
    pub path: String,
    pub width: u32,
    pub height: u32,
}

impl ImageEntry {
    pub fn size(&self) -> ImageSize {
        ImageSize::new(self.width, self.height).expect("validated on load")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredCorrespondence {
    pub id: u64,
    pub pa: PixelCoord,
    pub pb: PixelCoord,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual: Option<f64>,
}

/// A solved pair, oriented with the pair's first image as camera 1.
/// Matrices are row major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredSolution {
    pub method: String,
    pub f: [f64; 9],
    pub e1: [f64; 3],
    pub e2: [f64; 3],
    pub rotation: [f64; 9],
    /// Correspondences that entered the fit, aligned with `inlier_mask`.
    pub correspondence_ids: Vec<u64>,
    pub inlier_mask: Vec<bool>,
}

pub fn matrix_to_rows(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            // adding zero turns -0.0 into 0.0
            out[3 * r + c] = m[(r, c)] + 0.0;
        }
    }
    out
}

pub fn rows_to_matrix(v: &[f64; 9]) -> Matrix3<f64> {
    Matrix3::from_row_slice(v)
}

impl StoredSolution {
    pub fn new(method: &str, solution: &TwoViewSolution, ids: Vec<u64>) -> Self {
        Self {
            method: method.to_owned(),
            f: matrix_to_rows(solution.f.matrix()),
            e1: (*solution.e1.vector()).into(),
            e2: (*solution.e2.vector()).into(),
            rotation: matrix_to_rows(&solution.rotation),
            correspondence_ids: ids,
            inlier_mask: solution.inlier_mask.clone(),
        }
    }

    pub fn to_solution(&self) -> TwoViewSolution {
        TwoViewSolution {
            f: FundamentalMatrix::from_raw(rows_to_matrix(&self.f)),
            e1: Bearing::new(Vector3::from(self.e1)).expect("validated on load"),
            e2: Bearing::new(Vector3::from(self.e2)).expect("validated on load"),
            rotation: rows_to_matrix(&self.rotation),
            inlier_mask: self.inlier_mask.clone(),
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let f = rows_to_matrix(&self.f);
        if (f.norm() - 1.0).abs() > 1e-9 {
            return Err("F does not have unit norm".into());
        }
        let s = f.svd(false, false).singular_values;
        if s.min() > 1e-9 {
            return Err("F is not rank two".into());
        }
        for e in [self.e1, self.e2] {
            if (Vector3::from(e).norm() - 1.0).abs() > 1e-9 {
                return Err("epipole is not a unit vector".into());
            }
        }
        if rotation_error(&rows_to_matrix(&self.rotation)) > 1e-9 {
            return Err("rotation is not orthonormal".into());
        }
        if self.correspondence_ids.len() != self.inlier_mask.len() {
            return Err("inlier mask and correspondence ids differ in length".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    /// Lexicographically smaller image id.
    pub a: String,
    pub b: String,
    pub next_id: u64,
    pub correspondences: Vec<StoredCorrespondence>,
    #[serde(default)]
    pub solution: Option<StoredSolution>,
}

impl PairEntry {
    pub fn new(a: &str, b: &str) -> Self {
        Self {
            a: a.to_owned(),
            b: b.to_owned(),
            next_id: 0,
            correspondences: Vec::new(),
            solution: None,
        }
    }

    pub fn push(&mut self, pa: PixelCoord, pb: PixelCoord, source: Source) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.correspondences.push(StoredCorrespondence {
            id,
            pa,
            pb,
            source,
            residual: None,
        });
        id
    }

    pub fn to_correspondence(&self, c: &StoredCorrespondence) -> Correspondence {
        Correspondence {
            image_a: self.a.clone(),
            image_b: self.b.clone(),
            pa: c.pa,
            pb: c.pb,
            source: c.source,
            residual: c.residual,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigEntry {
    /// Image ids in camera order.
    pub images: Vec<String>,
    pub thetas: Vec<f64>,
    pub centers: Vec<[f64; 3]>,
}

impl RigEntry {
    pub fn from_rig(images: Vec<String>, rig: &PlanarRig) -> Self {
        Self {
            images,
            thetas: rig.thetas.clone(),
            centers: rig.centers.iter().map(|c| (*c).into()).collect(),
        }
    }

    pub fn to_rig(&self) -> PlanarRig {
        PlanarRig {
            thetas: self.thetas.clone(),
            centers: self.centers.iter().map(|&c| Vector3::from(c)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub image: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackEntry {
    pub id: usize,
    pub observations: Vec<Observation>,
    #[serde(default)]
    pub inconsistent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointEntry {
    pub track: usize,
    pub position: [f64; 3],
    pub color: Rgb,
    pub rms_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseEntry {
    pub a: String,
    pub b: String,
    pub rect_width: u32,
    pub rect_height: u32,
    pub rect_a: String,
    pub rect_b: String,
    #[serde(default)]
    pub disparity: Option<String>,
    #[serde(default)]
    pub preview: Option<String>,
    #[serde(default)]
    pub valid_pixels: Option<usize>,
    #[serde(default)]
    pub cloud: Option<String>,
    #[serde(default)]
    pub cloud_points: Option<usize>,
    #[serde(default)]
    pub cloud_frame: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectState {
    pub version: u32,
    pub images: Vec<ImageEntry>,
    #[serde(default)]
    pub pairs: Vec<PairEntry>,
    #[serde(default)]
    pub rig: Option<RigEntry>,
    #[serde(default)]
    pub tracks: Vec<TrackEntry>,
    /// Frame of `points`: `rig` or `pair:<a>:<b>` (camera `a` at the origin).
    #[serde(default)]
    pub points_frame: Option<String>,
    #[serde(default)]
    pub points: Vec<PointEntry>,
    #[serde(default)]
    pub dense: Vec<DenseEntry>,
}

impl Default for ProjectState {
    fn default() -> Self {
        Self {
            version: FORMAT_VERSION,
            images: Vec::new(),
            pairs: Vec::new(),
            rig: None,
            tracks: Vec::new(),
            points_frame: None,
            points: Vec::new(),
            dense: Vec::new(),
        }
    }
}

/// `(a, b)` in storage order and whether the caller's order was reversed.
pub fn normalize_pair<'s>(a: &'s str, b: &'s str) -> (&'s str, &'s str, bool) {
    if a <= b {
        (a, b, false)
    } else {
        (b, a, true)
    }
}

impl ProjectState {
    pub fn image_index(&self, id: &str) -> Result<usize> {
        self.images
            .iter()
            .position(|i| i.id == id)
            .ok_or_else(|| CliError::not_found("image", id))
    }

    pub fn image(&self, id: &str) -> Result<&ImageEntry> {
        Ok(&self.images[self.image_index(id)?])
    }

    pub fn pair(&self, a: &str, b: &str) -> Option<&PairEntry> {
        let (a, b, _) = normalize_pair(a, b);
        self.pairs.iter().find(|p| p.a == a && p.b == b)
    }

    /// The stored pair, created empty when missing. Both ids must exist.
    pub fn pair_mut(&mut self, a: &str, b: &str) -> Result<&mut PairEntry> {
        self.image(a)?;
        self.image(b)?;
        if a == b {
            return Err(CliError::malformed("a pair needs two different images"));
        }
        let (a, b, _) = normalize_pair(a, b);
        let pos = match self.pairs.iter().position(|p| p.a == a && p.b == b) {
            Some(k) => k,
            None => {
                self.pairs.push(PairEntry::new(a, b));
                self.pairs.sort_by(|p, q| (&p.a, &p.b).cmp(&(&q.a, &q.b)));
                self.pairs.iter().position(|p| p.a == a && p.b == b).unwrap()
            }
        };
        Ok(&mut self.pairs[pos])
    }

    pub fn dense_entry(&self, a: &str, b: &str) -> Option<&DenseEntry> {
        self.dense.iter().find(|d| d.a == a && d.b == b)
    }

    /// Drops products derived from the geometry of pair `(a, b)`.
    pub fn invalidate_pair_products(&mut self, a: &str, b: &str) {
        self.dense.retain(|d| !(d.a == a && d.b == b));
    }

    fn validate(&self, dir: &Path) -> std::result::Result<(), String> {
        if self.version != FORMAT_VERSION {
            return Err(format!("unsupported project version {}", self.version));
        }
        for (k, img) in self.images.iter().enumerate() {
            ImageSize::new(img.width, img.height).map_err(|e| format!("image {}: {e}", img.id))?;
            if !dir.join(&img.path).is_file() {
                return Err(format!("image {} file {} is missing", img.id, img.path));
            }
            if self.images[..k].iter().any(|o| o.id == img.id) {
                return Err(format!("duplicate image id {}", img.id));
            }
        }
        for p in &self.pairs {
            if p.a >= p.b {
                return Err(format!("pair ({}, {}) is not normalized", p.a, p.b));
            }
            for id in [&p.a, &p.b] {
                if !self.images.iter().any(|i| &i.id == id) {
                    return Err(format!("pair references unknown image {id}"));
                }
            }
            if let Some(s) = &p.solution {
                s.validate().map_err(|e| format!("pair ({}, {}): {e}", p.a, p.b))?;
            }
        }
        if let Some(rig) = &self.rig {
            if rig.thetas.len() != rig.images.len() || rig.centers.len() != rig.images.len() {
                return Err("rig arrays differ in length".into());
            }
        }
        Ok(())
    }
}

/// A loaded project rooted at `dir`.
#[derive(Debug, Clone)]
pub struct Project {
    pub dir: PathBuf,
    pub state: ProjectState,
}

impl Project {
    /// Creates `dir` with an empty project and a default config. Refuses to
    /// overwrite an existing project.
    pub fn init(dir: &Path, config: &crate::config::Config) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir.display(), e))?;
        if dir.join(PROJECT_FILE).exists() {
            return Err(CliError::new(
                ErrorKind::Malformed,
                "ProjectExists",
                format!("{} already holds a project", dir.display()),
            ));
        }
        let project = Self {
            dir: dir.to_path_buf(),
            state: ProjectState::default(),
        };
        write_atomic(&dir.join(crate::config::CONFIG_FILE), config.to_json_pretty().as_bytes())?;
        project.save()?;
        Ok(project)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(PROJECT_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                CliError::new(
                    ErrorKind::NotFound,
                    "NoProject",
                    format!("no project at {}", dir.display()),
                )
            } else {
                CliError::io(path.display(), e)
            }
        })?;
        let invalid = |m: String| CliError::new(ErrorKind::Malformed, "InvalidProject", m);
        let state: ProjectState = serde_json::from_str(&text).map_err(|e| invalid(e.to_string()))?;
        state.validate(dir).map_err(invalid)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            state,
        })
    }

    pub fn save(&self) -> Result<()> {
        let mut text = serde_json::to_string_pretty(&self.state).expect("state serializes");
        text.push('\n');
        write_atomic(&self.dir.join(PROJECT_FILE), text.as_bytes())
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn load_image(&self, id: &str) -> Result<EquirectImage> {
        let entry = self.state.image(id)?;
        Ok(EquirectImage::load(self.path(&entry.path))?)
    }
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir.display(), e))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    std::fs::write(&tmp, bytes).map_err(|e| CliError::io(tmp.display(), e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path.display(), e))
}
