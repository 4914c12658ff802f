//! Point correspondences between panoramas: manual and imported matches,
//! cube-map resampling, epipolar filtering and track assembly.
//!
//! Cube faces look along the six axes with a 90° field of view. Face-local
//! pixel coordinates `(u, v)` follow the same continuous convention as the
//! panorama (pixel centers at `+0.5`), `u` grows to the right and `v` grows
//! downward. For the four side faces "down" is world −Z and "right" is the
//! direction of increasing longitude, so a side face looks like the matching
//! crop of the panorama. The +Z face has +Y to the right and +X downward; the
//! −Z face has +Y to the right and −X downward.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::epipolar::{epipolar_residual, BearingPair, FundamentalMatrix};
use crate::multiview::Track;
use crate::raster::Raster;
use crate::sphere_cam::{
    bearing_to_pixel, pixel_to_bearing, to_rgb8, Bearing, EquirectImage, ImageSize, PixelCoord,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorrespondenceError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown image id {id:?}")]
    UnknownImageId { line: usize, id: String },
}

impl CorrespondenceError {
    pub fn category(&self) -> &'static str {
        match self {
            Self::Parse { .. } => "ParseError",
            Self::UnknownImageId { .. } => "UnknownImageId",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CubeFace {
    #[serde(rename = "+X")]
    PosX,
    #[serde(rename = "-X")]
    NegX,
    #[serde(rename = "+Y")]
    PosY,
    #[serde(rename = "-Y")]
    NegY,
    #[serde(rename = "+Z")]
    PosZ,
    #[serde(rename = "-Z")]
    NegZ,
}

impl CubeFace {
    pub const ALL: [CubeFace; 6] = [
        CubeFace::PosX,
        CubeFace::NegX,
        CubeFace::PosY,
        CubeFace::NegY,
        CubeFace::PosZ,
        CubeFace::NegZ,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::PosX => "+X",
            Self::NegX => "-X",
            Self::PosY => "+Y",
            Self::NegY => "-Y",
            Self::PosZ => "+Z",
            Self::NegZ => "-Z",
        }
    }

    /// `(forward, right, down)` unit axes of the face.
    pub fn basis(self) -> [Vector3<f64>; 3] {
        let v = Vector3::new;
        match self {
            Self::PosX => [v(1.0, 0.0, 0.0), v(0.0, 1.0, 0.0), v(0.0, 0.0, -1.0)],
            Self::NegX => [v(-1.0, 0.0, 0.0), v(0.0, -1.0, 0.0), v(0.0, 0.0, -1.0)],
            Self::PosY => [v(0.0, 1.0, 0.0), v(-1.0, 0.0, 0.0), v(0.0, 0.0, -1.0)],
            Self::NegY => [v(0.0, -1.0, 0.0), v(1.0, 0.0, 0.0), v(0.0, 0.0, -1.0)],
            Self::PosZ => [v(0.0, 0.0, 1.0), v(0.0, 1.0, 0.0), v(1.0, 0.0, 0.0)],
            Self::NegZ => [v(0.0, 0.0, -1.0), v(0.0, 1.0, 0.0), v(-1.0, 0.0, 0.0)],
        }
    }

    fn index(self) -> usize {
        Self::ALL.iter().position(|&f| f == self).unwrap()
    }
}

impl fmt::Display for CubeFace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CubeFace {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown cube face {s:?}"))
    }
}

/// Bearing through face-local coordinate `(u, v)`.
pub fn cubeface_to_bearing(face: CubeFace, u: f64, v: f64, face_size: u32) -> Bearing {
    let [f, r, d] = face.basis();
    let s = face_size as f64;
    let a = 2.0 * u / s - 1.0;
    let b = 2.0 * v / s - 1.0;
    Bearing::new(f + r * a + d * b).expect("face directions are never zero")
}

/// Face and face-local coordinate hit by `b`. Ties between faces go to the
/// first face in [`CubeFace::ALL`].
pub fn bearing_to_cubeface(b: &Bearing, face_size: u32) -> (CubeFace, f64, f64) {
    let z = b.vector();
    let face = CubeFace::ALL
        .into_iter()
        .fold((CubeFace::PosX, f64::NEG_INFINITY), |best, face| {
            let along = z.dot(&face.basis()[0]);
            if along > best.1 {
                (face, along)
            } else {
                best
            }
        })
        .0;
    let [f, r, d] = face.basis();
    let p = z / z.dot(&f);
    let s = face_size as f64;
    (face, (p.dot(&r) + 1.0) * s / 2.0, (p.dot(&d) + 1.0) * s / 2.0)
}

pub fn cubeface_to_equirect(
    face: CubeFace,
    u: f64,
    v: f64,
    face_size: u32,
    size: ImageSize,
) -> PixelCoord {
    bearing_to_pixel(&cubeface_to_bearing(face, u, v, face_size), size)
}

/// Six square faces resampled from one panorama, in [`CubeFace::ALL`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct CubeFaceSet {
    pub face_size: u32,
    pub faces: Vec<Raster>,
}

impl CubeFaceSet {
    pub fn face(&self, face: CubeFace) -> &Raster {
        &self.faces[face.index()]
    }
}

pub fn equirect_to_cubemap(img: &EquirectImage, face_size: u32) -> CubeFaceSet {
    let face_size = face_size.max(1);
    let faces = CubeFace::ALL
        .into_iter()
        .map(|face| {
            Raster::from_fn(face_size, face_size, |i, j| {
                let b = cubeface_to_bearing(face, i as f64 + 0.5, j as f64 + 0.5, face_size);
                to_rgb8(img.sample_bearing(&b))
            })
        })
        .collect();
    CubeFaceSet { face_size, faces }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Manual,
    Imported,
    Augmented,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub image_a: String,
    pub image_b: String,
    pub pa: PixelCoord,
    pub pb: PixelCoord,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual: Option<f64>,
}

impl Correspondence {
    pub fn manual(image_a: &str, image_b: &str, pa: PixelCoord, pb: PixelCoord) -> Self {
        Self {
            image_a: image_a.to_owned(),
            image_b: image_b.to_owned(),
            pa,
            pb,
            source: Source::Manual,
            residual: None,
        }
    }

    pub fn swapped(&self) -> Self {
        Self {
            image_a: self.image_b.clone(),
            image_b: self.image_a.clone(),
            pa: self.pb,
            pb: self.pa,
            ..self.clone()
        }
    }

    /// Bearing pair with `image_a` as the first camera.
    pub fn bearings(&self, size_a: ImageSize, size_b: ImageSize) -> BearingPair {
        BearingPair::new(pixel_to_bearing(self.pa, size_a), pixel_to_bearing(self.pb, size_b))
    }
}

/// One line of a matches file. With `face_a` (or `face_b`) set, `xa, ya`
/// (or `xb, yb`) are face-local coordinates on a cube face of `face_size`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchRecord {
    pub image_a: String,
    pub image_b: String,
    pub xa: f64,
    pub ya: f64,
    pub xb: f64,
    pub yb: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub face_a: Option<CubeFace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub face_b: Option<CubeFace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub face_size: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// Parses a matches file. Blank lines are skipped; every other line must be
/// one JSON record. `size_of` resolves image ids.
pub fn import_matches(
    text: &str,
    size_of: impl Fn(&str) -> Option<ImageSize>,
) -> Result<Vec<Correspondence>, CorrespondenceError> {
    let mut out = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| CorrespondenceError::Parse { line, message };
        let rec: MatchRecord =
            serde_json::from_str(raw).map_err(|e| parse_err(e.to_string()))?;
        if rec.image_a == rec.image_b {
            return Err(parse_err("image_a and image_b are the same".into()));
        }
        let lookup = |id: &str| {
            size_of(id).ok_or_else(|| CorrespondenceError::UnknownImageId {
                line,
                id: id.to_owned(),
            })
        };
        let (size_a, size_b) = (lookup(&rec.image_a)?, lookup(&rec.image_b)?);
        let coord = |face: Option<CubeFace>, x: f64, y: f64, size: ImageSize| {
            if !(x.is_finite() && y.is_finite()) {
                return Err(parse_err("coordinates must be finite".into()));
            }
            match face {
                None => {
                    if x < 0.0 || x > size.width() as f64 || y < 0.0 || y > size.height() as f64 {
                        return Err(parse_err(format!("pixel ({x}, {y}) outside the image")));
                    }
                    Ok(PixelCoord::new(x, y))
                }
                Some(face) => {
                    let fs = rec
                        .face_size
                        .filter(|&s| s > 0)
                        .ok_or_else(|| parse_err("face coordinates need a positive face_size".into()))?;
                    Ok(cubeface_to_equirect(face, x, y, fs, size))
                }
            }
        };
        out.push(Correspondence {
            pa: coord(rec.face_a, rec.xa, rec.ya, size_a)?,
            pb: coord(rec.face_b, rec.xb, rec.yb, size_b)?,
            image_a: rec.image_a,
            image_b: rec.image_b,
            source: Source::Imported,
            residual: None,
        });
    }
    Ok(out)
}

/// Serializes records as a matches file, one JSON object per line.
pub fn write_matches(records: &[MatchRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("records serialize"));
        s.push('\n');
    }
    s
}

/// Radius within which two matches count as the same, on both sides.
pub const DUPLICATE_RADIUS: f64 = 1.0;

/// Manual matches plus the imported ones that satisfy `F` within `epsilon`.
///
/// All matches are oriented with `image_a` as the first camera of `F`. Every
/// output record carries its residual. Admitted imported matches are marked
/// augmented; an imported match within [`DUPLICATE_RADIUS`] of a kept match on
/// both sides is dropped.
pub fn augment_pool(
    manual: &[Correspondence],
    imported: &[Correspondence],
    f: &FundamentalMatrix,
    epsilon: f64,
    size_a: ImageSize,
    size_b: ImageSize,
) -> Vec<Correspondence> {
    let residual = |c: &Correspondence| epipolar_residual(&c.bearings(size_a, size_b), f);
    let mut out: Vec<Correspondence> = manual
        .iter()
        .map(|c| Correspondence {
            residual: Some(residual(c)),
            ..c.clone()
        })
        .collect();
    for c in imported {
        let r = residual(c);
        if !(r < epsilon) {
            continue;
        }
        let duplicate = out.iter().any(|k| {
            k.pa.wrapped_distance(&c.pa, size_a) <= DUPLICATE_RADIUS
                && k.pb.wrapped_distance(&c.pb, size_b) <= DUPLICATE_RADIUS
        });
        if !duplicate {
            out.push(Correspondence {
                source: Source::Augmented,
                residual: Some(r),
                ..c.clone()
            });
        }
    }
    out
}

/// Tracks plus the ids of those that came out of a conflicting closure.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrackSet {
    pub tracks: Vec<Track>,
    pub inconsistent: BTreeSet<usize>,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Makes the smaller root the representative.
    fn union(&mut self, a: usize, b: usize) -> usize {
        let (ra, rb) = (self.find(a), self.find(b));
        let (lo, hi) = (ra.min(rb), ra.max(rb));
        self.parent[hi] = lo;
        lo
    }
}

/// Groups correspondences into tracks by transitive closure.
///
/// Observations in the same image within [`DUPLICATE_RADIUS`] (single
/// linkage) are one point, located at their mean. Edges are applied in a
/// canonical order; an edge that would put two different points of one image
/// into a track is skipped and both sides are flagged. Tracks are indexed by
/// the position of the image id in `images`.
pub fn build_tracks(
    correspondences: &[Correspondence],
    images: &[(String, ImageSize)],
) -> Result<TrackSet, CorrespondenceError> {
    let index_of = |id: &str| {
        images
            .iter()
            .position(|(i, _)| i == id)
            .ok_or_else(|| CorrespondenceError::UnknownImageId {
                line: 0,
                id: id.to_owned(),
            })
    };

    // every observation, then single-linkage clusters per image
    let mut obs: Vec<(usize, PixelCoord)> = Vec::new();
    let mut edges_raw = Vec::new();
    for c in correspondences {
        let (ia, ib) = (index_of(&c.image_a)?, index_of(&c.image_b)?);
        if ia == ib {
            continue;
        }
        edges_raw.push((obs.len(), obs.len() + 1));
        obs.push((ia, c.pa));
        obs.push((ib, c.pb));
    }
    let mut order: Vec<usize> = (0..obs.len()).collect();
    order.sort_by(|&p, &q| {
        let (a, b) = (&obs[p], &obs[q]);
        a.0.cmp(&b.0)
            .then(a.1.y.total_cmp(&b.1.y))
            .then(a.1.x.total_cmp(&b.1.x))
    });
    let mut clusters = UnionFind::new(obs.len());
    for (k, &p) in order.iter().enumerate() {
        for &q in &order[k + 1..] {
            if obs[q].0 != obs[p].0 || obs[q].1.y - obs[p].1.y > DUPLICATE_RADIUS {
                break;
            }
            let size = images[obs[p].0].1;
            if obs[p].1.wrapped_distance(&obs[q].1, size) <= DUPLICATE_RADIUS {
                clusters.union(p, q);
            }
        }
    }
    // node ids follow the sorted position of each cluster's first member
    let mut node_of_root: BTreeMap<usize, usize> = BTreeMap::new();
    let mut node_members: Vec<Vec<usize>> = Vec::new();
    for &p in &order {
        let root = clusters.find(p);
        let node = *node_of_root.entry(root).or_insert_with(|| {
            node_members.push(Vec::new());
            node_members.len() - 1
        });
        node_members[node].push(p);
    }
    let node_of = |p: usize, clusters: &mut UnionFind| node_of_root[&clusters.find(p)];
    let node_image: Vec<usize> = node_members.iter().map(|m| obs[m[0]].0).collect();
    let node_point: Vec<PixelCoord> = node_members
        .iter()
        .map(|m| {
            let size = images[obs[m[0]].0].1;
            mean_wrapped(m.iter().map(|&p| obs[p].1), size)
        })
        .collect();

    let mut edges: Vec<(usize, usize)> = edges_raw
        .iter()
        .map(|&(p, q)| {
            let (a, b) = (node_of(p, &mut clusters), node_of(q, &mut clusters));
            (a.min(b), a.max(b))
        })
        .filter(|(a, b)| a != b)
        .collect();
    edges.sort_unstable();
    edges.dedup();

    let n_nodes = node_members.len();
    let mut comps = UnionFind::new(n_nodes);
    let mut members: Vec<BTreeMap<usize, usize>> =
        (0..n_nodes).map(|n| BTreeMap::from([(node_image[n], n)])).collect();
    let mut flagged = vec![false; n_nodes];
    for (a, b) in edges {
        let (ra, rb) = (comps.find(a), comps.find(b));
        if ra == rb {
            continue;
        }
        let conflict = members[ra]
            .iter()
            .any(|(img, node)| members[rb].get(img).is_some_and(|other| other != node));
        if conflict {
            flagged[ra] = true;
            flagged[rb] = true;
            continue;
        }
        let root = comps.union(ra, rb);
        let other = if root == ra { rb } else { ra };
        let moved = std::mem::take(&mut members[other]);
        members[root].extend(moved);
        flagged[root] |= flagged[other];
    }

    let mut set = TrackSet::default();
    for root in 0..n_nodes {
        if comps.find(root) != root || members[root].len() < 2 {
            continue;
        }
        let id = set.tracks.len();
        let observations = members[root]
            .iter()
            .map(|(&img, &node)| (img, node_point[node]))
            .collect();
        set.tracks.push(Track { id, observations });
        if flagged[root] {
            set.inconsistent.insert(id);
        }
    }
    Ok(set)
}

/// Mean of nearby points, unwrapping `x` relative to the first one.
fn mean_wrapped(points: impl Iterator<Item = PixelCoord>, size: ImageSize) -> PixelCoord {
    let w = size.width() as f64;
    let mut first = None;
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for p in points {
        let x0 = *first.get_or_insert(p.x);
        let dx = (p.x - x0 + w / 2.0).rem_euclid(w) - w / 2.0;
        sx += x0 + dx;
        sy += p.y;
        n += 1.0;
    }
    PixelCoord::new((sx / n).rem_euclid(w), sy / n)
}
