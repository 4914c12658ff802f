//! ASCII PLY point clouds with per-vertex colors.

use std::fmt::Write as _;

use nalgebra::Vector3;
use thiserror::Error;

use crate::sphere_cam::Rgb;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlyError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl PlyError {
    pub fn category(&self) -> &'static str {
        match self {
            Self::EmptyCloud => "EmptyCloud",
            Self::Parse { .. } => "ParseError",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlyVertex {
    pub position: Vector3<f32>,
    pub color: Rgb,
}

const PROPERTIES: [&str; 6] = [
    "property float x",
    "property float y",
    "property float z",
    "property uchar red",
    "property uchar green",
    "property uchar blue",
];

/// Writes points in the given order. Coordinates are stored as `f32` using
/// the shortest representation that reads back to the same value.
pub fn write_ply(
    points: &[(Vector3<f64>, Rgb)],
    kind: &str,
    frame: &str,
) -> Result<String, PlyError> {
    if points.is_empty() {
        return Err(PlyError::EmptyCloud);
    }
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "comment generator spheresfm");
    let _ = writeln!(s, "comment cloud {kind}");
    let _ = writeln!(s, "comment frame {frame}");
    let _ = writeln!(s, "element vertex {}", points.len());
    for p in PROPERTIES {
        s.push_str(p);
        s.push('\n');
    }
    s.push_str("end_header\n");
    for (p, c) in points {
        let _ = writeln!(
            s,
            "{} {} {} {} {} {}",
            p.x as f32, p.y as f32, p.z as f32, c[0], c[1], c[2]
        );
    }
    Ok(s)
}

/// Reads files in the layout produced by [`write_ply`].
pub fn read_ply(text: &str) -> Result<Vec<PlyVertex>, PlyError> {
    let mut lines = text.lines().enumerate();
    let err = |line: usize, message: &str| PlyError::Parse {
        line: line + 1,
        message: message.to_owned(),
    };
    let mut next = |what: &str| lines.next().ok_or_else(|| err(usize::MAX - 1, what));
    let (n, l) = next("missing magic")?;
    if l.trim() != "ply" {
        return Err(err(n, "missing magic"));
    }
    let (n, l) = next("missing format")?;
    if l.trim() != "format ascii 1.0" {
        return Err(err(n, "only ascii 1.0 is supported"));
    }
    let mut count = None;
    let mut props = Vec::new();
    loop {
        let (n, l) = next("unterminated header")?;
        let l = l.trim();
        if l == "end_header" {
            break;
        } else if let Some(rest) = l.strip_prefix("element vertex ") {
            count = Some(rest.parse::<usize>().map_err(|_| err(n, "bad vertex count"))?);
        } else if l.starts_with("property") {
            props.push(l.to_owned());
        } else if !l.starts_with("comment") {
            return Err(err(n, "unexpected header line"));
        }
    }
    let count = count.ok_or_else(|| err(0, "no vertex element"))?;
    if props != PROPERTIES {
        return Err(err(0, "unsupported vertex properties"));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (n, l) = next("fewer vertices than declared")?;
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() != 6 {
            return Err(err(n, "expected six values"));
        }
        let float = |s: &str| s.parse::<f32>().map_err(|_| err(n, "bad coordinate"));
        let byte = |s: &str| s.parse::<u8>().map_err(|_| err(n, "bad color"));
        out.push(PlyVertex {
            position: Vector3::new(float(f[0])?, float(f[1])?, float(f[2])?),
            color: [byte(f[3])?, byte(f[4])?, byte(f[5])?],
        });
    }
    Ok(out)
}
