//! Disparity export: grayscale portable float maps and 8-bit previews.
//!
//! PFM files are little endian (scale `-1.0`) with rows stored bottom to
//! top, as the format prescribes. Invalid pixels are `NaN`.

use thiserror::Error;

use crate::dense::DisparityMap;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PfmError {
    #[error("malformed PFM: {0}")]
    Malformed(String),
}

pub fn write_pfm(map: &DisparityMap) -> Vec<u8> {
    let (w, h) = (map.width as usize, map.height as usize);
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * 4);
    for row in (0..h).rev() {
        for v in &map.data[row * w..(row + 1) * w] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_pfm(bytes: &[u8]) -> Result<DisparityMap, PfmError> {
    let bad = |m: &str| PfmError::Malformed(m.to_owned());
    // three newline-terminated header lines
    let mut pos = 0;
    let mut header = Vec::new();
    while header.len() < 3 {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header"))?;
        header.push(std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| bad("header is not text"))?);
        pos += end + 1;
    }
    if header[0].trim() != "Pf" {
        return Err(bad("only grayscale Pf is supported"));
    }
    let dims: Vec<usize> = header[1]
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| bad("bad dimensions")))
        .collect::<Result<_, _>>()?;
    let [w, h] = dims[..] else {
        return Err(bad("bad dimensions"));
    };
    let scale: f32 = header[2].trim().parse().map_err(|_| bad("bad scale"))?;
    let body = &bytes[pos..];
    if body.len() != w * h * 4 {
        return Err(bad("pixel data length does not match dimensions"));
    }
    let mut data = vec![0.0f32; w * h];
    for (k, chunk) in body.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if scale < 0.0 {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (row_from_bottom, col) = (k / w, k % w);
        data[(h - 1 - row_from_bottom) * w + col] = v;
    }
    Ok(DisparityMap {
        width: w as u32,
        height: h as u32,
        data,
    })
}

/// Min-max normalized preview: invalid pixels are 0, valid ones span
/// `[1, 255]` with the largest disparity darkest.
pub fn disparity_preview(map: &DisparityMap) -> image::GrayImage {
    let valid = map.data.iter().copied().filter(|v| v.is_finite());
    let (lo, hi) = valid.fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    let span = hi - lo;
    let pixels = map
        .data
        .iter()
        .map(|&v| {
            if !v.is_finite() {
                0
            } else if span > 0.0 {
                (255.0 - ((v - lo) / span * 254.0)).round() as u8
            } else {
                255
            }
        })
        .collect();
    image::GrayImage::from_raw(map.width, map.height, pixels).expect("preview size matches")
}
