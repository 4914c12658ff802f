//! Plain RGB rasters of any shape (cube faces, rectified images).

use std::path::Path;

use crate::sphere_cam::{raster_to_rgb_image, Rgb};

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: u32,
    height: u32,
    pixels: Vec<Rgb>,
}

impl Raster {
    pub fn filled(width: u32, height: u32, color: Rgb) -> Self {
        Self {
            width,
            height,
            pixels: vec![color; width as usize * height as usize],
        }
    }

    /// Builds a raster by evaluating `f` at every integer pixel `(i, j)`.
    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> Rgb) -> Self {
        let mut pixels = Vec::with_capacity(width as usize * height as usize);
        for j in 0..height {
            for i in 0..width {
                pixels.push(f(i, j));
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn from_pixels(width: u32, height: u32, pixels: Vec<Rgb>) -> Option<Self> {
        (pixels.len() == width as usize * height as usize).then_some(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[Rgb] {
        &self.pixels
    }

    pub fn get(&self, i: u32, j: u32) -> Rgb {
        self.pixels[j as usize * self.width as usize + i as usize]
    }

    pub fn to_rgb_image(&self) -> image::RgbImage {
        raster_to_rgb_image(self.width, self.height, &self.pixels)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), image::ImageError> {
        self.to_rgb_image()
            .save_with_format(path, image::ImageFormat::Png)
    }

    /// Row-major luma plane.
    pub fn luma(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| crate::sphere_cam::luma(p)).collect()
    }
}
