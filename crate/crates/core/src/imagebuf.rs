//! Row-major three-channel float images and their PNG export.

use std::path::Path;

/// A `width × height` plane of 3-vectors, row-major, top row first.
///
/// Used for RGB images in `[0, 1]` as well as for normal maps, where a zero
/// vector marks background.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize, fill: [f64; 3]) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: [f64; 3]) {
        self.data[y * self.width + x] = v;
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Quantizes to 8-bit RGB, clamping to `[0, 1]` and rounding to nearest.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 3);
        for px in &self.data {
            for &c in px {
                out.push(unit_to_u8(c));
            }
        }
        out
    }

    /// Maps unit normals from `[-1, 1]` to `[0, 1]` for display; zero vectors stay black.
    pub fn normals_to_display(&self) -> Image {
        let data = self
            .data
            .iter()
            .map(|n| {
                if n.iter().all(|&c| c == 0.0) {
                    [0.0; 3]
                } else {
                    [0.5 * (n[0] + 1.0), 0.5 * (n[1] + 1.0), 0.5 * (n[2] + 1.0)]
                }
            })
            .collect();
        Image {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<(), image::ImageError> {
        image::save_buffer(
            path,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            image::ColorType::Rgb8,
        )
    }
}

#[inline]
pub fn unit_to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
