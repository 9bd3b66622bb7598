//! Grayscale images in `[0, 1]` and their 8-bit PNG encoding.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Intensity of the scan background.
pub const BACKGROUND: f32 = 1.0;

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidParams(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if pixels.len() != height * width {
            return Err(Error::InvalidParams(format!(
                "{} pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidParams(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(GrayImage {
            height,
            width,
            pixels,
        })
    }

    /// Image with every pixel set to `value` (clamped into `[0, 1]`).
    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        assert!(height > 0 && width > 0, "empty image");
        GrayImage {
            height,
            width,
            pixels: vec![value.clamp(0.0, 1.0); height * width],
        }
    }

    /// Build from a per-pixel function `(row, col) -> intensity`; values are
    /// clamped into `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        assert!(height > 0 && width > 0, "empty image");
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                pixels.push(f(r, c).clamp(0.0, 1.0));
            }
        }
        GrayImage {
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.pixels[row * self.width..(row + 1) * self.width]
    }

    /// Contiguous sub-image; panics if the window leaves the image.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> GrayImage {
        assert!(
            top + height <= self.height && left + width <= self.width && height > 0 && width > 0,
            "crop window out of bounds"
        );
        let mut pixels = Vec::with_capacity(height * width);
        for r in top..top + height {
            pixels.extend_from_slice(&self.row(r)[left..left + width]);
        }
        GrayImage {
            height,
            width,
            pixels,
        }
    }

    /// Bilinear interpolation at a fractional position; `fill` outside the
    /// pixel grid. Integer positions return the stored pixel exactly.
    pub fn sample_bilinear(&self, y: f64, x: f64, fill: f32) -> f32 {
        let (h, w) = (self.height as f64, self.width as f64);
        if !(y >= 0.0 && x >= 0.0 && y <= h - 1.0 && x <= w - 1.0) {
            return fill;
        }
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
        let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
        let top = self.get(y0, x0) * (1.0 - fx) + self.get(y0, x1) * fx;
        let bottom = self.get(y1, x0) * (1.0 - fx) + self.get(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&p| f64::from(p)).sum::<f64>() / self.pixels.len() as f64
    }

    pub fn mean_abs_diff(&self, other: &GrayImage) -> f64 {
        assert_eq!(
            (self.height, self.width),
            (other.height, other.width),
            "image size mismatch"
        );
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(&a, &b)| f64::from((a - b).abs()))
            .sum::<f64>()
            / self.pixels.len() as f64
    }

    /// 8-bit quantisation `round(255 * x)`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&p| (p * 255.0).round() as u8).collect()
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        let pixels = bytes.iter().map(|&b| f32::from(b) / 255.0).collect();
        GrayImage::new(height, width, pixels)
    }

    pub fn encode_png(&self) -> Vec<u8> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            enc.set_compression(png::Compression::Default);
            let mut writer = enc.write_header().expect("in-memory png header");
            writer
                .write_image_data(&self.to_u8())
                .expect("in-memory png data");
        }
        out
    }

    /// Decode an 8-bit grayscale PNG. Other colour types are converted to
    /// luma; 16-bit depth is reduced to 8.
    pub fn decode_png(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut dec = png::Decoder::new(bytes);
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        // bound allocations for hostile headers
        dec.set_limits(png::Limits { bytes: 1 << 28 });
        let mut reader = dec.read_info().map_err(|e| e.to_string())?;
        let mut buf = vec![0u8; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
        let (w, h) = (info.width as usize, info.height as usize);
        let data = &buf[..info.buffer_size()];
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Indexed => return Err("unexpanded palette image".into()),
        };
        if data.len() != w * h * channels {
            return Err("unexpected buffer size".into());
        }
        let luma: Vec<u8> = match channels {
            1 => data.to_vec(),
            2 => data.chunks_exact(2).map(|p| p[0]).collect(),
            _ => data
                .chunks_exact(channels)
                .map(|p| {
                    let y = 0.299 * f32::from(p[0]) + 0.587 * f32::from(p[1]) + 0.114 * f32::from(p[2]);
                    y.round().clamp(0.0, 255.0) as u8
                })
                .collect(),
        };
        GrayImage::from_u8(h, w, &luma).map_err(|e| e.to_string())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.encode_png()).map_err(|e| Error::io(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        GrayImage::decode_png(&bytes).map_err(|reason| Error::Decode {
            path: path.to_path_buf(),
            reason,
        })
    }

    /// Place `self` centred on a background canvas of at least
    /// `min_h x min_w`; returns a clone when already large enough.
    pub fn pad_to(&self, min_h: usize, min_w: usize, fill: f32) -> GrayImage {
        let (h, w) = (self.height.max(min_h), self.width.max(min_w));
        if (h, w) == (self.height, self.width) {
            return self.clone();
        }
        let (top, left) = ((h - self.height) / 2, (w - self.width) / 2);
        let mut out = GrayImage::filled(h, w, fill);
        for r in 0..self.height {
            out.pixels[(top + r) * w + left..(top + r) * w + left + self.width]
                .copy_from_slice(self.row(r));
        }
        out
    }

    /// Tile equally-sized images into a grid with `cols` columns.
    pub fn grid(tiles: &[GrayImage], cols: usize, fill: f32) -> GrayImage {
        assert!(!tiles.is_empty() && cols > 0, "empty grid");
        let (th, tw) = (tiles[0].height, tiles[0].width);
        let rows = tiles.len().div_ceil(cols);
        let mut out = GrayImage::filled(rows * th, cols * tw, fill);
        for (i, t) in tiles.iter().enumerate() {
            assert_eq!((t.height, t.width), (th, tw), "grid tiles differ in size");
            let (r0, c0) = ((i / cols) * th, (i % cols) * tw);
            for r in 0..th {
                let dst = (r0 + r) * out.width + c0;
                out.pixels[dst..dst + tw].copy_from_slice(t.row(r));
            }
        }
        out
    }
}
