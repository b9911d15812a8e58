//! PNG rendering of heatmaps.

use std::io::Cursor;

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, GrayImage, ImageEncoder, Luma, Rgb, RgbImage};
use thiserror::Error;

use crate::heatmap::Grid2D;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("base image aspect {base_w}x{base_h} does not match heatmap {map_w}x{map_h}")]
    AspectMismatch {
        base_w: u32,
        base_h: u32,
        map_w: usize,
        map_h: usize,
    },
    #[error("heatmap is empty")]
    Empty,
    #[error("PNG encoding failed: {0}")]
    Encode(#[from] image::ImageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderMode {
    Gray,
    Overlay,
}

/// `value × 255`, rounded half up and clamped to `0..=255`.
pub fn gray_level(value: f64) -> u8 {
    (value * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

const RAMP: [(f64, [f64; 3]); 5] = [
    (0.0, [0.0, 0.0, 255.0]),
    (0.25, [0.0, 255.0, 255.0]),
    (0.5, [0.0, 255.0, 0.0]),
    (0.75, [255.0, 255.0, 0.0]),
    (1.0, [255.0, 0.0, 0.0]),
];

/// Blue, cyan, green, yellow, red, linearly interpolated.
pub fn ramp_color(value: f64) -> [f64; 3] {
    let v = value.clamp(0.0, 1.0);
    for pair in RAMP.windows(2) {
        let ((lo, a), (hi, b)) = (pair[0], pair[1]);
        if v <= hi {
            let t = (v - lo) / (hi - lo);
            return [0, 1, 2].map(|c| a[c] + t * (b[c] - a[c]));
        }
    }
    RAMP[4].1
}

pub const OVERLAY_ALPHA: f64 = 0.5;

pub fn gray_image(grid: &Grid2D) -> GrayImage {
    GrayImage::from_fn(grid.width as u32, grid.height as u32, |x, y| {
        Luma([gray_level(grid.get(x as usize, y as usize))])
    })
}

fn aspect_matches(base_w: u32, base_h: u32, map_w: usize, map_h: usize) -> bool {
    let aspect = base_w as f64 / base_h as f64;
    // Grid sizes are rounded up from slide sizes, so the slide aspect lies
    // in ((w - 1) / h, w / (h - 1)); allow a further 2%.
    let (w, h) = (map_w as f64, map_h as f64);
    let lo = (w - 1.0) / h / 1.02;
    let hi = if map_h > 1 { w / (h - 1.0) * 1.02 } else { f64::INFINITY };
    aspect > lo && aspect < hi
}

/// Colour ramp blended at `OVERLAY_ALPHA` over `base`, at the base resolution.
pub fn overlay_image(grid: &Grid2D, base: &RgbImage) -> Result<RgbImage, RenderError> {
    let (bw, bh) = base.dimensions();
    if !aspect_matches(bw, bh, grid.width, grid.height) {
        return Err(RenderError::AspectMismatch {
            base_w: bw,
            base_h: bh,
            map_w: grid.width,
            map_h: grid.height,
        });
    }
    Ok(RgbImage::from_fn(bw, bh, |x, y| {
        let gx = ((x as u64 * grid.width as u64) / bw as u64) as usize;
        let gy = ((y as u64 * grid.height as u64) / bh as u64) as usize;
        let color = ramp_color(grid.get(gx, gy));
        let p = base.get_pixel(x, y);
        Rgb([0, 1, 2].map(|c| {
            (OVERLAY_ALPHA * color[c] + (1.0 - OVERLAY_ALPHA) * p[c] as f64 + 0.5).floor() as u8
        }))
    }))
}

fn encode_png(bytes: &[u8], w: u32, h: u32, color: ExtendedColorType) -> Result<Vec<u8>, RenderError> {
    let mut out = Cursor::new(Vec::new());
    PngEncoder::new(&mut out).write_image(bytes, w, h, color)?;
    Ok(out.into_inner())
}

pub fn render_heatmap(grid: &Grid2D, mode: RenderMode, base: Option<&RgbImage>) -> Result<Vec<u8>, RenderError> {
    if grid.values.is_empty() {
        return Err(RenderError::Empty);
    }
    match (mode, base) {
        (RenderMode::Overlay, Some(base)) => {
            let img = overlay_image(grid, base)?;
            encode_png(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)
        }
        (RenderMode::Overlay, None) => {
            // No base image: overlay on white.
            let white = RgbImage::from_pixel(grid.width as u32, grid.height as u32, Rgb([255, 255, 255]));
            let img = overlay_image(grid, &white)?;
            encode_png(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)
        }
        (RenderMode::Gray, _) => {
            let img = gray_image(grid);
            encode_png(img.as_raw(), img.width(), img.height(), ExtendedColorType::L8)
        }
    }
}
