//! Heatmap overlays and flow frame sequences.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

pub use image::RgbImage;
use image::{ImageError, ImageFormat};

use crate::daam::{AttentionFlow, AttentionMap};
use crate::error::{Error, Result};
use crate::numerics::{bilinear_resize, Tensor};

/// Min-max normalization to `[0, 1]`; a constant grid maps to 0.5 everywhere.
pub fn normalize_grid(grid: &Tensor) -> Tensor {
    let (lo, hi) = (grid.min(), grid.max());
    if hi > lo {
        grid.map(|v| (v - lo) / (hi - lo))
    } else {
        grid.map(|_| 0.5)
    }
}

pub fn normalize_map(map: &AttentionMap) -> Tensor {
    normalize_grid(&map.grid)
}

const RAMP: [(f64, [f64; 3]); 5] = [
    (0.0, [0.0, 0.0, 255.0]),
    (0.25, [0.0, 255.0, 255.0]),
    (0.5, [0.0, 255.0, 0.0]),
    (0.75, [255.0, 255.0, 0.0]),
    (1.0, [255.0, 0.0, 0.0]),
];

/// Jet-style ramp: blue, cyan, green, yellow, red at quarter steps.
pub fn jet(t: f64) -> [f64; 3] {
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
    for pair in RAMP.windows(2) {
        let ((t0, c0), (t1, c1)) = (pair[0], pair[1]);
        if t <= t1 {
            let u = (t - t0) / (t1 - t0);
            return [0, 1, 2].map(|i| c0[i] + u * (c1[i] - c0[i]));
        }
    }
    RAMP[4].1
}

/// Upsamples an intensity grid in `[0, 1]` to the image, colours it and
/// blends `round((1−α)·image + α·colour)`.
pub fn overlay_intensity(image: &RgbImage, intensity: &Tensor, alpha: f64) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    intensity.dims2()?;
    let (w, h) = (image.width() as usize, image.height() as usize);
    let up = bilinear_resize(intensity, h, w)?;
    let mut out = image.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        let c = jet(up.at2(y as usize, x as usize));
        for ch in 0..3 {
            let v = (1.0 - alpha) * px[ch] as f64 + alpha * c[ch];
            px[ch] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

/// Overlay with per-map min-max normalization.
pub fn render_overlay(image: &RgbImage, map: &AttentionMap, alpha: f64) -> Result<RgbImage> {
    overlay_intensity(image, &normalize_map(map), alpha)
}

/// How flow frames are scaled to the colour ramp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FlowNorm {
    /// Each frame min-max normalized on its own.
    #[default]
    PerFrame,
    /// Every frame divided by the final frame's maximum, so growth across
    /// blocks stays visible.
    Global,
}

/// Blend weight used for overlays written to disk.
pub const DEFAULT_ALPHA: f64 = 0.5;

/// Places images left to right; heights must agree.
pub fn hconcat(images: &[RgbImage]) -> Result<RgbImage> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to concatenate".into()))?;
    let h = first.height();
    if images.iter().any(|i| i.height() != h) {
        return Err(Error::InvalidArgument("images differ in height".into()));
    }
    let total: u32 = images.iter().map(RgbImage::width).sum();
    let mut out = RgbImage::new(total, h);
    let mut x0 = 0;
    for img in images {
        for (x, y, px) in img.enumerate_pixels() {
            out.put_pixel(x0 + x, y, *px);
        }
        x0 += img.width();
    }
    Ok(out)
}

pub fn save_png(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    img.write_to(&mut w, ImageFormat::Png).map_err(|e| match e {
        ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })
}

/// Renders every accumulated frame to `block_{b:02}.png` plus a horizontal
/// `strip.png`. Returns the written paths, frames first.
pub fn render_flow(
    image: &RgbImage,
    flow: &AttentionFlow,
    out_dir: impl AsRef<Path>,
    norm: FlowNorm,
) -> Result<Vec<PathBuf>> {
    if flow.accumulated.is_empty() {
        return Err(Error::InvalidArgument("flow has no frames".into()));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let scale = flow.final_map().grid.max();
    let frames = flow
        .accumulated
        .iter()
        .map(|m| {
            let intensity = match norm {
                FlowNorm::PerFrame => normalize_map(m),
                FlowNorm::Global if scale > 0.0 => m.grid.map(|v| (v / scale).clamp(0.0, 1.0)),
                FlowNorm::Global => m.grid.map(|_| 0.5),
            };
            overlay_intensity(image, &intensity, DEFAULT_ALPHA)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut paths = Vec::with_capacity(frames.len() + 1);
    for (m, frame) in flow.accumulated.iter().zip(&frames) {
        let p = out_dir.join(format!("block_{:02}.png", m.block));
        save_png(frame, &p)?;
        paths.push(p);
    }
    let strip = out_dir.join("strip.png");
    save_png(&hconcat(&frames)?, &strip)?;
    paths.push(strip);
    Ok(paths)
}
