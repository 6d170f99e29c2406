use std::path::Path;

use image::{ImageFormat, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::numerics::{bilinear_resize, Tensor};
use crate::vit::ViTConfig;

/// Per-channel normalization applied after scaling pixels to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

/// ImageNet statistics used by the standard ViT/DeiT checkpoints.
pub const IMAGENET: Normalization = Normalization {
    mean: [0.485, 0.456, 0.406],
    std: [0.229, 0.224, 0.225],
};

impl Normalization {
    pub fn normalize(&self, channel: usize, v: f64) -> f64 {
        (v - self.mean[channel]) / self.std[channel]
    }

    pub fn denormalize(&self, channel: usize, v: f64) -> f64 {
        v * self.std[channel] + self.mean[channel]
    }
}

/// Decodes a PNG or PPM/PNM file to 8-bit RGB.
pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Pnm) => {}
        _ => return Err(Error::UnsupportedFormat(path.to_path_buf())),
    }
    let img = reader.decode().map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}

/// RGB image as `[3×H×W]` in `[0, 1]`.
pub fn rgb_to_unit_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[c * h * w + y * w + x] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("consistent shape")
}

/// Bilinear resize of every channel of a `[C×H×W]` tensor.
pub fn resize_channels(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [c, h, w] = img.shape() else {
        return Err(Error::Shape {
            op: "resize_channels",
            expected: vec![3, out_h, out_w],
            actual: img.shape().to_vec(),
        });
    };
    let (c, h, w) = (*c, *h, *w);
    if h == out_h && w == out_w {
        return Ok(img.clone());
    }
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = Tensor::new(vec![h, w], img.data()[ch * h * w..(ch + 1) * h * w].to_vec())?;
        out.extend(bilinear_resize(&plane, out_h, out_w)?.into_data());
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Square bilinear resize of an RGB image, rounded back to 8 bits.
pub fn resize_rgb(img: &RgbImage, size: usize) -> Result<RgbImage> {
    if img.width() as usize == size && img.height() as usize == size {
        return Ok(img.clone());
    }
    let t = resize_channels(&rgb_to_unit_tensor(img), size, size)?;
    let plane = size * size;
    let mut out = RgbImage::new(size as u32, size as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let i = y as usize * size + x as usize;
        for c in 0..3 {
            px[c] = (t.data()[c * plane + i] * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

/// Resize to `size×size`, scale to `[0, 1]`, normalize per channel.
pub fn preprocess(img: &RgbImage, size: usize, norm: &Normalization) -> Result<Tensor> {
    let mut t = resize_channels(&rgb_to_unit_tensor(img), size, size)?;
    let plane = size * size;
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v = norm.normalize(i / plane, *v);
    }
    Ok(t)
}

/// Loads an image file and prepares it as model input for `cfg`.
pub fn load_and_preprocess(path: impl AsRef<Path>, cfg: &ViTConfig) -> Result<Tensor> {
    if cfg.in_chans != 3 {
        return Err(Error::Config(format!(
            "image input needs 3 channels, config has {}",
            cfg.in_chans
        )));
    }
    preprocess(&load_rgb(path)?, cfg.image_size, &IMAGENET)
}
