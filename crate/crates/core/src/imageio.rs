//! PNG encoding and decoding for images (8-bit RGB ↔ [-1, 1]) and masks
//! (8-bit grayscale ↔ [0, 1], 255 = foreground).

use std::io::Cursor;
use std::path::Path;

use image::{imageops::FilterType, GrayImage, ImageFormat, RgbImage};
use tch::Tensor;

use crate::error::{dim_err, LomitError, Result};

/// A planar RGB image in `[-1, 1]`, channel-major (`3 × H × W`).
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub height: u32,
    pub width: u32,
    pub pixels: Vec<f32>,
}

impl Raster {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_slice(&self.pixels).reshape([1, 3, self.height as i64, self.width as i64])
    }

    /// Takes sample `index` of a `[B, 3, H, W]` tensor.
    pub fn from_tensor(t: &Tensor, index: i64) -> Result<Self> {
        let size = t.size();
        if size.len() != 4 || size[1] != 3 {
            return dim_err(format!("expected [B, 3, H, W], got {size:?}"));
        }
        let pixels = Vec::<f32>::try_from(
            t.get(index).to_kind(tch::Kind::Float).contiguous().flatten(0, -1),
        )?;
        Ok(Self {
            height: size[2] as u32,
            width: size[3] as u32,
            pixels,
        })
    }
}

/// A single-channel mask in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskRaster {
    pub height: u32,
    pub width: u32,
    pub values: Vec<f32>,
}

impl MaskRaster {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_slice(&self.values).reshape([1, 1, self.height as i64, self.width as i64])
    }

    /// Takes sample `index` of a `[B, 1, H, W]` tensor.
    pub fn from_tensor(t: &Tensor, index: i64) -> Result<Self> {
        let size = t.size();
        if size.len() != 4 || size[1] != 1 {
            return dim_err(format!("expected [B, 1, H, W], got {size:?}"));
        }
        let values = Vec::<f32>::try_from(
            t.get(index).to_kind(tch::Kind::Float).contiguous().flatten(0, -1),
        )?;
        Ok(Self {
            height: size[2] as u32,
            width: size[3] as u32,
            values,
        })
    }
}

fn to_u8(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn rgb_to_raster(img: &RgbImage) -> Raster {
    let (w, h) = img.dimensions();
    let plane = (w * h) as usize;
    let mut pixels = vec![0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            pixels[c * plane + i] = px[c] as f32 / 127.5 - 1.0;
        }
    }
    Raster {
        height: h,
        width: w,
        pixels,
    }
}

fn raster_to_rgb(r: &Raster) -> Result<RgbImage> {
    let plane = (r.width * r.height) as usize;
    if r.pixels.len() != 3 * plane {
        return dim_err(format!(
            "raster has {} values, expected {}",
            r.pixels.len(),
            3 * plane
        ));
    }
    Ok(RgbImage::from_fn(r.width, r.height, |x, y| {
        let i = (y * r.width + x) as usize;
        image::Rgb(std::array::from_fn(|c| {
            to_u8((r.pixels[c * plane + i] + 1.0) * 127.5)
        }))
    }))
}

/// Decodes an encoded image, resizing it (bilinear) to `resolution × resolution`
/// when needed. Returns the raster and whether a resize happened.
pub fn decode_image(bytes: &[u8], resolution: Option<u32>) -> Result<(Raster, bool)> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| LomitError::Image(format!("cannot decode image: {e}")))?
        .to_rgb8();
    Ok(resize_to(img, resolution))
}

fn resize_to(img: RgbImage, resolution: Option<u32>) -> (Raster, bool) {
    match resolution {
        Some(r) if img.dimensions() != (r, r) => {
            let resized = image::imageops::resize(&img, r, r, FilterType::Triangle);
            (rgb_to_raster(&resized), true)
        }
        _ => (rgb_to_raster(&img), false),
    }
}

pub fn load_image(path: &Path, resolution: Option<u32>) -> Result<(Raster, bool)> {
    let img = image::open(path)
        .map_err(|e| LomitError::Image(format!("cannot read {}: {e}", path.display())))?
        .to_rgb8();
    Ok(resize_to(img, resolution))
}

pub fn encode_image(r: &Raster) -> Result<Vec<u8>> {
    let img = raster_to_rgb(r)?;
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| LomitError::Image(format!("cannot encode PNG: {e}")))?;
    Ok(out.into_inner())
}

pub fn save_image(r: &Raster, path: &Path) -> Result<()> {
    let bytes = encode_image(r)?;
    std::fs::write(path, bytes).map_err(|e| LomitError::io(format!("writing {}", path.display()), e))
}

/// Quantizes a mask to 8 bits and encodes it as grayscale PNG.
pub fn encode_mask(m: &MaskRaster) -> Result<Vec<u8>> {
    if m.values.len() != (m.width * m.height) as usize {
        return dim_err(format!(
            "mask has {} values, expected {}",
            m.values.len(),
            m.width * m.height
        ));
    }
    let img = GrayImage::from_fn(m.width, m.height, |x, y| {
        image::Luma([to_u8(m.values[(y * m.width + x) as usize] * 255.0)])
    });
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| LomitError::Image(format!("cannot encode PNG: {e}")))?;
    Ok(out.into_inner())
}

/// Decodes a grayscale mask; masks are never resized, so a resolution other
/// than `expected` is a dimension error.
pub fn decode_mask(bytes: &[u8], expected: Option<(u32, u32)>) -> Result<MaskRaster> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| LomitError::Image(format!("cannot decode mask: {e}")))?
        .to_luma8();
    let (w, h) = img.dimensions();
    if let Some((eh, ew)) = expected {
        if (h, w) != (eh, ew) {
            return dim_err(format!("mask is {h}x{w}, expected {eh}x{ew}"));
        }
    }
    Ok(MaskRaster {
        height: h,
        width: w,
        values: img.pixels().map(|p| p[0] as f32 / 255.0).collect(),
    })
}

pub fn save_mask(m: &MaskRaster, path: &Path) -> Result<()> {
    let bytes = encode_mask(m)?;
    std::fs::write(path, bytes).map_err(|e| LomitError::io(format!("writing {}", path.display()), e))
}

pub fn load_mask(path: &Path, expected: Option<(u32, u32)>) -> Result<MaskRaster> {
    let bytes =
        std::fs::read(path).map_err(|e| LomitError::io(format!("reading {}", path.display()), e))?;
    decode_mask(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_quantization_is_bounded() {
        let values: Vec<f32> = (0..64).map(|i| i as f32 / 63.0).collect();
        let m = MaskRaster {
            height: 8,
            width: 8,
            values: values.clone(),
        };
        let back = decode_mask(&encode_mask(&m).unwrap(), Some((8, 8))).unwrap();
        for (a, b) in values.iter().zip(&back.values) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-7);
        }
        assert_eq!(back.values[63], 1.0);
        assert_eq!(back.values[0], 0.0);
    }

    #[test]
    fn mask_resolution_is_enforced() {
        let m = MaskRaster {
            height: 4,
            width: 4,
            values: vec![1.0; 16],
        };
        let bytes = encode_mask(&m).unwrap();
        assert!(matches!(
            decode_mask(&bytes, Some((8, 8))),
            Err(LomitError::Dimension(_))
        ));
    }

    #[test]
    fn image_round_trip_and_resize() {
        let pixels: Vec<f32> = (0..3 * 16 * 16).map(|i| (i % 255) as f32 / 127.5 - 1.0).collect();
        let r = Raster {
            height: 16,
            width: 16,
            pixels,
        };
        let bytes = encode_image(&r).unwrap();
        let (back, resized) = decode_image(&bytes, Some(16)).unwrap();
        assert!(!resized);
        for (a, b) in r.pixels.iter().zip(&back.pixels) {
            assert!((a - b).abs() <= 1.0 / 127.5);
        }
        let (small, resized) = decode_image(&bytes, Some(8)).unwrap();
        assert!(resized);
        assert_eq!((small.height, small.width), (8, 8));
        assert!(decode_image(b"not a png", None).is_err());
    }
}
