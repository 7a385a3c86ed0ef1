//! PNG encoding of samples.

use std::collections::BTreeSet;
use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;
use crate::util::write_atomic;

use super::RgbdSample;

/// Nearest end of the depth camera's working range, in millimetres.
pub const DEPTH_MIN_MM: u16 = 250;
/// Farthest end of the depth camera's working range, in millimetres.
pub const DEPTH_MAX_MM: u16 = 2500;
/// Normalised value of a reading exactly at [`DEPTH_MIN_MM`], kept above
/// zero so it stays distinct from a missing reading.
pub const DEPTH_NEAR_EPSILON: f32 = 1e-4;

/// Overlay highlight colour for predicted glass.
pub const OVERLAY_COLOR: [u8; 3] = [0, 255, 255];

/// Maps a raw depth reading in millimetres to `[0, 1]`.
///
/// Zero (missing) stays zero. Other readings are clamped to the working
/// range and mapped linearly so the far end is 1.0.
pub fn normalize_depth(raw_mm: u16) -> f32 {
    if raw_mm == 0 {
        return 0.0;
    }
    let v = raw_mm.clamp(DEPTH_MIN_MM, DEPTH_MAX_MM);
    if v == DEPTH_MIN_MM {
        return DEPTH_NEAR_EPSILON;
    }
    ((v - DEPTH_MIN_MM) as f64 / (DEPTH_MAX_MM - DEPTH_MIN_MM) as f64) as f32
}

/// Inverse of [`normalize_depth`] on its image.
pub fn denormalize_depth(v: f32) -> u16 {
    if v <= 0.0 {
        return 0;
    }
    let mm = (v as f64 * (DEPTH_MAX_MM - DEPTH_MIN_MM) as f64 + DEPTH_MIN_MM as f64).round();
    mm.clamp(DEPTH_MIN_MM as f64, DEPTH_MAX_MM as f64) as u16
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::ImageReader::open(path)
        .map_err(|e| Error::data(path, e.to_string()))?
        .with_guessed_format()
        .map_err(|e| Error::data(path, e.to_string()))?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

fn encode_png<P, C>(path: &Path, img: &ImageBuffer<P, C>) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    write_atomic(path, buf.get_ref())
}

/// Loads an 8-bit RGB PNG as a `[3, H, W]` tensor in `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = match open(path)? {
        DynamicImage::ImageRgb8(img) => img,
        other => {
            return Err(Error::data(
                path,
                format!("expected 8-bit RGB, found {:?}", other.color()),
            ))
        }
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new([3, h, w], data)
}

/// Loads a 16-bit depth PNG (millimetres, 0 = missing) as a normalised
/// `[1, H, W]` tensor.
pub fn load_depth(path: &Path) -> Result<Tensor<f32>> {
    let img = match open(path)? {
        DynamicImage::ImageLuma16(img) => img,
        other => {
            return Err(Error::data(
                path,
                format!("expected 16-bit grayscale depth, found {:?}", other.color()),
            ))
        }
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| normalize_depth(p[0])).collect();
    Tensor::new([1, h, w], data)
}

/// Loads an 8-bit mask PNG whose pixels are exactly 0 or 255.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = match open(path)? {
        DynamicImage::ImageLuma8(img) => img,
        other => {
            return Err(Error::data(
                path,
                format!("expected 8-bit grayscale mask, found {:?}", other.color()),
            ))
        }
    };
    if let Some(p) = img.pixels().find(|p| p[0] != 0 && p[0] != 255) {
        return Err(Error::data(path, format!("mask value {} is not 0 or 255", p[0])));
    }
    let data = img.pixels().map(|p| (p[0] >= 128) as u8).collect();
    Mask::new(img.height() as usize, img.width() as usize, data)
}

fn rgb_bytes(rgb: &Tensor<f32>) -> Result<(u32, u32, Vec<u8>)> {
    let [3, h, w] = rgb.shape()[..] else {
        return Err(Error::invalid("save_rgb", format!("expected [3,H,W], got {:?}", rgb.shape())));
    };
    let mut out = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            out.push((rgb.data()[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok((w as u32, h as u32, out))
}

pub fn save_rgb(path: &Path, rgb: &Tensor<f32>) -> Result<()> {
    let (w, h, bytes) = rgb_bytes(rgb)?;
    let img: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(w, h, bytes).expect("buffer size");
    encode_png(path, &img)
}

pub fn save_depth(path: &Path, depth: &Tensor<f32>) -> Result<()> {
    let [1, h, w] = depth.shape()[..] else {
        return Err(Error::invalid("save_depth", format!("expected [1,H,W], got {:?}", depth.shape())));
    };
    let mm: Vec<u16> = depth.data().iter().map(|&v| denormalize_depth(v)).collect();
    let img: ImageBuffer<Luma<u16>, _> =
        ImageBuffer::from_raw(w as u32, h as u32, mm).expect("buffer size");
    encode_png(path, &img)
}

pub fn save_depth_mm(path: &Path, height: usize, width: usize, mm: &[u16]) -> Result<()> {
    let img: ImageBuffer<Luma<u16>, _> =
        ImageBuffer::from_raw(width as u32, height as u32, mm.to_vec())
            .ok_or_else(|| Error::invalid("save_depth", "buffer does not match dimensions"))?;
    encode_png(path, &img)
}

/// Writes a mask as 8-bit PNG with values {0, 255}.
pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    let bytes: Vec<u8> = mask.data().iter().map(|&v| v * 255).collect();
    let img: ImageBuffer<Luma<u8>, _> =
        ImageBuffer::from_raw(mask.width() as u32, mask.height() as u32, bytes).expect("buffer size");
    encode_png(path, &img)
}

/// RGB image with glass pixels blended half-and-half with
/// [`OVERLAY_COLOR`].
pub fn save_overlay(path: &Path, rgb: &Tensor<f32>, mask: &Mask) -> Result<()> {
    let (w, h, mut bytes) = rgb_bytes(rgb)?;
    if (h as usize, w as usize) != mask.dims() {
        return Err(Error::invalid("overlay", "mask and image sizes differ"));
    }
    for (i, &m) in mask.data().iter().enumerate() {
        if m == 1 {
            for c in 0..3 {
                let v = &mut bytes[3 * i + c];
                *v = ((*v as u16 + OVERLAY_COLOR[c] as u16 + 1) / 2) as u8;
            }
        }
    }
    let img: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(w, h, bytes).expect("buffer size");
    encode_png(path, &img)
}

/// Loads an aligned (rgb, depth, mask) triple.
pub fn load_sample(
    id: impl Into<String>,
    rgb_path: &Path,
    depth_path: &Path,
    mask_path: &Path,
    tags: BTreeSet<String>,
) -> Result<RgbdSample> {
    let rgb = load_rgb(rgb_path)?;
    let depth = load_depth(depth_path)?;
    let mask = load_mask(mask_path)?;
    let dims = (rgb.shape()[1], rgb.shape()[2]);
    if (depth.shape()[1], depth.shape()[2]) != dims {
        return Err(Error::data(
            depth_path,
            format!("depth is {:?} but rgb is {dims:?}", &depth.shape()[1..]),
        ));
    }
    if mask.dims() != dims {
        return Err(Error::data(
            mask_path,
            format!("mask is {:?} but rgb is {dims:?}", mask.dims()),
        ));
    }
    Ok(RgbdSample {
        id: id.into(),
        rgb,
        depth,
        mask,
        tags,
    })
}

/// Writes `rgb.png`, `depth.png` and `mask.png` into `dir`.
pub fn save_sample(dir: &Path, sample: &RgbdSample) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_rgb(&dir.join("rgb.png"), &sample.rgb)?;
    save_depth(&dir.join("depth.png"), &sample.depth)?;
    save_mask(&dir.join("mask.png"), &sample.mask)
}
