//! Dataset loading, preprocessing, augmentation, splitting, and batching.
//!
//! Layout on disk: `<root>/images/<id>.png` and `<root>/masks/<id>.png`,
//! 8-bit PNG, grayscale or RGB. Images scale to [0,1] and resize
//! bilinearly; masks threshold at >127 and resize by nearest-neighbor so
//! they stay binary.

mod augment;
mod batch;
mod split;
mod synth;

pub use augment::{augment, flip_h, flip_v, rotate90};
pub use batch::{epoch_order, stack_batch};
pub use split::{split, SplitPlan};
pub use synth::{generate, write_dataset};

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One preprocessed example: image in [0,1], mask in {0,1}, both S x S.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// [C, S, S]
    pub image: Tensor<f32>,
    /// [1, S, S]
    pub mask: Tensor<f32>,
}

/// Deterministically derive an independent RNG seed from up to three
/// components (base seed, epoch, sample index) via splitmix64 steps.
pub fn mix_seed(a: u64, b: u64, c: u64) -> u64 {
    let mut z = a;
    for add in [b, c] {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(add);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

/// Bilinear resize of a single-channel plane with half-pixel centers.
fn resize_plane_bilinear(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; oh * ow];
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for oy in 0..oh {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..ow {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            let v00 = src[y0 * w + x0] as f64;
            let v01 = src[y0 * w + x1] as f64;
            let v10 = src[y1 * w + x0] as f64;
            let v11 = src[y1 * w + x1] as f64;
            let top = v00 + (v01 - v00) * wx;
            let bot = v10 + (v11 - v10) * wx;
            out[oy * ow + ox] = (top + (bot - top) * wy) as f32;
        }
    }
    out
}

/// Nearest-neighbor resize (half-pixel centers); never invents values.
fn resize_plane_nearest(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; oh * ow];
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for oy in 0..oh {
        let y = (((oy as f64 + 0.5) * sy).floor() as usize).min(h - 1);
        for ox in 0..ow {
            let x = (((ox as f64 + 0.5) * sx).floor() as usize).min(w - 1);
            out[oy * ow + ox] = src[y * w + x];
        }
    }
    out
}

fn decode_image(path: &Path, in_channels: usize) -> Result<(Vec<f32>, usize, usize)> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot read image {}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::Data(format!("empty image {}", path.display())));
    }
    let planes = match in_channels {
        1 => {
            let gray = img.to_luma8();
            vec![gray.into_raw()]
        }
        3 => {
            let rgb = img.to_rgb8().into_raw();
            let mut planes = vec![Vec::with_capacity(w * h); 3];
            for px in rgb.chunks_exact(3) {
                for (c, plane) in planes.iter_mut().enumerate() {
                    plane.push(px[c]);
                }
            }
            planes
        }
        other => {
            return Err(Error::Config(format!(
                "in_channels must be 1 or 3 for PNG loading, got {other}"
            )))
        }
    };
    let mut data = Vec::with_capacity(in_channels * w * h);
    for plane in planes {
        data.extend(plane.iter().map(|&v| v as f32 / 255.0));
    }
    Ok((data, h, w))
}

fn decode_mask(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot read mask {}: {e}", path.display())))?;
    let gray = img.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::Data(format!("empty mask {}", path.display())));
    }
    let data = gray.into_raw().iter().map(|&v| f32::from(v > 127)).collect();
    Ok((data, h, w))
}

/// Load a standalone image for inference: decode to `in_channels` planes,
/// resize to `size` x `size`, and report the original (height, width).
pub fn load_image(
    path: &Path,
    size: usize,
    in_channels: usize,
) -> Result<(Tensor<f32>, usize, usize)> {
    let (img, ih, iw) = decode_image(path, in_channels)?;
    let mut image = Vec::with_capacity(in_channels * size * size);
    for c in 0..in_channels {
        let plane = &img[c * ih * iw..(c + 1) * ih * iw];
        image.extend(resize_plane_bilinear(plane, ih, iw, size, size));
    }
    Ok((Tensor::from_vec(image, &[in_channels, size, size])?, ih, iw))
}

/// Nearest-neighbor resize of one plane; binary inputs stay binary.
pub fn resize_nearest(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    resize_plane_nearest(src, h, w, oh, ow)
}

/// Load one image/mask pair and preprocess to `size` x `size`.
pub fn load_sample(
    image_path: &Path,
    mask_path: &Path,
    id: &str,
    size: usize,
    in_channels: usize,
) -> Result<Sample> {
    let (img, ih, iw) = decode_image(image_path, in_channels)?;
    let mut image = Vec::with_capacity(in_channels * size * size);
    for c in 0..in_channels {
        let plane = &img[c * ih * iw..(c + 1) * ih * iw];
        image.extend(resize_plane_bilinear(plane, ih, iw, size, size));
    }

    let (m, mh, mw) = decode_mask(mask_path)?;
    let mask = resize_plane_nearest(&m, mh, mw, size, size);

    Ok(Sample {
        id: id.to_string(),
        image: Tensor::from_vec(image, &[in_channels, size, size])?,
        mask: Tensor::from_vec(mask, &[1, size, size])?,
    })
}

/// Load every image under `<root>/images`, paired by filename with
/// `<root>/masks`, in lexicographic id order.
pub fn load_dataset(root: &Path, size: usize, in_channels: usize) -> Result<Vec<Sample>> {
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    if !images_dir.is_dir() {
        return Err(Error::Data(format!("no images/ directory under {}", root.display())));
    }

    let mut entries: Vec<(String, PathBuf)> = std::fs::read_dir(&images_dir)
        .map_err(|e| Error::Data(format!("cannot list {}: {e}", images_dir.display())))?
        .filter_map(|entry| {
            let path = entry.ok()?.path();
            let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
            let id = path.file_stem()?.to_str()?.to_string();
            (is_png && path.is_file()).then_some((id, path))
        })
        .collect();
    entries.sort_by(|a, b| a.0.cmp(&b.0));

    if entries.is_empty() {
        return Err(Error::Data(format!("no PNG images found under {}", images_dir.display())));
    }

    let mut samples = Vec::with_capacity(entries.len());
    for (id, image_path) in entries {
        let mask_path = masks_dir.join(format!("{id}.png"));
        if !mask_path.is_file() {
            return Err(Error::Data(format!("no mask for image '{id}'")));
        }
        samples.push(load_sample(&image_path, &mask_path, &id, size, in_channels)?);
    }
    Ok(samples)
}
