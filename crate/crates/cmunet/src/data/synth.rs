//! Seeded synthetic dataset: bright ellipses on dim noisy backgrounds with
//! exact masks. Used by tests, the overfit/ablation experiments, and the
//! `synth` CLI command.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{mix_seed, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Generate `count` samples of size `size` x `size`. Each image is an
/// axis-aligned ellipse (a circle when the radii agree) of bright noisy
/// foreground over a dark noisy background; the mask is the exact ellipse
/// membership test. Fully determined by (count, size, seed, in_channels).
pub fn generate(count: usize, size: usize, seed: u64, in_channels: usize) -> Vec<Sample> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64, 0x7379_6e74_6830));
            let s = size as f64;
            let cx = rng.gen_range(0.3..0.7) * s;
            let cy = rng.gen_range(0.3..0.7) * s;
            let rx = rng.gen_range(0.12..0.28) * s;
            let ry = if rng.gen_bool(0.5) { rx } else { rng.gen_range(0.12..0.28) * s };

            let mut mask = Vec::with_capacity(size * size);
            for y in 0..size {
                for x in 0..size {
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    let dy = (y as f64 + 0.5 - cy) / ry;
                    mask.push(f32::from(dx * dx + dy * dy <= 1.0));
                }
            }

            let mut image = Vec::with_capacity(in_channels * size * size);
            for _ in 0..in_channels {
                for &m in &mask {
                    let v = if m == 1.0 {
                        rng.gen_range(0.60..0.95)
                    } else {
                        rng.gen_range(0.05..0.40)
                    };
                    image.push(v as f32);
                }
            }

            Sample {
                id: format!("synth_{i:04}"),
                image: Tensor::from_vec(image, &[in_channels, size, size]).unwrap(),
                mask: Tensor::from_vec(mask, &[1, size, size]).unwrap(),
            }
        })
        .collect()
}

/// Write samples as 8-bit PNGs under `<dir>/images` and `<dir>/masks`.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    for d in [&images_dir, &masks_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    for sample in samples {
        let shape = sample.image.shape().to_vec();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let quantize = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;

        let img_path = images_dir.join(format!("{}.png", sample.id));
        let data = sample.image.data();
        match c {
            1 => {
                let buf: Vec<u8> = data.iter().map(|&v| quantize(v)).collect();
                image::GrayImage::from_raw(w as u32, h as u32, buf)
                    .expect("plane size matches")
                    .save(&img_path)
            }
            3 => {
                let mut buf = Vec::with_capacity(3 * h * w);
                for px in 0..h * w {
                    for ch in 0..3 {
                        buf.push(quantize(data[ch * h * w + px]));
                    }
                }
                image::RgbImage::from_raw(w as u32, h as u32, buf)
                    .expect("plane size matches")
                    .save(&img_path)
            }
            other => {
                return Err(Error::Config(format!(
                    "can only write 1- or 3-channel images, got {other}"
                )))
            }
        }
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", img_path.display())))?;

        let mask_path = masks_dir.join(format!("{}.png", sample.id));
        let buf: Vec<u8> = sample.mask.data().iter().map(|&v| if v > 0.0 { 255 } else { 0 }).collect();
        image::GrayImage::from_raw(w as u32, h as u32, buf)
            .expect("plane size matches")
            .save(&mask_path)
            .map_err(|e| Error::Data(format!("cannot write {}: {e}", mask_path.display())))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_well_formed() {
        let a = generate(4, 32, 9, 3);
        let b = generate(4, 32, 9, 3);
        assert_eq!(a.len(), 4);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.id, y.id);
            assert_eq!(&x.image.data()[..], &y.image.data()[..]);
            assert_eq!(&x.mask.data()[..], &y.mask.data()[..]);
        }
        for s in &a {
            assert_eq!(s.image.shape(), &[3, 32, 32]);
            assert_eq!(s.mask.shape(), &[1, 32, 32]);
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn different_seeds_draw_different_shapes() {
        let a = generate(1, 32, 0, 1).remove(0);
        let b = generate(1, 32, 1, 1).remove(0);
        assert_ne!(&a.mask.data()[..], &b.mask.data()[..]);
    }

    #[test]
    fn masks_have_nonempty_foreground_and_background() {
        for seed in 0..8 {
            let s = generate(1, 64, seed, 1).remove(0);
            let on: f32 = s.mask.data().iter().sum();
            let total = s.mask.len() as f32;
            assert!(on > 0.0 && on < total, "seed {seed}: foreground {on}/{total}");
        }
    }

    #[test]
    fn foreground_is_brighter_than_background() {
        let s = generate(1, 64, 3, 1).remove(0);
        let (img, mask) = (s.image.data(), s.mask.data());
        let fg: Vec<f32> =
            img.iter().zip(mask.iter()).filter(|(_, &m)| m == 1.0).map(|(&v, _)| v).collect();
        let bg: Vec<f32> =
            img.iter().zip(mask.iter()).filter(|(_, &m)| m == 0.0).map(|(&v, _)| v).collect();
        let mean = |v: &[f32]| v.iter().sum::<f32>() / v.len() as f32;
        assert!(mean(&fg) > mean(&bg) + 0.15);
    }
}
