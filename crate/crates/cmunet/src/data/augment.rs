//! Training-time augmentation: k*90-degree rotation plus independent
//! horizontal/vertical flips, applied identically to image and mask.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::tensor::Tensor;

fn transform_chw(t: &Tensor<f32>, f: impl Fn(usize, usize, usize, usize) -> (usize, usize)) -> Tensor<f32> {
    let shape = t.shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let src = t.data();
    let mut out = vec![0.0f32; src.len()];
    for ch in 0..c {
        let plane = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = f(y, x, h, w);
                out[plane + y * w + x] = src[plane + sy * w + sx];
            }
        }
    }
    Tensor::from_vec(out, &shape).unwrap()
}

/// Rotate a square [C,S,S] tensor counterclockwise by k*90 degrees.
pub fn rotate90(t: &Tensor<f32>, k: usize) -> Tensor<f32> {
    match k % 4 {
        0 => t.clone(),
        // out(y, x) = in(x, W-1-y): 90 degrees counterclockwise
        1 => transform_chw(t, |y, x, _, w| (x, w - 1 - y)),
        2 => transform_chw(t, |y, x, h, w| (h - 1 - y, w - 1 - x)),
        _ => transform_chw(t, |y, x, h, _| (h - 1 - x, y)),
    }
}

/// Mirror left-right.
pub fn flip_h(t: &Tensor<f32>) -> Tensor<f32> {
    transform_chw(t, |y, x, _, w| (y, w - 1 - x))
}

/// Mirror top-bottom.
pub fn flip_v(t: &Tensor<f32>) -> Tensor<f32> {
    transform_chw(t, |y, x, h, _| (h - 1 - y, x))
}

/// Draw (rotation k, hflip, vflip) from the RNG — in that order — and apply
/// the same transform to image and mask. k=0 with no flips returns the
/// sample's tensors unchanged.
pub fn augment(sample: &Sample, rng: &mut ChaCha8Rng) -> Sample {
    let k = rng.gen_range(0..4usize);
    let hflip = rng.gen_bool(0.5);
    let vflip = rng.gen_bool(0.5);

    let apply = |t: &Tensor<f32>| {
        let mut out = rotate90(t, k);
        if hflip {
            out = flip_h(&out);
        }
        if vflip {
            out = flip_v(&out);
        }
        out
    };

    Sample { id: sample.id.clone(), image: apply(&sample.image), mask: apply(&sample.mask) }
}
