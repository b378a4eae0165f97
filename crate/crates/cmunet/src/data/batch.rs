//! Epoch shuffling and batch stacking.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::mix_seed;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Shuffled index order for one epoch; a pure function of (n, seed, epoch).
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch, 0x6261_7463_6865_7321));
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Stack per-sample (image [C,S,S], mask [1,S,S]) pairs into
/// ([N,C,S,S], [N,1,S,S]) batch tensors.
pub fn stack_batch(items: &[(&Tensor<f32>, &Tensor<f32>)]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if items.is_empty() {
        return Err(Error::Validation("cannot stack an empty batch".into()));
    }
    let img_shape = items[0].0.shape().to_vec();
    let mask_shape = items[0].1.shape().to_vec();
    if img_shape.len() != 3 || mask_shape.len() != 3 {
        return Err(Error::Validation(format!(
            "expected [C,H,W] samples, got image {img_shape:?} / mask {mask_shape:?}"
        )));
    }

    let n = items.len();
    let mut images = Vec::with_capacity(n * items[0].0.len());
    let mut masks = Vec::with_capacity(n * items[0].1.len());
    for (img, mask) in items {
        if img.shape() != img_shape || mask.shape() != mask_shape {
            return Err(Error::Validation(format!(
                "inconsistent sample shapes in batch: {:?} vs {img_shape:?}",
                img.shape()
            )));
        }
        images.extend_from_slice(&img.data());
        masks.extend_from_slice(&mask.data());
    }

    let mut img_dims = vec![n];
    img_dims.extend(&img_shape);
    let mut mask_dims = vec![n];
    mask_dims.extend(&mask_shape);
    Ok((Tensor::from_vec(images, &img_dims)?, Tensor::from_vec(masks, &mask_dims)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_a_permutation_and_deterministic() {
        let a = epoch_order(10, 42, 3);
        let b = epoch_order(10, 42, 3);
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn different_epochs_reshuffle() {
        let orders: Vec<Vec<usize>> = (0..4).map(|e| epoch_order(32, 7, e)).collect();
        assert!(orders.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn chunking_yields_a_short_final_batch() {
        let order = epoch_order(10, 0, 0);
        let sizes: Vec<usize> = order.chunks(8).map(<[usize]>::len).collect();
        assert_eq!(sizes, [8, 2]);
        let singletons: Vec<usize> = order.chunks(1).map(<[usize]>::len).collect();
        assert_eq!(singletons.len(), 10);
    }

    #[test]
    fn stacking_concatenates_along_a_new_batch_axis() {
        let img1 = Tensor::from_vec(vec![1.0; 12], &[3, 2, 2]).unwrap();
        let mask1 = Tensor::from_vec(vec![0.0; 4], &[1, 2, 2]).unwrap();
        let img2 = Tensor::from_vec(vec![2.0; 12], &[3, 2, 2]).unwrap();
        let mask2 = Tensor::from_vec(vec![1.0; 4], &[1, 2, 2]).unwrap();

        let (images, masks) = stack_batch(&[(&img1, &mask1), (&img2, &mask2)]).unwrap();
        assert_eq!(images.shape(), &[2, 3, 2, 2]);
        assert_eq!(masks.shape(), &[2, 1, 2, 2]);
        assert!(images.data()[..12].iter().all(|&v| v == 1.0));
        assert!(images.data()[12..].iter().all(|&v| v == 2.0));
    }

    #[test]
    fn empty_and_mismatched_batches_error() {
        assert!(stack_batch(&[]).is_err());
        let a = Tensor::from_vec(vec![0.0; 12], &[3, 2, 2]).unwrap();
        let am = Tensor::from_vec(vec![0.0; 4], &[1, 2, 2]).unwrap();
        let b = Tensor::from_vec(vec![0.0; 27], &[3, 3, 3]).unwrap();
        let bm = Tensor::from_vec(vec![0.0; 9], &[1, 3, 3]).unwrap();
        assert!(stack_batch(&[(&a, &am), (&b, &bm)]).is_err());
    }
}
