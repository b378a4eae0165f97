//! Batch normalization over the (N, H, W) axes of an NCHW tensor, with
//! running statistics for inference and the full training-mode backward.

use std::cell::Cell;

use super::tape::{NodeInfo, OpKind, Tape};
use super::{Mode, Scalar, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::par::for_each_chunk_mut;

/// Per-channel running statistics. The buffers are plain tensors so they can
/// be checkpointed by name; they never require gradients.
pub struct BnState<T: Scalar> {
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    initialized: Cell<bool>,
}

impl<T: Scalar> BnState<T> {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: Tensor::from_vec(vec![T::ZERO; channels], &[channels]).unwrap(),
            running_var: Tensor::from_vec(vec![T::ONE; channels], &[channels]).unwrap(),
            initialized: Cell::new(false),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized.get()
    }

    /// Marks the running buffers as holding real statistics (used when they
    /// are restored from a checkpoint rather than produced by training).
    pub fn set_initialized(&self, v: bool) {
        self.initialized.set(v);
    }
}

#[allow(clippy::too_many_arguments)]
pub fn batchnorm2d<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &BnState<T>,
    mode: Mode,
    eps: f64,
    momentum: f64,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("batchnorm2d")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err!(
            "batchnorm2d",
            "axis C: input has {c} channels, gamma {:?}, beta {:?}",
            gamma.shape(),
            beta.shape()
        ));
    }
    if state.channels() != c {
        return Err(shape_err!(
            "batchnorm2d",
            "axis C: input has {c} channels, running stats {}",
            state.channels()
        ));
    }
    let plane = h * w;
    let m = n * plane;
    let train = mode == Mode::Train;
    if train && m == 0 {
        return Err(shape_err!("batchnorm2d", "train mode needs N*H*W >= 1, got {:?}", x.shape()));
    }
    if !train && !state.is_initialized() {
        return Err(Error::State(
            "batchnorm2d: eval mode requested but running statistics were never initialized \
             (train first or load a checkpoint)"
                .into(),
        ));
    }

    // Per-channel mean and 1/std, accumulated in f64 regardless of T.
    let mut mean = vec![0.0f64; c];
    let mut istd = vec![0.0f64; c];
    {
        let xs = x.data();
        if train {
            let mut var = vec![0.0f64; c];
            for ci in 0..c {
                let mut acc = 0.0f64;
                for ni in 0..n {
                    let p = &xs[(ni * c + ci) * plane..][..plane];
                    for &v in p {
                        acc += v.to_f64();
                    }
                }
                let mu = acc / m as f64;
                let mut sq = 0.0f64;
                for ni in 0..n {
                    let p = &xs[(ni * c + ci) * plane..][..plane];
                    for &v in p {
                        let d = v.to_f64() - mu;
                        sq += d * d;
                    }
                }
                mean[ci] = mu;
                var[ci] = sq / m as f64;
                istd[ci] = 1.0 / (var[ci] + eps).sqrt();
            }
            // Exponential running update with the same biased estimator.
            let mut rm = state.running_mean.data_mut();
            let mut rv = state.running_var.data_mut();
            for ci in 0..c {
                let old_m = rm[ci].to_f64();
                let old_v = rv[ci].to_f64();
                rm[ci] = T::from_f64((1.0 - momentum) * old_m + momentum * mean[ci]);
                rv[ci] = T::from_f64((1.0 - momentum) * old_v + momentum * var[ci]);
            }
            state.set_initialized(true);
        } else {
            let rm = state.running_mean.data();
            let rv = state.running_var.data();
            for ci in 0..c {
                mean[ci] = rm[ci].to_f64();
                istd[ci] = 1.0 / (rv[ci].to_f64() + eps).sqrt();
            }
        }
    }

    let mut out = vec![T::ZERO; n * c * plane];
    {
        let xs = x.data();
        let gv = gamma.data();
        let bv = beta.data();
        let (xs, gv, bv): (&[T], &[T], &[T]) = (&xs, &gv, &bv);
        let (mean, istd) = (&mean, &istd);
        for_each_chunk_mut(&mut out, plane, |pl, chunk| {
            let ci = pl % c;
            let (mu, is) = (mean[ci], istd[ci]);
            let (ga, be) = (gv[ci].to_f64(), bv[ci].to_f64());
            let src = &xs[pl * plane..][..plane];
            for (o, &v) in chunk.iter_mut().zip(src) {
                *o = T::from_f64((v.to_f64() - mu) * is * ga + be);
            }
        });
    }

    let out = Tensor::from_op(out, vec![n, c, h, w]);
    let track = tape.track(&[x, gamma, beta]);
    if track {
        out.set_requires_grad(true);
    }
    let info = NodeInfo {
        op: OpKind::BatchNorm2d { train },
        inputs: vec![x.id(), gamma.id(), beta.id()],
        output: out.id(),
        output_shape: out.shape().to_vec(),
    };
    let backward = track.then(|| {
        let (x_, g_, b_, out_) = (x.clone(), gamma.clone(), beta.clone(), out.clone());
        Box::new(move || {
            let gref = out_.grad_ref();
            let Some(g) = gref.as_ref() else { return };
            let g: &[T] = g;
            let xs = x_.data();
            let gam = g_.data();

            // Per-channel sums of g and g*xhat.
            let mut sum_g = vec![0.0f64; c];
            let mut sum_gx = vec![0.0f64; c];
            for ci in 0..c {
                let (mut sg, mut sgx) = (0.0f64, 0.0f64);
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for i in 0..plane {
                        let gi = g[base + i].to_f64();
                        let xh = (xs[base + i].to_f64() - mean[ci]) * istd[ci];
                        sg += gi;
                        sgx += gi * xh;
                    }
                }
                sum_g[ci] = sg;
                sum_gx[ci] = sgx;
            }

            if g_.requires_grad() {
                let dg: Vec<T> = sum_gx.iter().map(|&v| T::from_f64(v)).collect();
                g_.accumulate_grad(&dg);
            }
            if b_.requires_grad() {
                let db: Vec<T> = sum_g.iter().map(|&v| T::from_f64(v)).collect();
                b_.accumulate_grad(&db);
            }
            if x_.requires_grad() {
                let mut gx = vec![T::ZERO; xs.len()];
                let (xs, g): (&[T], &[T]) = (&xs, g);
                let (mean, istd, sum_g, sum_gx) = (&mean, &istd, &sum_g, &sum_gx);
                let gam: &[T] = &gam;
                let inv_m = 1.0 / m as f64;
                for_each_chunk_mut(&mut gx, plane, |pl, chunk| {
                    let ci = pl % c;
                    let scale = gam[ci].to_f64() * istd[ci];
                    let base = pl * plane;
                    for (i, o) in chunk.iter_mut().enumerate() {
                        let gi = g[base + i].to_f64();
                        let d = if train {
                            let xh = (xs[base + i].to_f64() - mean[ci]) * istd[ci];
                            scale * (gi - inv_m * sum_g[ci] - xh * inv_m * sum_gx[ci])
                        } else {
                            scale * gi
                        };
                        *o = T::from_f64(d);
                    }
                });
                drop(gref);
                x_.accumulate_grad(&gx);
            }
        }) as Box<dyn Fn()>
    });
    tape.record(info, backward);
    Ok(out)
}
