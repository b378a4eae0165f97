//! Elementwise ops, pooling, upsampling, concatenation, reductions, and the
//! fused loss kernels, each with its exact backward rule.

use super::tape::{NodeInfo, OpKind, Tape};
use super::{Scalar, Tensor};
use crate::error::{shape_err, Result};
use crate::par::for_each_chunk_mut;

const ELEMWISE_CHUNK: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Sigmoid,
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
// 1 / sqrt(2*pi)
const INV_SQRT_TAU: f64 = 0.398_942_280_401_432_7;

fn relu_fwd<T: Scalar>(x: T) -> T {
    x.max(T::ZERO)
}

/// Exact GELU: 0.5 * x * (1 + erf(x / sqrt(2))).
fn gelu_fwd<T: Scalar>(x: T) -> T {
    let xf = x.to_f64();
    T::from_f64(0.5 * xf * (1.0 + libm::erf(xf * FRAC_1_SQRT_2)))
}

fn gelu_bwd(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = INV_SQRT_TAU * (-0.5 * x * x).exp();
    cdf + x * pdf
}

fn sigmoid_fwd<T: Scalar>(x: T) -> T {
    let xf = x.to_f64();
    let s = if xf >= 0.0 { 1.0 / (1.0 + (-xf).exp()) } else { let e = xf.exp(); e / (1.0 + e) };
    T::from_f64(s)
}

pub fn activation<T: Scalar>(tape: &mut Tape<T>, x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    let xs = x.data();
    let mut out = vec![T::ZERO; xs.len()];
    {
        let xs: &[T] = &xs;
        for_each_chunk_mut(&mut out, ELEMWISE_CHUNK, |i, chunk| {
            let base = i * ELEMWISE_CHUNK;
            for (j, o) in chunk.iter_mut().enumerate() {
                let v = xs[base + j];
                *o = match kind {
                    Activation::Relu => relu_fwd(v),
                    Activation::Gelu => gelu_fwd(v),
                    Activation::Sigmoid => sigmoid_fwd(v),
                };
            }
        });
    }
    drop(xs);

    let out = Tensor::from_op(out, x.shape().to_vec());
    let track = tape.track(&[x]);
    if track {
        out.set_requires_grad(true);
    }
    let op = match kind {
        Activation::Relu => OpKind::Relu,
        Activation::Gelu => OpKind::Gelu,
        Activation::Sigmoid => OpKind::Sigmoid,
    };
    let info = NodeInfo {
        op,
        inputs: vec![x.id()],
        output: out.id(),
        output_shape: out.shape().to_vec(),
    };
    let backward = track.then(|| {
        let x_ = x.clone();
        let out_ = out.clone();
        Box::new(move || {
            let gref = out_.grad_ref();
            let Some(g) = gref.as_ref() else { return };
            let xs = x_.data();
            let os = out_.data();
            let mut gx = vec![T::ZERO; xs.len()];
            {
                let (xs, os, g): (&[T], &[T], &[T]) = (&xs, &os, g);
                for_each_chunk_mut(&mut gx, ELEMWISE_CHUNK, |i, chunk| {
                    let base = i * ELEMWISE_CHUNK;
                    for (j, d) in chunk.iter_mut().enumerate() {
                        let idx = base + j;
                        let slope = match kind {
                            Activation::Relu => {
                                if xs[idx] > T::ZERO {
                                    T::ONE
                                } else {
                                    T::ZERO
                                }
                            }
                            Activation::Gelu => T::from_f64(gelu_bwd(xs[idx].to_f64())),
                            Activation::Sigmoid => {
                                let s = os[idx];
                                s * (T::ONE - s)
                            }
                        };
                        *d = g[idx] * slope;
                    }
                });
            }
            drop(os);
            drop(xs);
            drop(gref);
            x_.accumulate_grad(&gx);
        }) as Box<dyn Fn()>
    });
    tape.record(info, backward);
    out
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Mul,
}

fn binary<T: Scalar>(
    tape: &mut Tape<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    kind: Binary,
) -> Result<Tensor<T>> {
    let op_name = match kind {
        Binary::Add => "add",
        Binary::Mul => "mul",
    };
    // Identical shapes, or scalar-by-tensor. No other broadcasting.
    let a_scalar = a.len() == 1 && b.len() != 1;
    let b_scalar = b.len() == 1 && a.len() != 1;
    if !a_scalar && !b_scalar && a.shape() != b.shape() {
        return Err(shape_err!(
            "elementwise",
            "{op_name}: shapes {:?} and {:?} differ and neither side is a scalar",
            a.shape(),
            b.shape()
        ));
    }

    let out_shape = if a_scalar { b.shape().to_vec() } else { a.shape().to_vec() };
    let n = out_shape.iter().product::<usize>();
    let (av, bv) = (a.data(), b.data());
    let mut out = vec![T::ZERO; n];
    {
        let (av, bv): (&[T], &[T]) = (&av, &bv);
        for_each_chunk_mut(&mut out, ELEMWISE_CHUNK, |i, chunk| {
            let base = i * ELEMWISE_CHUNK;
            for (j, o) in chunk.iter_mut().enumerate() {
                let idx = base + j;
                let x = if a_scalar { av[0] } else { av[idx] };
                let y = if b_scalar { bv[0] } else { bv[idx] };
                *o = match kind {
                    Binary::Add => x + y,
                    Binary::Mul => x * y,
                };
            }
        });
    }
    drop(av);
    drop(bv);

    let out = Tensor::from_op(out, out_shape);
    let track = tape.track(&[a, b]);
    if track {
        out.set_requires_grad(true);
    }
    let info = NodeInfo {
        op: match kind {
            Binary::Add => OpKind::Add,
            Binary::Mul => OpKind::Mul,
        },
        inputs: vec![a.id(), b.id()],
        output: out.id(),
        output_shape: out.shape().to_vec(),
    };
    let backward = track.then(|| {
        let (a_, b_, out_) = (a.clone(), b.clone(), out.clone());
        Box::new(move || {
            let gref = out_.grad_ref();
            let Some(g) = gref.as_ref() else { return };
            let grad_side = |target: &Tensor<T>, other: &Tensor<T>, target_scalar: bool, other_scalar: bool| {
                let factor = other.data();
                let mut gt = vec![T::ZERO; target.len()];
                match kind {
                    Binary::Add => {
                        if target_scalar {
                            let mut acc = T::ZERO;
                            for &gi in g.iter() {
                                acc += gi;
                            }
                            gt[0] = acc;
                        } else {
                            gt.copy_from_slice(g);
                        }
                    }
                    Binary::Mul => {
                        if target_scalar {
                            let mut acc = T::ZERO;
                            for (i, &gi) in g.iter().enumerate() {
                                acc += gi * factor[i];
                            }
                            gt[0] = acc;
                        } else {
                            for (i, d) in gt.iter_mut().enumerate() {
                                let f = if other_scalar { factor[0] } else { factor[i] };
                                *d = g[i] * f;
                            }
                        }
                    }
                }
                drop(factor);
                target.accumulate_grad(&gt);
            };
            if a_.requires_grad() {
                grad_side(&a_, &b_, a_scalar, b_scalar);
            }
            if b_.requires_grad() {
                grad_side(&b_, &a_, b_scalar, a_scalar);
            }
        }) as Box<dyn Fn()>
    });
    tape.record(info, backward);
    Ok(out)
}

pub fn add<T: Scalar>(tape: &mut Tape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(tape, a, b, Binary::Add)
}

pub fn mul<T: Scalar>(tape: &mut Tape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(tape, a, b, Binary::Mul)
}

/// Multiply by a compile-time constant (not a tensor).
pub fn scale<T: Scalar>(tape: &mut Tape<T>, x: &Tensor<T>, k: T) -> Tensor<T> {
    let xs = x.data();
    let out: Vec<T> = xs.iter().map(|&v| v * k).collect();
    drop(xs);
    let out = Tensor::from_op(out, x.shape().to_vec());
    let track = tape.track(&[x]);
    if track {
        out.set_requires_grad(true);
    }
    let info = NodeInfo {
        op: OpKind::MulScalar,
        inputs: vec![x.id()],
        output: out.id(),
        output_shape: out.shape().to_vec(),
    };
    let backward = track.then(|| {
        let (x_, out_) = (x.clone(), out.clone());
        Box::new(move || {
            let gref = out_.grad_ref();
            let Some(g) = gref.as_ref() else { return };
            let gx: Vec<T> = g.iter().map(|&gi| gi * k).collect();
            drop(gref);
            x_.accumulate_grad(&gx);
        }) as Box<dyn Fn()>
    });
    tape.record(info, backward);
    out
}

/// 2x2 stride-2 max pooling. Ties go to the first element in row-major
/// window order, which pins the backward scatter.
pub fn maxpool2x2<T: Scalar>(tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("maxpool2x2")?;
    if h % 2 != 0 {
        return Err(shape_err!("maxpool2x2", "H={h} is odd (axis H must be even)"));
    }
    if w % 2 != 0 {
        return Err(shape_err!("maxpool2x2", "W={w} is odd (axis W must be even)"));
    }
    let (ho, wo) = (h / 2, w / 2);
    let plane_out = ho * wo;

    if plane_out == 0 || n * c == 0 {
        return Err(shape_err!("maxpool2x2", "input {:?} has no pixels", x.shape()));
    }

    let xs = x.data();
    let mut argmax = vec![0usize; n * c * plane_out];
    {
        let xs: &[T] = &xs;
        for_each_chunk_mut(&mut argmax, plane_out, |plane, chunk| {
            let in_base = plane * h * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best_idx = in_base + (2 * oh) * w + 2 * ow;
                    let mut best = xs[best_idx];
                    for (dh, dw) in [(0usize, 1usize), (1, 0), (1, 1)] {
                        let idx = in_base + (2 * oh + dh) * w + 2 * ow + dw;
                        if xs[idx] > best {
                            best = xs[idx];
                            best_idx = idx;
                        }
                    }
                    chunk[oh * wo + ow] = best_idx;
                }
            }
        });
    }
    let out_data: Vec<T> = argmax.iter().map(|&i| xs[i]).collect();
    drop(xs);

    let out = Tensor::from_op(out_data, vec![n, c, ho, wo]);
    let track = tape.track(&[x]);
    if track {
        out.set_requires_grad(true);
    }
    let info = NodeInfo {
        op: OpKind::MaxPool2x2,
        inputs: vec![x.id()],
        output: out.id(),
        output_shape: out.shape().to_vec(),
    };
    let backward = track.then(|| {
        let (x_, out_) = (x.clone(), out.clone());
        Box::new(move || {
            let gref = out_.grad_ref();
            let Some(g) = gref.as_ref() else { return };
            let mut gx = vec![T::ZERO; x_.len()];
            for (o, &src) in argmax.iter().enumerate() {
                gx[src] += g[o];
            }
            drop(gref);
            x_.accumulate_grad(&gx);
        }) as Box<dyn Fn()>
    });
    tape.record(info, backward);
    Ok(out)
}

/// Per-axis interpolation stops for a 2x upsample with half-pixel centers:
/// output index o samples source position o/2 - 0.25, clamped to the border.
fn upsample_stops(len_in: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len_in)
        .map(|o| {
            let s = (o as f64 + 0.5) / 2.0 - 0.5;
            let s = s.clamp(0.0, (len_in - 1) as f64);
            let i0 = s.floor() as usize;
            let frac = s - i0 as f64;
            let i1 = (i0 + 1).min(len_in - 1);
            (i0, i1, frac)
        })
        .collect()
}

pub fn bilinear_upsample2x<T: Scalar>(tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("bilinear_upsample2x")?;
    if h == 0 || w == 0 || n * c == 0 {
        return Err(shape_err!("bilinear_upsample2x", "input {:?} has no pixels", x.shape()));
    }
    let (ho, wo) = (2 * h, 2 * w);
    let rows = upsample_stops(h);
    let cols = upsample_stops(w);

    let xs = x.data();
    let mut out = vec![T::ZERO; n * c * ho * wo];
    {
        let xs: &[T] = &xs;
        let (rows, cols) = (&rows, &cols);
        for_each_chunk_mut(&mut out, ho * wo, |plane, chunk| {
            let in_base = plane * h * w;
            for (oh, &(r0, r1, fr)) in rows.iter().enumerate() {
                let row0 = in_base + r0 * w;
                let row1 = in_base + r1 * w;
                for (ow, &(c0, c1, fc)) in cols.iter().enumerate() {
                    let top = xs[row0 + c0].to_f64() * (1.0 - fc) + xs[row0 + c1].to_f64() * fc;
                    let bot = xs[row1 + c0].to_f64() * (1.0 - fc) + xs[row1 + c1].to_f64() * fc;
                    chunk[oh * wo + ow] = T::from_f64(top * (1.0 - fr) + bot * fr);
                }
            }
        });
    }
    drop(xs);

    let out = Tensor::from_op(out, vec![n, c, ho, wo]);
    let track = tape.track(&[x]);
    if track {
        out.set_requires_grad(true);
    }
    let info = NodeInfo {
        op: OpKind::BilinearUpsample2x,
        inputs: vec![x.id()],
        output: out.id(),
        output_shape: out.shape().to_vec(),
    };
    let backward = track.then(|| {
        let (x_, out_) = (x.clone(), out.clone());
        Box::new(move || {
            let gref = out_.grad_ref();
            let Some(g) = gref.as_ref() else { return };
            let g: &[T] = g;
            let rows = upsample_stops(h);
            let cols = upsample_stops(w);
            let mut gx = vec![T::ZERO; x_.len()];
            // Exact transpose of the forward: scatter with the same weights.
            for_each_chunk_mut(&mut gx, h * w, |plane, chunk| {
                let out_base = plane * ho * wo;
                for (oh, &(r0, r1, fr)) in rows.iter().enumerate() {
                    for (ow, &(c0, c1, fc)) in cols.iter().enumerate() {
                        let gv = g[out_base + oh * wo + ow].to_f64();
                        chunk[r0 * w + c0] += T::from_f64(gv * (1.0 - fr) * (1.0 - fc));
                        chunk[r0 * w + c1] += T::from_f64(gv * (1.0 - fr) * fc);
                        chunk[r1 * w + c0] += T::from_f64(gv * fr * (1.0 - fc));
                        chunk[r1 * w + c1] += T::from_f64(gv * fr * fc);
                    }
                }
            });
            drop(gref);
            x_.accumulate_grad(&gx);
        }) as Box<dyn Fn()>
    });
    tape.record(info, backward);
    Ok(out)
}

/// Concatenate along the channel axis; `a` keeps channels [0, Ca).
pub fn concat_channels<T: Scalar>(
    tape: &mut Tape<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (na, ca, ha, wa) = a.dims4("concat_channels")?;
    let (nb, cb, hb, wb) = b.dims4("concat_channels")?;
    if na != nb {
        return Err(shape_err!("concat_channels", "batch axis differs: {na} vs {nb}"));
    }
    if ha != hb || wa != wb {
        return Err(shape_err!(
            "concat_channels",
            "spatial axes differ: {ha}x{wa} vs {hb}x{wb}"
        ));
    }
    let plane = ha * wa;
    let co = ca + cb;
    let (av, bv) = (a.data(), b.data());
    let mut out = vec![T::ZERO; na * co * plane];
    for n in 0..na {
        let dst = n * co * plane;
        out[dst..dst + ca * plane].copy_from_slice(&av[n * ca * plane..(n + 1) * ca * plane]);
        out[dst + ca * plane..dst + co * plane]
            .copy_from_slice(&bv[n * cb * plane..(n + 1) * cb * plane]);
    }
    drop(av);
    drop(bv);

    let out = Tensor::from_op(out, vec![na, co, ha, wa]);
    let track = tape.track(&[a, b]);
    if track {
        out.set_requires_grad(true);
    }
    let info = NodeInfo {
        op: OpKind::ConcatChannels,
        inputs: vec![a.id(), b.id()],
        output: out.id(),
        output_shape: out.shape().to_vec(),
    };
    let backward = track.then(|| {
        let (a_, b_, out_) = (a.clone(), b.clone(), out.clone());
        Box::new(move || {
            let gref = out_.grad_ref();
            let Some(g) = gref.as_ref() else { return };
            if a_.requires_grad() {
                let mut ga = vec![T::ZERO; a_.len()];
                for n in 0..na {
                    let src = n * co * plane;
                    ga[n * ca * plane..(n + 1) * ca * plane]
                        .copy_from_slice(&g[src..src + ca * plane]);
                }
                a_.accumulate_grad(&ga);
            }
            if b_.requires_grad() {
                let mut gb = vec![T::ZERO; b_.len()];
                for n in 0..na {
                    let src = n * co * plane + ca * plane;
                    gb[n * cb * plane..(n + 1) * cb * plane]
                        .copy_from_slice(&g[src..src + cb * plane]);
                }
                b_.accumulate_grad(&gb);
            }
        }) as Box<dyn Fn()>
    });
    tape.record(info, backward);
    Ok(out)
}

fn reduce<T: Scalar>(tape: &mut Tape<T>, x: &Tensor<T>, mean_of: bool) -> Tensor<T> {
    let xs = x.data();
    let mut acc = T::ZERO;
    for &v in xs.iter() {
        acc += v;
    }
    let n = xs.len();
    drop(xs);
    let denom = if mean_of { T::from_f64(n as f64) } else { T::ONE };
    let out = Tensor::from_op(vec![acc / denom], vec![1]);
    let track = tape.track(&[x]);
    if track {
        out.set_requires_grad(true);
    }
    let info = NodeInfo {
        op: if mean_of { OpKind::Mean } else { OpKind::Sum },
        inputs: vec![x.id()],
        output: out.id(),
        output_shape: vec![1],
    };
    let backward = track.then(|| {
        let (x_, out_) = (x.clone(), out.clone());
        Box::new(move || {
            let gref = out_.grad_ref();
            let Some(g) = gref.as_ref() else { return };
            let gx = vec![g[0] / denom; x_.len()];
            drop(gref);
            x_.accumulate_grad(&gx);
        }) as Box<dyn Fn()>
    });
    tape.record(info, backward);
    out
}

/// Sum of all elements, as a `[1]` tensor.
pub fn sum<T: Scalar>(tape: &mut Tape<T>, x: &Tensor<T>) -> Tensor<T> {
    reduce(tape, x, false)
}

/// Mean of all elements, as a `[1]` tensor.
pub fn mean<T: Scalar>(tape: &mut Tape<T>, x: &Tensor<T>) -> Tensor<T> {
    reduce(tape, x, true)
}

/// Mean binary cross-entropy evaluated on logits in the stable form
/// max(z,0) - z*y + log(1 + exp(-|z|)). The target is treated as constant.
pub fn bce_with_logits<T: Scalar>(
    tape: &mut Tape<T>,
    logits: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<Tensor<T>> {
    if logits.shape() != target.shape() {
        return Err(shape_err!(
            "bce_with_logits",
            "logits shape {:?} does not match target shape {:?}",
            logits.shape(),
            target.shape()
        ));
    }
    let zs = logits.data();
    let ys = target.data();
    let n = zs.len();
    let mut acc = 0.0f64;
    for (&z, &y) in zs.iter().zip(ys.iter()) {
        let zf = z.to_f64();
        let yf = y.to_f64();
        acc += zf.max(0.0) - zf * yf + (-zf.abs()).exp().ln_1p();
    }
    drop(zs);
    drop(ys);
    let out = Tensor::from_op(vec![T::from_f64(acc / n as f64)], vec![1]);
    let track = tape.track(&[logits]);
    if track {
        out.set_requires_grad(true);
    }
    let info = NodeInfo {
        op: OpKind::BceWithLogits,
        inputs: vec![logits.id(), target.id()],
        output: out.id(),
        output_shape: vec![1],
    };
    let backward = track.then(|| {
        let (z_, y_, out_) = (logits.clone(), target.clone(), out.clone());
        Box::new(move || {
            let gref = out_.grad_ref();
            let Some(g) = gref.as_ref() else { return };
            let upstream = g[0].to_f64();
            let zs = z_.data();
            let ys = y_.data();
            let scale = upstream / zs.len() as f64;
            let gz: Vec<T> = zs
                .iter()
                .zip(ys.iter())
                .map(|(&z, &y)| {
                    let s = sigmoid_fwd(z).to_f64();
                    T::from_f64((s - y.to_f64()) * scale)
                })
                .collect();
            drop(ys);
            drop(zs);
            drop(gref);
            z_.accumulate_grad(&gz);
        }) as Box<dyn Fn()>
    });
    tape.record(info, backward);
    Ok(out)
}

/// Smoothed Dice loss on probabilities with batch-global sums:
/// 1 - (2*sum(p*y) + smooth) / (sum(p) + sum(y) + smooth).
pub fn dice_loss_kernel<T: Scalar>(
    tape: &mut Tape<T>,
    probs: &Tensor<T>,
    target: &Tensor<T>,
    smooth: f64,
) -> Result<Tensor<T>> {
    if probs.shape() != target.shape() {
        return Err(shape_err!(
            "dice_loss",
            "probs shape {:?} does not match target shape {:?}",
            probs.shape(),
            target.shape()
        ));
    }
    let ps = probs.data();
    let ys = target.data();
    let mut inter = 0.0f64;
    let mut psum = 0.0f64;
    let mut ysum = 0.0f64;
    for (&p, &y) in ps.iter().zip(ys.iter()) {
        let (pf, yf) = (p.to_f64(), y.to_f64());
        inter += pf * yf;
        psum += pf;
        ysum += yf;
    }
    drop(ps);
    drop(ys);
    let numer = 2.0 * inter + smooth;
    let denom = psum + ysum + smooth;
    let out = Tensor::from_op(vec![T::from_f64(1.0 - numer / denom)], vec![1]);
    let track = tape.track(&[probs]);
    if track {
        out.set_requires_grad(true);
    }
    let info = NodeInfo {
        op: OpKind::DiceLoss,
        inputs: vec![probs.id(), target.id()],
        output: out.id(),
        output_shape: vec![1],
    };
    let backward = track.then(|| {
        let (p_, y_, out_) = (probs.clone(), target.clone(), out.clone());
        Box::new(move || {
            let gref = out_.grad_ref();
            let Some(g) = gref.as_ref() else { return };
            let upstream = g[0].to_f64();
            let ys = y_.data();
            // d/dp_i [1 - numer/denom] = (numer - 2*y_i*denom) / denom^2
            let dd = denom * denom;
            let gp: Vec<T> = ys
                .iter()
                .map(|&y| T::from_f64(upstream * (numer - 2.0 * y.to_f64() * denom) / dd))
                .collect();
            drop(ys);
            drop(gref);
            p_.accumulate_grad(&gp);
        }) as Box<dyn Fn()>
    });
    tape.record(info, backward);
    Ok(out)
}
