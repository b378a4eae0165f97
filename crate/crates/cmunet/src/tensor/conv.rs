//! Direct 2-D convolution (cross-correlation) with stride, zero padding,
//! dilation, and channel groups, plus exact input/weight/bias gradients.
//!
//! Everything the network needs runs at stride 1, so that path gets a
//! contiguous-row formulation the compiler can vectorize; the generic path
//! handles arbitrary strides for completeness.

use super::tape::{NodeInfo, OpKind, Tape};
use super::{Scalar, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::par::for_each_chunk_mut;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec { stride: 1, padding: 0, dilation: 1, groups: 1 }
    }
}

impl Conv2dSpec {
    /// Resolution-preserving spec for an odd kernel at stride 1.
    pub fn same(kernel: usize) -> Self {
        Conv2dSpec { padding: kernel / 2, ..Self::default() }
    }
}

fn out_extent(axis: &'static str, extent: usize, k: usize, spec: &Conv2dSpec) -> Result<usize> {
    let eff = spec.dilation * (k - 1) + 1;
    let padded = extent + 2 * spec.padding;
    if eff > padded {
        return Err(shape_err!(
            "conv2d",
            "axis {axis}: effective kernel extent {eff} exceeds padded input {padded}"
        ));
    }
    Ok((padded - eff) / spec.stride + 1)
}

/// Output spatial size for a square `k` kernel under `spec`.
pub fn conv2d_output_hw(h: usize, w: usize, k: usize, spec: &Conv2dSpec) -> Result<(usize, usize)> {
    Ok((out_extent("H", h, k, spec)?, out_extent("W", w, k, spec)?))
}

/// Valid output range [lo, hi) along one axis at stride 1 for a tap offset,
/// such that the sampled input index stays in bounds.
#[inline]
fn s1_range(extent_in: usize, extent_out: usize, pad: usize, tap: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(tap);
    let hi = (extent_in + pad).saturating_sub(tap).min(extent_out);
    (lo, hi)
}

struct Dims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cig: usize,
    k: usize,
    ho: usize,
    wo: usize,
}

fn forward<T: Scalar>(xs: &[T], ws: &[T], bs: Option<&[T]>, d: &Dims, spec: Conv2dSpec) -> Vec<T> {
    let Dims { n, cin, h, w, cout, cig, k, ho, wo } = *d;
    let (s, p, dl) = (spec.stride, spec.padding, spec.dilation);
    let cog = cout / spec.groups;
    let mut out = vec![T::ZERO; n * cout * ho * wo];
    for_each_chunk_mut(&mut out, ho * wo, |plane, chunk| {
        let ni = plane / cout;
        let co = plane % cout;
        let g = co / cog;
        if let Some(b) = bs {
            chunk.fill(b[co]);
        }
        for ci in 0..cig {
            let x_plane = &xs[(ni * cin + g * cig + ci) * h * w..][..h * w];
            let w_base = (co * cig + ci) * k * k;
            for kh in 0..k {
                let th = kh * dl;
                for kw in 0..k {
                    let tw = kw * dl;
                    let wv = ws[w_base + kh * k + kw];
                    if s == 1 {
                        let (oh_lo, oh_hi) = s1_range(h, ho, p, th);
                        let (ow_lo, ow_hi) = s1_range(w, wo, p, tw);
                        if oh_lo >= oh_hi || ow_lo >= ow_hi {
                            continue;
                        }
                        for oh in oh_lo..oh_hi {
                            let ih = oh + th - p;
                            let src = &x_plane[ih * w + (ow_lo + tw - p)..][..ow_hi - ow_lo];
                            let dst = &mut chunk[oh * wo + ow_lo..oh * wo + ow_hi];
                            for (o, &x) in dst.iter_mut().zip(src) {
                                *o += wv * x;
                            }
                        }
                    } else {
                        for oh in 0..ho {
                            let ih = (oh * s + th) as isize - p as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for ow in 0..wo {
                                let iw = (ow * s + tw) as isize - p as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                chunk[oh * wo + ow] += wv * x_plane[ih as usize * w + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

fn grad_weight<T: Scalar>(xs: &[T], gs: &[T], d: &Dims, spec: Conv2dSpec) -> Vec<T> {
    let Dims { n, cin, h, w, cout, cig, k, ho, wo } = *d;
    let (s, p, dl) = (spec.stride, spec.padding, spec.dilation);
    let cog = cout / spec.groups;
    let mut gw = vec![T::ZERO; cout * cig * k * k];
    for_each_chunk_mut(&mut gw, cig * k * k, |co, chunk| {
        let g = co / cog;
        for ni in 0..n {
            let g_plane = &gs[(ni * cout + co) * ho * wo..][..ho * wo];
            for ci in 0..cig {
                let x_plane = &xs[(ni * cin + g * cig + ci) * h * w..][..h * w];
                for kh in 0..k {
                    let th = kh * dl;
                    for kw in 0..k {
                        let tw = kw * dl;
                        let mut acc = T::ZERO;
                        if s == 1 {
                            let (oh_lo, oh_hi) = s1_range(h, ho, p, th);
                            let (ow_lo, ow_hi) = s1_range(w, wo, p, tw);
                            if oh_lo >= oh_hi || ow_lo >= ow_hi {
                                continue;
                            }
                            for oh in oh_lo..oh_hi {
                                let ih = oh + th - p;
                                let xrow = &x_plane[ih * w + (ow_lo + tw - p)..][..ow_hi - ow_lo];
                                let grow = &g_plane[oh * wo + ow_lo..oh * wo + ow_hi];
                                for (&gv, &xv) in grow.iter().zip(xrow) {
                                    acc += gv * xv;
                                }
                            }
                        } else {
                            for oh in 0..ho {
                                let ih = (oh * s + th) as isize - p as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for ow in 0..wo {
                                    let iw = (ow * s + tw) as isize - p as isize;
                                    if iw < 0 || iw >= w as isize {
                                        continue;
                                    }
                                    acc += g_plane[oh * wo + ow]
                                        * x_plane[ih as usize * w + iw as usize];
                                }
                            }
                        }
                        chunk[ci * k * k + kh * k + kw] += acc;
                    }
                }
            }
        }
    });
    gw
}

fn grad_input<T: Scalar>(ws: &[T], gs: &[T], d: &Dims, spec: Conv2dSpec) -> Vec<T> {
    let Dims { n, cin, h, w, cout, cig, k, ho, wo } = *d;
    let (s, p, dl) = (spec.stride, spec.padding, spec.dilation);
    let cog = cout / spec.groups;
    let mut gx = vec![T::ZERO; n * cin * h * w];
    for_each_chunk_mut(&mut gx, h * w, |plane, chunk| {
        let ni = plane / cin;
        let ci_abs = plane % cin;
        let g = ci_abs / cig;
        let ci = ci_abs % cig;
        for co in g * cog..(g + 1) * cog {
            let g_plane = &gs[(ni * cout + co) * ho * wo..][..ho * wo];
            let w_base = (co * cig + ci) * k * k;
            for kh in 0..k {
                let th = kh * dl;
                for kw in 0..k {
                    let tw = kw * dl;
                    let wv = ws[w_base + kh * k + kw];
                    if s == 1 {
                        let (oh_lo, oh_hi) = s1_range(h, ho, p, th);
                        let (ow_lo, ow_hi) = s1_range(w, wo, p, tw);
                        if oh_lo >= oh_hi || ow_lo >= ow_hi {
                            continue;
                        }
                        for oh in oh_lo..oh_hi {
                            let ih = oh + th - p;
                            let grow = &g_plane[oh * wo + ow_lo..oh * wo + ow_hi];
                            let dst = &mut chunk[ih * w + (ow_lo + tw - p)..][..ow_hi - ow_lo];
                            for (o, &gv) in dst.iter_mut().zip(grow) {
                                *o += wv * gv;
                            }
                        }
                    } else {
                        for oh in 0..ho {
                            let ih = (oh * s + th) as isize - p as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for ow in 0..wo {
                                let iw = (ow * s + tw) as isize - p as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                chunk[ih as usize * w + iw as usize] +=
                                    wv * g_plane[oh * wo + ow];
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

pub fn conv2d<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv2dSpec,
) -> Result<Tensor<T>> {
    let (n, cin, h, w) = x.dims4("conv2d")?;
    let (cout, cig, kh, kw) = weight.dims4("conv2d")?;
    if kh != kw {
        return Err(shape_err!("conv2d", "kernel must be square, got {kh}x{kw}"));
    }
    let k = kh;
    if spec.stride == 0 || spec.dilation == 0 || spec.groups == 0 {
        return Err(Error::Config(format!(
            "conv2d: stride, dilation, and groups must be >= 1 (got {}, {}, {})",
            spec.stride, spec.dilation, spec.groups
        )));
    }
    if cin % spec.groups != 0 || cout % spec.groups != 0 {
        return Err(Error::Config(format!(
            "conv2d: groups={} must divide both Cin={cin} and Cout={cout}",
            spec.groups
        )));
    }
    if cig != cin / spec.groups {
        return Err(shape_err!(
            "conv2d",
            "axis 1 of weight: expected Cin/groups = {}, got {cig}",
            cin / spec.groups
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(shape_err!(
                "conv2d",
                "bias axis 0: expected [{cout}], got {:?}",
                b.shape()
            ));
        }
    }
    let (ho, wo) = conv2d_output_hw(h, w, k, &spec)?;
    let dims = Dims { n, cin, h, w, cout, cig, k, ho, wo };

    let out_data = {
        let xs = x.data();
        let ws = weight.data();
        let bref = bias.map(|b| b.data());
        forward(&xs, &ws, bref.as_deref(), &dims, spec)
    };
    let out = Tensor::from_op(out_data, vec![n, cout, ho, wo]);

    let mut tracked: Vec<&Tensor<T>> = vec![x, weight];
    if let Some(b) = bias {
        tracked.push(b);
    }
    let track = tape.track(&tracked);
    if track {
        out.set_requires_grad(true);
    }
    let mut inputs = vec![x.id(), weight.id()];
    if let Some(b) = bias {
        inputs.push(b.id());
    }
    let info = NodeInfo {
        op: OpKind::Conv2d {
            kernel: k,
            stride: spec.stride,
            padding: spec.padding,
            dilation: spec.dilation,
            groups: spec.groups,
        },
        inputs,
        output: out.id(),
        output_shape: out.shape().to_vec(),
    };
    let backward = track.then(|| {
        let x_ = x.clone();
        let w_ = weight.clone();
        let b_ = bias.cloned();
        let out_ = out.clone();
        Box::new(move || {
            let gref = out_.grad_ref();
            let Some(g) = gref.as_ref() else { return };
            let g: &[T] = g;
            let dims = Dims { n, cin, h, w, cout, cig, k, ho, wo };
            if let Some(b) = &b_ {
                if b.requires_grad() {
                    let mut gb = vec![T::ZERO; cout];
                    for ni in 0..n {
                        for (co, gb_c) in gb.iter_mut().enumerate() {
                            let plane = &g[(ni * cout + co) * ho * wo..][..ho * wo];
                            for &gv in plane {
                                *gb_c += gv;
                            }
                        }
                    }
                    b.accumulate_grad(&gb);
                }
            }
            if w_.requires_grad() {
                let xs = x_.data();
                let gw = grad_weight(&xs, g, &dims, spec);
                drop(xs);
                w_.accumulate_grad(&gw);
            }
            if x_.requires_grad() {
                let ws = w_.data();
                let gx = grad_input(&ws, g, &dims, spec);
                drop(ws);
                x_.accumulate_grad(&gx);
            }
        }) as Box<dyn Fn()>
    });
    tape.record(info, backward);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sum;

    fn t(data: Vec<f64>, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(data, shape).unwrap()
    }

    /// Seven plain loops, no range tricks: the oracle the fast paths answer to.
    fn conv_ref(
        xs: &[f64],
        ws: &[f64],
        bs: Option<&[f64]>,
        (n, cin, h, w): (usize, usize, usize, usize),
        (cout, k): (usize, usize),
        spec: Conv2dSpec,
    ) -> Vec<f64> {
        let (ho, wo) = conv2d_output_hw(h, w, k, &spec).unwrap();
        let cig = cin / spec.groups;
        let cog = cout / spec.groups;
        let mut out = vec![0.0; n * cout * ho * wo];
        for ni in 0..n {
            for co in 0..cout {
                let g = co / cog;
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = bs.map_or(0.0, |b| b[co]);
                        for ci in 0..cig {
                            for kh in 0..k {
                                for kw in 0..k {
                                    let ih = (oh * spec.stride + kh * spec.dilation) as isize
                                        - spec.padding as isize;
                                    let iw = (ow * spec.stride + kw * spec.dilation) as isize
                                        - spec.padding as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                        continue;
                                    }
                                    acc += xs[((ni * cin + g * cig + ci) * h
                                        + ih as usize)
                                        * w
                                        + iw as usize]
                                        * ws[((co * cig + ci) * k + kh) * k + kw];
                                }
                            }
                        }
                        out[((ni * cout + co) * ho + oh) * wo + ow] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn ones_kernel_counts_valid_taps() {
        let mut tape = Tape::new();
        let x = t(vec![1.0; 9], &[1, 1, 3, 3]);
        x.set_requires_grad(true);
        let w = t(vec![1.0; 9], &[1, 1, 3, 3]);
        w.set_requires_grad(true);
        let y = conv2d(&mut tape, &x, &w, None, Conv2dSpec::same(3)).unwrap();
        let expect = vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0];
        assert_eq!(y.to_vec(), expect);

        // Gradient of the summed output against either operand is the same
        // tap-count pattern, by symmetry of the all-ones setup.
        let s = sum(&mut tape, &y);
        tape.backward(&s).unwrap();
        assert_eq!(x.grad().unwrap(), expect);
        assert_eq!(w.grad().unwrap(), expect);
    }

    #[test]
    fn shape_algebra_preserves_resolution() {
        let cases = [
            (3, Conv2dSpec { padding: 1, ..Default::default() }),
            (1, Conv2dSpec::default()),
            (3, Conv2dSpec { padding: 2, dilation: 2, ..Default::default() }),
            (7, Conv2dSpec { padding: 3, ..Default::default() }),
        ];
        for (k, spec) in cases {
            assert_eq!(conv2d_output_hw(16, 16, k, &spec).unwrap(), (16, 16));
        }
        // Halving stride case for completeness of the formula.
        let s2 = Conv2dSpec { stride: 2, padding: 1, ..Default::default() };
        assert_eq!(conv2d_output_hw(16, 16, 3, &s2).unwrap(), (8, 8));
    }

    #[test]
    fn matches_reference_over_spec_grid() {
        let mut rng_state = 0x2545f4914f6cdd1du64;
        let mut next = move || {
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            (rng_state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        for &(cin, cout, k, stride, padding, dilation, groups) in &[
            (1usize, 1usize, 1usize, 1usize, 0usize, 1usize, 1usize),
            (2, 3, 3, 1, 1, 1, 1),
            (2, 2, 3, 1, 2, 2, 1),
            (4, 4, 3, 1, 1, 1, 4),
            (4, 6, 3, 2, 1, 1, 2),
            (3, 2, 2, 2, 0, 1, 1),
            (2, 4, 3, 3, 2, 2, 2),
        ] {
            let (n, h, w) = (2usize, 9usize, 8usize);
            let spec = Conv2dSpec { stride, padding, dilation, groups };
            let xs: Vec<f64> = (0..n * cin * h * w).map(|_| next()).collect();
            let ws: Vec<f64> = (0..cout * (cin / groups) * k * k).map(|_| next()).collect();
            let bs: Vec<f64> = (0..cout).map(|_| next()).collect();
            let mut tape = Tape::no_grad();
            let x = t(xs.clone(), &[n, cin, h, w]);
            let wt = t(ws.clone(), &[cout, cin / groups, k, k]);
            let b = t(bs.clone(), &[cout]);
            let y = conv2d(&mut tape, &x, &wt, Some(&b), spec).unwrap();
            let want = conv_ref(&xs, &ws, Some(&bs), (n, cin, h, w), (cout, k), spec);
            for (got, want) in y.data().iter().zip(&want) {
                assert!(
                    (got - want).abs() <= 1e-12 * want.abs().max(1.0),
                    "spec {spec:?}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn pointwise_keeps_spatial_extent() {
        let mut tape = Tape::no_grad();
        let x = t((0..32).map(f64::from).collect(), &[1, 2, 4, 4]);
        let w = t(vec![0.5, 2.0], &[1, 2, 1, 1]);
        let y = conv2d(&mut tape, &x, &w, None, Conv2dSpec::default()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        // 0.5*x[c0] + 2*x[c1]
        assert_eq!(y.data()[0], 0.5 * 0.0 + 2.0 * 16.0);
    }

    #[test]
    fn depthwise_filters_channels_independently() {
        let mut tape = Tape::no_grad();
        // Two channels; identity kernel on one, doubling kernel on the other.
        let x = t((0..18).map(f64::from).collect(), &[1, 2, 3, 3]);
        let mut w = vec![0.0; 2 * 9];
        w[4] = 1.0;
        w[9 + 4] = 2.0;
        let wt = t(w, &[2, 1, 3, 3]);
        let spec = Conv2dSpec { padding: 1, groups: 2, ..Default::default() };
        let y = conv2d(&mut tape, &x, &wt, None, spec).unwrap();
        let d = y.to_vec();
        assert_eq!(&d[..9], &(0..9).map(f64::from).collect::<Vec<_>>()[..]);
        assert_eq!(&d[9..], &(9..18).map(|v| 2.0 * v as f64).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn bad_groups_is_a_config_error() {
        let mut tape = Tape::no_grad();
        let x = t(vec![0.0; 27], &[1, 3, 3, 3]);
        let w = t(vec![0.0; 2 * 9], &[2, 1, 3, 3]);
        let spec = Conv2dSpec { groups: 2, ..Default::default() };
        let err = conv2d(&mut tape, &x, &w, None, spec).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn oversized_kernel_is_a_shape_error() {
        let mut tape = Tape::no_grad();
        let x = t(vec![0.0; 9], &[1, 1, 3, 3]);
        let w = t(vec![0.0; 25], &[1, 1, 5, 5]);
        let err = conv2d(&mut tape, &x, &w, None, Conv2dSpec::default()).unwrap_err();
        assert!(err.to_string().contains("axis H"), "{err}");
    }

    #[test]
    fn weight_channel_mismatch_names_the_axis() {
        let mut tape = Tape::no_grad();
        let x = t(vec![0.0; 27], &[1, 3, 3, 3]);
        let w = t(vec![0.0; 2 * 2 * 9], &[2, 2, 3, 3]);
        let err = conv2d(&mut tape, &x, &w, None, Conv2dSpec::default()).unwrap_err();
        assert!(err.to_string().contains("axis 1"), "{err}");
    }
}
