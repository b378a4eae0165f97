//! Finite-difference verification of every backward rule.
//!
//! Each op gets a family of seeded random cases; the autodiff gradient of a
//! randomly weighted sum of the op's output is compared element-by-element
//! against central differences in 64-bit precision. Points sitting on a
//! ReLU or max-pool kink are excluded, since the two sides of the kink
//! legitimately disagree there.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    activation, add, batchnorm2d, bce_with_logits, bilinear_upsample2x, concat_channels, conv2d,
    dice_loss_kernel, maxpool2x2, mean, mul, scale, sum, Activation, BnState, Conv2dSpec, Mode,
    Tape, Tensor,
};
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar-valued function at `x`.
/// The input tensor is nudged in place and restored afterwards.
pub fn finite_diff_gradient<F>(f: &mut F, x: &Tensor<f64>, eps: f64) -> Tensor<f64>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    let n = x.len();
    let mut g = vec![0.0f64; n];
    for i in 0..n {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + eps;
        let hi = f(x);
        x.data_mut()[i] = orig - eps;
        let lo = f(x);
        x.data_mut()[i] = orig;
        g[i] = (hi - lo) / (2.0 * eps);
    }
    Tensor::from_vec(g, x.shape()).unwrap()
}

/// Denominator floor for relative errors. Central differences at eps=1e-3
/// carry O(eps^2) truncation noise (~2e-7 absolute); where the true gradient
/// passes through zero (e.g. the GELU slope near x = -0.75) that noise would
/// otherwise dominate the ratio. A real backward bug shows up at the scale
/// of the gradients themselves, far above floor * tolerance = 1e-6.
const REL_ERR_FLOOR: f64 = 1e-2;

/// Worst relative disagreement between two gradient vectors, with an
/// absolute floor so near-zero entries do not blow up the ratio.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(REL_ERR_FLOOR))
        .fold(0.0, f64::max)
}

/// Compare autodiff gradients of `eval` (a scalar-producing graph over
/// `inputs`) against central differences. `compare(input_idx, elem_idx)`
/// selects which elements participate; returns the max relative error.
pub fn max_autodiff_fd_error(
    inputs: &[Tensor<f64>],
    eval: &dyn Fn(&mut Tape<f64>) -> Result<Tensor<f64>>,
    eps: f64,
    compare: &dyn Fn(usize, usize) -> bool,
) -> Result<f64> {
    for x in inputs {
        x.zero_grad();
    }
    let mut tape = Tape::new();
    let loss = eval(&mut tape)?;
    tape.backward(&loss)?;
    let auto: Vec<Vec<f64>> = inputs
        .iter()
        .map(|x| x.grad().unwrap_or_else(|| vec![0.0; x.len()]))
        .collect();

    let mut worst = 0.0f64;
    for (ii, x) in inputs.iter().enumerate() {
        for j in 0..x.len() {
            if !compare(ii, j) {
                continue;
            }
            let orig = x.data()[j];
            x.data_mut()[j] = orig + eps;
            let hi = {
                let mut t = Tape::no_grad();
                eval(&mut t)?.item()
            };
            x.data_mut()[j] = orig - eps;
            let lo = {
                let mut t = Tape::no_grad();
                eval(&mut t)?.item()
            };
            x.data_mut()[j] = orig;
            let fd = (hi - lo) / (2.0 * eps);
            let a = auto[ii][j];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(REL_ERR_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub op: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err <= self.tolerance
    }
}

/// Ops the checker knows how to exercise, in report order.
pub fn op_names() -> &'static [&'static str] {
    &[
        "conv2d",
        "conv2d_dilated",
        "conv2d_depthwise",
        "conv2d_strided",
        "batchnorm2d",
        "relu",
        "gelu",
        "sigmoid",
        "maxpool2x2",
        "bilinear_upsample2x",
        "concat_channels",
        "add",
        "mul",
        "scale",
        "sum",
        "mean",
        "bce_with_logits",
        "dice_loss",
    ]
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, grad: bool) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * (hi - lo) + lo).collect();
    let t = Tensor::from_vec(data, shape).unwrap();
    t.set_requires_grad(grad);
    t
}

fn binary(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 }).collect();
    Tensor::from_vec(data, shape).unwrap()
}

struct OpCase {
    /// Tensors whose gradients are being verified.
    inputs: Vec<Tensor<f64>>,
    /// Per-input element mask; `false` marks a kink neighborhood to skip.
    check: Vec<Vec<bool>>,
    eval: Box<dyn Fn(&mut Tape<f64>) -> Result<Tensor<f64>>>,
}

/// Loss head: weight the op output by a fixed random tensor and sum, so the
/// check is sensitive to permutation and sign errors that a plain sum hides.
fn weighted_sum(
    tape: &mut Tape<f64>,
    y: &Tensor<f64>,
    weights: &Tensor<f64>,
) -> Result<Tensor<f64>> {
    let wy = mul(tape, y, weights)?;
    Ok(sum(tape, &wy))
}

fn loss_weights(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    uniform(rng, shape, -1.0, 1.0, false)
}

fn conv_case(rng: &mut ChaCha8Rng, spec: Conv2dSpec, x_shape: &[usize], w_shape: &[usize]) -> OpCase {
    let x = uniform(rng, x_shape, -1.0, 1.0, true);
    let w = uniform(rng, w_shape, -1.0, 1.0, true);
    let b = uniform(rng, &[w_shape[0]], -1.0, 1.0, true);
    let (ho, wo) =
        super::conv2d_output_hw(x_shape[2], x_shape[3], w_shape[2], &spec).unwrap();
    let weights = loss_weights(rng, &[x_shape[0], w_shape[0], ho, wo]);
    let check = vec![vec![true; x.len()], vec![true; w.len()], vec![true; b.len()]];
    let (xc, wc, bc) = (x.clone(), w.clone(), b.clone());
    OpCase {
        inputs: vec![x, w, b],
        check,
        eval: Box::new(move |tape| {
            let y = conv2d(tape, &xc, &wc, Some(&bc), spec)?;
            weighted_sum(tape, &y, &weights)
        }),
    }
}

fn activation_case(rng: &mut ChaCha8Rng, kind: Activation, eps: f64) -> OpCase {
    let shape = [2usize, 3, 4, 4];
    let x = uniform(rng, &shape, -1.0, 1.0, true);
    let weights = loss_weights(rng, &shape);
    // ReLU is non-differentiable at 0; skip elements the probe could push
    // across the kink.
    let check = if kind == Activation::Relu {
        vec![x.data().iter().map(|&v| v.abs() > 2.0 * eps).collect()]
    } else {
        vec![vec![true; x.len()]]
    };
    let xc = x.clone();
    OpCase {
        inputs: vec![x],
        check,
        eval: Box::new(move |tape| {
            let y = activation(tape, &xc, kind);
            weighted_sum(tape, &y, &weights)
        }),
    }
}

fn build_cases(name: &str, rng: &mut ChaCha8Rng, eps: f64) -> Result<OpCase> {
    let case = match name {
        "conv2d" => conv_case(
            rng,
            Conv2dSpec { padding: 1, ..Default::default() },
            &[1, 2, 5, 5],
            &[3, 2, 3, 3],
        ),
        "conv2d_dilated" => conv_case(
            rng,
            Conv2dSpec { padding: 2, dilation: 2, ..Default::default() },
            &[1, 2, 8, 8],
            &[2, 2, 3, 3],
        ),
        "conv2d_depthwise" => conv_case(
            rng,
            Conv2dSpec { padding: 1, groups: 3, ..Default::default() },
            &[1, 3, 6, 6],
            &[3, 1, 3, 3],
        ),
        "conv2d_strided" => conv_case(
            rng,
            Conv2dSpec { stride: 2, padding: 1, ..Default::default() },
            &[1, 2, 7, 7],
            &[2, 2, 3, 3],
        ),
        "batchnorm2d" => {
            let x = uniform(rng, &[2, 3, 4, 4], -1.0, 1.0, true);
            let g = uniform(rng, &[3], 0.5, 1.5, true);
            let b = uniform(rng, &[3], -0.5, 0.5, true);
            let weights = loss_weights(rng, &[2, 3, 4, 4]);
            let check =
                vec![vec![true; x.len()], vec![true; g.len()], vec![true; b.len()]];
            let (xc, gc, bc) = (x.clone(), g.clone(), b.clone());
            OpCase {
                inputs: vec![x, g, b],
                check,
                eval: Box::new(move |tape| {
                    let state = BnState::new(3);
                    let y =
                        batchnorm2d(tape, &xc, &gc, &bc, &state, Mode::Train, 1e-5, 0.1)?;
                    weighted_sum(tape, &y, &weights)
                }),
            }
        }
        "relu" => activation_case(rng, Activation::Relu, eps),
        "gelu" => activation_case(rng, Activation::Gelu, eps),
        "sigmoid" => activation_case(rng, Activation::Sigmoid, eps),
        "maxpool2x2" => {
            let x = uniform(rng, &[1, 2, 6, 6], -1.0, 1.0, true);
            let weights = loss_weights(rng, &[1, 2, 3, 3]);
            // Exclude every element of a window whose two largest entries
            // are close enough for the probe to flip the argmax.
            let mut ok = vec![true; x.len()];
            {
                let d = x.data();
                for c in 0..2 {
                    for oh in 0..3 {
                        for ow in 0..3 {
                            let idx = [
                                c * 36 + (2 * oh) * 6 + 2 * ow,
                                c * 36 + (2 * oh) * 6 + 2 * ow + 1,
                                c * 36 + (2 * oh + 1) * 6 + 2 * ow,
                                c * 36 + (2 * oh + 1) * 6 + 2 * ow + 1,
                            ];
                            let mut vals: Vec<f64> = idx.iter().map(|&i| d[i]).collect();
                            vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                            if vals[0] - vals[1] <= 2.0 * eps {
                                for &i in &idx {
                                    ok[i] = false;
                                }
                            }
                        }
                    }
                }
            }
            let xc = x.clone();
            OpCase {
                inputs: vec![x],
                check: vec![ok],
                eval: Box::new(move |tape| {
                    let y = maxpool2x2(tape, &xc)?;
                    weighted_sum(tape, &y, &weights)
                }),
            }
        }
        "bilinear_upsample2x" => {
            let x = uniform(rng, &[1, 2, 3, 4], -1.0, 1.0, true);
            let weights = loss_weights(rng, &[1, 2, 6, 8]);
            let check = vec![vec![true; x.len()]];
            let xc = x.clone();
            OpCase {
                inputs: vec![x],
                check,
                eval: Box::new(move |tape| {
                    let y = bilinear_upsample2x(tape, &xc)?;
                    weighted_sum(tape, &y, &weights)
                }),
            }
        }
        "concat_channels" => {
            let a = uniform(rng, &[1, 2, 3, 3], -1.0, 1.0, true);
            let b = uniform(rng, &[1, 3, 3, 3], -1.0, 1.0, true);
            let weights = loss_weights(rng, &[1, 5, 3, 3]);
            let check = vec![vec![true; a.len()], vec![true; b.len()]];
            let (ac, bc) = (a.clone(), b.clone());
            OpCase {
                inputs: vec![a, b],
                check,
                eval: Box::new(move |tape| {
                    let y = concat_channels(tape, &ac, &bc)?;
                    weighted_sum(tape, &y, &weights)
                }),
            }
        }
        "add" | "mul" => {
            let a = uniform(rng, &[2, 3, 4], -1.0, 1.0, true);
            let b = uniform(rng, &[2, 3, 4], -1.0, 1.0, true);
            let weights = loss_weights(rng, &[2, 3, 4]);
            let check = vec![vec![true; a.len()], vec![true; b.len()]];
            let (ac, bc) = (a.clone(), b.clone());
            let is_add = name == "add";
            OpCase {
                inputs: vec![a, b],
                check,
                eval: Box::new(move |tape| {
                    let y = if is_add { add(tape, &ac, &bc)? } else { mul(tape, &ac, &bc)? };
                    weighted_sum(tape, &y, &weights)
                }),
            }
        }
        "scale" => {
            let x = uniform(rng, &[17], -1.0, 1.0, true);
            let weights = loss_weights(rng, &[17]);
            let check = vec![vec![true; x.len()]];
            let xc = x.clone();
            OpCase {
                inputs: vec![x],
                check,
                eval: Box::new(move |tape| {
                    let y = scale(tape, &xc, -1.7);
                    weighted_sum(tape, &y, &weights)
                }),
            }
        }
        "sum" | "mean" => {
            let x = uniform(rng, &[3, 5], -1.0, 1.0, true);
            let check = vec![vec![true; x.len()]];
            let xc = x.clone();
            let is_sum = name == "sum";
            OpCase {
                inputs: vec![x],
                check,
                eval: Box::new(move |tape| {
                    Ok(if is_sum { sum(tape, &xc) } else { mean(tape, &xc) })
                }),
            }
        }
        "bce_with_logits" => {
            let z = uniform(rng, &[2, 1, 4, 4], -1.0, 1.0, true);
            let y = binary(rng, &[2, 1, 4, 4]);
            let check = vec![vec![true; z.len()]];
            let zc = z.clone();
            OpCase {
                inputs: vec![z],
                check,
                eval: Box::new(move |tape| bce_with_logits(tape, &zc, &y)),
            }
        }
        "dice_loss" => {
            let p = uniform(rng, &[1, 1, 4, 4], 0.05, 0.95, true);
            let y = binary(rng, &[1, 1, 4, 4]);
            let check = vec![vec![true; p.len()]];
            let pc = p.clone();
            OpCase {
                inputs: vec![p],
                check,
                eval: Box::new(move |tape| dice_loss_kernel(tape, &pc, &y, 1.0)),
            }
        }
        other => {
            return Err(Error::Validation(format!(
                "gradcheck: unknown op \"{other}\" (known: {})",
                op_names().join(", ")
            )))
        }
    };
    Ok(case)
}

/// Run the 10-seed finite-difference suite for one op.
pub fn check_op(name: &str, eps: f64, base_seed: u64) -> Result<GradReport> {
    let mut worst = 0.0f64;
    for s in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(s));
        let case = build_cases(name, &mut rng, eps)?;
        let check = case.check;
        let err = max_autodiff_fd_error(&case.inputs, case.eval.as_ref(), eps, &|i, j| {
            check[i][j]
        })?;
        worst = worst.max(err);
    }
    Ok(GradReport { op: name.to_string(), max_rel_err: worst, tolerance: 1e-4 })
}
