//! The segmentation network: five-level encoder, ConvMixer bottleneck,
//! multi-scale attention gates on the skip connections, decoder, and a
//! pointwise head emitting logits.
//!
//! Parameter names form a stable dotted hierarchy that is a pure function
//! of the config (see `named_tensors`); checkpoints and the optimizer key
//! everything by these names.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::loss::combined_loss;
use crate::tensor::{
    activation, add, batchnorm2d, bilinear_upsample2x, concat_channels, conv2d, max_autodiff_fd_error,
    maxpool2x2, mul, Activation, BnState, Conv2dSpec, GradReport, Mode, Scalar, Tape, Tensor,
};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Encoder widths C1..C5; the decoder mirrors them.
    pub channels: [usize; 5],
    /// Number of stacked ConvMixer layers in the bottleneck.
    pub convmixer_depth: usize,
    /// Depthwise kernel size of each ConvMixer layer (odd).
    pub convmixer_kernel: usize,
    pub use_convmixer: bool,
    pub use_msag: bool,
    /// Square input resolution; must survive four 2x2 poolings.
    pub input_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            channels: [64, 128, 256, 512, 1024],
            convmixer_depth: 7,
            convmixer_kernel: 7,
            use_convmixer: true,
            use_msag: true,
            input_size: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.in_channels == 0 {
            problems.push("in_channels must be >= 1".to_string());
        }
        if self.channels.iter().any(|&c| c == 0) {
            problems.push(format!("channels must all be >= 1, got {:?}", self.channels));
        }
        if self.input_size == 0 || self.input_size % 16 != 0 {
            problems.push(format!(
                "input_size must be a positive multiple of 16 (four 2x2 poolings), got {}",
                self.input_size
            ));
        }
        if self.convmixer_kernel % 2 == 0 {
            problems.push(format!(
                "convmixer_kernel must be odd so padding (k-1)/2 preserves resolution, got {}",
                self.convmixer_kernel
            ));
        }
        if self.convmixer_depth == 0 {
            problems.push(
                "convmixer_depth must be >= 1 (set use_convmixer=false to drop the stack)"
                    .to_string(),
            );
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Small configuration used by gradient checks and fast tests.
    pub fn downsized() -> Self {
        ModelConfig {
            channels: [4, 8, 16, 32, 64],
            convmixer_depth: 2,
            convmixer_kernel: 3,
            input_size: 32,
            ..Default::default()
        }
    }
}

struct Conv<T: Scalar> {
    weight: Tensor<T>,
    bias: Tensor<T>,
    spec: Conv2dSpec,
}

impl<T: Scalar> Conv<T> {
    fn apply(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(tape, x, &self.weight, Some(&self.bias), self.spec)
    }

    fn collect(&self, prefix: &str, out: &mut Vec<NamedTensor<T>>) {
        out.push(NamedTensor::trainable(format!("{prefix}.weight"), &self.weight));
        out.push(NamedTensor::trainable(format!("{prefix}.bias"), &self.bias));
    }
}

struct Bn<T: Scalar> {
    gamma: Tensor<T>,
    beta: Tensor<T>,
    state: BnState<T>,
}

impl<T: Scalar> Bn<T> {
    fn apply(&self, tape: &mut Tape<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        batchnorm2d(tape, x, &self.gamma, &self.beta, &self.state, mode, BN_EPS, BN_MOMENTUM)
    }

    fn collect(&self, prefix: &str, out: &mut Vec<NamedTensor<T>>) {
        out.push(NamedTensor::trainable(format!("{prefix}.gamma"), &self.gamma));
        out.push(NamedTensor::trainable(format!("{prefix}.beta"), &self.beta));
        out.push(NamedTensor::buffer(format!("{prefix}.running_mean"), &self.state.running_mean));
        out.push(NamedTensor::buffer(format!("{prefix}.running_var"), &self.state.running_var));
    }
}

/// Two of (conv 3x3 -> BN -> ReLU); the first conv changes the width.
struct ConvBlock<T: Scalar> {
    conv1: Conv<T>,
    bn1: Bn<T>,
    conv2: Conv<T>,
    bn2: Bn<T>,
}

impl<T: Scalar> ConvBlock<T> {
    fn apply(&self, tape: &mut Tape<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let h = self.conv1.apply(tape, x)?;
        let h = self.bn1.apply(tape, &h, mode)?;
        let h = activation(tape, &h, Activation::Relu);
        let h = self.conv2.apply(tape, &h)?;
        let h = self.bn2.apply(tape, &h, mode)?;
        Ok(activation(tape, &h, Activation::Relu))
    }

    fn collect(&self, prefix: &str, out: &mut Vec<NamedTensor<T>>) {
        self.conv1.collect(&format!("{prefix}.conv1"), out);
        self.bn1.collect(&format!("{prefix}.bn1"), out);
        self.conv2.collect(&format!("{prefix}.conv2"), out);
        self.bn2.collect(&format!("{prefix}.bn2"), out);
    }
}

/// One bottleneck layer: a depthwise spatial mix with a residual shortcut,
/// then a pointwise channel mix, each as BN(GELU(conv)).
struct MixerLayer<T: Scalar> {
    dw: Conv<T>,
    bn1: Bn<T>,
    pw: Conv<T>,
    bn2: Bn<T>,
}

impl<T: Scalar> MixerLayer<T> {
    /// f' = BN(GELU(DepthwiseConv(f))) + f
    fn spatial_stage(&self, tape: &mut Tape<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let h = self.dw.apply(tape, x)?;
        let h = activation(tape, &h, Activation::Gelu);
        let h = self.bn1.apply(tape, &h, mode)?;
        add(tape, &h, x)
    }

    /// f = BN(GELU(PointwiseConv(f')))
    fn channel_stage(&self, tape: &mut Tape<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let h = self.pw.apply(tape, x)?;
        let h = activation(tape, &h, Activation::Gelu);
        self.bn2.apply(tape, &h, mode)
    }

    fn apply(&self, tape: &mut Tape<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let f1 = self.spatial_stage(tape, x, mode)?;
        self.channel_stage(tape, &f1, mode)
    }

    fn collect(&self, prefix: &str, out: &mut Vec<NamedTensor<T>>) {
        self.dw.collect(&format!("{prefix}.dw"), out);
        self.bn1.collect(&format!("{prefix}.bn1"), out);
        self.pw.collect(&format!("{prefix}.pw"), out);
        self.bn2.collect(&format!("{prefix}.bn2"), out);
    }
}

struct Branch<T: Scalar> {
    conv: Conv<T>,
    bn: Bn<T>,
}

impl<T: Scalar> Branch<T> {
    fn apply(&self, tape: &mut Tape<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let h = self.conv.apply(tape, x)?;
        self.bn.apply(tape, &h, mode)
    }

    fn collect(&self, prefix: &str, out: &mut Vec<NamedTensor<T>>) {
        self.conv.collect(prefix, out);
        self.bn.collect(&format!("{prefix}.bn"), out);
    }
}

/// Multi-scale attention gate: three receptive-field branches (pointwise,
/// ordinary 3x3, dilated 3x3), concatenated and ReLU'd, reduced back to C
/// channels by a pointwise conv, squashed by a sigmoid, and applied as a
/// multiplicative residual gate: f_s = f * mask + f.
struct Msag<T: Scalar> {
    pw: Branch<T>,
    ord: Branch<T>,
    dil: Branch<T>,
    gate: Conv<T>,
}

impl<T: Scalar> Msag<T> {
    fn apply(&self, tape: &mut Tape<T>, f: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let p = self.pw.apply(tape, f, mode)?;
        let o = self.ord.apply(tape, f, mode)?;
        let d = self.dil.apply(tape, f, mode)?;
        let po = concat_channels(tape, &p, &o)?;
        let pod = concat_channels(tape, &po, &d)?;
        let r = activation(tape, &pod, Activation::Relu);
        let m = self.gate.apply(tape, &r)?;
        let mask = activation(tape, &m, Activation::Sigmoid);
        let gated = mul(tape, f, &mask)?;
        add(tape, &gated, f)
    }

    fn collect(&self, prefix: &str, out: &mut Vec<NamedTensor<T>>) {
        self.pw.collect(&format!("{prefix}.pw"), out);
        self.ord.collect(&format!("{prefix}.ord"), out);
        self.dil.collect(&format!("{prefix}.dil"), out);
        self.gate.collect(&format!("{prefix}.gate"), out);
    }
}

/// Decoder level: upsample 2x -> conv 3x3 (halving the width) -> BN -> ReLU,
/// concatenate the (gated) skip feature, then a ConvBlock back to the width.
struct DecoderLevel<T: Scalar> {
    up: Conv<T>,
    up_bn: Bn<T>,
    conv1: Conv<T>,
    bn1: Bn<T>,
    conv2: Conv<T>,
    bn2: Bn<T>,
}

impl<T: Scalar> DecoderLevel<T> {
    fn apply(
        &self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        skip: &Tensor<T>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        let u = bilinear_upsample2x(tape, x)?;
        let u = self.up.apply(tape, &u)?;
        let u = self.up_bn.apply(tape, &u, mode)?;
        let u = activation(tape, &u, Activation::Relu);
        let cat = concat_channels(tape, skip, &u)?;
        let h = self.conv1.apply(tape, &cat)?;
        let h = self.bn1.apply(tape, &h, mode)?;
        let h = activation(tape, &h, Activation::Relu);
        let h = self.conv2.apply(tape, &h)?;
        let h = self.bn2.apply(tape, &h, mode)?;
        Ok(activation(tape, &h, Activation::Relu))
    }

    fn collect(&self, prefix: &str, out: &mut Vec<NamedTensor<T>>) {
        self.up.collect(&format!("{prefix}.up"), out);
        self.up_bn.collect(&format!("{prefix}.up.bn"), out);
        self.conv1.collect(&format!("{prefix}.conv1"), out);
        self.bn1.collect(&format!("{prefix}.bn1"), out);
        self.conv2.collect(&format!("{prefix}.conv2"), out);
        self.bn2.collect(&format!("{prefix}.bn2"), out);
    }
}

#[derive(Clone)]
pub struct NamedTensor<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// False for batch-norm running statistics (checkpointed, not optimized).
    pub trainable: bool,
}

impl<T: Scalar> NamedTensor<T> {
    fn trainable(name: String, t: &Tensor<T>) -> Self {
        NamedTensor { name, tensor: t.clone(), trainable: true }
    }

    fn buffer(name: String, t: &Tensor<T>) -> Self {
        NamedTensor { name, tensor: t.clone(), trainable: false }
    }
}

pub struct Model<T: Scalar> {
    config: ModelConfig,
    enc: Vec<ConvBlock<T>>,
    cm: Vec<MixerLayer<T>>,
    msag: Vec<Msag<T>>,
    /// Forward order dec4 (deepest) .. dec1.
    dec: Vec<DecoderLevel<T>>,
    head: Conv<T>,
}

/// Seeded Kaiming-uniform initializer. Weights draw from
/// U(-sqrt(6/fan_in), +sqrt(6/fan_in)) with fan_in = (Cin/groups)*k^2
/// (ReLU gain); biases start at zero, gamma at one, beta at zero. Draws
/// happen in registration order, so (config, seed) pins every byte.
struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn conv<T: Scalar>(&mut self, cout: usize, cin_per_group: usize, k: usize, spec: Conv2dSpec) -> Conv<T> {
        let fan_in = (cin_per_group * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let n = cout * cin_per_group * k * k;
        let data: Vec<T> =
            (0..n).map(|_| T::from_f64((self.rng.gen::<f64>() * 2.0 - 1.0) * bound)).collect();
        let weight = Tensor::param(data, &[cout, cin_per_group, k, k]).unwrap();
        let bias = Tensor::param(vec![T::ZERO; cout], &[cout]).unwrap();
        Conv { weight, bias, spec }
    }

    fn bn<T: Scalar>(&mut self, c: usize) -> Bn<T> {
        let gamma = Tensor::param(vec![T::ONE; c], &[c]).unwrap();
        let beta = Tensor::param(vec![T::ZERO; c], &[c]).unwrap();
        Bn { gamma, beta, state: BnState::new(c) }
    }

    fn conv_block<T: Scalar>(&mut self, cin: usize, cout: usize) -> ConvBlock<T> {
        ConvBlock {
            conv1: self.conv(cout, cin, 3, Conv2dSpec::same(3)),
            bn1: self.bn(cout),
            conv2: self.conv(cout, cout, 3, Conv2dSpec::same(3)),
            bn2: self.bn(cout),
        }
    }
}

pub fn build_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed) };
    let c = config.channels;

    let mut enc = Vec::with_capacity(5);
    let mut prev = config.in_channels;
    for &ch in &c {
        enc.push(init.conv_block(prev, ch));
        prev = ch;
    }

    let cm: Vec<MixerLayer<T>> = if config.use_convmixer {
        let k = config.convmixer_kernel;
        (0..config.convmixer_depth)
            .map(|_| MixerLayer {
                dw: init.conv(c[4], 1, k, Conv2dSpec { padding: k / 2, groups: c[4], ..Default::default() }),
                bn1: init.bn(c[4]),
                pw: init.conv(c[4], c[4], 1, Conv2dSpec::default()),
                bn2: init.bn(c[4]),
            })
            .collect()
    } else {
        Vec::new()
    };

    let msag: Vec<Msag<T>> = if config.use_msag {
        (0..4)
            .map(|i| {
                let ch = c[i];
                Msag {
                    pw: Branch { conv: init.conv(ch, ch, 1, Conv2dSpec::default()), bn: init.bn(ch) },
                    ord: Branch { conv: init.conv(ch, ch, 3, Conv2dSpec::same(3)), bn: init.bn(ch) },
                    dil: Branch {
                        conv: init.conv(ch, ch, 3, Conv2dSpec { padding: 2, dilation: 2, ..Default::default() }),
                        bn: init.bn(ch),
                    },
                    gate: init.conv(ch, 3 * ch, 1, Conv2dSpec::default()),
                }
            })
            .collect()
    } else {
        Vec::new()
    };

    // Deepest level first (dec4..dec1); draws stay in declaration order.
    let dec: Vec<DecoderLevel<T>> = (0..4)
        .rev()
        .map(|i| DecoderLevel {
            up: init.conv(c[i], c[i + 1], 3, Conv2dSpec::same(3)),
            up_bn: init.bn(c[i]),
            conv1: init.conv(c[i], 2 * c[i], 3, Conv2dSpec::same(3)),
            bn1: init.bn(c[i]),
            conv2: init.conv(c[i], c[i], 3, Conv2dSpec::same(3)),
            bn2: init.bn(c[i]),
        })
        .collect();

    let head = init.conv(1, c[0], 1, Conv2dSpec::default());

    Ok(Model { config: config.clone(), enc, cm, msag, dec, head })
}

impl<T: Scalar> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Run the network on an NCHW batch; returns per-pixel logits
    /// [N, 1, input_size, input_size].
    pub fn forward(&self, tape: &mut Tape<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let dims = x.dims4("model forward")?;
        let s = self.config.input_size;
        if dims.1 != self.config.in_channels || dims.2 != s || dims.3 != s {
            return Err(shape_err!(
                "model forward",
                "expected input [N, {}, {}, {}], got {:?}",
                self.config.in_channels,
                s,
                s,
                x.shape()
            ));
        }

        let mut skips = Vec::with_capacity(4);
        let mut h = x.clone();
        for (i, block) in self.enc.iter().enumerate() {
            h = block.apply(tape, &h, mode)?;
            if i < 4 {
                skips.push(h.clone());
                h = maxpool2x2(tape, &h)?;
            }
        }
        for layer in &self.cm {
            h = layer.apply(tape, &h, mode)?;
        }
        for (di, level) in self.dec.iter().enumerate() {
            let si = 3 - di; // dec4 consumes the enc4 skip, .. dec1 the enc1 skip
            let skip = if self.msag.is_empty() {
                skips[si].clone()
            } else {
                self.msag[si].apply(tape, &skips[si], mode)?
            };
            h = level.apply(tape, &h, &skip, mode)?;
        }
        self.head.apply(tape, &h)
    }

    /// Every tensor the model owns, in registration order, under its
    /// canonical dotted name. The walk is a pure function of the config.
    pub fn named_tensors(&self) -> Vec<NamedTensor<T>> {
        let mut out = Vec::new();
        for (i, block) in self.enc.iter().enumerate() {
            block.collect(&format!("enc{}", i + 1), &mut out);
        }
        for (i, layer) in self.cm.iter().enumerate() {
            layer.collect(&format!("cm.{i}"), &mut out);
        }
        for (i, m) in self.msag.iter().enumerate() {
            m.collect(&format!("msag{}", i + 1), &mut out);
        }
        for (di, level) in self.dec.iter().enumerate() {
            level.collect(&format!("dec{}", 4 - di), &mut out);
        }
        self.head.collect("head", &mut out);
        out
    }

    /// Trainable tensors only (what the optimizer steps).
    pub fn parameters(&self) -> Vec<(String, Tensor<T>)> {
        self.named_tensors()
            .into_iter()
            .filter(|nt| nt.trainable)
            .map(|nt| (nt.name, nt.tensor))
            .collect()
    }

    /// Look up one tensor by its canonical name.
    pub fn tensor(&self, name: &str) -> Option<Tensor<T>> {
        self.named_tensors().into_iter().find(|nt| nt.name == name).map(|nt| nt.tensor)
    }

    pub fn zero_grad(&self) {
        for nt in self.named_tensors() {
            if nt.trainable {
                nt.tensor.zero_grad();
            }
        }
    }

    fn for_each_bn_state(&self, f: &mut dyn FnMut(&BnState<T>)) {
        for b in &self.enc {
            f(&b.bn1.state);
            f(&b.bn2.state);
        }
        for l in &self.cm {
            f(&l.bn1.state);
            f(&l.bn2.state);
        }
        for m in &self.msag {
            f(&m.pw.bn.state);
            f(&m.ord.bn.state);
            f(&m.dil.bn.state);
        }
        for d in &self.dec {
            f(&d.up_bn.state);
            f(&d.bn1.state);
            f(&d.bn2.state);
        }
    }

    /// True once every batch-norm layer has seen a training batch (or had
    /// statistics loaded), i.e. eval-mode forwards are legal.
    pub fn bn_ready(&self) -> bool {
        let mut ready = true;
        self.for_each_bn_state(&mut |s| ready &= s.is_initialized());
        ready
    }

    /// Mark all batch-norm running statistics usable (after loading them
    /// from a checkpoint) or reset them to uninitialized.
    pub fn set_bn_ready(&self, ready: bool) {
        self.for_each_bn_state(&mut |s| s.set_initialized(ready));
    }
}

/// Closed-form count of trainable parameters for a config.
pub fn parameter_count(config: &ModelConfig) -> usize {
    let conv = |cout: usize, cin_per_group: usize, k: usize| cout * cin_per_group * k * k + cout;
    let bn = |c: usize| 2 * c;
    let block = |cin: usize, cout: usize| conv(cout, cin, 3) + bn(cout) + conv(cout, cout, 3) + bn(cout);
    let c = config.channels;

    let mut total = 0;
    let mut prev = config.in_channels;
    for &ch in &c {
        total += block(prev, ch);
        prev = ch;
    }
    if config.use_convmixer {
        let k = config.convmixer_kernel;
        total += config.convmixer_depth * (conv(c[4], 1, k) + bn(c[4]) + conv(c[4], c[4], 1) + bn(c[4]));
    }
    if config.use_msag {
        for &ch in &c[..4] {
            total += conv(ch, ch, 1) + bn(ch); // pointwise branch
            total += conv(ch, ch, 3) + bn(ch); // ordinary branch
            total += conv(ch, ch, 3) + bn(ch); // dilated branch
            total += conv(ch, 3 * ch, 1); // gate
        }
    }
    for i in (0..4).rev() {
        total += conv(c[i], c[i + 1], 3) + bn(c[i]) + block(2 * c[i], c[i]);
    }
    total += conv(1, c[0], 1); // head
    total
}

/// Trainable parameters of the default configuration, frozen as a
/// regression constant (verified against enumeration in the tests).
pub const DEFAULT_PARAMETER_COUNT: usize = 49_930_433;

/// End-to-end gradient check: build a downsized f64 model, run
/// forward + combined loss on a random batch, and compare autodiff
/// gradients against central differences on a sampled subset of every
/// parameter tensor (up to four evenly spaced elements each).
///
/// Use a much smaller eps here than for single-op checks (1e-7 rather
/// than 1e-3): perturbing an early weight moves every downstream
/// activation, and across ~30 ReLU/maxpool layers some activation sits
/// within ~1e-6 of its kink, which central differences straddle at larger
/// eps. In 64-bit, eps=1e-7 keeps FD roundoff near 1e-9 while staying
/// inside the smooth piece, where FD agrees with autodiff to ~1e-9.
pub fn check_end_to_end(eps: f64, seed: u64) -> Result<GradReport> {
    let config = ModelConfig::downsized();
    let model: Model<f64> = build_model(&config, seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let s = config.input_size;
    let x_data: Vec<f64> =
        (0..config.in_channels * s * s).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    let x = Tensor::from_vec(x_data, &[1, config.in_channels, s, s])?;
    let y_data: Vec<f64> = (0..s * s).map(|_| if rng.gen::<f64>() < 0.5 { 0.0 } else { 1.0 }).collect();
    let y = Tensor::from_vec(y_data, &[1, 1, s, s])?;

    let params: Vec<Tensor<f64>> = model.parameters().into_iter().map(|(_, t)| t).collect();
    let samples: Vec<Vec<usize>> = params
        .iter()
        .map(|p| {
            let len = p.len();
            let stride = len.div_ceil(4).max(1);
            (0..len).step_by(stride).collect()
        })
        .collect();

    let eval = move |tape: &mut Tape<f64>| -> Result<Tensor<f64>> {
        let logits = model.forward(tape, &x, Mode::Train)?;
        combined_loss(tape, &logits, &y)
    };
    let compare = |ti: usize, j: usize| samples[ti].contains(&j);
    let max_rel_err = max_autodiff_fd_error(&params, &eval, eps, &compare)?;
    Ok(GradReport { op: "model (end-to-end)".to_string(), max_rel_err, tolerance: 1e-3 })
}

/// Structural identity check: zero the first mixer layer's depthwise kernel
/// and bias, push a random batch through the token-mixing (spatial) stage,
/// and count elements where the output is not bitwise equal to the input.
/// BN(GELU(0)) + f must reproduce f exactly; returns the mismatch count (0
/// on a correct implementation).
pub fn check_convmixer_identity(seed: u64) -> Result<usize> {
    let config = ModelConfig::downsized();
    let model: Model<f32> = build_model(&config, seed)?;
    let layer = &model.cm[0];
    layer.dw.weight.data_mut().fill(0.0);
    layer.dw.bias.data_mut().fill(0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1dea_11ce);
    let shape = [2, config.channels[4], 4, 4];
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| (rng.gen::<f64>() * 4.0 - 2.0) as f32).collect();
    let x = Tensor::from_vec(data, &shape)?;

    let mut tape = Tape::new();
    let out = layer.spatial_stage(&mut tape, &x, Mode::Train)?;
    let (o, i) = (out.data(), x.data());
    Ok(o.iter().zip(i.iter()).filter(|(a, b)| a.to_bits() != b.to_bits()).count())
}

/// Structural identity check: zero one attention gate's convolutions so the
/// gate mask is sigmoid(0) = 0.5, making the gated skip f_s = f * 0.5 + f.
/// Counts elements where that differs bitwise from 1.5 * f (0 on a correct
/// implementation).
pub fn check_msag_identity(seed: u64) -> Result<usize> {
    let config = ModelConfig::downsized();
    let model: Model<f32> = build_model(&config, seed)?;
    let gate = &model.msag[0];
    for conv in [&gate.pw.conv, &gate.ord.conv, &gate.dil.conv, &gate.gate] {
        conv.weight.data_mut().fill(0.0);
        conv.bias.data_mut().fill(0.0);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ca1_ab1e);
    let shape = [1, config.channels[0], 32, 32];
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| (rng.gen::<f64>() * 4.0 - 2.0) as f32).collect();
    let f = Tensor::from_vec(data, &shape)?;

    let mut tape = Tape::new();
    let out = gate.apply(&mut tape, &f, Mode::Train)?;
    let (o, i) = (out.data(), f.data());
    Ok(o.iter().zip(i.iter()).filter(|(a, b)| a.to_bits() != (1.5 * *b).to_bits()).count())
}
