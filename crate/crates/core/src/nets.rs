//! The three network families: a residual translation generator, a patch
//! discriminator, and a 2D U-Net segmenter.
//!
//! Each network owns a [`Params`] set and records the entry indices of its
//! layers at construction, so forward passes only look parameters up by index.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{bail, Result};
use crate::params::{normal_tensor, Bound, Params};
use crate::scalar::Real;
use crate::tensor::{Shape, Tensor};

/// Spatial downsampling of the patch discriminator's output grid.
pub const PATCH_FACTOR: usize = 8;
/// Spatial divisor required by the generator (two stride-2 stages).
pub const GENERATOR_DIVISOR: usize = 4;

const GAN_INIT_STD: f64 = 0.02;
const LEAKY_SLOPE: f64 = 0.2;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    b: Option<usize>,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
    running: Option<(usize, usize)>,
}

#[allow(clippy::too_many_arguments)]
fn add_conv<T: Real>(
    params: &mut Params<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    shape: Shape,
    stride: usize,
    pad: usize,
    bias: bool,
    std: f64,
) -> Conv {
    let w = params.push(
        &format!("{name}.weight"),
        normal_tensor(shape, std, rng),
        true,
    );
    let b = bias.then(|| {
        params.push(
            &format!("{name}.bias"),
            Tensor::zeros(Shape::new(1, shape.0[0], 1, 1)),
            true,
        )
    });
    Conv { w, b, stride, pad }
}

fn add_norm<T: Real>(params: &mut Params<T>, name: &str, channels: usize, running: bool) -> Norm {
    let shape = Shape::new(1, channels, 1, 1);
    let gamma = params.push(
        &format!("{name}.gamma"),
        Tensor::full(shape, T::one()),
        true,
    );
    let beta = params.push(&format!("{name}.beta"), Tensor::zeros(shape), true);
    let running = running.then(|| {
        (
            params.push(&format!("{name}.running_mean"), Tensor::zeros(shape), false),
            params.push(
                &format!("{name}.running_var"),
                Tensor::full(shape, T::one()),
                false,
            ),
        )
    });
    Norm {
        gamma,
        beta,
        running,
    }
}

fn conv<T: Real>(tape: &mut Tape<T>, p: &Bound, c: Conv, x: Var) -> Result<Var> {
    tape.conv2d(x, p.var(c.w), c.b.map(|b| p.var(b)), c.stride, c.pad)
}

fn instance_norm<T: Real>(tape: &mut Tape<T>, p: &Bound, n: Norm, x: Var) -> Result<Var> {
    tape.instance_norm(x, p.var(n.gamma), p.var(n.beta))
}

fn check_width(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        bail!(Config, "{name} must be at least 1");
    }
    Ok(())
}

fn check_input<T: Real>(
    tape: &Tape<T>,
    x: Var,
    channels: usize,
    divisor: usize,
    what: &str,
) -> Result<Shape> {
    let s = tape.shape(x);
    if s.c() != channels {
        bail!(Shape, "{what} expects {channels} input channels, got {}", s);
    }
    if s.h() == 0 || s.w() == 0 || !s.h().is_multiple_of(divisor) || !s.w().is_multiple_of(divisor)
    {
        bail!(
            Shape,
            "{what} needs H and W divisible by {divisor}, got {}",
            s
        );
    }
    Ok(s)
}

/// Evaluates a network on constant inputs and returns the output tensor.
fn run<T: Real>(
    params: &Params<T>,
    x: &Tensor<T>,
    f: impl FnOnce(&mut Tape<T>, &Bound, Var) -> Result<Var>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let out = f(&mut tape, &bound, xv)?;
    Ok(tape.value(out).clone())
}

// ------------------------------------------------------------------ generator

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub base_width: usize,
    pub residual_blocks: usize,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        check_width("generator base_width", self.base_width)
    }
}

/// Encoder (7×7 stem, two stride-2 convolutions), residual blocks with
/// reflection padding and instance normalization, transposed-convolution
/// decoder, `tanh` output.
#[derive(Debug, Clone)]
pub struct ResNetGenerator<T> {
    pub config: GeneratorConfig,
    pub params: Params<T>,
    stem: (Conv, Norm),
    down: Vec<(Conv, Norm)>,
    blocks: Vec<[(Conv, Norm); 2]>,
    up: Vec<(Conv, Norm)>,
    head: Conv,
}

impl<T: Real> ResNetGenerator<T> {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        let w = config.base_width;
        let stem = (
            add_conv(
                &mut p,
                &mut rng,
                "stem",
                Shape::new(w, 1, 7, 7),
                1,
                0,
                false,
                GAN_INIT_STD,
            ),
            add_norm(&mut p, "stem.norm", w, false),
        );
        let mut down = Vec::new();
        let mut ch = w;
        for i in 0..2 {
            let c = add_conv(
                &mut p,
                &mut rng,
                &format!("down{i}"),
                Shape::new(ch * 2, ch, 3, 3),
                2,
                1,
                false,
                GAN_INIT_STD,
            );
            down.push((c, add_norm(&mut p, &format!("down{i}.norm"), ch * 2, false)));
            ch *= 2;
        }
        let mut blocks = Vec::new();
        for i in 0..config.residual_blocks {
            let mut pair = [(stem.0, stem.1); 2];
            for (j, slot) in pair.iter_mut().enumerate() {
                let name = format!("block{i}.conv{j}");
                let c = add_conv(
                    &mut p,
                    &mut rng,
                    &name,
                    Shape::new(ch, ch, 3, 3),
                    1,
                    0,
                    false,
                    GAN_INIT_STD,
                );
                *slot = (c, add_norm(&mut p, &format!("{name}.norm"), ch, false));
            }
            blocks.push(pair);
        }
        let mut up = Vec::new();
        for i in 0..2 {
            // transposed weights are Cin × Cout × k × k
            let c = add_conv(
                &mut p,
                &mut rng,
                &format!("up{i}"),
                Shape::new(ch, ch / 2, 3, 3),
                2,
                1,
                false,
                GAN_INIT_STD,
            );
            up.push((c, add_norm(&mut p, &format!("up{i}.norm"), ch / 2, false)));
            ch /= 2;
        }
        let head = add_conv(
            &mut p,
            &mut rng,
            "head",
            Shape::new(1, ch, 7, 7),
            1,
            0,
            true,
            GAN_INIT_STD,
        );
        Ok(ResNetGenerator {
            config,
            params: p,
            stem,
            down,
            blocks,
            up,
            head,
        })
    }

    /// `N×1×H×W → N×1×H×W` in (−1, 1); H and W must be divisible by 4.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        check_input(tape, x, 1, GENERATOR_DIVISOR, "generator")?;
        let mut h = tape.reflect_pad(x, 3)?;
        h = conv(tape, p, self.stem.0, h)?;
        h = instance_norm(tape, p, self.stem.1, h)?;
        h = tape.relu(h);
        for &(c, n) in &self.down {
            h = conv(tape, p, c, h)?;
            h = instance_norm(tape, p, n, h)?;
            h = tape.relu(h);
        }
        for block in &self.blocks {
            let mut r = h;
            for (j, &(c, n)) in block.iter().enumerate() {
                r = tape.reflect_pad(r, 1)?;
                r = conv(tape, p, c, r)?;
                r = instance_norm(tape, p, n, r)?;
                if j == 0 {
                    r = tape.relu(r);
                }
            }
            h = tape.add(h, r)?;
        }
        for &(c, n) in &self.up {
            h = tape.conv_transpose2d(h, p.var(c.w), None, 2, 1, 1)?;
            h = instance_norm(tape, p, n, h)?;
            h = tape.relu(h);
        }
        h = tape.reflect_pad(h, 3)?;
        h = conv(tape, p, self.head, h)?;
        Ok(tape.tanh(h))
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        run(&self.params, x, |t, b, v| self.forward(t, b, v))
    }
}

// -------------------------------------------------------------- discriminator

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub base_width: usize,
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        check_width("discriminator in_channels", self.in_channels)?;
        check_width("discriminator base_width", self.base_width)
    }
}

/// Three stride-2 4×4 convolutions and a 3×3 scoring convolution; each output
/// cell is the real-probability of one input patch.
#[derive(Debug, Clone)]
pub struct PatchDiscriminator<T> {
    pub config: DiscriminatorConfig,
    pub params: Params<T>,
    first: Conv,
    middle: Vec<(Conv, Norm)>,
    head: Conv,
}

impl<T: Real> PatchDiscriminator<T> {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        let w = config.base_width;
        let first = add_conv(
            &mut p,
            &mut rng,
            "conv0",
            Shape::new(w, config.in_channels, 4, 4),
            2,
            1,
            true,
            GAN_INIT_STD,
        );
        let mut middle = Vec::new();
        let mut ch = w;
        for i in 1..3 {
            let c = add_conv(
                &mut p,
                &mut rng,
                &format!("conv{i}"),
                Shape::new(ch * 2, ch, 4, 4),
                2,
                1,
                false,
                GAN_INIT_STD,
            );
            middle.push((c, add_norm(&mut p, &format!("conv{i}.norm"), ch * 2, false)));
            ch *= 2;
        }
        let head = add_conv(
            &mut p,
            &mut rng,
            "head",
            Shape::new(1, ch, 3, 3),
            1,
            1,
            true,
            GAN_INIT_STD,
        );
        Ok(PatchDiscriminator {
            config,
            params: p,
            first,
            middle,
            head,
        })
    }

    /// `N×k×H×W → N×1×(H/8)×(W/8)` probabilities.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let logits = self.logits(tape, p, x)?;
        Ok(tape.sigmoid(logits))
    }

    pub fn logits(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        check_input(
            tape,
            x,
            self.config.in_channels,
            PATCH_FACTOR,
            "discriminator",
        )?;
        let mut h = conv(tape, p, self.first, x)?;
        h = tape.leaky_relu(h, LEAKY_SLOPE);
        for &(c, n) in &self.middle {
            h = conv(tape, p, c, h)?;
            h = instance_norm(tape, p, n, h)?;
            h = tape.leaky_relu(h, LEAKY_SLOPE);
        }
        conv(tape, p, self.head, h)
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        run(&self.params, x, |t, b, v| self.forward(t, b, v))
    }
}

// ---------------------------------------------------------------------- U-Net

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub classes: usize,
    pub levels: usize,
    pub base_width: usize,
    /// Residual double-convolution blocks (the "residual U-Net" variant).
    pub residual: bool,
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        check_width("unet in_channels", self.in_channels)?;
        check_width("unet base_width", self.base_width)?;
        check_width("unet levels", self.levels)?;
        if self.classes < 2 {
            bail!(
                Config,
                "unet needs at least 2 classes, got {}",
                self.classes
            );
        }
        if self.levels > 8 {
            bail!(Config, "unet levels {} is unreasonably deep", self.levels);
        }
        Ok(())
    }

    /// Required divisor of H and W.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running statistics are refreshed by [`UNet2D::update_running_stats`].
    Train,
    /// Stored running statistics.
    Eval,
}

#[derive(Debug, Clone)]
struct DoubleConv {
    convs: [(Conv, Norm); 2],
    skip: Option<(Conv, Norm)>,
}

/// Output handles of one U-Net forward pass.
#[derive(Debug, Clone)]
pub struct UNetOutput {
    pub logits: Var,
    pub probs: Var,
    batch_norms: Vec<(Norm, Var)>,
}

/// Contracting path of `levels` resolutions (max pooling between them) and a
/// symmetric expanding path with bilinear upsampling and skip concatenation.
#[derive(Debug, Clone)]
pub struct UNet2D<T> {
    pub config: UNetConfig,
    pub params: Params<T>,
    encoders: Vec<DoubleConv>,
    decoders: Vec<DoubleConv>,
    head: Conv,
}

impl<T: Real> UNet2D<T> {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        let width = |l: usize| config.base_width << l;
        let mut encoders = Vec::new();
        let mut cin = config.in_channels;
        for l in 0..config.levels {
            encoders.push(double_conv(
                &mut p,
                &mut rng,
                &format!("enc{l}"),
                cin,
                width(l),
                config.residual,
            ));
            cin = width(l);
        }
        let mut decoders = Vec::new();
        for l in (0..config.levels.saturating_sub(1)).rev() {
            let name = format!("dec{l}");
            decoders.push(double_conv(
                &mut p,
                &mut rng,
                &name,
                width(l + 1) + width(l),
                width(l),
                config.residual,
            ));
        }
        let head_std = libm::sqrt(1.0 / config.base_width as f64);
        let head = add_conv(
            &mut p,
            &mut rng,
            "head",
            Shape::new(config.classes, width(0), 1, 1),
            1,
            0,
            true,
            head_std,
        );
        Ok(UNet2D {
            config,
            params: p,
            encoders,
            decoders,
            head,
        })
    }

    /// `N×1×H×W → N×C×H×W` per-pixel class probabilities.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        mode: NormMode,
    ) -> Result<UNetOutput> {
        check_input(
            tape,
            x,
            self.config.in_channels,
            self.config.divisor(),
            "unet",
        )?;
        let mut bns = Vec::new();
        let mut skips = Vec::new();
        let mut h = x;
        for (l, enc) in self.encoders.iter().enumerate() {
            if l > 0 {
                h = tape.max_pool2(h)?;
            }
            h = self.block(tape, p, enc, h, mode, &mut bns)?;
            skips.push(h);
        }
        skips.pop();
        for dec in &self.decoders {
            let skip = skips.pop().expect("one skip per decoder");
            let up = tape.upsample_bilinear2(h);
            let cat = tape.concat(&[up, skip])?;
            h = self.block(tape, p, dec, cat, mode, &mut bns)?;
        }
        let logits = conv(tape, p, self.head, h)?;
        let probs = tape.softmax_channels(logits);
        Ok(UNetOutput {
            logits,
            probs,
            batch_norms: bns,
        })
    }

    fn block(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        b: &DoubleConv,
        x: Var,
        mode: NormMode,
        bns: &mut Vec<(Norm, Var)>,
    ) -> Result<Var> {
        let mut h = x;
        for (j, &(c, n)) in b.convs.iter().enumerate() {
            h = conv(tape, p, c, h)?;
            h = self.norm(tape, p, n, h, mode, bns)?;
            if j == 1 {
                if let Some((s, sn)) = b.skip {
                    let proj = conv(tape, p, s, x)?;
                    let proj = self.norm(tape, p, sn, proj, mode, bns)?;
                    h = tape.add(h, proj)?;
                }
            }
            h = tape.relu(h);
        }
        Ok(h)
    }

    fn norm(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        n: Norm,
        h: Var,
        mode: NormMode,
        bns: &mut Vec<(Norm, Var)>,
    ) -> Result<Var> {
        match mode {
            NormMode::Train => {
                let out = tape.batch_norm(h, p.var(n.gamma), p.var(n.beta))?;
                bns.push((n, out));
                Ok(out)
            }
            NormMode::Eval => {
                let (rm, rv) = n.running.expect("unet norms keep running statistics");
                let mean = self.params.value(rm).data().to_vec();
                let var = self.params.value(rv).data().to_vec();
                tape.batch_norm_fixed(h, p.var(n.gamma), p.var(n.beta), &mean, &var)
            }
        }
    }

    /// Exponential moving average of the batch statistics seen in a training-mode pass.
    pub fn update_running_stats(&mut self, tape: &Tape<T>, out: &UNetOutput) {
        let m = T::of(BN_MOMENTUM);
        for &(n, v) in &out.batch_norms {
            let Some((mean, var)) = tape.batch_stats(v) else {
                continue;
            };
            let (rm, rv) = n.running.expect("unet norms keep running statistics");
            for (r, &b) in self.params.value_mut(rm).data_mut().iter_mut().zip(mean) {
                *r = (T::one() - m) * *r + m * b;
            }
            for (r, &b) in self.params.value_mut(rv).data_mut().iter_mut().zip(var) {
                *r = (T::one() - m) * *r + m * b;
            }
        }
    }

    /// Inference-mode probabilities.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        run(&self.params, x, |t, b, v| {
            Ok(self.forward(t, b, v, NormMode::Eval)?.probs)
        })
    }
}

fn double_conv<T: Real>(
    p: &mut Params<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    cin: usize,
    cout: usize,
    residual: bool,
) -> DoubleConv {
    let mut convs = Vec::new();
    let mut c = cin;
    for j in 0..2 {
        let std = libm::sqrt(2.0 / (c * 9) as f64);
        let cv = add_conv(
            p,
            rng,
            &format!("{name}.conv{j}"),
            Shape::new(cout, c, 3, 3),
            1,
            1,
            false,
            std,
        );
        convs.push((cv, add_norm(p, &format!("{name}.conv{j}.norm"), cout, true)));
        c = cout;
    }
    let skip = residual.then(|| {
        let std = libm::sqrt(1.0 / cin as f64);
        let cv = add_conv(
            p,
            rng,
            &format!("{name}.skip"),
            Shape::new(cout, cin, 1, 1),
            1,
            0,
            false,
            std,
        );
        (cv, add_norm(p, &format!("{name}.skip.norm"), cout, true))
    });
    DoubleConv {
        convs: [convs[0], convs[1]],
        skip,
    }
}
