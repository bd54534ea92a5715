//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! A [`Tape`] is built fresh for every forward pass. Nodes record their
//! inputs by [`Var`] handle, so a sub-network may be applied several times
//! within one graph (the cycle path reuses each generator twice) and the
//! gradient contributions accumulate.

use alloc::vec;
use alloc::vec::Vec;

use crate::conv::{col2im, im2col, ConvGeom};
use crate::error::{bail, Result};
use crate::scalar::{matmul, Real};
use crate::tensor::{Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Weights of the Dice + cross-entropy segmentation objective as used on the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct SegLossWeights<T> {
    pub alpha: Vec<T>,
    pub beta: T,
    pub eps_smooth: T,
    pub eps_log: T,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ReflectPad {
        x: Var,
        pad: usize,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu {
        x: Var,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Tanh {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    SoftmaxChannels {
        x: Var,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    UpsampleBilinear2 {
        x: Var,
    },
    Concat {
        xs: Vec<Var>,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Mean {
        x: Var,
    },
    MulBroadcast {
        probs: Var,
        image: Var,
    },
    Sobel {
        x: Var,
        gx: Vec<T>,
        gy: Vec<T>,
    },
    WeightedSum {
        xs: Vec<Var>,
        weights: Vec<T>,
    },
    NegMeanLog {
        p: Var,
        eps: T,
    },
    NegMeanLog1m {
        p: Var,
        eps: T,
    },
    MeanAbsDiff {
        a: Var,
        b: Var,
    },
    SegLoss {
        probs: Var,
        labels: Vec<u8>,
        weights: SegLossWeights<T>,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Batch mean and unbiased variance per channel, for batch-norm nodes.
    batch_stats: Option<(Vec<T>, Vec<T>)>,
}

/// Gradients of one scalar with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

const NORM_EPS: f64 = 1e-5;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            batch_stats: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that is not differentiated.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            batch_stats: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            batch_stats: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Batch statistics recorded by a training-mode batch-norm node.
    pub fn batch_stats(&self, v: Var) -> Option<&(Vec<T>, Vec<T>)> {
        self.nodes[v.0].batch_stats.as_ref()
    }

    // ----------------------------------------------------------------- ops

    /// Cross-correlation with zero padding. `w` is `Cout×Cin×k×k`, `b` is `1×Cout×1×1`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let [cout, cin, kh, kw] = ws.0;
        if cin != xs.c() || kh != kw {
            bail!(Shape, "conv2d weight {} incompatible with input {}", ws, xs);
        }
        let Some(g) = ConvGeom::new(cin, xs.h(), xs.w(), kh, stride, pad) else {
            bail!(Shape, "conv2d kernel {} does not fit input {}", kh, xs);
        };
        if let Some(b) = b {
            if self.shape(b).numel() != cout {
                bail!(Shape, "conv2d bias {} for {} outputs", self.shape(b), cout);
            }
        }
        let out_shape = Shape::new(xs.n(), cout, g.ho, g.wo);
        let mut out = Tensor::zeros(out_shape);
        let mut cols = vec![T::zero(); g.patch_len() * g.positions()];
        let item_out = cout * g.positions();
        {
            let xv = &self.nodes[x.0].value;
            let wv = self.nodes[w.0].value.data();
            for n in 0..xs.n() {
                im2col(xv.item_slice(n), &g, &mut cols);
                let dst = &mut out.data_mut()[n * item_out..(n + 1) * item_out];
                matmul(
                    wv,
                    false,
                    &cols,
                    false,
                    dst,
                    cout,
                    g.patch_len(),
                    g.positions(),
                    false,
                );
            }
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.nodes[b.0].value.data());
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &inputs,
        ))
    }

    /// Transposed convolution. `w` is `Cin×Cout×k×k`; output extent is
    /// `(H−1)·stride − 2·pad + k + output_pad`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let [cin, cout, kh, kw] = ws.0;
        if cin != xs.c() || kh != kw || output_pad >= stride {
            bail!(
                Shape,
                "conv_transpose2d weight {} incompatible with input {}",
                ws,
                xs
            );
        }
        let ho = ((xs.h() - 1) * stride + kh + output_pad).checked_sub(2 * pad);
        let wo = ((xs.w() - 1) * stride + kh + output_pad).checked_sub(2 * pad);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            bail!(Shape, "conv_transpose2d padding too large for {}", xs);
        };
        let g = match ConvGeom::new(cout, ho, wo, kh, stride, pad) {
            Some(g) if g.ho == xs.h() && g.wo == xs.w() => g,
            _ => bail!(Shape, "conv_transpose2d geometry mismatch for {}", xs),
        };
        let out_shape = Shape::new(xs.n(), cout, ho, wo);
        let mut out = Tensor::zeros(out_shape);
        let mut cols = vec![T::zero(); g.patch_len() * g.positions()];
        let item_out = cout * ho * wo;
        {
            let xv = &self.nodes[x.0].value;
            let wv = self.nodes[w.0].value.data();
            for n in 0..xs.n() {
                // cols (Cout·k·k × Hin·Win) = Wᵀ · x_n, W viewed as Cin × (Cout·k·k)
                matmul(
                    wv,
                    true,
                    xv.item_slice(n),
                    false,
                    &mut cols,
                    g.patch_len(),
                    cin,
                    g.positions(),
                    false,
                );
                col2im(
                    &cols,
                    &g,
                    &mut out.data_mut()[n * item_out..(n + 1) * item_out],
                );
            }
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.nodes[b.0].value.data());
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            out,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &inputs,
        ))
    }

    pub fn reflect_pad(&mut self, x: Var, pad: usize) -> Result<Var> {
        let s = self.shape(x);
        if pad >= s.h() || pad >= s.w() {
            bail!(
                Shape,
                "reflection pad {} needs spatial extent above it, got {}",
                pad,
                s
            );
        }
        let (ho, wo) = (s.h() + 2 * pad, s.w() + 2 * pad);
        let mut out = Tensor::zeros(Shape::new(s.n(), s.c(), ho, wo));
        let xv = &self.nodes[x.0].value;
        for n in 0..s.n() {
            for c in 0..s.c() {
                let src = xv.plane(n, c);
                let dst = out.plane_mut(n, c);
                for oy in 0..ho {
                    let iy = reflect(oy as isize - pad as isize, s.h());
                    for ox in 0..wo {
                        let ix = reflect(ox as isize - pad as isize, s.w());
                        dst[oy * wo + ox] = src[iy * s.w() + ix];
                    }
                }
            }
        }
        Ok(self.push(out, Op::ReflectPad { x, pad }, &[x]))
    }

    /// Per-(item, channel) normalization followed by a per-channel affine map.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(x);
        self.check_channel_param(gamma, s.c())?;
        self.check_channel_param(beta, s.c())?;
        let p = s.plane();
        let eps = T::of(NORM_EPS);
        let mut out = Tensor::zeros(s);
        let mut xhat = vec![T::zero(); s.numel()];
        let mut inv_std = vec![T::zero(); s.n() * s.c()];
        {
            let xv = &self.nodes[x.0].value;
            let gv = self.nodes[gamma.0].value.data();
            let bv = self.nodes[beta.0].value.data();
            for n in 0..s.n() {
                for c in 0..s.c() {
                    let src = xv.plane(n, c);
                    let (mean, var) = mean_var(src.iter().copied(), p);
                    let inv = T::one() / (var + eps).sqrt();
                    inv_std[n * s.c() + c] = inv;
                    let base = (n * s.c() + c) * p;
                    let dst = out.plane_mut(n, c);
                    for i in 0..p {
                        let h = (src[i] - mean) * inv;
                        xhat[base + i] = h;
                        dst[i] = gv[c] * h + bv[c];
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Training-mode batch normalization; per-channel statistics over batch and space.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(x);
        self.check_channel_param(gamma, s.c())?;
        self.check_channel_param(beta, s.c())?;
        let p = s.plane();
        let m = s.n() * p;
        let eps = T::of(NORM_EPS);
        let mut out = Tensor::zeros(s);
        let mut xhat = vec![T::zero(); s.numel()];
        let mut inv_std = vec![T::zero(); s.c()];
        let mut means = vec![T::zero(); s.c()];
        let mut unbiased = vec![T::zero(); s.c()];
        {
            let xv = &self.nodes[x.0].value;
            let gv = self.nodes[gamma.0].value.data();
            let bv = self.nodes[beta.0].value.data();
            for c in 0..s.c() {
                let values = (0..s.n()).flat_map(|n| xv.plane(n, c).iter().copied());
                let (mean, var) = mean_var(values, m);
                let inv = T::one() / (var + eps).sqrt();
                inv_std[c] = inv;
                means[c] = mean;
                unbiased[c] = if m > 1 {
                    var * T::from_usize(m) / T::from_usize(m - 1)
                } else {
                    var
                };
                for n in 0..s.n() {
                    let src = xv.plane(n, c);
                    let base = (n * s.c() + c) * p;
                    let dst = out.plane_mut(n, c);
                    for i in 0..p {
                        let h = (src[i] - mean) * inv;
                        xhat[base + i] = h;
                        dst[i] = gv[c] * h + bv[c];
                    }
                }
            }
        }
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        );
        self.nodes[v.0].batch_stats = Some((means, unbiased));
        Ok(v)
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_fixed(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
    ) -> Result<Var> {
        let s = self.shape(x);
        self.check_channel_param(gamma, s.c())?;
        self.check_channel_param(beta, s.c())?;
        if mean.len() != s.c() || var.len() != s.c() {
            bail!(Shape, "running statistics do not match {} channels", s.c());
        }
        let eps = T::of(NORM_EPS);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut out = Tensor::zeros(s);
        {
            let xv = &self.nodes[x.0].value;
            let gv = self.nodes[gamma.0].value.data();
            let bv = self.nodes[beta.0].value.data();
            for n in 0..s.n() {
                for c in 0..s.c() {
                    let scale = gv[c] * inv_std[c];
                    let shift = bv[c] - mean[c] * scale;
                    for (d, &v) in out.plane_mut(n, c).iter_mut().zip(xv.plane(n, c)) {
                        *d = v * scale + shift;
                    }
                }
            }
        }
        let mean = mean.to_vec();
        Ok(self.push(
            out,
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0]
            .value
            .map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu { x }, &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let slope = T::of(slope);
        let out = self.nodes[x.0]
            .value
            .map(|v| if v > T::zero() { v } else { v * slope });
        self.push(out, Op::LeakyRelu { x, slope }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.map(|v| v.tanh());
        self.push(out, Op::Tanh { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.map(sigmoid);
        self.push(out, Op::Sigmoid { x }, &[x])
    }

    /// Softmax across the channel axis at every pixel.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let p = s.plane();
        let mut out = Tensor::zeros(s);
        {
            let xv = self.nodes[x.0].value.data();
            let o = out.data_mut();
            for n in 0..s.n() {
                let base = n * s.c() * p;
                for i in 0..p {
                    let mut mx = T::neg_infinity();
                    for c in 0..s.c() {
                        mx = mx.max(xv[base + c * p + i]);
                    }
                    let mut total = T::zero();
                    for c in 0..s.c() {
                        let e = (xv[base + c * p + i] - mx).exp();
                        o[base + c * p + i] = e;
                        total += e;
                    }
                    for c in 0..s.c() {
                        o[base + c * p + i] /= total;
                    }
                }
            }
        }
        self.push(out, Op::SoftmaxChannels { x }, &[x])
    }

    /// 2×2 max pooling with stride 2; ties resolve to the first element in raster order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if !s.h().is_multiple_of(2) || !s.w().is_multiple_of(2) {
            bail!(Shape, "max_pool2 needs even spatial extent, got {}", s);
        }
        let (ho, wo) = (s.h() / 2, s.w() / 2);
        let out_shape = Shape::new(s.n(), s.c(), ho, wo);
        let mut out = Tensor::zeros(out_shape);
        let mut argmax = vec![0usize; out_shape.numel()];
        let xv = self.nodes[x.0].value.data();
        for nc in 0..s.n() * s.c() {
            let ib = nc * s.plane();
            let ob = nc * ho * wo;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = ib + 2 * oy * s.w() + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ib + (2 * oy + dy) * s.w() + 2 * ox + dx;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    out.data_mut()[ob + oy * wo + ox] = xv[best];
                    argmax[ob + oy * wo + ox] = best;
                }
            }
        }
        Ok(self.push(out, Op::MaxPool2 { x, argmax }, &[x]))
    }

    /// Bilinear ×2 upsampling with half-pixel centers (edges clamp).
    pub fn upsample_bilinear2(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let (ho, wo) = (s.h() * 2, s.w() * 2);
        let mut out = Tensor::zeros(Shape::new(s.n(), s.c(), ho, wo));
        let ys = bilinear_taps(s.h(), ho);
        let xs = bilinear_taps(s.w(), wo);
        let xv = &self.nodes[x.0].value;
        for n in 0..s.n() {
            for c in 0..s.c() {
                let src = xv.plane(n, c);
                let dst = out.plane_mut(n, c);
                for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                        let (fy, fx) = (T::of(fy), T::of(fx));
                        let top =
                            src[y0 * s.w() + x0] * (T::one() - fx) + src[y0 * s.w() + x1] * fx;
                        let bot =
                            src[y1 * s.w() + x0] * (T::one() - fx) + src[y1 * s.w() + x1] * fx;
                        dst[oy * wo + ox] = top * (T::one() - fy) + bot * fy;
                    }
                }
            }
        }
        self.push(out, Op::UpsampleBilinear2 { x }, &[x])
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            bail!(Shape, "concat of zero tensors");
        };
        let s0 = self.shape(first);
        let mut channels = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.n() != s0.n() || s.h() != s0.h() || s.w() != s0.w() {
                bail!(Shape, "concat of {} with {}", s, s0);
            }
            channels += s.c();
        }
        let out_shape = Shape::new(s0.n(), channels, s0.h(), s0.w());
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..s0.n() {
            for &v in xs {
                data.extend_from_slice(self.nodes[v.0].value.item_slice(n));
            }
        }
        let out = Tensor::from_vec(out_shape, data)?;
        Ok(self.push(out, Op::Concat { xs: xs.to_vec() }, xs))
    }

    /// Channels `[start, start + count)`.
    pub fn slice_channels(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let s = self.shape(x);
        if start + count > s.c() || count == 0 {
            bail!(
                Shape,
                "channel range {}..{} outside {}",
                start,
                start + count,
                s
            );
        }
        let p = s.plane();
        let mut data = Vec::with_capacity(s.n() * count * p);
        let xv = self.nodes[x.0].value.data();
        for n in 0..s.n() {
            let base = (n * s.c() + start) * p;
            data.extend_from_slice(&xv[base..base + count * p]);
        }
        let out = Tensor::from_vec(Shape::new(s.n(), count, s.h(), s.w()), data)?;
        Ok(self.push(out, Op::SliceChannels { x, start }, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            bail!(Shape, "add of {} and {}", self.shape(a), self.shape(b));
        }
        let mut out = self.nodes[a.0].value.clone();
        out.add_assign(&self.nodes[b.0].value);
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            bail!(Shape, "mul of {} and {}", self.shape(a), self.shape(b));
        }
        let out = zip_map(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y);
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    /// Mean over every element.
    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.nodes[x.0].value.mean());
        self.push(out, Op::Mean { x }, &[x])
    }

    /// `probs ⊙ image` with the single image channel broadcast across all probability channels.
    pub fn mul_broadcast(&mut self, probs: Var, image: Var) -> Result<Var> {
        let ps = self.shape(probs);
        let is = self.shape(image);
        if is.c() != 1 || is.n() != ps.n() || is.h() != ps.h() || is.w() != ps.w() {
            bail!(Shape, "cannot broadcast image {} over {}", is, ps);
        }
        let mut out = self.nodes[probs.0].value.clone();
        let iv = &self.nodes[image.0].value;
        for n in 0..ps.n() {
            let img = iv.plane(n, 0);
            for c in 0..ps.c() {
                for (o, &v) in out.plane_mut(n, c).iter_mut().zip(img) {
                    *o *= v;
                }
            }
        }
        Ok(self.push(out, Op::MulBroadcast { probs, image }, &[probs, image]))
    }

    /// Per-channel Sobel gradient magnitude with replicate padding.
    pub fn sobel(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let (h, w) = (s.h(), s.w());
        let mut gx = vec![T::zero(); s.numel()];
        let mut gy = vec![T::zero(); s.numel()];
        let xv = self.nodes[x.0].value.data();
        for nc in 0..s.n() * s.c() {
            let base = nc * h * w;
            sobel_plane(
                &xv[base..base + h * w],
                h,
                w,
                &mut gx[base..base + h * w],
                &mut gy[base..base + h * w],
            );
        }
        let data = gx
            .iter()
            .zip(&gy)
            .map(|(&a, &b)| (a * a + b * b).sqrt())
            .collect();
        let out = Tensor::from_vec(s, data).expect("sobel output matches input shape");
        self.push(out, Op::Sobel { x, gx, gy }, &[x])
    }

    /// `Σ wᵢ·xᵢ` over one-element tensors.
    pub fn weighted_sum(&mut self, xs: &[Var], weights: &[f64]) -> Result<Var> {
        if xs.len() != weights.len() || xs.is_empty() {
            bail!(Shape, "weighted_sum needs one weight per term");
        }
        let weights: Vec<T> = weights.iter().map(|&w| T::of(w)).collect();
        let mut total = T::zero();
        for (&v, &w) in xs.iter().zip(&weights) {
            if self.shape(v).numel() != 1 {
                bail!(Shape, "weighted_sum term {} is not a scalar", self.shape(v));
            }
            total += w * self.nodes[v.0].value.item();
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedSum {
                xs: xs.to_vec(),
                weights,
            },
            xs,
        ))
    }

    /// `−mean(ln clamp(p, ε, 1−ε))`.
    pub fn neg_mean_log(&mut self, p: Var, eps: f64) -> Result<Var> {
        let eps = T::of(eps);
        let pv = &self.nodes[p.0].value;
        check_unit_closed(pv.data())?;
        let m = T::from_usize(pv.len());
        let total: T = pv.data().iter().map(|&v| clamp_prob(v, eps).ln()).sum();
        Ok(self.push(Tensor::scalar(-total / m), Op::NegMeanLog { p, eps }, &[p]))
    }

    /// `−mean(ln(1 − clamp(p, ε, 1−ε)))`.
    pub fn neg_mean_log1m(&mut self, p: Var, eps: f64) -> Result<Var> {
        let eps = T::of(eps);
        let pv = &self.nodes[p.0].value;
        check_unit_closed(pv.data())?;
        let m = T::from_usize(pv.len());
        let total: T = pv
            .data()
            .iter()
            .map(|&v| (T::one() - clamp_prob(v, eps)).ln())
            .sum();
        Ok(self.push(
            Tensor::scalar(-total / m),
            Op::NegMeanLog1m { p, eps },
            &[p],
        ))
    }

    /// `mean|a − b|`.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            bail!(
                Shape,
                "mean_abs_diff of {} and {}",
                self.shape(a),
                self.shape(b)
            );
        }
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let total: T = av.iter().zip(bv).map(|(&x, &y)| (x - y).abs()).sum();
        let out = Tensor::scalar(total / T::from_usize(av.len()));
        Ok(self.push(out, Op::MeanAbsDiff { a, b }, &[a, b]))
    }

    /// Weighted Dice + cross-entropy over all pixels of the batch.
    ///
    /// `labels` holds one class index per pixel in `N×H×W` order.
    pub fn seg_loss(
        &mut self,
        probs: Var,
        labels: &[u8],
        weights: &SegLossWeights<T>,
    ) -> Result<Var> {
        let s = self.shape(probs);
        if labels.len() != s.n() * s.plane() {
            bail!(Shape, "{} labels for probabilities {}", labels.len(), s);
        }
        if weights.alpha.len() != s.c() {
            bail!(
                Shape,
                "{} class weights for {} classes",
                weights.alpha.len(),
                s.c()
            );
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= s.c()) {
            bail!(Validation, "label {} outside {} classes", bad, s.c());
        }
        let value = seg_loss_value(self.nodes[probs.0].value.data(), s, labels, weights);
        let op = Op::SegLoss {
            probs,
            labels: labels.to_vec(),
            weights: weights.clone(),
        };
        Ok(self.push(Tensor::scalar(value), op, &[probs]))
    }

    fn check_channel_param(&self, v: Var, channels: usize) -> Result<()> {
        if self.shape(v).numel() != channels {
            bail!(
                Shape,
                "channel parameter {} for {} channels",
                self.shape(v),
                channels
            );
        }
        Ok(())
    }

    // ------------------------------------------------------------ backward

    /// Gradients of the one-element node `loss` with respect to all tracked nodes.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss).numel() != 1 {
            bail!(Shape, "backward from non-scalar {}", self.shape(loss));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xv = self.value(x);
                let wv = self.value(w);
                let xs = xv.shape();
                let [cout, cin, k, _] = wv.shape().0;
                let g = ConvGeom::new(cin, xs.h(), xs.w(), k, stride, pad)
                    .expect("validated in forward");
                let (kl, p) = (g.patch_len(), g.positions());
                let mut cols = vec![T::zero(); kl * p];
                let mut dcols = vec![T::zero(); kl * p];
                let want_x = self.wants(x);
                let want_w = self.wants(w);
                let mut dx = want_x.then(|| Tensor::zeros(xs));
                let mut dw = want_w.then(|| Tensor::zeros(wv.shape()));
                let item_out = cout * p;
                for n in 0..xs.n() {
                    let dout = &dy.data()[n * item_out..(n + 1) * item_out];
                    if let Some(dw) = dw.as_mut() {
                        im2col(xv.item_slice(n), &g, &mut cols);
                        matmul(dout, false, &cols, true, dw.data_mut(), cout, p, kl, true);
                    }
                    if let Some(dx) = dx.as_mut() {
                        matmul(wv.data(), true, dout, false, &mut dcols, kl, cout, p, false);
                        let item = cin * xs.plane();
                        col2im(&dcols, &g, &mut dx.data_mut()[n * item..(n + 1) * item]);
                    }
                }
                if let Some(dx) = dx {
                    accumulate(grads, x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, w, dw);
                }
                if let Some(b) = b.filter(|&b| self.wants(b)) {
                    let db = channel_sums(dy);
                    accumulate(
                        grads,
                        b,
                        Tensor::from_vec(self.shape(b), db).expect("bias shape"),
                    );
                }
            }
            &Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xv = self.value(x);
                let wv = self.value(w);
                let xs = xv.shape();
                let ys = dy.shape();
                let [cin, cout, k, _] = wv.shape().0;
                let g = ConvGeom::new(cout, ys.h(), ys.w(), k, stride, pad)
                    .expect("validated in forward");
                let (kl, p) = (g.patch_len(), g.positions());
                let mut cols = vec![T::zero(); kl * p];
                let want_x = self.wants(x);
                let want_w = self.wants(w);
                let mut dx = want_x.then(|| Tensor::zeros(xs));
                let mut dw = want_w.then(|| Tensor::zeros(wv.shape()));
                let item_out = cout * ys.plane();
                let item_in = cin * p;
                for n in 0..xs.n() {
                    im2col(&dy.data()[n * item_out..(n + 1) * item_out], &g, &mut cols);
                    if let Some(dx) = dx.as_mut() {
                        let dst = &mut dx.data_mut()[n * item_in..(n + 1) * item_in];
                        matmul(wv.data(), false, &cols, false, dst, cin, kl, p, false);
                    }
                    if let Some(dw) = dw.as_mut() {
                        matmul(
                            xv.item_slice(n),
                            false,
                            &cols,
                            true,
                            dw.data_mut(),
                            cin,
                            p,
                            kl,
                            true,
                        );
                    }
                }
                if let Some(dx) = dx {
                    accumulate(grads, x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, w, dw);
                }
                if let Some(b) = b.filter(|&b| self.wants(b)) {
                    let db = channel_sums(dy);
                    accumulate(
                        grads,
                        b,
                        Tensor::from_vec(self.shape(b), db).expect("bias shape"),
                    );
                }
            }
            &Op::ReflectPad { x, pad } => {
                if !self.wants(x) {
                    return;
                }
                let s = self.shape(x);
                let (ho, wo) = (s.h() + 2 * pad, s.w() + 2 * pad);
                let mut dx = Tensor::zeros(s);
                for n in 0..s.n() {
                    for c in 0..s.c() {
                        let src = dy.plane(n, c);
                        let dst = dx.plane_mut(n, c);
                        for oy in 0..ho {
                            let iy = reflect(oy as isize - pad as isize, s.h());
                            for ox in 0..wo {
                                let ix = reflect(ox as isize - pad as isize, s.w());
                                dst[iy * s.w() + ix] += src[oy * wo + ox];
                            }
                        }
                    }
                }
                accumulate(grads, x, dx);
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = self.shape(*x);
                let gv = self.value(*gamma).data();
                let group_of = |n: usize, c: usize| (n * s.c() + c, inv_std[n * s.c() + c]);
                self.norm_backward(
                    s,
                    dy,
                    xhat,
                    gv,
                    *x,
                    *gamma,
                    *beta,
                    grads,
                    group_of,
                    s.n() * s.c(),
                    s.plane(),
                );
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = self.shape(*x);
                let gv = self.value(*gamma).data();
                self.norm_backward(
                    s,
                    dy,
                    xhat,
                    gv,
                    *x,
                    *gamma,
                    *beta,
                    grads,
                    |_, c| (c, inv_std[c]),
                    s.c(),
                    s.n() * s.plane(),
                );
            }
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let s = self.shape(*x);
                let xv = self.value(*x);
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); s.c()];
                let mut dbeta = vec![T::zero(); s.c()];
                let mut dx = self.wants(*x).then(|| Tensor::zeros(s));
                for n in 0..s.n() {
                    for c in 0..s.c() {
                        let d = dy.plane(n, c);
                        let xp = xv.plane(n, c);
                        for i in 0..d.len() {
                            dgamma[c] += d[i] * (xp[i] - mean[c]) * inv_std[c];
                            dbeta[c] += d[i];
                        }
                        if let Some(dx) = dx.as_mut() {
                            let scale = gv[c] * inv_std[c];
                            for (o, &g) in dx.plane_mut(n, c).iter_mut().zip(d) {
                                *o = g * scale;
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                self.accumulate_channel(grads, *gamma, dgamma);
                self.accumulate_channel(grads, *beta, dbeta);
            }
            &Op::Relu { x } => {
                let xv = self.value(x);
                let dx = zip_map(dy, xv, |g, v| if v > T::zero() { g } else { T::zero() });
                accumulate(grads, x, dx);
            }
            &Op::LeakyRelu { x, slope } => {
                let xv = self.value(x);
                let dx = zip_map(dy, xv, |g, v| if v > T::zero() { g } else { g * slope });
                accumulate(grads, x, dx);
            }
            &Op::Tanh { x } => {
                let dx = zip_map(dy, &node.value, |g, y| g * (T::one() - y * y));
                accumulate(grads, x, dx);
            }
            &Op::Sigmoid { x } => {
                let dx = zip_map(dy, &node.value, |g, y| g * y * (T::one() - y));
                accumulate(grads, x, dx);
            }
            &Op::SoftmaxChannels { x } => {
                let s = node.value.shape();
                let p = s.plane();
                let y = node.value.data();
                let mut dx = Tensor::zeros(s);
                let d = dx.data_mut();
                for n in 0..s.n() {
                    let base = n * s.c() * p;
                    for i in 0..p {
                        let mut dot = T::zero();
                        for c in 0..s.c() {
                            dot += dy.data()[base + c * p + i] * y[base + c * p + i];
                        }
                        for c in 0..s.c() {
                            let j = base + c * p + i;
                            d[j] = y[j] * (dy.data()[j] - dot);
                        }
                    }
                }
                accumulate(grads, x, dx);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                for (&src, &g) in argmax.iter().zip(dy.data()) {
                    dx.data_mut()[src] += g;
                }
                accumulate(grads, *x, dx);
            }
            &Op::UpsampleBilinear2 { x } => {
                let s = self.shape(x);
                let (ho, wo) = (s.h() * 2, s.w() * 2);
                let ys = bilinear_taps(s.h(), ho);
                let xs = bilinear_taps(s.w(), wo);
                let mut dx = Tensor::zeros(s);
                for n in 0..s.n() {
                    for c in 0..s.c() {
                        let src = dy.plane(n, c);
                        let dst = dx.plane_mut(n, c);
                        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                                let (fy, fx) = (T::of(fy), T::of(fx));
                                let g = src[oy * wo + ox];
                                dst[y0 * s.w() + x0] += g * (T::one() - fy) * (T::one() - fx);
                                dst[y0 * s.w() + x1] += g * (T::one() - fy) * fx;
                                dst[y1 * s.w() + x0] += g * fy * (T::one() - fx);
                                dst[y1 * s.w() + x1] += g * fy * fx;
                            }
                        }
                    }
                }
                accumulate(grads, x, dx);
            }
            Op::Concat { xs } => {
                let s = dy.shape();
                let mut offset = 0;
                for &v in xs {
                    let vs = self.shape(v);
                    if self.wants(v) {
                        let mut data = Vec::with_capacity(vs.numel());
                        for n in 0..s.n() {
                            let start = (n * s.c() + offset) * s.plane();
                            data.extend_from_slice(&dy.data()[start..start + vs.c() * s.plane()]);
                        }
                        accumulate(grads, v, Tensor::from_vec(vs, data).expect("concat part"));
                    }
                    offset += vs.c();
                }
            }
            &Op::SliceChannels { x, start } => {
                let s = self.shape(x);
                let count = dy.shape().c();
                let p = s.plane();
                let mut dx = Tensor::zeros(s);
                for n in 0..s.n() {
                    let dst = (n * s.c() + start) * p;
                    let src = n * count * p;
                    dx.data_mut()[dst..dst + count * p]
                        .copy_from_slice(&dy.data()[src..src + count * p]);
                }
                accumulate(grads, x, dx);
            }
            &Op::Add { a, b } => {
                if self.wants(a) {
                    accumulate(grads, a, dy.clone());
                }
                if self.wants(b) {
                    accumulate(grads, b, dy.clone());
                }
            }
            &Op::Mul { a, b } => {
                if self.wants(a) {
                    accumulate(grads, a, zip_map(dy, self.value(b), |g, v| g * v));
                }
                if self.wants(b) {
                    accumulate(grads, b, zip_map(dy, self.value(a), |g, v| g * v));
                }
            }
            &Op::Mean { x } => {
                let s = self.shape(x);
                let g = dy.item() / T::from_usize(s.numel());
                accumulate(grads, x, Tensor::full(s, g));
            }
            &Op::MulBroadcast { probs, image } => {
                let ps = self.shape(probs);
                let pv = self.value(probs);
                let iv = self.value(image);
                if self.wants(probs) {
                    let mut dp = dy.clone();
                    for n in 0..ps.n() {
                        let img = iv.plane(n, 0);
                        for c in 0..ps.c() {
                            for (o, &v) in dp.plane_mut(n, c).iter_mut().zip(img) {
                                *o *= v;
                            }
                        }
                    }
                    accumulate(grads, probs, dp);
                }
                if self.wants(image) {
                    let mut di = Tensor::zeros(iv.shape());
                    for n in 0..ps.n() {
                        for c in 0..ps.c() {
                            let d = dy.plane(n, c);
                            let pp = pv.plane(n, c);
                            for (i, o) in di.plane_mut(n, 0).iter_mut().enumerate() {
                                *o += d[i] * pp[i];
                            }
                        }
                    }
                    accumulate(grads, image, di);
                }
            }
            Op::Sobel { x, gx, gy } => {
                let s = self.shape(*x);
                let (h, w) = (s.h(), s.w());
                let mut dgx = vec![T::zero(); s.numel()];
                let mut dgy = vec![T::zero(); s.numel()];
                for (i, (&m, &g)) in node.value.data().iter().zip(dy.data()).enumerate() {
                    if m > T::zero() {
                        dgx[i] = g * gx[i] / m;
                        dgy[i] = g * gy[i] / m;
                    }
                }
                let mut dx = Tensor::zeros(s);
                for nc in 0..s.n() * s.c() {
                    let base = nc * h * w;
                    sobel_plane_adjoint(
                        &dgx[base..base + h * w],
                        &dgy[base..base + h * w],
                        h,
                        w,
                        &mut dx.data_mut()[base..base + h * w],
                    );
                }
                accumulate(grads, *x, dx);
            }
            Op::WeightedSum { xs, weights } => {
                let g = dy.item();
                for (&v, &w) in xs.iter().zip(weights) {
                    if self.wants(v) {
                        accumulate(grads, v, Tensor::scalar(g * w));
                    }
                }
            }
            &Op::NegMeanLog { p, eps } => {
                let pv = self.value(p);
                let scale = dy.item() / T::from_usize(pv.len());
                let dp = pv.map(|v| {
                    if v > eps && v < T::one() - eps {
                        -scale / v
                    } else {
                        T::zero()
                    }
                });
                accumulate(grads, p, dp);
            }
            &Op::NegMeanLog1m { p, eps } => {
                let pv = self.value(p);
                let scale = dy.item() / T::from_usize(pv.len());
                let dp = pv.map(|v| {
                    if v > eps && v < T::one() - eps {
                        scale / (T::one() - v)
                    } else {
                        T::zero()
                    }
                });
                accumulate(grads, p, dp);
            }
            &Op::MeanAbsDiff { a, b } => {
                let av = self.value(a);
                let bv = self.value(b);
                let scale = dy.item() / T::from_usize(av.len());
                let da = zip_map(av, bv, |x, y| {
                    if x > y {
                        scale
                    } else if x < y {
                        -scale
                    } else {
                        T::zero()
                    }
                });
                if self.wants(b) {
                    accumulate(grads, b, da.map(|v| -v));
                }
                if self.wants(a) {
                    accumulate(grads, a, da);
                }
            }
            Op::SegLoss {
                probs,
                labels,
                weights,
            } => {
                let pv = self.value(*probs);
                let mut dp = seg_loss_grad(pv.data(), pv.shape(), labels, weights);
                let g = dy.item();
                for v in dp.iter_mut() {
                    *v *= g;
                }
                accumulate(
                    grads,
                    *probs,
                    Tensor::from_vec(pv.shape(), dp).expect("seg grad shape"),
                );
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_backward(
        &self,
        s: Shape,
        dy: &Tensor<T>,
        xhat: &[T],
        gamma: &[T],
        x: Var,
        gvar: Var,
        bvar: Var,
        grads: &mut [Option<Tensor<T>>],
        group_of: impl Fn(usize, usize) -> (usize, T),
        groups: usize,
        group_len: usize,
    ) {
        let p = s.plane();
        let mut sum_d = vec![T::zero(); groups];
        let mut sum_dx = vec![T::zero(); groups];
        let mut dgamma = vec![T::zero(); s.c()];
        let mut dbeta = vec![T::zero(); s.c()];
        for n in 0..s.n() {
            for c in 0..s.c() {
                let (gi, _) = group_of(n, c);
                let base = (n * s.c() + c) * p;
                let d = dy.plane(n, c);
                for i in 0..p {
                    let dh = d[i] * gamma[c];
                    sum_d[gi] += dh;
                    sum_dx[gi] += dh * xhat[base + i];
                    dgamma[c] += d[i] * xhat[base + i];
                    dbeta[c] += d[i];
                }
            }
        }
        if self.wants(x) {
            let m = T::from_usize(group_len);
            let mut dx = Tensor::zeros(s);
            for n in 0..s.n() {
                for c in 0..s.c() {
                    let (gi, inv) = group_of(n, c);
                    let base = (n * s.c() + c) * p;
                    let d = dy.plane(n, c);
                    let (sd, sdx) = (sum_d[gi] / m, sum_dx[gi] / m);
                    for (i, o) in dx.plane_mut(n, c).iter_mut().enumerate() {
                        *o = inv * (d[i] * gamma[c] - sd - xhat[base + i] * sdx);
                    }
                }
            }
            accumulate(grads, x, dx);
        }
        self.accumulate_channel(grads, gvar, dgamma);
        self.accumulate_channel(grads, bvar, dbeta);
    }

    fn accumulate_channel(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Vec<T>) {
        if self.wants(v) {
            accumulate(
                grads,
                v,
                Tensor::from_vec(self.shape(v), g).expect("channel param shape"),
            );
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape(), data).expect("zip_map of equal shapes")
}

fn add_channel_bias<T: Real>(out: &mut Tensor<T>, bias: &[T]) {
    let s = out.shape();
    for n in 0..s.n() {
        for (c, &b) in bias.iter().enumerate() {
            for v in out.plane_mut(n, c) {
                *v += b;
            }
        }
    }
}

fn channel_sums<T: Real>(t: &Tensor<T>) -> Vec<T> {
    let s = t.shape();
    let mut out = vec![T::zero(); s.c()];
    for n in 0..s.n() {
        for (c, o) in out.iter_mut().enumerate() {
            *o += t.plane(n, c).iter().copied().sum::<T>();
        }
    }
    out
}

/// Two-pass mean and biased variance.
fn mean_var<T: Real>(values: impl Iterator<Item = T> + Clone, count: usize) -> (T, T) {
    let m = T::from_usize(count);
    let mean = values.clone().sum::<T>() / m;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<T>() / m;
    (mean, var)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Source taps `(i0, i1, frac)` for each output index of a ×2 upsampling.
fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (libm::floor(src) as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn clamp_prob<T: Real>(p: T, eps: T) -> T {
    p.max(eps).min(T::one() - eps)
}

fn check_unit_closed<T: Real>(p: &[T]) -> Result<()> {
    if let Some(bad) = p.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
        bail!(Validation, "probability {} outside [0, 1]", bad);
    }
    Ok(())
}

const SOBEL_X: [[i8; 3]; 3] = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]];
const SOBEL_Y: [[i8; 3]; 3] = [[-1, -2, -1], [0, 0, 0], [1, 2, 1]];

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Horizontal and vertical Sobel responses of one plane with replicate padding.
pub(crate) fn sobel_plane<T: Real>(m: &[T], h: usize, w: usize, gx: &mut [T], gy: &mut [T]) {
    let two = T::of(2.0);
    for y in 0..h {
        let rows = [-1isize, 0, 1].map(|d| clamp_index(y as isize + d, h) * w);
        for x in 0..w {
            let cols = [-1isize, 0, 1].map(|d| clamp_index(x as isize + d, w));
            let at = |r: usize, c: usize| m[rows[r] + cols[c]];
            // positive minus negative side, so flat neighbourhoods cancel exactly
            let right = at(0, 2) + two * at(1, 2) + at(2, 2);
            let left = at(0, 0) + two * at(1, 0) + at(2, 0);
            let below = at(2, 0) + two * at(2, 1) + at(2, 2);
            let above = at(0, 0) + two * at(0, 1) + at(0, 2);
            gx[y * w + x] = right - left;
            gy[y * w + x] = below - above;
        }
    }
}

fn sobel_plane_adjoint<T: Real>(dgx: &[T], dgy: &[T], h: usize, w: usize, dm: &mut [T]) {
    for y in 0..h {
        for x in 0..w {
            let (ax, ay) = (dgx[y * w + x], dgy[y * w + x]);
            if ax == T::zero() && ay == T::zero() {
                continue;
            }
            for (r, (rowx, rowy)) in SOBEL_X.iter().zip(&SOBEL_Y).enumerate() {
                let yy = clamp_index(y as isize + r as isize - 1, h);
                for c in 0..3 {
                    let xx = clamp_index(x as isize + c as isize - 1, w);
                    let k = T::of(rowx[c] as f64) * ax + T::of(rowy[c] as f64) * ay;
                    dm[yy * w + xx] += k;
                }
            }
        }
    }
}

/// Per-class `(Σ p·y, Σ p, Σ y)` over every pixel of the batch.
fn dice_sums<T: Real>(probs: &[T], s: Shape, labels: &[u8]) -> Vec<(T, T, T)> {
    let p = s.plane();
    let mut sums = vec![(T::zero(), T::zero(), T::zero()); s.c()];
    for n in 0..s.n() {
        for (c, acc) in sums.iter_mut().enumerate() {
            let base = (n * s.c() + c) * p;
            for i in 0..p {
                let pr = probs[base + i];
                acc.1 += pr;
                if labels[n * p + i] as usize == c {
                    acc.0 += pr;
                    acc.2 += T::one();
                }
            }
        }
    }
    sums
}

pub(crate) fn seg_loss_value<T: Real>(
    probs: &[T],
    s: Shape,
    labels: &[u8],
    w: &SegLossWeights<T>,
) -> T {
    let two = T::of(2.0);
    let dice: T = dice_sums(probs, s, labels)
        .iter()
        .zip(&w.alpha)
        .map(|(&(inter, ps, gs), &a)| {
            a * (T::one() - (two * inter + w.eps_smooth) / (ps + gs + w.eps_smooth))
        })
        .sum();
    let p = s.plane();
    let mut ce = T::zero();
    for n in 0..s.n() {
        for c in 0..s.c() {
            let base = (n * s.c() + c) * p;
            for i in 0..p {
                let q = clamp_prob(probs[base + i], w.eps_log);
                ce -= if labels[n * p + i] as usize == c {
                    q.ln()
                } else {
                    (T::one() - q).ln()
                };
            }
        }
    }
    ce /= T::from_usize(s.n() * p);
    w.beta * dice + (T::one() - w.beta) * ce
}

fn seg_loss_grad<T: Real>(probs: &[T], s: Shape, labels: &[u8], w: &SegLossWeights<T>) -> Vec<T> {
    let two = T::of(2.0);
    let sums = dice_sums(probs, s, labels);
    let p = s.plane();
    let m = T::from_usize(s.n() * p);
    let ce_scale = (T::one() - w.beta) / m;
    let mut out = vec![T::zero(); probs.len()];
    for n in 0..s.n() {
        for c in 0..s.c() {
            let (inter, ps, gs) = sums[c];
            let num = two * inter + w.eps_smooth;
            let den = ps + gs + w.eps_smooth;
            let base = (n * s.c() + c) * p;
            for i in 0..p {
                let q = probs[base + i];
                let y = labels[n * p + i] as usize == c;
                let yv = if y { T::one() } else { T::zero() };
                let ddice = num / (den * den) - two * yv / den;
                let inside = q > w.eps_log && q < T::one() - w.eps_log;
                let dce = if !inside {
                    T::zero()
                } else if y {
                    -T::one() / q
                } else {
                    T::one() / (T::one() - q)
                };
                out[base + i] = w.beta * w.alpha[c] * ddice + ce_scale * dce;
            }
        }
    }
    out
}
