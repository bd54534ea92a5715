//! Output-space adversarial adaptation of a trained U-Net.
//!
//! The discriminator sees class probabilities, their product with the input
//! image, and the Sobel magnitude of each probability channel. Predictions on
//! mapped-source slices are "real", predictions on target slices are "fake".

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{sobel_plane, Tape, Var};
use crate::error::{bail, Error, Result};
use crate::history::LossHistory;
use crate::nets::{DiscriminatorConfig, NormMode, PatchDiscriminator, UNet2D};
use crate::optim::Adam;
use crate::scalar::Real;
use crate::segmentation::{SegLossConfig, SegModel};
use crate::sub_seed;
use crate::tensor::Tensor;
use crate::translation::{
    gan_loss_discriminator, gan_loss_generator, tape_disc_loss, tape_gen_loss, GanMode,
};
use crate::volume::{batch_images, batch_masks, pick, Domain, SliceBatches, SliceSample};

/// Sobel gradient magnitude of a row-major `h × w` map, replicate padding.
pub fn sobel_contour(m: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    let (gx, gy) = sobel_components(m, h, w)?;
    Ok(gx
        .iter()
        .zip(&gy)
        .map(|(a, b)| libm::sqrt(a * a + b * b))
        .collect())
}

/// Horizontal and vertical Sobel responses.
pub fn sobel_components(m: &[f64], h: usize, w: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if m.len() != h * w {
        bail!(Shape, "map of {} values is not {}x{}", m.len(), h, w);
    }
    let mut gx = vec![0.0; m.len()];
    let mut gy = vec![0.0; m.len()];
    sobel_plane(m, h, w, &mut gx, &mut gy);
    Ok((gx, gy))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscChannels {
    /// Shape, texture and contour: `3C` channels.
    Full,
    /// Probabilities only: `C` channels.
    SegOnly,
}

impl DiscChannels {
    pub fn count(self, classes: usize) -> usize {
        match self {
            DiscChannels::Full => 3 * classes,
            DiscChannels::SegOnly => classes,
        }
    }
}

/// Discriminator input on the tape.
pub fn disc_input_on_tape<T: Real>(
    tape: &mut Tape<T>,
    probs: Var,
    image: Var,
    channels: DiscChannels,
) -> Result<Var> {
    match channels {
        DiscChannels::SegOnly => Ok(probs),
        DiscChannels::Full => {
            let texture = tape.mul_broadcast(probs, image)?;
            let contour = tape.sobel(probs);
            tape.concat(&[probs, texture, contour])
        }
    }
}

/// `N×C×H×W` probabilities and `N×1×H×W` image → discriminator input.
pub fn build_disc_input<T: Real>(
    probs: &Tensor<T>,
    image: &Tensor<T>,
    channels: DiscChannels,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone());
    let i = tape.constant(image.clone());
    let out = disc_input_on_tape(&mut tape, p, i, channels)?;
    Ok(tape.value(out).clone())
}

/// `−mean ln d(source input) − mean ln(1 − d(target input))`.
pub fn adv_feature_loss_discriminator<T: Real>(
    d_on_source: &[T],
    d_on_target: &[T],
    eps: f64,
) -> Result<T> {
    gan_loss_discriminator(d_on_source, d_on_target, eps)
}

pub fn adv_feature_loss_generator<T: Real>(
    d_on_target: &[T],
    mode: GanMode,
    eps: f64,
) -> Result<T> {
    gan_loss_generator(d_on_target, mode, eps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Steps between candidate snapshots.
    pub snapshot_every: u64,
    /// U-Net learning rate; the discriminator uses half of it.
    pub lr: f64,
    pub adversarial_weight: f64,
    pub eps: f64,
    pub mode: GanMode,
    pub supervised_step: bool,
    pub channels: DiscChannels,
    pub discriminator_width: usize,
    pub loss: SegLossConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            epochs: 100,
            batch_size: 4,
            snapshot_every: 50,
            lr: 1e-4,
            adversarial_weight: 0.1,
            eps: 1e-7,
            mode: GanMode::NonSaturating,
            supervised_step: true,
            channels: DiscChannels::Full,
            discriminator_width: 16,
            loss: SegLossConfig::default(),
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.snapshot_every == 0 {
            bail!(Config, "snapshot interval must be at least 1");
        }
        if self.batch_size == 0 {
            bail!(Config, "batch size must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bail!(Config, "learning rate must be positive");
        }
        if !(self.adversarial_weight >= 0.0 && self.adversarial_weight.is_finite()) {
            bail!(Config, "adversarial weight must be non-negative");
        }
        if !(self.eps > 0.0 && self.eps <= 1e-3) {
            bail!(Config, "probability floor must lie in (0, 1e-3]");
        }
        self.loss.validate()
    }
}

/// A U-Net snapshot emitted during adaptation.
#[derive(Debug, Clone)]
pub struct Candidate<T> {
    pub step: u64,
    pub unet: UNet2D<T>,
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome<T> {
    pub model: SegModel<T>,
    pub discriminator: PatchDiscriminator<T>,
    pub candidates: Vec<Candidate<T>>,
    pub history: LossHistory,
}

/// Steps per epoch: the larger of the two slice sets sets the pace.
pub fn adapt_steps_per_epoch(source: usize, target: usize, batch_size: usize) -> usize {
    source.max(target).div_ceil(batch_size)
}

/// Per iteration: discriminator step, adversarial U-Net step on target slices,
/// then (when enabled) a supervised step on mapped-source slices. The U-Net
/// optimizer state is shared by the last two.
pub fn train_adaptation<T: Real>(
    start: SegModel<T>,
    mapped_source: &[SliceSample],
    target: &[SliceSample],
    cfg: &AdaptConfig,
    seed: u64,
) -> Result<AdaptOutcome<T>> {
    cfg.validate()?;
    if mapped_source.is_empty() || target.is_empty() {
        bail!(
            Validation,
            "adaptation needs mapped-source and target slices"
        );
    }
    if let Some(s) = mapped_source.iter().find(|s| s.mask().is_none()) {
        bail!(
            Validation,
            "mapped-source slice {} of {} has no mask",
            s.slice_index,
            s.volume_id
        );
    }
    if let Some(s) = target.iter().find(|s| s.domain != Domain::Target) {
        bail!(
            Validation,
            "slice {} of {} is not a target slice",
            s.slice_index,
            s.volume_id
        );
    }
    let classes = start.unet.config.classes;
    let dcfg = DiscriminatorConfig {
        in_channels: cfg.channels.count(classes),
        base_width: cfg.discriminator_width,
    };
    let mut disc = PatchDiscriminator::<T>::new(dcfg, sub_seed(seed, 30))?;
    let mut d_opt = Adam::new(start.opt.config, &disc.params);
    let mut model = start;
    let mut history = LossHistory::new();
    let mut candidates = Vec::new();
    let per_epoch = adapt_steps_per_epoch(mapped_source.len(), target.len(), cfg.batch_size);
    let total = (per_epoch * cfg.epochs) as u64;
    let sb = SliceBatches::new(
        mapped_source.len(),
        cfg.batch_size,
        Some(sub_seed(seed, 31)),
    )?;
    let tb = SliceBatches::new(target.len(), cfg.batch_size, Some(sub_seed(seed, 32)))?;
    let d_lr = cfg.lr / 2.0;
    let mut done = 0u64;
    for epoch in 0..cfg.epochs as u64 {
        let s_batches = sb.epoch(epoch);
        let t_batches = tb.epoch(epoch);
        for k in 0..per_epoch {
            let src = pick(mapped_source, &s_batches[k % s_batches.len()]);
            let tgt = pick(target, &t_batches[k % t_batches.len()]);
            let xs = batch_images::<T>(&src)?;
            let ys = batch_masks(&src)?;
            let xt = batch_images::<T>(&tgt)?;
            let step = done;
            let nonfinite = |what: &str| Error::NonFinite {
                what: what.into(),
                step,
            };

            // target predictions with gradient tracking, reused detached by the discriminator
            let mut gtape = Tape::new();
            let gb = model.unet.params.bind(&mut gtape, true);
            let xtv = gtape.constant(xt.clone());
            let t_out = model.unet.forward(&mut gtape, &gb, xtv, NormMode::Train)?;

            // (1) discriminator
            let s_probs = {
                let mut t = Tape::new();
                let b = model.unet.params.bind(&mut t, false);
                let x = t.constant(xs.clone());
                let o = model.unet.forward(&mut t, &b, x, NormMode::Train)?;
                t.value(o.probs).clone()
            };
            let t_probs = gtape.value(t_out.probs).clone();
            let d_loss = {
                let mut t = Tape::new();
                let b = disc.params.bind(&mut t, true);
                let (ps, is) = (t.constant(s_probs), t.constant(xs.clone()));
                let (pt, it) = (t.constant(t_probs), t.constant(xt.clone()));
                let real_in = disc_input_on_tape(&mut t, ps, is, cfg.channels)?;
                let fake_in = disc_input_on_tape(&mut t, pt, it, cfg.channels)?;
                let real = disc.forward(&mut t, &b, real_in)?;
                let fake = disc.forward(&mut t, &b, fake_in)?;
                let l = tape_disc_loss(&mut t, real, fake, cfg.eps)?;
                let mut g = t.backward(l)?;
                let grads = b.gradients(&mut g);
                d_opt.step(&mut disc.params, &grads, d_lr);
                t.value(l).item()
            };
            history
                .push(step, "disc", d_loss.as_f64())
                .map_err(|_| nonfinite("discriminator loss"))?;

            // (2) adversarial U-Net step through the updated discriminator
            let db = disc.params.bind(&mut gtape, false);
            let fake_in = disc_input_on_tape(&mut gtape, t_out.probs, xtv, cfg.channels)?;
            let fake = disc.forward(&mut gtape, &db, fake_in)?;
            let adv = tape_gen_loss(&mut gtape, fake, cfg.mode, cfg.eps)?;
            let weighted = gtape.weighted_sum(&[adv], &[cfg.adversarial_weight])?;
            let adv_value = gtape.value(adv).item();
            history
                .push(step, "adv", adv_value.as_f64())
                .map_err(|_| nonfinite("adversarial loss"))?;
            let mut g = gtape.backward(weighted)?;
            let grads = gb.gradients(&mut g);
            model.opt.step(&mut model.unet.params, &grads, cfg.lr);
            model.unet.update_running_stats(&gtape, &t_out);

            // (3) supervised step on mapped-source slices
            if cfg.supervised_step {
                let l = model.supervised_step(&xs, &ys, &cfg.loss, cfg.lr)?;
                history.push(step, "supervised", l.as_f64())?;
            }
            if !model.unet.params.all_finite() {
                return Err(nonfinite("U-Net parameters"));
            }
            done += 1;
            if done.is_multiple_of(cfg.snapshot_every) || done == total {
                candidates.push(Candidate {
                    step: done,
                    unet: model.unet.clone(),
                });
            }
        }
    }
    Ok(AdaptOutcome {
        model,
        discriminator: disc,
        candidates,
        history,
    })
}

/// Generator-side adversarial loss as a function of U-Net logits (for gradient checks).
pub fn adversarial_loss_from_logits<T: Real>(
    logits: &Tensor<T>,
    image: &Tensor<T>,
    disc: &PatchDiscriminator<T>,
    channels: DiscChannels,
    mode: GanMode,
    eps: f64,
) -> Result<(T, Tensor<T>)> {
    let mut tape = Tape::new();
    let l = tape.variable(logits.clone());
    let i = tape.constant(image.clone());
    let probs = tape.softmax_channels(l);
    let input = disc_input_on_tape(&mut tape, probs, i, channels)?;
    let b = disc.params.bind(&mut tape, false);
    let d = disc.forward(&mut tape, &b, input)?;
    let loss = tape_gen_loss(&mut tape, d, mode, eps)?;
    let mut g = tape.backward(loss)?;
    let grad = g.take(l).unwrap_or_else(|| Tensor::zeros(logits.shape()));
    Ok((tape.value(loss).item(), grad))
}
