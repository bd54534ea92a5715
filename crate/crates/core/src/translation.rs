//! Unpaired two-generator translation with cycle consistency.
//!
//! Naming follows the objective: `G_S` maps source → target and is judged by
//! `D_S` (real = target images); `G_T` maps target → source and is judged by
//! `D_T` (real = source images).

use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{Checkpoint, Phase};
use crate::error::{bail, Error, Result};
use crate::history::LossHistory;
use crate::nets::{DiscriminatorConfig, GeneratorConfig, PatchDiscriminator, ResNetGenerator};
use crate::optim::{linear_decay_second_half, Adam, AdamConfig};
use crate::scalar::Real;
use crate::sub_seed;
use crate::tensor::Tensor;
use crate::volume::{batch_images, pick, Domain, SliceBatches, SliceSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GanMode {
    /// `mean ln(1 − D(fake))`, minimized by the generator.
    Saturating,
    /// `−mean ln D(fake)`.
    NonSaturating,
}

fn check_open_unit<T: Real>(p: &[T], what: &str) -> Result<()> {
    if p.is_empty() {
        bail!(Validation, "{what} is empty");
    }
    if let Some(bad) = p.iter().find(|v| !(**v > T::zero() && **v < T::one())) {
        bail!(Validation, "{what} value {} outside (0, 1)", bad);
    }
    Ok(())
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 1e-3) {
        bail!(Config, "probability floor must lie in (0, 1e-3], got {eps}");
    }
    Ok(())
}

fn mean_ln<T: Real>(p: &[T], eps: T, complement: bool) -> T {
    let total: T = p
        .iter()
        .map(|&v| {
            let q = v.max(eps).min(T::one() - eps);
            if complement { T::one() - q } else { q }.ln()
        })
        .sum();
    total / T::from_usize(p.len())
}

/// `−mean ln d_real − mean ln(1 − d_fake)` with arguments clamped to `[ε, 1−ε]`.
pub fn gan_loss_discriminator<T: Real>(d_real: &[T], d_fake: &[T], eps: f64) -> Result<T> {
    check_eps(eps)?;
    check_open_unit(d_real, "d_real")?;
    check_open_unit(d_fake, "d_fake")?;
    let e = T::of(eps);
    Ok(-mean_ln(d_real, e, false) - mean_ln(d_fake, e, true))
}

pub fn gan_loss_generator<T: Real>(d_fake: &[T], mode: GanMode, eps: f64) -> Result<T> {
    check_eps(eps)?;
    check_open_unit(d_fake, "d_fake")?;
    let e = T::of(eps);
    Ok(match mode {
        GanMode::Saturating => mean_ln(d_fake, e, true),
        GanMode::NonSaturating => -mean_ln(d_fake, e, false),
    })
}

fn mean_abs<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    if a.shape() != b.shape() {
        bail!(Shape, "cycle pair {} vs {}", a.shape(), b.shape());
    }
    let total: T = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs())
        .sum();
    Ok(total / T::from_usize(a.len().max(1)))
}

/// `mean|rec_s − x_s| + mean|rec_t − x_t|`.
pub fn cycle_loss<T: Real>(
    x_s: &Tensor<T>,
    rec_s: &Tensor<T>,
    x_t: &Tensor<T>,
    rec_t: &Tensor<T>,
) -> Result<T> {
    Ok(mean_abs(x_s, rec_s)? + mean_abs(x_t, rec_t)?)
}

/// Discriminator loss on the tape.
pub fn tape_disc_loss<T: Real>(tape: &mut Tape<T>, real: Var, fake: Var, eps: f64) -> Result<Var> {
    let a = tape.neg_mean_log(real, eps)?;
    let b = tape.neg_mean_log1m(fake, eps)?;
    tape.weighted_sum(&[a, b], &[1.0, 1.0])
}

/// Generator adversarial loss on the tape.
pub fn tape_gen_loss<T: Real>(
    tape: &mut Tape<T>,
    fake: Var,
    mode: GanMode,
    eps: f64,
) -> Result<Var> {
    match mode {
        GanMode::NonSaturating => tape.neg_mean_log(fake, eps),
        GanMode::Saturating => {
            let v = tape.neg_mean_log1m(fake, eps)?;
            tape.weighted_sum(&[v], &[-1.0])
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TranslationConfig {
    pub lambda: f64,
    pub mode: GanMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Linear decay to zero over the second half of training.
    pub decay: bool,
    pub eps: f64,
    pub generator: GeneratorConfig,
    pub discriminator_width: usize,
}

impl Default for TranslationConfig {
    fn default() -> Self {
        TranslationConfig {
            lambda: 10.0,
            mode: GanMode::NonSaturating,
            epochs: 40,
            batch_size: 4,
            adam: AdamConfig::new(2e-4, 0.5, 0.999),
            decay: true,
            eps: 1e-7,
            generator: GeneratorConfig {
                base_width: 8,
                residual_blocks: 6,
            },
            discriminator_width: 16,
        }
    }
}

impl TranslationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            bail!(
                Config,
                "cycle weight must be non-negative, got {}",
                self.lambda
            );
        }
        check_eps(self.eps)?;
        if self.batch_size == 0 {
            bail!(Config, "batch size must be at least 1");
        }
        self.adam.validate()?;
        self.generator.validate()
    }
}

/// The four players.
#[derive(Debug, Clone)]
pub struct CycleGan<T> {
    pub g_s: ResNetGenerator<T>,
    pub g_t: ResNetGenerator<T>,
    pub d_s: PatchDiscriminator<T>,
    pub d_t: PatchDiscriminator<T>,
}

impl<T: Real> CycleGan<T> {
    pub fn new(cfg: &TranslationConfig, seed: u64) -> Result<Self> {
        let d = DiscriminatorConfig {
            in_channels: 1,
            base_width: cfg.discriminator_width,
        };
        Ok(CycleGan {
            g_s: ResNetGenerator::new(cfg.generator, sub_seed(seed, 1))?,
            g_t: ResNetGenerator::new(cfg.generator, sub_seed(seed, 2))?,
            d_s: PatchDiscriminator::new(d, sub_seed(seed, 3))?,
            d_t: PatchDiscriminator::new(d, sub_seed(seed, 4))?,
        })
    }
}

/// Per-player values of the translation objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TranslationLosses<T> {
    pub disc_s: T,
    pub disc_t: T,
    pub adv_s: T,
    pub adv_t: T,
    pub cycle: T,
    /// `adv_s + adv_t + λ·cycle`.
    pub generator_total: T,
}

/// Evaluates every term on one batch pair without updating anything.
pub fn translation_objective<T: Real>(
    nets: &CycleGan<T>,
    x_s: &Tensor<T>,
    x_t: &Tensor<T>,
    cfg: &TranslationConfig,
) -> Result<TranslationLosses<T>> {
    let fake_t = nets.g_s.apply(x_s)?;
    let rec_s = nets.g_t.apply(&fake_t)?;
    let fake_s = nets.g_t.apply(x_t)?;
    let rec_t = nets.g_s.apply(&fake_s)?;
    let ds_fake = nets.d_s.apply(&fake_t)?;
    let dt_fake = nets.d_t.apply(&fake_s)?;
    let adv_s = gan_loss_generator(ds_fake.data(), cfg.mode, cfg.eps)?;
    let adv_t = gan_loss_generator(dt_fake.data(), cfg.mode, cfg.eps)?;
    let cycle = cycle_loss(x_s, &rec_s, x_t, &rec_t)?;
    Ok(TranslationLosses {
        disc_s: gan_loss_discriminator(nets.d_s.apply(x_t)?.data(), ds_fake.data(), cfg.eps)?,
        disc_t: gan_loss_discriminator(nets.d_t.apply(x_s)?.data(), dt_fake.data(), cfg.eps)?,
        adv_s,
        adv_t,
        cycle,
        generator_total: adv_s + adv_t + T::of(cfg.lambda) * cycle,
    })
}

/// Handles of the generator-side graph.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorGraph {
    pub fake_t: Var,
    pub fake_s: Var,
    pub adv_s: Var,
    pub adv_t: Var,
    pub cycle: Var,
    pub total: Var,
}

struct Translated {
    x_s: Var,
    x_t: Var,
    fake_t: Var,
    rec_s: Var,
    fake_s: Var,
    rec_t: Var,
}

fn translate_on_tape<T: Real>(
    tape: &mut Tape<T>,
    nets: &CycleGan<T>,
    gs: &crate::params::Bound,
    gt: &crate::params::Bound,
    x_s: &Tensor<T>,
    x_t: &Tensor<T>,
) -> Result<Translated> {
    let xs = tape.constant(x_s.clone());
    let xt = tape.constant(x_t.clone());
    let fake_t = nets.g_s.forward(tape, gs, xs)?;
    let rec_s = nets.g_t.forward(tape, gt, fake_t)?;
    let fake_s = nets.g_t.forward(tape, gt, xt)?;
    let rec_t = nets.g_s.forward(tape, gs, fake_s)?;
    Ok(Translated {
        x_s: xs,
        x_t: xt,
        fake_t,
        rec_s,
        fake_s,
        rec_t,
    })
}

fn finish_generator_graph<T: Real>(
    tape: &mut Tape<T>,
    nets: &CycleGan<T>,
    tr: &Translated,
    cfg: &TranslationConfig,
) -> Result<GeneratorGraph> {
    let ds = nets.d_s.params.bind(tape, false);
    let dt = nets.d_t.params.bind(tape, false);
    let ps = nets.d_s.forward(tape, &ds, tr.fake_t)?;
    let pt = nets.d_t.forward(tape, &dt, tr.fake_s)?;
    let adv_s = tape_gen_loss(tape, ps, cfg.mode, cfg.eps)?;
    let adv_t = tape_gen_loss(tape, pt, cfg.mode, cfg.eps)?;
    let cs = tape.mean_abs_diff(tr.rec_s, tr.x_s)?;
    let ct = tape.mean_abs_diff(tr.rec_t, tr.x_t)?;
    let cycle = tape.weighted_sum(&[cs, ct], &[1.0, 1.0])?;
    let total = tape.weighted_sum(&[adv_s, adv_t, cycle], &[1.0, 1.0, cfg.lambda])?;
    Ok(GeneratorGraph {
        fake_t: tr.fake_t,
        fake_s: tr.fake_s,
        adv_s,
        adv_t,
        cycle,
        total,
    })
}

/// Generator-side total and its gradients with respect to `G_S` and `G_T` parameters.
#[allow(clippy::type_complexity)]
pub fn generator_objective<T: Real>(
    nets: &CycleGan<T>,
    x_s: &Tensor<T>,
    x_t: &Tensor<T>,
    cfg: &TranslationConfig,
) -> Result<(T, Vec<Option<Tensor<T>>>, Vec<Option<Tensor<T>>>)> {
    let mut tape = Tape::new();
    let gs = nets.g_s.params.bind(&mut tape, true);
    let gt = nets.g_t.params.bind(&mut tape, true);
    let tr = translate_on_tape(&mut tape, nets, &gs, &gt, x_s, x_t)?;
    let g = finish_generator_graph(&mut tape, nets, &tr, cfg)?;
    let mut grads = tape.backward(g.total)?;
    Ok((
        tape.value(g.total).item(),
        gs.gradients(&mut grads),
        gt.gradients(&mut grads),
    ))
}

/// One discriminator update on detached fakes; returns the pre-update loss.
pub fn discriminator_step<T: Real>(
    d: &mut PatchDiscriminator<T>,
    opt: &mut Adam<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    eps: f64,
    lr: f64,
) -> Result<T> {
    let mut tape = Tape::new();
    let b = d.params.bind(&mut tape, true);
    let r = tape.constant(real.clone());
    let f = tape.constant(fake.clone());
    let pr = d.forward(&mut tape, &b, r)?;
    let pf = d.forward(&mut tape, &b, f)?;
    let loss = tape_disc_loss(&mut tape, pr, pf, eps)?;
    let mut grads = tape.backward(loss)?;
    let g = b.gradients(&mut grads);
    opt.step(&mut d.params, &g, lr);
    Ok(tape.value(loss).item())
}

/// Networks plus optimizer state.
#[derive(Debug, Clone)]
pub struct TranslationState<T> {
    pub nets: CycleGan<T>,
    opt_g_s: Adam<T>,
    opt_g_t: Adam<T>,
    opt_d_s: Adam<T>,
    opt_d_t: Adam<T>,
    pub step: u64,
}

impl<T: Real> TranslationState<T> {
    pub fn new(cfg: &TranslationConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let nets = CycleGan::new(cfg, seed)?;
        Ok(TranslationState {
            opt_g_s: Adam::new(cfg.adam, &nets.g_s.params),
            opt_g_t: Adam::new(cfg.adam, &nets.g_t.params),
            opt_d_s: Adam::new(cfg.adam, &nets.d_s.params),
            opt_d_t: Adam::new(cfg.adam, &nets.d_t.params),
            nets,
            step: 0,
        })
    }

    /// `D_S`, then `D_T`, then both generators jointly.
    pub fn train_step(
        &mut self,
        x_s: &Tensor<T>,
        x_t: &Tensor<T>,
        cfg: &TranslationConfig,
        lr: f64,
    ) -> Result<TranslationLosses<T>> {
        let mut tape = Tape::new();
        let gs = self.nets.g_s.params.bind(&mut tape, true);
        let gt = self.nets.g_t.params.bind(&mut tape, true);
        let tr = translate_on_tape(&mut tape, &self.nets, &gs, &gt, x_s, x_t)?;
        // the generators do not change during the discriminator updates, so the
        // fakes already on the tape are exactly the detached fakes
        let fake_t = tape.value(tr.fake_t).clone();
        let fake_s = tape.value(tr.fake_s).clone();
        let disc_s = discriminator_step(
            &mut self.nets.d_s,
            &mut self.opt_d_s,
            x_t,
            &fake_t,
            cfg.eps,
            lr,
        )?;
        let disc_t = discriminator_step(
            &mut self.nets.d_t,
            &mut self.opt_d_t,
            x_s,
            &fake_s,
            cfg.eps,
            lr,
        )?;
        let g = finish_generator_graph(&mut tape, &self.nets, &tr, cfg)?;
        let mut grads = tape.backward(g.total)?;
        let gs_grads = gs.gradients(&mut grads);
        let gt_grads = gt.gradients(&mut grads);
        self.opt_g_s.step(&mut self.nets.g_s.params, &gs_grads, lr);
        self.opt_g_t.step(&mut self.nets.g_t.params, &gt_grads, lr);
        self.step += 1;
        Ok(TranslationLosses {
            disc_s,
            disc_t,
            adv_s: tape.value(g.adv_s).item(),
            adv_t: tape.value(g.adv_t).item(),
            cycle: tape.value(g.cycle).item(),
            generator_total: tape.value(g.total).item(),
        })
    }

    pub fn to_checkpoint(&self, seed: u64, config_hash: &str) -> Checkpoint {
        let mut ck = Checkpoint::new(Phase::Translation, self.step, seed, config_hash);
        let n = &self.nets;
        n.g_s.params.export("g_s/", &mut ck.blobs);
        n.g_t.params.export("g_t/", &mut ck.blobs);
        n.d_s.params.export("d_s/", &mut ck.blobs);
        n.d_t.params.export("d_t/", &mut ck.blobs);
        self.opt_g_s
            .export("adam/g_s/", &n.g_s.params, &mut ck.blobs);
        self.opt_g_t
            .export("adam/g_t/", &n.g_t.params, &mut ck.blobs);
        self.opt_d_s
            .export("adam/d_s/", &n.d_s.params, &mut ck.blobs);
        self.opt_d_t
            .export("adam/d_t/", &n.d_t.params, &mut ck.blobs);
        ck
    }

    pub fn from_checkpoint(cfg: &TranslationConfig, ck: &Checkpoint) -> Result<Self> {
        if ck.phase != Phase::Translation {
            bail!(
                Checkpoint,
                "expected a translation checkpoint, found {}",
                ck.phase.as_str()
            );
        }
        let mut s = TranslationState::new(cfg, ck.seed)?;
        let n = &mut s.nets;
        n.g_s.params.import("g_s/", &ck.blobs)?;
        n.g_t.params.import("g_t/", &ck.blobs)?;
        n.d_s.params.import("d_s/", &ck.blobs)?;
        n.d_t.params.import("d_t/", &ck.blobs)?;
        s.opt_g_s.import("adam/g_s/", &n.g_s.params, &ck.blobs)?;
        s.opt_g_t.import("adam/g_t/", &n.g_t.params, &ck.blobs)?;
        s.opt_d_s.import("adam/d_s/", &n.d_s.params, &ck.blobs)?;
        s.opt_d_t.import("adam/d_t/", &n.d_t.params, &ck.blobs)?;
        s.step = ck.step;
        Ok(s)
    }
}

/// Optimizer steps per epoch: the larger domain sets the pace, the smaller one wraps around.
pub fn steps_per_epoch(source: usize, target: usize, batch_size: usize) -> usize {
    source.max(target).div_ceil(batch_size)
}

/// Trains all four networks for `cfg.epochs` epochs.
pub fn train_translation<T: Real>(
    source: &[SliceSample],
    target: &[SliceSample],
    cfg: &TranslationConfig,
    seed: u64,
) -> Result<(TranslationState<T>, LossHistory)> {
    if source.is_empty() || target.is_empty() {
        bail!(Validation, "translation needs slices from both domains");
    }
    let mut state = TranslationState::new(cfg, seed)?;
    let mut history = LossHistory::new();
    let per_epoch = steps_per_epoch(source.len(), target.len(), cfg.batch_size);
    let total = (per_epoch * cfg.epochs) as u64;
    let sb = SliceBatches::new(source.len(), cfg.batch_size, Some(sub_seed(seed, 10)))?;
    let tb = SliceBatches::new(target.len(), cfg.batch_size, Some(sub_seed(seed, 11)))?;
    for epoch in 0..cfg.epochs as u64 {
        let s_batches = sb.epoch(epoch);
        let t_batches = tb.epoch(epoch);
        for k in 0..per_epoch {
            let xs = batch_images::<T>(&pick(source, &s_batches[k % s_batches.len()]))?;
            let xt = batch_images::<T>(&pick(target, &t_batches[k % t_batches.len()]))?;
            let lr = if cfg.decay {
                linear_decay_second_half(cfg.adam.lr, state.step, total)
            } else {
                cfg.adam.lr
            };
            let step = state.step;
            let l = state.train_step(&xs, &xt, cfg, lr)?;
            for (name, v) in [
                ("d_s", l.disc_s),
                ("d_t", l.disc_t),
                ("adv_s", l.adv_s),
                ("adv_t", l.adv_t),
                ("cycle", l.cycle),
                ("generator", l.generator_total),
            ] {
                history.push(step, name, v.as_f64())?;
            }
            if !state.nets.g_s.params.all_finite() || !state.nets.g_t.params.all_finite() {
                return Err(Error::NonFinite {
                    what: "generator parameters".into(),
                    step,
                });
            }
        }
    }
    Ok((state, history))
}

/// Maps every source slice into the target appearance; masks are carried over.
pub fn translate_dataset<T: Real>(
    g_s: &ResNetGenerator<T>,
    source: &[SliceSample],
    batch_size: usize,
) -> Result<Vec<SliceSample>> {
    let mut out = Vec::with_capacity(source.len());
    for chunk in source.chunks(batch_size.max(1)) {
        let refs: Vec<&SliceSample> = chunk.iter().collect();
        let y = g_s.apply(&batch_images::<T>(&refs)?)?;
        for (i, s) in chunk.iter().enumerate() {
            let img = y.item_slice(i).iter().map(|v| v.as_f64()).collect();
            out.push(s.with_image(img, Domain::MappedSource)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn rejects_closed_interval_probabilities() {
        assert!(gan_loss_discriminator(&[1.0f64], &[0.5], 1e-7).is_err());
        assert!(gan_loss_generator(&[0.0f64], GanMode::NonSaturating, 1e-7).is_err());
        assert!(gan_loss_generator(&[0.5f64], GanMode::NonSaturating, 0.1).is_err());
    }

    #[test]
    fn cycle_shape_mismatch() {
        let a = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2));
        let b = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 3));
        assert!(cycle_loss(&a, &b, &a, &a).is_err());
    }

    #[test]
    fn config_validation() {
        let c = TranslationConfig {
            lambda: -1.0,
            ..TranslationConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TranslationConfig {
            eps: 0.0,
            ..TranslationConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
