//! Supervised U-Net training with the weighted Dice + cross-entropy loss, and
//! slice-wise volume prediction.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{SegLossWeights, Tape};
use crate::checkpoint::{Checkpoint, Phase};
use crate::error::{bail, Error, Result};
use crate::history::LossHistory;
use crate::nets::{NormMode, UNet2D, UNetConfig};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Real;
use crate::sub_seed;
use crate::tensor::{Shape, Tensor};
use crate::volume::{
    batch_images, batch_masks, pick, LabelVolume, SliceBatches, SliceSample, Volume,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SegLossConfig {
    pub alpha: Vec<f64>,
    pub beta: f64,
    pub eps_smooth: f64,
    pub eps_log: f64,
}

impl Default for SegLossConfig {
    fn default() -> Self {
        SegLossConfig {
            alpha: vec![0.1, 0.4, 0.5],
            beta: 0.65,
            eps_smooth: 1e-6,
            eps_log: 1e-7,
        }
    }
}

impl SegLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
            bail!(Config, "class weights must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.beta) {
            bail!(
                Config,
                "mixing weight must lie in [0, 1], got {}",
                self.beta
            );
        }
        for (name, e) in [("eps_smooth", self.eps_smooth), ("eps_log", self.eps_log)] {
            if !(e > 0.0 && e <= 1e-3) {
                bail!(Config, "{name} must lie in (0, 1e-3], got {e}");
            }
        }
        Ok(())
    }

    pub fn weights<T: Real>(&self) -> SegLossWeights<T> {
        SegLossWeights {
            alpha: self.alpha.iter().map(|&a| T::of(a)).collect(),
            beta: T::of(self.beta),
            eps_smooth: T::of(self.eps_smooth),
            eps_log: T::of(self.eps_log),
        }
    }
}

/// `1 − (2Σ p·y + ε) / (Σ p + Σ y + ε)` for one class.
pub fn dice_term<T: Real>(pred: &[T], onehot: &[T], eps_smooth: f64) -> Result<T> {
    if pred.len() != onehot.len() {
        bail!(
            Shape,
            "dice term over {} predictions and {} labels",
            pred.len(),
            onehot.len()
        );
    }
    if pred.iter().any(|p| !(*p >= T::zero() && *p <= T::one())) {
        bail!(Validation, "dice predictions must lie in [0, 1]");
    }
    if onehot.iter().any(|y| *y != T::zero() && *y != T::one()) {
        bail!(Validation, "dice indicator must be 0 or 1");
    }
    let e = T::of(eps_smooth);
    let inter: T = pred.iter().zip(onehot).map(|(&p, &y)| p * y).sum();
    let ps: T = pred.iter().copied().sum();
    let ys: T = onehot.iter().copied().sum();
    Ok(T::one() - (T::of(2.0) * inter + e) / (ps + ys + e))
}

/// Pixels of class `c` over a `N×C×H×W` probability batch, with the matching indicator.
fn class_planes<T: Real>(probs: &Tensor<T>, labels: &[u8], c: usize) -> (Vec<T>, Vec<T>) {
    let s = probs.shape();
    let mut p = Vec::with_capacity(s.n() * s.plane());
    let mut y = Vec::with_capacity(s.n() * s.plane());
    for n in 0..s.n() {
        p.extend_from_slice(probs.plane(n, c));
        y.extend(labels[n * s.plane()..(n + 1) * s.plane()].iter().map(|&l| {
            if l as usize == c {
                T::one()
            } else {
                T::zero()
            }
        }));
    }
    (p, y)
}

fn check_simplex<T: Real>(probs: &Tensor<T>) -> Result<()> {
    let s = probs.shape();
    let tol = T::of(1e-4);
    for n in 0..s.n() {
        for i in 0..s.plane() {
            let mut sum = T::zero();
            for c in 0..s.c() {
                let v = probs.plane(n, c)[i];
                if !(v >= T::zero() && v <= T::one()) {
                    bail!(Validation, "probability {} outside [0, 1]", v);
                }
                sum += v;
            }
            if (sum - T::one()).abs() > tol {
                bail!(
                    Validation,
                    "class probabilities sum to {} at pixel {}",
                    sum,
                    i
                );
            }
        }
    }
    Ok(())
}

/// `β·Σ_c α_c·dice_c + (1−β)·CE`, with CE the per-pixel mean of
/// `−Σ_c [y ln q + (1−y) ln(1−q)]`, `q` clamped to `[ε_log, 1−ε_log]`.
/// Dice sums pool every pixel of the batch.
pub fn seg_loss<T: Real>(probs: &Tensor<T>, labels: &[u8], cfg: &SegLossConfig) -> Result<T> {
    cfg.validate()?;
    let s = probs.shape();
    if labels.len() != s.n() * s.plane() {
        bail!(Shape, "{} labels for probabilities {}", labels.len(), s);
    }
    if cfg.alpha.len() != s.c() {
        bail!(
            Config,
            "{} class weights for {} classes",
            cfg.alpha.len(),
            s.c()
        );
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= s.c()) {
        bail!(Validation, "label {bad} outside {} classes", s.c());
    }
    check_simplex(probs)?;
    let eps = T::of(cfg.eps_log);
    let mut dice = T::zero();
    let mut ce = T::zero();
    for c in 0..s.c() {
        let (p, y) = class_planes(probs, labels, c);
        dice += T::of(cfg.alpha[c]) * dice_term(&p, &y, cfg.eps_smooth)?;
        for (&q, &t) in p.iter().zip(&y) {
            let q = q.max(eps).min(T::one() - eps);
            ce -= t * q.ln() + (T::one() - t) * (T::one() - q).ln();
        }
    }
    ce /= T::from_usize(s.n() * s.plane());
    let beta = T::of(cfg.beta);
    Ok(beta * dice + (T::one() - beta) * ce)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedConfig {
    pub loss: SegLossConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub unet: UNetConfig,
    /// Steps between periodic snapshots; `0` disables them.
    pub checkpoint_every: u64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        SupervisedConfig {
            loss: SegLossConfig::default(),
            epochs: 500,
            batch_size: 4,
            adam: AdamConfig::new(1e-3, 0.9, 0.999),
            unet: UNetConfig {
                in_channels: 1,
                classes: 3,
                levels: 4,
                base_width: 8,
                residual: false,
            },
            checkpoint_every: 0,
        }
    }
}

impl SupervisedConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.unet.validate()?;
        self.adam.validate()?;
        if self.batch_size == 0 {
            bail!(Config, "batch size must be at least 1");
        }
        if self.loss.alpha.len() != self.unet.classes {
            bail!(
                Config,
                "{} class weights for {} classes",
                self.loss.alpha.len(),
                self.unet.classes
            );
        }
        Ok(())
    }
}

/// U-Net with its optimizer; the same optimizer state carries into adaptation.
#[derive(Debug, Clone)]
pub struct SegModel<T> {
    pub unet: UNet2D<T>,
    pub opt: Adam<T>,
    pub step: u64,
}

impl<T: Real> SegModel<T> {
    pub fn new(unet_cfg: UNetConfig, adam: AdamConfig, seed: u64) -> Result<Self> {
        let unet = UNet2D::new(unet_cfg, seed)?;
        let opt = Adam::new(adam, &unet.params);
        Ok(SegModel { unet, opt, step: 0 })
    }

    /// One supervised update; returns the pre-update loss.
    pub fn supervised_step(
        &mut self,
        x: &Tensor<T>,
        labels: &[u8],
        loss: &SegLossConfig,
        lr: f64,
    ) -> Result<T> {
        let mut tape = Tape::new();
        let b = self.unet.params.bind(&mut tape, true);
        let xv = tape.constant(x.clone());
        let out = self.unet.forward(&mut tape, &b, xv, NormMode::Train)?;
        let l = tape.seg_loss(out.probs, labels, &loss.weights())?;
        let value = tape.value(l).item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                what: "supervised loss".into(),
                step: self.step,
            });
        }
        let mut grads = tape.backward(l)?;
        let g = b.gradients(&mut grads);
        self.opt.step(&mut self.unet.params, &g, lr);
        self.unet.update_running_stats(&tape, &out);
        self.step += 1;
        Ok(value)
    }

    pub fn to_checkpoint(&self, phase: Phase, seed: u64, config_hash: &str) -> Checkpoint {
        let mut ck = Checkpoint::new(phase, self.step, seed, config_hash);
        self.unet.params.export("unet/", &mut ck.blobs);
        self.opt
            .export("adam/unet/", &self.unet.params, &mut ck.blobs);
        ck
    }

    pub fn from_checkpoint(
        unet_cfg: UNetConfig,
        adam: AdamConfig,
        ck: &Checkpoint,
    ) -> Result<Self> {
        if ck.phase == Phase::Translation {
            bail!(
                Checkpoint,
                "a translation checkpoint holds no segmentation network"
            );
        }
        let mut m = SegModel::new(unet_cfg, adam, ck.seed)?;
        m.unet.params.import("unet/", &ck.blobs)?;
        m.opt.import("adam/unet/", &m.unet.params, &ck.blobs)?;
        m.step = ck.step;
        Ok(m)
    }
}

/// Trains a fresh U-Net; `on_snapshot` sees the model every `checkpoint_every` steps.
pub fn train_supervised_with<T: Real>(
    samples: &[SliceSample],
    cfg: &SupervisedConfig,
    seed: u64,
    on_snapshot: &mut dyn FnMut(&SegModel<T>) -> Result<()>,
) -> Result<(SegModel<T>, LossHistory)> {
    cfg.validate()?;
    if samples.is_empty() {
        bail!(Validation, "no training slices");
    }
    if let Some(s) = samples.iter().find(|s| s.mask().is_none()) {
        bail!(
            Validation,
            "slice {} of {} has no mask",
            s.slice_index,
            s.volume_id
        );
    }
    let mut model = SegModel::new(cfg.unet, cfg.adam, sub_seed(seed, 20))?;
    let mut history = LossHistory::new();
    let batches = SliceBatches::new(samples.len(), cfg.batch_size, Some(sub_seed(seed, 21)))?;
    for epoch in 0..cfg.epochs as u64 {
        for idx in batches.epoch(epoch) {
            let refs = pick(samples, &idx);
            let x = batch_images::<T>(&refs)?;
            let y = batch_masks(&refs)?;
            let step = model.step;
            let l = model.supervised_step(&x, &y, &cfg.loss, cfg.adam.lr)?;
            history.push(step, "seg", l.as_f64())?;
            if cfg.checkpoint_every > 0 && model.step % cfg.checkpoint_every == 0 {
                on_snapshot(&model)?;
            }
        }
    }
    Ok((model, history))
}

pub fn train_supervised<T: Real>(
    samples: &[SliceSample],
    cfg: &SupervisedConfig,
    seed: u64,
) -> Result<(SegModel<T>, LossHistory)> {
    train_supervised_with(samples, cfg, seed, &mut |_| Ok(()))
}

/// Per-pixel argmax; ties go to the lower class index.
pub fn argmax_classes<T: Real>(probs: &Tensor<T>, n: usize) -> Vec<u8> {
    let s = probs.shape();
    let mut out = vec![0u8; s.plane()];
    let mut best: Vec<T> = probs.plane(n, 0).to_vec();
    for c in 1..s.c() {
        for (i, &v) in probs.plane(n, c).iter().enumerate() {
            if v > best[i] {
                best[i] = v;
                out[i] = c as u8;
            }
        }
    }
    out
}

/// Predicted label maps of a slice list, batched in order.
pub fn predict_slices<T: Real>(
    unet: &UNet2D<T>,
    samples: &[SliceSample],
    batch_size: usize,
) -> Result<Vec<Vec<u8>>> {
    Ok(predict_slice_probs(unet, samples, batch_size)?
        .iter()
        .map(|p| argmax_classes(p, 0))
        .collect())
}

/// Per-slice `1×C×H×W` probabilities.
pub fn predict_slice_probs<T: Real>(
    unet: &UNet2D<T>,
    samples: &[SliceSample],
    batch_size: usize,
) -> Result<Vec<Tensor<T>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&SliceSample> = chunk.iter().collect();
        let p = unet.apply(&batch_images::<T>(&refs)?)?;
        for i in 0..chunk.len() {
            out.push(p.batch_item(i));
        }
    }
    Ok(out)
}

/// Class probabilities of a volume, stored class-major in voxel order.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub shape: [usize; 3],
    pub classes: usize,
    pub data: Vec<f64>,
}

impl ProbMap {
    pub fn class(&self, c: usize) -> &[f64] {
        let n: usize = self.shape.iter().product();
        &self.data[c * n..(c + 1) * n]
    }
}

/// One forward pass per axial slice, then argmax.
pub fn predict_volume<T: Real>(unet: &UNet2D<T>, v: &Volume) -> Result<(LabelVolume, ProbMap)> {
    let [nx, ny, nz] = v.shape();
    let c = unet.config.classes;
    let n = nx * ny * nz;
    let mut labels = Vec::with_capacity(n);
    let mut probs = vec![0.0; c * n];
    for z in 0..nz {
        let x = Tensor::from_vec(
            Shape::new(1, 1, ny, nx),
            v.axial(z).iter().map(|&p| T::of(p)).collect(),
        )?;
        let p = unet.apply(&x)?;
        labels.extend(argmax_classes(&p, 0));
        for k in 0..c {
            let dst = &mut probs[k * n + z * nx * ny..k * n + (z + 1) * nx * ny];
            for (d, &s) in dst.iter_mut().zip(p.plane(0, k)) {
                *d = s.as_f64();
            }
        }
    }
    let lv = LabelVolume::new(v.shape(), v.spacing(), c as u8, labels)?;
    Ok((
        lv,
        ProbMap {
            shape: v.shape(),
            classes: c,
            data: probs,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_go_low() {
        let p = Tensor::from_vec(
            Shape::new(1, 3, 1, 3),
            vec![
                0.2,
                0.4,
                1.0 / 3.0,
                0.5,
                0.4,
                1.0 / 3.0,
                0.3,
                0.2,
                1.0 / 3.0,
            ],
        )
        .unwrap();
        assert_eq!(argmax_classes(&p, 0), vec![1, 0, 0]);
    }

    #[test]
    fn seg_loss_rejects_non_simplex() {
        let p = Tensor::from_vec(Shape::new(1, 3, 1, 1), vec![0.5, 0.5, 0.5]).unwrap();
        assert!(seg_loss(&p, &[0], &SegLossConfig::default()).is_err());
    }

    #[test]
    fn unlabeled_training_slice_is_rejected() {
        let s = SliceSample::new(
            vec![0.0; 16],
            4,
            4,
            None,
            crate::volume::Domain::MappedSource,
            "v",
            0,
        )
        .unwrap();
        let mut cfg = SupervisedConfig {
            epochs: 1,
            ..SupervisedConfig::default()
        };
        cfg.unet.levels = 2;
        assert!(train_supervised::<f64>(&[s], &cfg, 0).is_err());
    }
}
