mod common;

use cmada_core::adaptation::{
    adapt_steps_per_epoch, adversarial_loss_from_logits, train_adaptation, AdaptConfig,
    DiscChannels,
};
use cmada_core::autodiff::{Tape, Var};
use cmada_core::checkpoint::{Checkpoint, Phase};
use cmada_core::gradcheck::relative_error;
use cmada_core::nets::{
    DiscriminatorConfig, GeneratorConfig, NormMode, PatchDiscriminator, ResNetGenerator, UNet2D,
    UNetConfig,
};
use cmada_core::optim::Adam;
use cmada_core::params::{Bound, Params};
use cmada_core::segmentation::{predict_volume, train_supervised, SegModel, SupervisedConfig};
use cmada_core::translation::{
    discriminator_step, generator_objective, train_translation, translate_dataset,
    translation_objective, CycleGan, GanMode, TranslationConfig, TranslationState,
};
use cmada_core::volume::{batch_images, Domain, SliceSample};
use cmada_core::{Real, Shape, Tensor};
use rand::Rng;

fn unet_cfg(levels: usize, width: usize) -> UNetConfig {
    UNetConfig {
        in_channels: 1,
        classes: 3,
        levels,
        base_width: width,
        residual: false,
    }
}

fn tiny_translation(epochs: usize, lambda: f64) -> TranslationConfig {
    TranslationConfig {
        lambda,
        epochs,
        batch_size: 2,
        decay: false,
        generator: GeneratorConfig {
            base_width: 2,
            residual_blocks: 1,
        },
        discriminator_width: 2,
        ..TranslationConfig::default()
    }
}

fn tiny_supervised(epochs: usize, batch: usize) -> SupervisedConfig {
    SupervisedConfig {
        epochs,
        batch_size: batch,
        unet: unet_cfg(2, 4),
        ..SupervisedConfig::default()
    }
}

/// `mean(probe ⊙ f(params))` and its gradients.
fn probe_loss<T: Real>(
    params: &Params<T>,
    input: &Tensor<T>,
    seed: u64,
    f: &dyn Fn(&mut Tape<T>, &Bound, Var) -> Var,
    track: bool,
) -> (f64, Vec<Option<Tensor<T>>>) {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, track);
    let x = tape.constant(input.clone());
    let out = f(&mut tape, &b, x);
    let probe = common::uniform(tape.shape(out), seed, -1.0, 1.0).cast::<T>();
    let pv = tape.constant(probe);
    let weighted = tape.mul(out, pv).unwrap();
    let l = tape.mean(weighted);
    let value = tape.value(l).item().as_f64();
    if !track {
        return (value, Vec::new());
    }
    let mut g = tape.backward(l).unwrap();
    (value, b.gradients(&mut g))
}

/// Worst relative error over ten random trainable coordinates between `T`
/// gradients and 64-bit central differences (step 1e-5) at the same parameter values.
fn probe_gradient<T: Real>(
    params: &Params<T>,
    input: &Tensor<T>,
    seed: u64,
    f: &dyn Fn(&mut Tape<T>, &Bound, Var) -> Var,
    reference: &mut Params<f64>,
    f64_forward: &dyn Fn(&mut Tape<f64>, &Bound, Var) -> Var,
) -> f64 {
    for i in 0..params.len() {
        *reference.value_mut(i) = params.value(i).cast();
    }
    let input64 = input.cast::<f64>();
    let (_, grads) = probe_loss(params, input, seed, f, true);
    let trainable: Vec<usize> = (0..params.len())
        .filter(|&i| params.entries()[i].trainable)
        .collect();
    let mut rng = common::rng(seed ^ 0x5eed);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let e = trainable[rng.random_range(0..trainable.len())];
        let k = rng.random_range(0..params.value(e).len());
        let analytic = grads[e].as_ref().map_or(0.0, |t| t.data()[k].as_f64());
        let h = 1e-5;
        let x0 = reference.value(e).data()[k];
        let mut eval = |v: f64| {
            reference.value_mut(e).data_mut()[k] = v;
            probe_loss(reference, &input64, seed, f64_forward, false).0
        };
        let numeric = (eval(x0 + h) - eval(x0 - h)) / (2.0 * h);
        eval(x0);
        worst = worst.max(relative_error(analytic, numeric));
    }
    worst
}

struct Nets<T> {
    g: ResNetGenerator<T>,
    d: PatchDiscriminator<T>,
    u: UNet2D<T>,
}

fn nets<T: Real>() -> Nets<T> {
    Nets {
        g: ResNetGenerator::new(
            GeneratorConfig {
                base_width: 2,
                residual_blocks: 1,
            },
            4,
        )
        .unwrap(),
        d: PatchDiscriminator::new(
            DiscriminatorConfig {
                in_channels: 1,
                base_width: 4,
            },
            5,
        )
        .unwrap(),
        u: UNet2D::new(unet_cfg(2, 4), 6).unwrap(),
    }
}

fn network_gradients<T: Real>() -> [f64; 3] {
    let x = common::uniform(Shape::new(2, 1, 16, 16), 3, -1.0, 1.0).cast::<T>();
    let n = nets::<T>();
    let mut r = nets::<f64>();
    let rg = r.g.clone();
    let rd = r.d.clone();
    let ru = r.u.clone();
    [
        probe_gradient(
            &n.g.params,
            &x,
            10,
            &|t, b, v| n.g.forward(t, b, v).unwrap(),
            &mut r.g.params,
            &|t, b, v| rg.forward(t, b, v).unwrap(),
        ),
        probe_gradient(
            &n.d.params,
            &x,
            11,
            &|t, b, v| n.d.forward(t, b, v).unwrap(),
            &mut r.d.params,
            &|t, b, v| rd.forward(t, b, v).unwrap(),
        ),
        probe_gradient(
            &n.u.params,
            &x,
            12,
            &|t, b, v| n.u.forward(t, b, v, NormMode::Train).unwrap().probs,
            &mut r.u.params,
            &|t, b, v| ru.forward(t, b, v, NormMode::Train).unwrap().probs,
        ),
    ]
}

#[test]
fn network_gradients_match_finite_differences_f64() {
    let worst = network_gradients::<f64>();
    eprintln!("f64 worst relative error (generator, discriminator, unet): {worst:?}");
    assert!(worst.iter().all(|&e| e < 1e-5), "{worst:?}");
}

// A 1e-3 step straddles activation kinks in these small nets even at 64 bits,
// so the 32-bit gradients are checked against the 64-bit reference.
#[test]
fn network_gradients_match_finite_differences_f32() {
    let worst = network_gradients::<f32>();
    eprintln!("f32 worst relative error (generator, discriminator, unet): {worst:?}");
    assert!(worst.iter().all(|&e| e < 1e-2), "{worst:?}");
}

#[test]
fn shape_contracts_for_common_sizes() {
    let g = ResNetGenerator::<f32>::new(
        GeneratorConfig {
            base_width: 2,
            residual_blocks: 1,
        },
        1,
    )
    .unwrap();
    let d = PatchDiscriminator::<f32>::new(
        DiscriminatorConfig {
            in_channels: 1,
            base_width: 2,
        },
        2,
    )
    .unwrap();
    let u = UNet2D::<f32>::new(unet_cfg(4, 2), 3).unwrap();
    for h in [32, 64, 128] {
        for w in [32, 64, 128] {
            let x = common::uniform(Shape::new(1, 1, h, w), 7, -1.0, 1.0).cast::<f32>();
            let y = g.apply(&x).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert!(y.data().iter().all(|v| v.abs() < 1.0));
            assert_eq!(d.apply(&x).unwrap().shape(), Shape::new(1, 1, h / 8, w / 8));
            let p = u.apply(&x).unwrap();
            assert_eq!(p.shape(), Shape::new(1, 3, h, w));
        }
    }
    let bad = Tensor::<f32>::zeros(Shape::new(1, 1, 36, 32));
    assert!(u.apply(&bad).is_err());
}

#[test]
fn checkpoint_round_trip_reproduces_forward_bit_exactly() {
    let slices = common::labelled_slices(&common::small_phantom(2, 1));
    let (model, _) = train_supervised::<f32>(&slices, &tiny_supervised(1, 4), 3).unwrap();
    let x = batch_images::<f32>(&slices.iter().take(4).collect::<Vec<_>>()).unwrap();
    let before = model.unet.apply(&x).unwrap();
    let bytes = model.to_checkpoint(Phase::Supervised, 3, "h").to_bytes();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    let cfg = tiny_supervised(1, 4);
    let back = SegModel::<f32>::from_checkpoint(cfg.unet, cfg.adam, &ck).unwrap();
    assert_eq!(back.step, model.step);
    assert_eq!(back.unet.apply(&x).unwrap().data(), before.data());

    let tcfg = tiny_translation(1, 10.0);
    let state = TranslationState::<f32>::new(&tcfg, 4).unwrap();
    let ck = Checkpoint::from_bytes(&state.to_checkpoint(4, "h").to_bytes()).unwrap();
    let back = TranslationState::<f32>::from_checkpoint(&tcfg, &ck).unwrap();
    assert_eq!(
        back.nets.g_s.apply(&x).unwrap().data(),
        state.nets.g_s.apply(&x).unwrap().data()
    );
}

#[test]
fn translation_step_count_and_determinism() {
    let spec = common::small_phantom(1, 2);
    let source = common::labelled_slices(&spec);
    let target = common::target_slices(&spec);
    assert_eq!(source.len(), 4);
    let cfg = tiny_translation(1, 10.0);
    let (a, ha) = train_translation::<f32>(&source, &target, &cfg, 9).unwrap();
    assert_eq!(a.step, 4u64.div_ceil(cfg.batch_size as u64));
    let (_, hb) = train_translation::<f32>(&source, &target, &cfg, 9).unwrap();
    assert_eq!(ha, hb);

    let mapped = translate_dataset(&a.nets.g_s, &source, 3).unwrap();
    assert_eq!(mapped.len(), source.len());
    for (m, s) in mapped.iter().zip(&source) {
        assert_eq!(m.mask(), s.mask());
        assert_eq!(m.domain, Domain::MappedSource);
        assert!(m.image.iter().all(|v| v.abs() < 1.0));
    }
}

fn mean_cycle(nets: &CycleGan<f32>, x: &Tensor<f32>, cfg: &TranslationConfig) -> f64 {
    translation_objective(nets, x, x, cfg).unwrap().cycle as f64
}

#[test]
fn cycle_loss_falls_and_weight_matters() {
    let slices = common::labelled_slices(&common::small_phantom(2, 5));
    let x = batch_images::<f32>(&slices.iter().collect::<Vec<_>>()).unwrap();
    // identical domains, 8 slices at batch 2: 50 epochs are 200 steps
    let cfg = tiny_translation(50, 10.0);
    let (state, h) = train_translation::<f32>(&slices, &slices, &cfg, 13).unwrap();
    assert_eq!(state.step, 200);
    let series: Vec<f64> = h.series("cycle").iter().map(|p| p.1).collect();
    let head = series[..10].iter().sum::<f64>() / 10.0;
    let tail = series[series.len() - 10..].iter().sum::<f64>() / 10.0;
    eprintln!("cycle loss first 10 steps {head:.4}, last 10 steps {tail:.4}");
    assert!(tail < head);

    let strong = tiny_translation(50, 1e4);
    let none = tiny_translation(50, 0.0);
    let (s, _) = train_translation::<f32>(&slices, &slices, &strong, 13).unwrap();
    let (n, _) = train_translation::<f32>(&slices, &slices, &none, 13).unwrap();
    let (cs, cn) = (mean_cycle(&s.nets, &x, &cfg), mean_cycle(&n.nets, &x, &cfg));
    eprintln!("cycle error with weight 1e4 {cs:.4}, without {cn:.4}");
    assert!(cs < cn);
}

#[test]
fn player_updates_touch_only_their_own_parameters() {
    let cfg = tiny_translation(1, 10.0);
    let mut nets = CycleGan::<f64>::new(&cfg, 17).unwrap();
    let s = Shape::new(2, 1, 16, 16);
    let xs = common::uniform(s, 1, -1.0, 1.0);
    let xt = common::uniform(s, 2, -1.0, 1.0);
    let before = nets.clone();
    let fake = nets.g_s.apply(&xs).unwrap();
    let mut opt = Adam::new(cfg.adam, &nets.d_s.params);
    discriminator_step(&mut nets.d_s, &mut opt, &xt, &fake, cfg.eps, 1e-2).unwrap();
    assert_ne!(nets.d_s.params, before.d_s.params);
    assert_eq!(nets.g_s.params, before.g_s.params);
    assert_eq!(nets.g_t.params, before.g_t.params);
    assert_eq!(nets.d_t.params, before.d_t.params);

    let before = nets.clone();
    let (_, gs, gt) = generator_objective(&nets, &xs, &xt, &cfg).unwrap();
    Adam::new(cfg.adam, &nets.g_s.params).step(&mut nets.g_s.params, &gs, 1e-2);
    Adam::new(cfg.adam, &nets.g_t.params).step(&mut nets.g_t.params, &gt, 1e-2);
    assert_ne!(nets.g_s.params, before.g_s.params);
    assert_eq!(nets.d_s.params, before.d_s.params);
    assert_eq!(nets.d_t.params, before.d_t.params);
}

#[test]
fn supervised_training_contracts() {
    let slices = common::labelled_slices(&common::small_phantom(2, 6));
    let eight = &slices[..8];
    let (m, h) = train_supervised::<f32>(eight, &tiny_supervised(1, 4), 1).unwrap();
    assert_eq!(m.step, 2);
    let (_, h2) = train_supervised::<f32>(eight, &tiny_supervised(1, 4), 1).unwrap();
    assert_eq!(h, h2);

    let mut unlabeled = slices[..2].to_vec();
    unlabeled.push(
        SliceSample::new(vec![0.0; 256], 16, 16, None, Domain::MappedSource, "x", 0).unwrap(),
    );
    assert!(train_supervised::<f32>(&unlabeled, &tiny_supervised(1, 2), 1).is_err());
}

#[test]
fn supervised_loss_halves_in_300_steps() {
    let slices = common::labelled_slices(&common::small_phantom(3, 7));
    let ten = &slices[..10];
    // 10 slices at batch 2 for 60 epochs
    let cfg = SupervisedConfig {
        unet: unet_cfg(2, 8),
        ..tiny_supervised(60, 2)
    };
    let (m, h) = train_supervised::<f32>(ten, &cfg, 7).unwrap();
    assert_eq!(m.step, 300);
    let series: Vec<f64> = h.series("seg").iter().map(|p| p.1).collect();
    let first = series[0];
    let last_epoch = series[series.len() - 5..].iter().sum::<f64>() / 5.0;
    eprintln!("seg loss {first:.4} -> {last_epoch:.4}");
    assert!(last_epoch < 0.5 * first);
}

#[test]
fn volume_prediction_contracts() {
    let spec = common::small_phantom(1, 9);
    let ds = cmada_core::phantom::make_phantom_dataset(&spec).unwrap();
    let (_, v) = &ds.target[0];
    let mut u = UNet2D::<f32>::new(unet_cfg(2, 4), 1).unwrap();
    let (labels, probs) = predict_volume(&u, v).unwrap();
    assert_eq!(labels.shape(), v.shape());
    assert_eq!(labels.spacing(), v.spacing());
    assert_eq!(probs.shape, v.shape());
    u.params.zero_trainable();
    let (labels, probs) = predict_volume(&u, v).unwrap();
    assert!(labels.data().iter().all(|&l| l == 0));
    assert!(probs.class(1).iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-6));
}

fn adapt_cfg(epochs: usize, snapshot: u64, supervised: bool) -> AdaptConfig {
    AdaptConfig {
        epochs,
        batch_size: 2,
        snapshot_every: snapshot,
        supervised_step: supervised,
        discriminator_width: 2,
        ..AdaptConfig::default()
    }
}

#[test]
fn adaptation_contracts() {
    let spec = common::small_phantom(2, 10);
    let source = common::labelled_slices(&spec);
    let target = common::target_slices(&spec);
    let (start, _) = train_supervised::<f32>(&source, &tiny_supervised(2, 4), 2).unwrap();
    let total = adapt_steps_per_epoch(source.len(), target.len(), 2) as u64 * 2;

    let out = train_adaptation(
        start.clone(),
        &source,
        &target,
        &adapt_cfg(2, total, true),
        5,
    )
    .unwrap();
    assert_eq!(out.candidates.len(), 1);
    assert_eq!(out.candidates[0].step, total);
    assert_eq!(out.model.step, start.step + total);

    let every =
        train_adaptation(start.clone(), &source, &target, &adapt_cfg(2, 2, true), 5).unwrap();
    assert_eq!(every.candidates.len() as u64, total / 2);
    for c in &every.candidates {
        let ck = SegModel {
            unet: c.unet.clone(),
            opt: start.opt.clone(),
            step: c.step,
        }
        .to_checkpoint(Phase::Adaptation, 5, "h");
        let cfg = tiny_supervised(1, 1);
        let back = SegModel::<f32>::from_checkpoint(
            cfg.unet,
            cfg.adam,
            &Checkpoint::from_bytes(&ck.to_bytes()).unwrap(),
        )
        .unwrap();
        let (labels, probs) = predict_volume(
            &back.unet,
            &cmada_core::phantom::make_phantom_dataset(&spec)
                .unwrap()
                .target[0]
                .1,
        )
        .unwrap();
        assert!(probs.data.iter().all(|p| p.is_finite()));
        assert_eq!(labels.shape(), spec.shape);
    }

    let off = train_adaptation(
        start.clone(),
        &source,
        &target,
        &adapt_cfg(2, total, false),
        5,
    )
    .unwrap();
    assert!(off.history.series("supervised").is_empty());
    assert_eq!(off.model.step, start.step);
    assert!(!out.history.series("supervised").is_empty());

    // labelled slices can never stand in for the target set
    assert!(train_adaptation(start.clone(), &source, &source, &adapt_cfg(1, 1, true), 5).is_err());
    assert!(
        SliceSample::new(vec![0.0; 4], 2, 2, Some(vec![0; 4]), Domain::Target, "t", 0).is_err()
    );
}

#[test]
fn adversarial_loss_gradient_reaches_logits() {
    let d = PatchDiscriminator::<f64>::new(
        DiscriminatorConfig {
            in_channels: 9,
            base_width: 2,
        },
        21,
    )
    .unwrap();
    // 8×8 is the smallest grid the patch discriminator accepts
    let image = common::uniform(Shape::new(1, 1, 8, 8), 22, -1.0, 1.0);
    for seed in 0..5u64 {
        let logits = common::uniform(Shape::new(1, 3, 8, 8), 30 + seed, -2.0, 2.0);
        let f = |l: &Tensor<f64>| {
            adversarial_loss_from_logits(
                l,
                &image,
                &d,
                DiscChannels::Full,
                GanMode::NonSaturating,
                1e-7,
            )
            .unwrap()
            .0
        };
        let (_, grad) = adversarial_loss_from_logits(
            &logits,
            &image,
            &d,
            DiscChannels::Full,
            GanMode::NonSaturating,
            1e-7,
        )
        .unwrap();
        let mut worst: f64 = 0.0;
        for k in 0..logits.len() {
            if grad.data()[k].abs() < 1e-6 {
                continue;
            }
            let h = 1e-6;
            let mut p = logits.clone();
            p.data_mut()[k] += h;
            let up = f(&p);
            p.data_mut()[k] -= 2.0 * h;
            let down = f(&p);
            worst = worst.max(relative_error(grad.data()[k], (up - down) / (2.0 * h)));
        }
        assert!(worst < 1e-4, "seed {seed}: {worst}");
    }
}
