//! The eight stages, handing off through files under the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cmada_core::adaptation::train_adaptation;
use cmada_core::checkpoint::{Checkpoint, Phase};
use cmada_core::metrics::evaluate;
use cmada_core::nets::{UNet2D, UNetConfig};
use cmada_core::phantom::{make_phantom_dataset, CLASSES};
use cmada_core::segmentation::{
    dice_term, predict_slice_probs, predict_slices, predict_volume, train_supervised, SegModel,
};
use cmada_core::selection::{area_ratio, select_checkpoint, source_area_stats, CandidateScore};
use cmada_core::translation::{train_translation, translate_dataset, TranslationState};
use cmada_core::volume::{
    extract_slices, preprocess, preprocess_labels, Domain, LabelVolume, SliceSample, Volume,
};

use crate::artifacts::{fresh_dir, read_stamp, require_stamp, write_stamp, DirLock, Layout, Stamp};
use crate::config::{ablation_variant, Plan, RunConfig, SegTraining, Stage, Variant};
use crate::error::{format_err, io_err, Error, Result};
use crate::io::{load_labels, load_volume, DatasetManifest, SourceEntry, TargetEntry};
use crate::raw::{self, Provenance, RawDtype};
use crate::tables;

/// Network precision of every training stage.
type P = f32;

const PREDICT_BATCH: usize = 8;

pub const METHOD_CMADA: &str = "C-MADA";
pub const METHOD_CMADA_SEG: &str = "C-MADA[seg]";
pub const METHOD_S1_RESIDUAL: &str = "S1+residualU-Net";
pub const METHOD_S1: &str = "S1+U-Net";
pub const METHOD_SOURCE_ONLY: &str = "SourceOnly+U-Net";

/// Report row order.
pub const METHOD_ORDER: [&str; 5] = [
    METHOD_CMADA,
    METHOD_CMADA_SEG,
    METHOD_S1_RESIDUAL,
    METHOD_S1,
    METHOD_SOURCE_ONLY,
];

#[derive(Debug, Clone)]
pub struct Context {
    pub cfg: RunConfig,
    pub hash: String,
    pub layout: Layout,
    pub plan: Plan,
    /// Accept predecessor artifacts stamped with a different config hash.
    pub allow_mismatch: bool,
}

impl Context {
    pub fn new(cfg: RunConfig, variant: Variant, allow_mismatch: bool) -> Result<Self> {
        cfg.validate()?;
        Ok(Context {
            hash: cfg.hash(),
            layout: Layout::new(&cfg.out),
            plan: ablation_variant(variant),
            cfg,
            allow_mismatch,
        })
    }

    pub fn variant(&self) -> Variant {
        self.plan.variant
    }

    fn stamp(&self, stage: Stage, variant: bool) -> Stamp {
        Stamp {
            stage: stage.name().into(),
            config_hash: self.hash.clone(),
            seed: self.cfg.seed,
            variant: variant.then(|| self.variant().name().to_string()),
        }
    }

    fn require(&self, dir: &Path, stage: Stage) -> Result<Stamp> {
        require_stamp(dir, stage, &self.hash, self.allow_mismatch)
    }

    fn prov<'a>(&'a self, stage: Stage) -> Provenance<'a> {
        Provenance {
            stage: Some(stage.name()),
            config_hash: Some(&self.hash),
        }
    }
}

/// Runs one stage under the output-directory lock; returns a one-line summary.
pub fn run_stage(ctx: &Context, stage: Stage) -> Result<String> {
    if !ctx.plan.includes(stage) {
        return Err(Error::NotInPlan {
            stage: stage.name().into(),
            variant: ctx.variant().name().into(),
        });
    }
    let _lock = DirLock::acquire(&ctx.layout)?;
    match stage {
        Stage::Synth => synth(ctx),
        Stage::Preprocess => preprocess_stage(ctx),
        Stage::Translate => translate(ctx),
        Stage::TrainSeg => train_seg(ctx),
        Stage::Adapt => adapt(ctx),
        Stage::Select => select(ctx),
        Stage::Evaluate => evaluate_stage(ctx),
        Stage::Report => report(ctx),
    }
}

/// Output directory of a stage every variant shares.
fn shared_dir(ctx: &Context, stage: Stage) -> Option<PathBuf> {
    match stage {
        Stage::Synth => Some(ctx.layout.data()),
        Stage::Preprocess => Some(ctx.layout.prep()),
        Stage::Translate => Some(ctx.layout.translation()),
        _ => None,
    }
}

/// Every stage of the variant's plan, in order, passing each summary to `log`.
/// Shared stages already finished under the current config are not repeated.
pub fn run_plan(ctx: &Context, log: &mut dyn FnMut(&str)) -> Result<()> {
    for &stage in &ctx.plan.stages {
        if let Some(dir) = shared_dir(ctx, stage) {
            if read_stamp(&dir)?
                .is_some_and(|s| s.stage == stage.name() && s.config_hash == ctx.hash)
            {
                log(&format!("{}: up to date", stage.name()));
                continue;
            }
        }
        log(&run_stage(ctx, stage)?);
    }
    Ok(())
}

/// All four variants followed by one report over them.
pub fn run_ablation(
    cfg: &RunConfig,
    allow_mismatch: bool,
    log: &mut dyn FnMut(&str),
) -> Result<()> {
    for v in Variant::ALL {
        let mut ctx = Context::new(cfg.clone(), v, allow_mismatch)?;
        ctx.plan.stages.retain(|&s| s != Stage::Report);
        run_plan(&ctx, log)?;
    }
    let ctx = Context::new(cfg.clone(), Variant::Full, allow_mismatch)?;
    log(&run_stage(&ctx, Stage::Report)?);
    Ok(())
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(io_err(p))
}

fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, ck.to_bytes()).map_err(io_err(path))
}

fn load_checkpoint(path: &Path, stage: Stage, ctx: &Context) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            stage: stage.name().into(),
            path: path.to_path_buf(),
        });
    }
    let bytes = fs::read(path).map_err(io_err(path))?;
    let ck = Checkpoint::from_bytes(&bytes).map_err(|e| format_err(path, e.to_string()))?;
    if ck.config_hash != ctx.hash && !ctx.allow_mismatch {
        return Err(Error::HashMismatch {
            path: path.to_path_buf(),
            found: ck.config_hash,
            expected: ctx.hash.clone(),
        });
    }
    Ok(ck)
}

fn load_unet(path: &Path, cfg: UNetConfig, stage: Stage, ctx: &Context) -> Result<UNet2D<P>> {
    let ck = load_checkpoint(path, stage, ctx)?;
    let mut unet = UNet2D::new(cfg, ck.seed)?;
    unet.params
        .import("unet/", &ck.blobs)
        .map_err(|e| format_err(path, e.to_string()))?;
    Ok(unet)
}

// ------------------------------------------------------------------ synth

fn synth(ctx: &Context) -> Result<String> {
    let dir = ctx.layout.data();
    fresh_dir(&dir)?;
    let prov = ctx.prov(Stage::Synth);
    let manifest = if let Some(path) = &ctx.cfg.dataset.manifest {
        let (m, base) = DatasetManifest::load(path)?;
        let abs = |p: &Path| base.join(p);
        for e in &m.source {
            let v = load_volume(&abs(&e.image))?;
            let l = load_labels(&abs(&e.label), CLASSES)?;
            if !l.matches(&v) {
                return Err(format_err(
                    &abs(&e.label),
                    "labels do not match their image grid",
                ));
            }
        }
        for e in &m.target {
            load_volume(&abs(&e.image))?;
        }
        DatasetManifest {
            source: m
                .source
                .iter()
                .map(|e| SourceEntry {
                    id: e.id.clone(),
                    image: abs(&e.image),
                    label: abs(&e.label),
                })
                .collect(),
            target: m
                .target
                .iter()
                .map(|e| TargetEntry {
                    id: e.id.clone(),
                    image: abs(&e.image),
                    label: e.label.as_deref().map(abs),
                })
                .collect(),
        }
    } else {
        let ds = make_phantom_dataset(&ctx.cfg.phantom_spec())?;
        for sub in ["source", "target", "truth"] {
            mkdir(&dir.join(sub))?;
        }
        let mut m = DatasetManifest::default();
        for (id, v, l) in &ds.source {
            let image = PathBuf::from(format!("source/{id}.hdr"));
            let label = PathBuf::from(format!("source/{id}_seg.hdr"));
            raw::write_volume(&dir.join(&image), v, RawDtype::F64, prov)?;
            raw::write_labels(&dir.join(&label), l, prov)?;
            m.source.push(SourceEntry {
                id: id.clone(),
                image,
                label,
            });
        }
        for ((id, v), l) in ds.target.iter().zip(ds.target_truth.reveal()) {
            let image = PathBuf::from(format!("target/{id}.hdr"));
            let label = PathBuf::from(format!("truth/{id}_seg.hdr"));
            raw::write_volume(&dir.join(&image), v, RawDtype::F64, prov)?;
            raw::write_labels(&dir.join(&label), l, prov)?;
            m.target.push(TargetEntry {
                id: id.clone(),
                image,
                label: Some(label),
            });
        }
        m
    };
    manifest.save(&ctx.layout.dataset_manifest())?;
    write_stamp(&dir, &ctx.stamp(Stage::Synth, false))?;
    Ok(format!(
        "synth: {} source and {} target volumes in {}",
        manifest.source.len(),
        manifest.target.len(),
        dir.display()
    ))
}

// ------------------------------------------------------------- preprocess

/// What `preprocess` produced; later stages read the splits from here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepMeta {
    pub spacing: [f64; 3],
    pub shape: [usize; 3],
    pub clip: bool,
    pub classes: u8,
    /// Source volumes used for training.
    pub train: Vec<String>,
    /// Source volumes held out for selection.
    pub holdout: Vec<String>,
    pub target: Vec<String>,
    /// Target volumes with reference labels.
    pub truth: Vec<String>,
}

impl PrepMeta {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        toml::from_str(&text).map_err(|e| format_err(path, e.to_string()))
    }
}

/// Held-out count: the fraction of `n`, rounded up, leaving at least one for training.
pub fn holdout_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).ceil() as usize).min(n.saturating_sub(1))
}

fn preprocess_stage(ctx: &Context) -> Result<String> {
    ctx.require(&ctx.layout.data(), Stage::Synth)?;
    let (m, base) = DatasetManifest::load(&ctx.layout.dataset_manifest())?;
    if m.source.len() < 2 {
        return Err(Error::Config(
            "need at least two source volumes (one is held out for selection)".into(),
        ));
    }
    let pcfg = ctx.cfg.preprocess_config()?;
    let dir = ctx.layout.prep();
    fresh_dir(&dir)?;
    for sub in ["source", "target", "truth"] {
        mkdir(&dir.join(sub))?;
    }
    let prov = ctx.prov(Stage::Preprocess);
    for e in &m.source {
        let v = load_volume(&base.join(&e.image))?;
        let l = load_labels(&base.join(&e.label), CLASSES)?;
        if !l.matches(&v) {
            return Err(format_err(
                &base.join(&e.label),
                "labels do not match their image grid",
            ));
        }
        let pv = preprocess(&v, &pcfg)?;
        let pl = preprocess_labels(&l, &pcfg)?;
        raw::write_volume(
            &dir.join(format!("source/{}.hdr", e.id)),
            &pv,
            RawDtype::F32,
            prov,
        )?;
        raw::write_labels(&dir.join(format!("source/{}_seg.hdr", e.id)), &pl, prov)?;
    }
    let mut truth = Vec::new();
    for e in &m.target {
        let v = load_volume(&base.join(&e.image))?;
        raw::write_volume(
            &dir.join(format!("target/{}.hdr", e.id)),
            &preprocess(&v, &pcfg)?,
            RawDtype::F32,
            prov,
        )?;
        if let Some(lp) = &e.label {
            let l = load_labels(&base.join(lp), CLASSES)?;
            raw::write_labels(
                &dir.join(format!("truth/{}_seg.hdr", e.id)),
                &preprocess_labels(&l, &pcfg)?,
                prov,
            )?;
            truth.push(e.id.clone());
        }
    }
    let ids: Vec<String> = m.source.iter().map(|e| e.id.clone()).collect();
    let split = ids.len() - holdout_count(ids.len(), ctx.cfg.selection.holdout_fraction);
    let meta = PrepMeta {
        spacing: pcfg.spacing.0,
        shape: pcfg.shape,
        clip: pcfg.clip,
        classes: CLASSES,
        train: ids[..split].to_vec(),
        holdout: ids[split..].to_vec(),
        target: m.target.iter().map(|e| e.id.clone()).collect(),
        truth,
    };
    let p = ctx.layout.prep_meta();
    fs::write(
        &p,
        toml::to_string(&meta).map_err(|e| format_err(&p, e.to_string()))?,
    )
    .map_err(io_err(&p))?;
    write_stamp(&dir, &ctx.stamp(Stage::Preprocess, false))?;
    Ok(format!(
        "preprocess: {} source ({} held out) and {} target volumes at {:?} mm, {:?} voxels",
        ids.len(),
        meta.holdout.len(),
        meta.target.len(),
        meta.spacing,
        meta.shape
    ))
}

fn prep_meta(ctx: &Context) -> Result<PrepMeta> {
    ctx.require(&ctx.layout.prep(), Stage::Preprocess)?;
    PrepMeta::load(&ctx.layout.prep_meta())
}

fn prep_labels(ctx: &Context, id: &str) -> Result<LabelVolume> {
    Ok(raw::read_labels(&ctx.layout.prep().join(format!("source/{id}_seg.hdr")))?.0)
}

/// Source slices of `ids` from the preprocessed images, or from the mapped ones.
fn source_slices(ctx: &Context, ids: &[String], mapped: bool) -> Result<Vec<SliceSample>> {
    let mut out = Vec::new();
    for id in ids {
        let (v, domain) = if mapped {
            let p = ctx.layout.translation().join(format!("mapped/{id}.hdr"));
            (raw::read_volume(&p)?.0, Domain::MappedSource)
        } else {
            let p = ctx.layout.prep().join(format!("source/{id}.hdr"));
            (raw::read_volume(&p)?.0, Domain::Source)
        };
        out.extend(extract_slices(
            &v,
            Some(&prep_labels(ctx, id)?),
            domain,
            id,
        )?);
    }
    Ok(out)
}

fn target_volumes(ctx: &Context, meta: &PrepMeta) -> Result<Vec<Volume>> {
    meta.target
        .iter()
        .map(|id| Ok(raw::read_volume(&ctx.layout.prep().join(format!("target/{id}.hdr")))?.0))
        .collect()
}

fn target_slices(ctx: &Context, meta: &PrepMeta) -> Result<Vec<SliceSample>> {
    let mut out = Vec::new();
    for (id, v) in meta.target.iter().zip(target_volumes(ctx, meta)?) {
        out.extend(extract_slices(&v, None, Domain::Target, id)?);
    }
    Ok(out)
}

// -------------------------------------------------------------- translate

fn translate(ctx: &Context) -> Result<String> {
    let meta = prep_meta(ctx)?;
    let src = source_slices(ctx, &meta.train, false)?;
    let tgt = target_slices(ctx, &meta)?;
    let tcfg = ctx.cfg.translation_config();
    let dir = ctx.layout.translation();
    fresh_dir(&dir)?;
    mkdir(&dir.join("mapped"))?;
    let (state, history) = train_translation::<P>(&src, &tgt, &tcfg, ctx.cfg.seed)?;
    save_checkpoint(
        &dir.join("translation.ckpt"),
        &state.to_checkpoint(ctx.cfg.seed, &ctx.hash),
    )?;
    tables::write_history(
        &dir.join("history.tsv"),
        &history,
        Stage::Translate.name(),
        &ctx.hash,
    )?;
    map_sources(ctx, &meta, &state)?;
    write_stamp(&dir, &ctx.stamp(Stage::Translate, false))?;
    Ok(format!(
        "translate: {} steps, cycle loss {:.4} -> {:.4}",
        state.step,
        history.first("cycle").unwrap_or(f64::NAN),
        history.last("cycle").unwrap_or(f64::NAN)
    ))
}

/// Writes every source volume (training and held-out) in target appearance.
fn map_sources(ctx: &Context, meta: &PrepMeta, state: &TranslationState<P>) -> Result<()> {
    let prov = ctx.prov(Stage::Translate);
    for id in meta.train.iter().chain(&meta.holdout) {
        let v = raw::read_volume(&ctx.layout.prep().join(format!("source/{id}.hdr")))?.0;
        let slices = extract_slices(&v, None, Domain::Source, id)?;
        let mapped = translate_dataset(&state.nets.g_s, &slices, ctx.cfg.translation.batch_size)?;
        let data: Vec<f64> = mapped
            .iter()
            .flat_map(|s| s.image.iter().copied())
            .collect();
        let mv = Volume::new(v.shape(), v.spacing(), data)?;
        raw::write_volume(
            &ctx.layout.translation().join(format!("mapped/{id}.hdr")),
            &mv,
            RawDtype::F32,
            prov,
        )?;
    }
    Ok(())
}

// -------------------------------------------------------------- train-seg

fn seg_dir(ctx: &Context, which: SegTraining) -> PathBuf {
    match which {
        SegTraining::SharedS1 => ctx.layout.seg(),
        SegTraining::ResidualS1 => ctx.layout.variant_seg(Variant::S1Only, true),
        SegTraining::SourceOnly => ctx.layout.variant_seg(Variant::NoAdapt, false),
    }
}

fn up_to_date(ctx: &Context, dir: &Path, stage: Stage, file: &str) -> Result<bool> {
    Ok(
        read_stamp(dir)?.is_some_and(|s| s.stage == stage.name() && s.config_hash == ctx.hash)
            && dir.join(file).exists(),
    )
}

fn train_seg(ctx: &Context) -> Result<String> {
    let meta = prep_meta(ctx)?;
    let mut lines = Vec::new();
    for &which in &ctx.plan.seg {
        let dir = seg_dir(ctx, which);
        // the shared network is reused by every translating variant
        if which == SegTraining::SharedS1 && up_to_date(ctx, &dir, Stage::TrainSeg, "unet.ckpt")? {
            lines.push(format!("{}: up to date", dir.display()));
            continue;
        }
        let (mapped, residual) = match which {
            SegTraining::SharedS1 => (true, false),
            SegTraining::ResidualS1 => (true, true),
            SegTraining::SourceOnly => (false, false),
        };
        if mapped {
            ctx.require(&ctx.layout.translation(), Stage::Translate)?;
        }
        let samples = source_slices(ctx, &meta.train, mapped)?;
        let scfg = ctx.cfg.supervised_config(residual);
        let (model, history) = train_supervised::<P>(&samples, &scfg, ctx.cfg.seed)?;
        fresh_dir(&dir)?;
        save_checkpoint(
            &dir.join("unet.ckpt"),
            &model.to_checkpoint(Phase::Supervised, ctx.cfg.seed, &ctx.hash),
        )?;
        tables::write_history(
            &dir.join("history.tsv"),
            &history,
            Stage::TrainSeg.name(),
            &ctx.hash,
        )?;
        write_stamp(
            &dir,
            &ctx.stamp(Stage::TrainSeg, which != SegTraining::SharedS1),
        )?;
        lines.push(format!(
            "{}: {} steps, loss {:.4} -> {:.4}",
            dir.display(),
            model.step,
            history.first("seg").unwrap_or(f64::NAN),
            history.last("seg").unwrap_or(f64::NAN)
        ));
    }
    Ok(format!("train-seg: {}", lines.join("; ")))
}

// ------------------------------------------------------------------ adapt

fn candidate_name(step: u64) -> String {
    format!("cand_{step:06}")
}

fn adapt(ctx: &Context) -> Result<String> {
    let channels = ctx
        .plan
        .channels
        .expect("adapt is planned only with a discriminator input");
    let meta = prep_meta(ctx)?;
    ctx.require(&ctx.layout.seg(), Stage::TrainSeg)?;
    let scfg = ctx.cfg.supervised_config(false);
    let ck = load_checkpoint(&ctx.layout.seg().join("unet.ckpt"), Stage::TrainSeg, ctx)?;
    let start = SegModel::<P>::from_checkpoint(scfg.unet, scfg.adam, &ck)?;
    let mapped = source_slices(ctx, &meta.train, true)?;
    let tgt = target_slices(ctx, &meta)?;
    let out = train_adaptation(
        start,
        &mapped,
        &tgt,
        &ctx.cfg.adapt_config(channels),
        ctx.cfg.seed,
    )?;
    let dir = ctx.layout.adapt(ctx.variant());
    fresh_dir(&dir)?;
    for c in &out.candidates {
        let mut ck = Checkpoint::new(Phase::Adaptation, c.step, ctx.cfg.seed, &ctx.hash);
        c.unet.params.export("unet/", &mut ck.blobs);
        save_checkpoint(&dir.join(format!("{}.ckpt", candidate_name(c.step))), &ck)?;
    }
    save_checkpoint(
        &dir.join("final.ckpt"),
        &out.model
            .to_checkpoint(Phase::Adaptation, ctx.cfg.seed, &ctx.hash),
    )?;
    tables::write_history(
        &dir.join("history.tsv"),
        &out.history,
        Stage::Adapt.name(),
        &ctx.hash,
    )?;
    write_stamp(&dir, &ctx.stamp(Stage::Adapt, true))?;
    Ok(format!(
        "adapt ({}): {} discriminator channels, {} candidates",
        ctx.variant().name(),
        channels.count(CLASSES as usize),
        out.candidates.len()
    ))
}

// ----------------------------------------------------------------- select

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Selected {
    pub checkpoint: String,
    pub step: u64,
    pub validation_loss: f64,
}

/// Candidate checkpoints of an adaptation directory, in step order.
fn candidates(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(io_err(dir))? {
        let p = e.map_err(io_err(dir))?.path();
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        if stem.starts_with("cand_") && p.extension().is_some_and(|x| x == "ckpt") {
            out.push((stem.to_string(), p.clone()));
        }
    }
    out.sort();
    Ok(out)
}

/// Per-foreground-class dice losses of `unet` on labelled slices, pooled over all of them.
pub fn source_dice_losses(
    unet: &UNet2D<P>,
    slices: &[SliceSample],
    eps_smooth: f64,
) -> Result<Vec<f64>> {
    let probs = predict_slice_probs(unet, slices, PREDICT_BATCH)?;
    let mut out = Vec::new();
    for c in 1..unet.config.classes {
        let mut p = Vec::new();
        let mut y = Vec::new();
        for (pr, s) in probs.iter().zip(slices) {
            p.extend(pr.plane(0, c).iter().map(|&v| v as f64));
            let mask = s.mask().expect("source slices carry masks");
            y.extend(
                mask.iter()
                    .map(|&l| if l as usize == c { 1.0 } else { 0.0 }),
            );
        }
        out.push(dice_term(&p, &y, eps_smooth)?);
    }
    Ok(out)
}

fn select(ctx: &Context) -> Result<String> {
    let meta = prep_meta(ctx)?;
    let adir = ctx.layout.adapt(ctx.variant());
    ctx.require(&adir, Stage::Adapt)?;
    let mut masks = Vec::new();
    for id in meta.train.iter().chain(&meta.holdout) {
        masks.push(prep_labels(ctx, id)?);
    }
    let slices: Vec<&[u8]> = masks
        .iter()
        .flat_map(|l| (0..l.shape()[2]).map(move |z| l.axial(z)))
        .collect();
    let stats = source_area_stats(&slices, CLASSES)?;
    let holdout = source_slices(ctx, &meta.holdout, true)?;
    let tgt = target_slices(ctx, &meta)?;
    let ucfg = ctx.cfg.unet_config(false);
    let mut scores = Vec::new();
    for (name, path) in candidates(&adir)? {
        let ck = load_checkpoint(&path, Stage::Adapt, ctx)?;
        let mut unet = UNet2D::<P>::new(ucfg, ck.seed)?;
        unet.params
            .import("unet/", &ck.blobs)
            .map_err(|e| format_err(&path, e.to_string()))?;
        let preds = predict_slices(&unet, &tgt, PREDICT_BATCH)?;
        let refs: Vec<&[u8]> = preds.iter().map(Vec::as_slice).collect();
        let ratios = area_ratio(&refs, &stats, &ctx.cfg.selection.excluded_classes)?;
        let losses = source_dice_losses(&unet, &holdout, ctx.cfg.supervised.eps_smooth)?;
        scores.push(CandidateScore::new(&name, ck.step, ratios, losses)?);
    }
    if scores.is_empty() {
        return Err(Error::MissingArtifact {
            stage: Stage::Adapt.name().into(),
            path: adir.join("cand_*.ckpt"),
        });
    }
    let best = select_checkpoint(&scores)?.clone();
    let dir = ctx.layout.select(ctx.variant());
    fresh_dir(&dir)?;
    tables::write_scores(
        &dir.join("scores.tsv"),
        &scores,
        Stage::Select.name(),
        &ctx.hash,
    )?;
    let sel = Selected {
        checkpoint: best.id.clone(),
        step: best.step,
        validation_loss: best.loss,
    };
    let p = dir.join("selected.toml");
    fs::write(
        &p,
        toml::to_string(&sel).map_err(|e| format_err(&p, e.to_string()))?,
    )
    .map_err(io_err(&p))?;
    write_stamp(&dir, &ctx.stamp(Stage::Select, true))?;
    Ok(format!(
        "select ({}): {} of {} candidates, validation loss {:.4}",
        ctx.variant().name(),
        best.id,
        scores.len(),
        best.loss
    ))
}

// --------------------------------------------------------------- evaluate

/// `(method, checkpoint, residual)` rows a variant contributes.
fn methods(ctx: &Context) -> Result<Vec<(&'static str, PathBuf, bool)>> {
    let v = ctx.variant();
    Ok(match v {
        Variant::Full | Variant::SegOnlyDisc => {
            let dir = ctx.layout.select(v);
            ctx.require(&dir, Stage::Select)?;
            let p = dir.join("selected.toml");
            let text = fs::read_to_string(&p).map_err(io_err(&p))?;
            let sel: Selected = toml::from_str(&text).map_err(|e| format_err(&p, e.to_string()))?;
            let name = if v == Variant::Full {
                METHOD_CMADA
            } else {
                METHOD_CMADA_SEG
            };
            vec![(
                name,
                ctx.layout.adapt(v).join(format!("{}.ckpt", sel.checkpoint)),
                false,
            )]
        }
        Variant::S1Only => {
            ctx.require(&ctx.layout.seg(), Stage::TrainSeg)?;
            let rdir = ctx.layout.variant_seg(v, true);
            ctx.require(&rdir, Stage::TrainSeg)?;
            vec![
                (METHOD_S1_RESIDUAL, rdir.join("unet.ckpt"), true),
                (METHOD_S1, ctx.layout.seg().join("unet.ckpt"), false),
            ]
        }
        Variant::NoAdapt => {
            let dir = ctx.layout.variant_seg(v, false);
            ctx.require(&dir, Stage::TrainSeg)?;
            vec![(METHOD_SOURCE_ONLY, dir.join("unet.ckpt"), false)]
        }
    })
}

fn evaluate_stage(ctx: &Context) -> Result<String> {
    let meta = prep_meta(ctx)?;
    let rows = methods(ctx)?;
    if meta.truth.len() != meta.target.len() {
        return Err(Error::Config(format!(
            "evaluation needs reference labels for all {} target volumes, found {}",
            meta.target.len(),
            meta.truth.len()
        )));
    }
    let truths: Vec<LabelVolume> = meta
        .truth
        .iter()
        .map(|id| Ok(raw::read_labels(&ctx.layout.prep().join(format!("truth/{id}_seg.hdr")))?.0))
        .collect::<Result<_>>()?;
    let vols = target_volumes(ctx, &meta)?;
    let dir = ctx.layout.eval(ctx.variant());
    fresh_dir(&dir)?;
    let prov = ctx.prov(Stage::Evaluate);
    let mut lines = Vec::new();
    for (method, ckpt, residual) in rows {
        let unet = load_unet(&ckpt, ctx.cfg.unet_config(residual), Stage::TrainSeg, ctx)?;
        let slug = slug(method);
        let pdir = dir.join(format!("pred_{slug}"));
        mkdir(&pdir)?;
        let mut preds = Vec::new();
        for (id, v) in meta.target.iter().zip(&vols) {
            let (l, _) = predict_volume(&unet, v)?;
            raw::write_labels(&pdir.join(format!("{id}_seg.hdr")), &l, prov)?;
            preds.push(l);
        }
        let report = evaluate(method, &preds, &truths)?;
        tables::write_eval(
            &dir.join(format!("{slug}.tsv")),
            &meta.target,
            &report,
            ctx.variant().name(),
            &ctx.hash,
        )?;
        lines.push(format!(
            "{method} mean Dice {:.4}",
            report.mean_foreground_dice()
        ));
    }
    write_stamp(&dir, &ctx.stamp(Stage::Evaluate, true))?;
    Ok(format!(
        "evaluate ({}): {}",
        ctx.variant().name(),
        lines.join("; ")
    ))
}

fn slug(method: &str) -> String {
    method
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect()
}

// ----------------------------------------------------------------- report

/// Evaluation tables of every variant that has been evaluated, in report row order.
pub fn collect_evaluations(ctx: &Context) -> Result<Vec<tables::EvalTable>> {
    let mut found = Vec::new();
    for v in Variant::ALL {
        let dir = ctx.layout.eval(v);
        if read_stamp(&dir)?.is_none() {
            continue;
        }
        ctx.require(&dir, Stage::Evaluate)?;
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .map(|e| e.map(|e| e.path()).map_err(io_err(&dir)))
            .collect::<Result<_>>()?;
        files.retain(|p| p.extension().is_some_and(|x| x == "tsv"));
        files.sort();
        for p in files {
            found.push((p.clone(), tables::read_eval(&p)?));
        }
    }
    if found.is_empty() {
        return Err(Error::MissingArtifact {
            stage: Stage::Evaluate.name().into(),
            path: ctx.layout.root.join("variants/*/eval"),
        });
    }
    let first_hash = found[0].1.config_hash.clone();
    for (p, t) in &found {
        if t.config_hash != first_hash {
            return Err(format_err(
                p,
                format!(
                    "evaluated under config {} but other results use {first_hash}; refusing to mix them",
                    t.config_hash
                ),
            ));
        }
        if t.config_hash != ctx.hash && !ctx.allow_mismatch {
            return Err(Error::HashMismatch {
                path: p.clone(),
                found: t.config_hash.clone(),
                expected: ctx.hash.clone(),
            });
        }
    }
    let mut tables: Vec<tables::EvalTable> = found.into_iter().map(|(_, t)| t).collect();
    tables.sort_by_key(|t| {
        METHOD_ORDER
            .iter()
            .position(|m| *m == t.method)
            .unwrap_or(METHOD_ORDER.len())
    });
    Ok(tables)
}

fn report(ctx: &Context) -> Result<String> {
    let tables = collect_evaluations(ctx)?;
    let hash = &tables[0].config_hash;
    let text = tables::render_report(&tables, hash);
    let p = ctx.layout.report_text();
    fs::write(&p, &text).map_err(io_err(&p))?;
    let p = ctx.layout.report_table();
    fs::write(&p, tables::render_report_tsv(&tables, hash)).map_err(io_err(&p))?;
    Ok(text)
}
