//! Declarative run configuration, presets, variants, and the config hash.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cmada_core::adaptation::{AdaptConfig, DiscChannels};
use cmada_core::nets::{GeneratorConfig, UNetConfig};
use cmada_core::optim::AdamConfig;
use cmada_core::phantom::{Appearance, PhantomSpec, StructureRange, CLASSES};
use cmada_core::segmentation::{SegLossConfig, SupervisedConfig};
use cmada_core::translation::{GanMode, TranslationConfig};
use cmada_core::volume::{PreprocessConfig, Spacing, Triple};

use crate::error::{format_err, io_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Crossmoda,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, clap::ValueEnum)]
pub enum Variant {
    #[value(name = "full")]
    Full,
    #[value(name = "seg_only_disc")]
    SegOnlyDisc,
    #[value(name = "s1_only")]
    S1Only,
    #[value(name = "no_adapt")]
    NoAdapt,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::SegOnlyDisc,
        Variant::S1Only,
        Variant::NoAdapt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::SegOnlyDisc => "seg_only_disc",
            Variant::S1Only => "s1_only",
            Variant::NoAdapt => "no_adapt",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Synth,
    Preprocess,
    Translate,
    TrainSeg,
    Adapt,
    Select,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Synth,
        Stage::Preprocess,
        Stage::Translate,
        Stage::TrainSeg,
        Stage::Adapt,
        Stage::Select,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Preprocess => "preprocess",
            Stage::Translate => "translate",
            Stage::TrainSeg => "train-seg",
            Stage::Adapt => "adapt",
            Stage::Select => "select",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanModeConfig {
    Saturating,
    NonSaturating,
}

impl From<GanModeConfig> for GanMode {
    fn from(m: GanModeConfig) -> Self {
        match m {
            GanModeConfig::Saturating => GanMode::Saturating,
            GanModeConfig::NonSaturating => GanMode::NonSaturating,
        }
    }
}

/// Ellipsoid ranges; centres are grid fractions, radii are in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureConfig {
    pub center_lo: Triple,
    pub center_hi: Triple,
    pub radius_lo_mm: Triple,
    pub radius_hi_mm: Triple,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppearanceConfig {
    /// `[air, tissue, tumour, cochlea]`.
    pub means: [f64; 4],
    pub invert: bool,
    pub noise_std: f64,
    pub bias_amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub volumes_per_domain: usize,
    pub shape: [usize; 3],
    pub spacing: Triple,
    pub head_radius: Triple,
    pub tumor: StructureConfig,
    pub cochlea: StructureConfig,
    pub source: AppearanceConfig,
    pub target: AppearanceConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub preset: Preset,
    /// Real volumes; when absent `synth` generates phantoms.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub phantom: PhantomConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessSection {
    pub spacing: Triple,
    pub shape: [usize; 3],
    pub clip: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslationSection {
    pub lambda: f64,
    pub mode: GanModeConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub decay: bool,
    pub eps: f64,
    pub generator_width: usize,
    pub generator_blocks: usize,
    pub discriminator_width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupervisedSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub alpha: Vec<f64>,
    pub beta: f64,
    pub eps_smooth: f64,
    pub eps_log: f64,
    pub unet_levels: usize,
    pub unet_width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub snapshot_every: u64,
    pub lr: f64,
    pub adversarial_weight: f64,
    pub eps: f64,
    pub mode: GanModeConfig,
    pub supervised_step: bool,
    pub discriminator_width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionSection {
    /// Share of source volumes (rounded up) held out for source dice losses.
    pub holdout_fraction: f64,
    /// Foreground classes left out of the area ratios.
    pub excluded_classes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub preprocess: PreprocessSection,
    pub translation: TranslationSection,
    pub supervised: SupervisedSection,
    pub adaptation: AdaptationSection,
    pub selection: SelectionSection,
}

const DESK_MEANS: [f64; 4] = [0.0, 0.35, 1.0, 0.7];

fn desk_phantom() -> PhantomConfig {
    PhantomConfig {
        volumes_per_domain: 8,
        shape: [70, 70, 18],
        spacing: [0.9, 0.9, 2.7],
        head_radius: [0.85, 0.9, 1.6],
        tumor: StructureConfig {
            center_lo: [0.30, 0.42, 0.42],
            center_hi: [0.38, 0.58, 0.58],
            radius_lo_mm: [5.0, 5.0, 7.5],
            radius_hi_mm: [7.0, 7.0, 10.5],
        },
        cochlea: StructureConfig {
            center_lo: [0.64, 0.45, 0.42],
            center_hi: [0.70, 0.55, 0.58],
            radius_lo_mm: [2.5, 2.5, 3.6],
            radius_hi_mm: [3.2, 3.2, 5.4],
        },
        source: AppearanceConfig {
            means: DESK_MEANS,
            invert: false,
            noise_std: 0.04,
            bias_amplitude: 0.05,
        },
        target: AppearanceConfig {
            means: DESK_MEANS,
            invert: true,
            noise_std: 0.08,
            bias_amplitude: 0.15,
        },
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let desk = RunConfig {
            seed: 7,
            out: PathBuf::from("runs/desk"),
            dataset: DatasetConfig {
                preset: Preset::Desk,
                manifest: None,
                phantom: desk_phantom(),
            },
            preprocess: PreprocessSection {
                spacing: [1.0, 1.0, 3.0],
                shape: [64, 64, 16],
                clip: true,
            },
            translation: TranslationSection {
                lambda: 10.0,
                mode: GanModeConfig::NonSaturating,
                epochs: 10,
                batch_size: 4,
                lr: 2e-4,
                beta1: 0.5,
                beta2: 0.999,
                decay: true,
                eps: 1e-7,
                generator_width: 8,
                generator_blocks: 6,
                discriminator_width: 16,
            },
            supervised: SupervisedSection {
                epochs: 60,
                batch_size: 4,
                lr: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                alpha: vec![0.1, 0.4, 0.5],
                beta: 0.65,
                eps_smooth: 1e-6,
                eps_log: 1e-7,
                unet_levels: 4,
                unet_width: 8,
            },
            adaptation: AdaptationSection {
                epochs: 4,
                batch_size: 4,
                snapshot_every: 24,
                lr: 1e-4,
                adversarial_weight: 0.1,
                eps: 1e-7,
                mode: GanModeConfig::NonSaturating,
                supervised_step: true,
                discriminator_width: 16,
            },
            selection: SelectionSection {
                holdout_fraction: 0.2,
                excluded_classes: Vec::new(),
            },
        };
        match p {
            Preset::Desk => desk,
            Preset::Crossmoda => {
                let mut c = desk;
                c.out = PathBuf::from("runs/crossmoda");
                c.dataset.preset = Preset::Crossmoda;
                // same physical field of view as the preprocessed grid
                c.dataset.phantom.shape = [112, 112, 30];
                c.dataset.phantom.spacing = [1.872, 1.872, 6.0];
                c.dataset.phantom.volumes_per_domain = 4;
                c.preprocess.spacing = [0.468, 0.468, 1.5];
                c.preprocess.shape = [448, 448, 120];
                c.translation.epochs = 40;
                c.translation.generator_width = 32;
                c.translation.generator_blocks = 9;
                c.translation.discriminator_width = 64;
                c.supervised.epochs = 500;
                c.supervised.unet_width = 32;
                c.supervised.unet_levels = 5;
                c.adaptation.epochs = 100;
                c.adaptation.snapshot_every = 500;
                c.adaptation.discriminator_width = 64;
                c
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| format_err(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 prefix over every field except the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess_config()?;
        self.translation_config().validate()?;
        self.supervised_config(false).validate()?;
        self.adapt_config(DiscChannels::Full).validate()?;
        if self.dataset.manifest.is_none() {
            self.phantom_spec().validate()?;
        }
        let unet = self.supervised_config(false).unet;
        for (a, n) in self.preprocess.shape.iter().take(2).enumerate() {
            if n % unet.divisor() != 0 {
                return Err(Error::Config(format!(
                    "preprocess shape axis {a} ({n}) must be a multiple of {}",
                    unet.divisor()
                )));
            }
        }
        let h = &self.selection.holdout_fraction;
        if !(*h > 0.0 && *h < 1.0) {
            return Err(Error::Config(format!(
                "holdout_fraction must lie in (0, 1), got {h}"
            )));
        }
        if let Some(c) = self
            .selection
            .excluded_classes
            .iter()
            .find(|&&c| c == 0 || c >= CLASSES)
        {
            return Err(Error::Config(format!(
                "excluded class {c} is not a foreground class"
            )));
        }
        Ok(())
    }

    pub fn preprocess_config(&self) -> Result<PreprocessConfig> {
        if self.preprocess.shape.contains(&0) {
            return Err(Error::Config(
                "preprocess shape components must be at least 1".into(),
            ));
        }
        Ok(PreprocessConfig {
            spacing: Spacing::new(self.preprocess.spacing)?,
            shape: self.preprocess.shape,
            clip: self.preprocess.clip,
        })
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        let p = &self.dataset.phantom;
        let structure = |s: &StructureConfig| StructureRange {
            center_lo: s.center_lo,
            center_hi: s.center_hi,
            radius_lo: std::array::from_fn(|a| s.radius_lo_mm[a] / p.spacing[a]),
            radius_hi: std::array::from_fn(|a| s.radius_hi_mm[a] / p.spacing[a]),
        };
        let appearance = |a: &AppearanceConfig| Appearance {
            means: a.means,
            invert: a.invert,
            noise_std: a.noise_std,
            bias_amplitude: a.bias_amplitude,
        };
        PhantomSpec {
            volumes_per_domain: p.volumes_per_domain,
            shape: p.shape,
            spacing: p.spacing,
            head_radius: p.head_radius,
            tumor: structure(&p.tumor),
            cochlea: structure(&p.cochlea),
            source: appearance(&p.source),
            target: appearance(&p.target),
            seed: self.seed,
        }
    }

    pub fn translation_config(&self) -> TranslationConfig {
        let t = &self.translation;
        TranslationConfig {
            lambda: t.lambda,
            mode: t.mode.into(),
            epochs: t.epochs,
            batch_size: t.batch_size,
            adam: AdamConfig::new(t.lr, t.beta1, t.beta2),
            decay: t.decay,
            eps: t.eps,
            generator: GeneratorConfig {
                base_width: t.generator_width,
                residual_blocks: t.generator_blocks,
            },
            discriminator_width: t.discriminator_width,
        }
    }

    pub fn seg_loss(&self) -> SegLossConfig {
        let s = &self.supervised;
        SegLossConfig {
            alpha: s.alpha.clone(),
            beta: s.beta,
            eps_smooth: s.eps_smooth,
            eps_log: s.eps_log,
        }
    }

    pub fn unet_config(&self, residual: bool) -> UNetConfig {
        UNetConfig {
            in_channels: 1,
            classes: CLASSES as usize,
            levels: self.supervised.unet_levels,
            base_width: self.supervised.unet_width,
            residual,
        }
    }

    pub fn supervised_config(&self, residual: bool) -> SupervisedConfig {
        let s = &self.supervised;
        SupervisedConfig {
            loss: self.seg_loss(),
            epochs: s.epochs,
            batch_size: s.batch_size,
            adam: AdamConfig::new(s.lr, s.beta1, s.beta2),
            unet: self.unet_config(residual),
            checkpoint_every: 0,
        }
    }

    pub fn adapt_config(&self, channels: DiscChannels) -> AdaptConfig {
        let a = &self.adaptation;
        AdaptConfig {
            epochs: a.epochs,
            batch_size: a.batch_size,
            snapshot_every: a.snapshot_every,
            lr: a.lr,
            adversarial_weight: a.adversarial_weight,
            eps: a.eps,
            mode: a.mode.into(),
            supervised_step: a.supervised_step,
            channels,
            discriminator_width: a.discriminator_width,
            loss: self.seg_loss(),
        }
    }
}

/// One segmentation network a variant trains in `train-seg`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegTraining {
    /// Plain U-Net on mapped source, shared by every variant that translates.
    SharedS1,
    /// Residual U-Net on mapped source.
    ResidualS1,
    /// Plain U-Net on unmapped source.
    SourceOnly,
}

/// Stages and settings a variant runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub variant: Variant,
    pub stages: Vec<Stage>,
    pub seg: Vec<SegTraining>,
    /// Discriminator input of the adaptation stage; `None` when it is skipped.
    pub channels: Option<DiscChannels>,
}

impl Plan {
    pub fn includes(&self, s: Stage) -> bool {
        self.stages.contains(&s)
    }

    pub fn disc_channel_count(&self) -> Option<usize> {
        self.channels.map(|c| c.count(CLASSES as usize))
    }
}

/// The stage plan of an ablation variant.
pub fn ablation_variant(variant: Variant) -> Plan {
    use Stage::*;
    let (stages, seg, channels) = match variant {
        Variant::Full => (
            Stage::ALL.to_vec(),
            vec![SegTraining::SharedS1],
            Some(DiscChannels::Full),
        ),
        Variant::SegOnlyDisc => (
            Stage::ALL.to_vec(),
            vec![SegTraining::SharedS1],
            Some(DiscChannels::SegOnly),
        ),
        Variant::S1Only => (
            vec![Synth, Preprocess, Translate, TrainSeg, Evaluate, Report],
            vec![SegTraining::SharedS1, SegTraining::ResidualS1],
            None,
        ),
        Variant::NoAdapt => (
            vec![Synth, Preprocess, TrainSeg, Evaluate, Report],
            vec![SegTraining::SourceOnly],
            None,
        ),
    };
    Plan {
        variant,
        stages,
        seg,
        channels,
    }
}
