#![allow(dead_code)]

use std::path::Path;

use cmada::{Preset, RunConfig};

/// A desk config shrunk until every stage finishes in about a second.
pub fn tiny(out: &Path) -> RunConfig {
    let mut c = RunConfig::preset(Preset::Desk);
    c.out = out.to_path_buf();
    let p = &mut c.dataset.phantom;
    p.volumes_per_domain = 3;
    p.shape = [24, 24, 6];
    p.spacing = [2.7, 2.7, 8.1];
    c.preprocess.spacing = [3.0, 3.0, 9.0];
    c.preprocess.shape = [16, 16, 4];
    c.translation.epochs = 1;
    c.translation.generator_width = 4;
    c.translation.generator_blocks = 1;
    c.translation.discriminator_width = 4;
    c.supervised.epochs = 2;
    c.supervised.unet_levels = 2;
    c.supervised.unet_width = 4;
    c.adaptation.epochs = 1;
    c.adaptation.snapshot_every = 2;
    c.adaptation.discriminator_width = 4;
    c.selection.holdout_fraction = 0.3;
    c
}
