#![allow(dead_code)]

use cmada_core::phantom::{PhantomSpec, StructureRange};
use cmada_core::volume::{slice_dataset, Domain, SliceSample};
use cmada_core::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: Shape, seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut r = rng(seed);
    let data = (0..shape.numel()).map(|_| r.random_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Softmax over channels of random logits.
pub fn random_probs(shape: Shape, seed: u64) -> Tensor<f64> {
    let logits = uniform(shape, seed, -2.0, 2.0);
    let mut out = logits.clone();
    for n in 0..shape.n() {
        for i in 0..shape.plane() {
            let m = (0..shape.c())
                .map(|c| logits.plane(n, c)[i])
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..shape.c())
                .map(|c| (logits.plane(n, c)[i] - m).exp())
                .sum();
            for c in 0..shape.c() {
                out.plane_mut(n, c)[i] = (logits.plane(n, c)[i] - m).exp() / z;
            }
        }
    }
    out
}

pub fn random_labels(n: usize, classes: u8, seed: u64) -> Vec<u8> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(0..classes)).collect()
}

/// 16×16×4 phantoms with structures scaled to fit.
pub fn small_phantom(volumes: usize, seed: u64) -> PhantomSpec {
    let mut spec = PhantomSpec::desk(seed);
    spec.volumes_per_domain = volumes;
    spec.shape = [16, 16, 4];
    spec.spacing = [4.0, 4.0, 12.0];
    spec.tumor = StructureRange {
        center_lo: [0.35, 0.45, 0.4],
        center_hi: [0.40, 0.55, 0.6],
        radius_lo: [2.0, 2.0, 1.0],
        radius_hi: [2.5, 2.5, 1.2],
    };
    spec.cochlea = StructureRange {
        center_lo: [0.65, 0.45, 0.4],
        center_hi: [0.70, 0.55, 0.6],
        radius_lo: [1.2, 1.2, 0.8],
        radius_hi: [1.5, 1.5, 1.0],
    };
    spec
}

/// Labelled source slices of a phantom collection, tagged as mapped source.
pub fn labelled_slices(spec: &PhantomSpec) -> Vec<SliceSample> {
    let ds = cmada_core::phantom::make_phantom_dataset(spec).unwrap();
    let vols: Vec<_> = ds
        .source
        .into_iter()
        .map(|(id, v, l)| (id, v, Some(l)))
        .collect();
    slice_dataset(&vols, Domain::MappedSource).unwrap()
}

pub fn target_slices(spec: &PhantomSpec) -> Vec<SliceSample> {
    let ds = cmada_core::phantom::make_phantom_dataset(spec).unwrap();
    let vols: Vec<_> = ds.target.into_iter().map(|(id, v)| (id, v, None)).collect();
    slice_dataset(&vols, Domain::Target).unwrap()
}
