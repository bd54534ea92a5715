//! Synthetic two-modality head phantoms.
//!
//! Each volume is an ellipsoidal head with two labelled ellipsoids inside it:
//! class 1 (tumour) and class 2 (cochlea). Domains share the anatomy sampler and
//! differ only in how regions map to intensities.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{bail, Result};
use crate::volume::{Dims, LabelVolume, Spacing, Triple, Volume};

pub const CLASSES: u8 = 3;

/// Per-axis ranges for one labelled ellipsoid. Centres are fractions of the
/// grid extent (`0` = first voxel, `1` = last); radii are in voxels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructureRange {
    pub center_lo: Triple,
    pub center_hi: Triple,
    pub radius_lo: Triple,
    pub radius_hi: Triple,
}

/// Region intensities `[air, tissue, tumour, cochlea]` and acquisition effects.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Appearance {
    pub means: [f64; 4],
    /// Reverses the intensity ordering: `m ↦ min + max − m`.
    pub invert: bool,
    pub noise_std: f64,
    /// Amplitude of the smooth multiplicative bias field.
    pub bias_amplitude: f64,
}

impl Appearance {
    /// Noise-free intensity of region `k` (0 air, 1 tissue, 2 tumour, 3 cochlea).
    pub fn intensity(&self, k: usize) -> f64 {
        if !self.invert {
            return self.means[k];
        }
        let lo = self.means.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        lo + hi - self.means[k]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub volumes_per_domain: usize,
    pub shape: Dims,
    pub spacing: Triple,
    /// Head semi-axes as fractions of the half extent; values above 1 leave the head cut by the grid.
    pub head_radius: Triple,
    pub tumor: StructureRange,
    pub cochlea: StructureRange,
    pub source: Appearance,
    pub target: Appearance,
    pub seed: u64,
}

impl PhantomSpec {
    /// 64×64×16 phantoms with an inverted-contrast target domain.
    pub fn desk(seed: u64) -> Self {
        let means = [0.0, 0.35, 1.0, 0.7];
        PhantomSpec {
            volumes_per_domain: 8,
            shape: [64, 64, 16],
            spacing: [1.0, 1.0, 3.0],
            head_radius: [0.85, 0.9, 1.6],
            tumor: StructureRange {
                center_lo: [0.30, 0.42, 0.42],
                center_hi: [0.38, 0.58, 0.58],
                radius_lo: [5.0, 5.0, 2.5],
                radius_hi: [7.0, 7.0, 3.5],
            },
            cochlea: StructureRange {
                center_lo: [0.64, 0.45, 0.42],
                center_hi: [0.70, 0.55, 0.58],
                radius_lo: [2.5, 2.5, 1.2],
                radius_hi: [3.2, 3.2, 1.8],
            },
            source: Appearance {
                means,
                invert: false,
                noise_std: 0.04,
                bias_amplitude: 0.05,
            },
            target: Appearance {
                means,
                invert: true,
                noise_std: 0.08,
                bias_amplitude: 0.15,
            },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.volumes_per_domain == 0 {
            bail!(Validation, "phantom needs at least one volume per domain");
        }
        if self.shape.iter().any(|&n| n < 2) {
            bail!(Validation, "phantom grid {:?} is too small", self.shape);
        }
        Spacing::new(self.spacing)?;
        if self.head_radius.iter().any(|&r| !(r > 0.0)) {
            bail!(Validation, "head radii must be positive");
        }
        for app in [&self.source, &self.target] {
            if !(app.noise_std >= 0.0) || !(app.bias_amplitude >= 0.0 && app.bias_amplitude < 1.0) {
                bail!(
                    Validation,
                    "noise must be non-negative and bias amplitude in [0, 1)"
                );
            }
            if app.means.iter().any(|m| !m.is_finite()) {
                bail!(Validation, "region means must be finite");
            }
        }
        for (name, s) in [("tumour", &self.tumor), ("cochlea", &self.cochlea)] {
            for a in 0..3 {
                let last = (self.shape[a] - 1) as f64;
                let (c0, c1) = (s.center_lo[a] * last, s.center_hi[a] * last);
                let (r0, r1) = (s.radius_lo[a], s.radius_hi[a]);
                if !(r0 > 0.0 && r0 <= r1 && s.center_lo[a] <= s.center_hi[a]) {
                    bail!(
                        Validation,
                        "{name} ranges on axis {a} are empty or non-positive"
                    );
                }
                if c0 - r1 < 0.0 || c1 + r1 > last {
                    bail!(
                        Validation,
                        "{name} does not fit inside the grid on axis {a}"
                    );
                }
            }
        }
        Ok(())
    }
}

/// Labels that exist only for scoring; training code never receives this type.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationOnly<T>(T);

impl<T> EvaluationOnly<T> {
    pub fn reveal(&self) -> &T {
        &self.0
    }
    pub fn into_inner(self) -> T {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomDataset {
    pub source: Vec<(String, Volume, LabelVolume)>,
    pub target: Vec<(String, Volume)>,
    pub target_truth: EvaluationOnly<Vec<LabelVolume>>,
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: Triple,
    radius: Triple,
}

impl Ellipsoid {
    fn contains(&self, p: Triple) -> bool {
        (0..3)
            .map(|a| {
                let d = (p[a] - self.center[a]) / self.radius[a];
                d * d
            })
            .sum::<f64>()
            <= 1.0
    }
}

/// Latin-hypercube draws: one value per volume and axis, stratified over the range.
fn stratified(rng: &mut ChaCha8Rng, n: usize, lo: Triple, hi: Triple) -> Vec<Triple> {
    let mut out = alloc::vec![[0.0; 3]; n];
    for a in 0..3 {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(rng);
        for (i, &s) in strata.iter().enumerate() {
            let u: f64 = rng.random();
            out[i][a] = lo[a] + (hi[a] - lo[a]) * (s as f64 + u) / n as f64;
        }
    }
    out
}

fn domain_volumes(
    spec: &PhantomSpec,
    stream: u64,
    app: &Appearance,
) -> Result<Vec<(Volume, LabelVolume)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let n = spec.volumes_per_domain;
    let last: Triple = core::array::from_fn(|a| (spec.shape[a] - 1) as f64);
    let scale = |f: Triple| -> Triple { core::array::from_fn(|a| f[a] * last[a]) };
    let t_centers = stratified(
        &mut rng,
        n,
        scale(spec.tumor.center_lo),
        scale(spec.tumor.center_hi),
    );
    let t_radii = stratified(&mut rng, n, spec.tumor.radius_lo, spec.tumor.radius_hi);
    let c_centers = stratified(
        &mut rng,
        n,
        scale(spec.cochlea.center_lo),
        scale(spec.cochlea.center_hi),
    );
    let c_radii = stratified(&mut rng, n, spec.cochlea.radius_lo, spec.cochlea.radius_hi);
    let head = Ellipsoid {
        center: core::array::from_fn(|a| last[a] / 2.0),
        radius: core::array::from_fn(|a| spec.head_radius[a] * (spec.shape[a] as f64) / 2.0),
    };
    let noise = Normal::new(0.0, app.noise_std.max(f64::MIN_POSITIVE)).expect("finite std");
    let [nx, ny, nz] = spec.shape;
    let spacing = Spacing::new(spec.spacing)?;
    let mut out = Vec::with_capacity(n);
    for v in 0..n {
        let tumor = Ellipsoid {
            center: t_centers[v],
            radius: t_radii[v],
        };
        let cochlea = Ellipsoid {
            center: c_centers[v],
            radius: c_radii[v],
        };
        let phase: [f64; 3] =
            core::array::from_fn(|_| rng.random::<f64>() * core::f64::consts::TAU);
        let mut data = Vec::with_capacity(nx * ny * nz);
        let mut labels = Vec::with_capacity(nx * ny * nz);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let p = [x as f64, y as f64, z as f64];
                    let (region, label) = if cochlea.contains(p) {
                        (3, 2)
                    } else if tumor.contains(p) {
                        (2, 1)
                    } else if head.contains(p) {
                        (1, 0)
                    } else {
                        (0, 0)
                    };
                    let bias = 1.0
                        + app.bias_amplitude
                            * libm::sin(core::f64::consts::TAU * p[0] / nx as f64 + phase[0])
                            * libm::cos(core::f64::consts::TAU * p[1] / ny as f64 + phase[1]);
                    let eps = if app.noise_std > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    data.push(app.intensity(region) * bias + eps);
                    labels.push(label);
                }
            }
        }
        out.push((
            Volume::new(spec.shape, spacing, data)?,
            LabelVolume::new(spec.shape, spacing, CLASSES, labels)?,
        ));
    }
    Ok(out)
}

/// Deterministic source/target phantom collections for `spec.seed`.
pub fn make_phantom_dataset(spec: &PhantomSpec) -> Result<PhantomDataset> {
    spec.validate()?;
    let source = domain_volumes(spec, 1, &spec.source)?
        .into_iter()
        .enumerate()
        .map(|(i, (v, l))| (format!("source_{i:03}"), v, l))
        .collect();
    let mut target = Vec::new();
    let mut truth = Vec::new();
    for (i, (v, l)) in domain_volumes(spec, 2, &spec.target)?
        .into_iter()
        .enumerate()
    {
        target.push((format!("target_{i:03}"), v));
        truth.push(l);
    }
    Ok(PhantomDataset {
        source,
        target,
        target_truth: EvaluationOnly(truth),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> PhantomSpec {
        let mut s = PhantomSpec::desk(seed);
        s.volumes_per_domain = 2;
        s
    }

    #[test]
    fn deterministic() {
        assert_eq!(
            make_phantom_dataset(&small(4)).unwrap(),
            make_phantom_dataset(&small(4)).unwrap()
        );
        assert_ne!(
            make_phantom_dataset(&small(4)).unwrap(),
            make_phantom_dataset(&small(5)).unwrap()
        );
    }

    #[test]
    fn noiseless_regions_take_configured_means() {
        let mut s = small(1);
        for app in [&mut s.source, &mut s.target] {
            app.noise_std = 0.0;
            app.bias_amplitude = 0.0;
        }
        let ds = make_phantom_dataset(&s).unwrap();
        for (_, v, l) in &ds.source {
            for (&x, &c) in v.data().iter().zip(l.data()) {
                if c > 0 {
                    assert_eq!(x, s.source.intensity(c as usize + 1));
                }
            }
        }
        for ((_, v), l) in ds.target.iter().zip(ds.target_truth.reveal()) {
            for (&x, &c) in v.data().iter().zip(l.data()) {
                if c > 0 {
                    assert_eq!(x, s.target.intensity(c as usize + 1));
                }
            }
        }
    }

    #[test]
    fn structures_must_fit() {
        let mut s = small(0);
        s.tumor.radius_hi = [40.0, 7.0, 3.5];
        assert!(make_phantom_dataset(&s).is_err());
        let mut s = small(0);
        s.cochlea.center_hi[2] = 1.0;
        assert!(make_phantom_dataset(&s).is_err());
    }

    #[test]
    fn every_class_is_present() {
        let ds = make_phantom_dataset(&small(9)).unwrap();
        for (_, _, l) in &ds.source {
            for c in 0..CLASSES {
                assert!(l.data().contains(&c), "class {c} missing");
            }
        }
    }
}
