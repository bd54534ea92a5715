mod common;

use cmada_core::metrics::{assd, dice_coefficient, evaluate, extract_surface};
use cmada_core::phantom::make_phantom_dataset;
use cmada_core::volume::{Dims, LabelVolume, Triple};
use proptest::prelude::*;
use rand::Rng;

fn idx(p: [usize; 3], s: Dims) -> usize {
    p[0] + s[0] * (p[1] + s[1] * p[2])
}

fn surface_oracle(mask: &[bool], s: Dims) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for z in 0..s[2] {
        for y in 0..s[1] {
            for x in 0..s[0] {
                if !mask[idx([x, y, z], s)] {
                    continue;
                }
                let p = [x as isize, y as isize, z as isize];
                let exposed = [
                    [1, 0, 0],
                    [-1, 0, 0],
                    [0, 1, 0],
                    [0, -1, 0],
                    [0, 0, 1],
                    [0, 0, -1],
                ]
                .iter()
                .any(|d: &[isize; 3]| {
                    let q: Vec<isize> = (0..3).map(|a| p[a] + d[a]).collect();
                    if (0..3).any(|a| q[a] < 0 || q[a] >= s[a] as isize) {
                        return true;
                    }
                    !mask[idx([q[0] as usize, q[1] as usize, q[2] as usize], s)]
                });
                if exposed {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

fn assd_oracle(a: &[bool], b: &[bool], s: Dims, sp: Triple) -> Option<f64> {
    let mm = |p: &[usize; 3]| -> Triple { std::array::from_fn(|k| p[k] as f64 * sp[k]) };
    let sa: Vec<Triple> = surface_oracle(a, s).iter().map(mm).collect();
    let sb: Vec<Triple> = surface_oracle(b, s).iter().map(mm).collect();
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let nearest = |p: &Triple, set: &[Triple]| {
        set.iter()
            .map(|q| {
                let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
                d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
            })
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    };
    let forward: f64 = sa.iter().map(|p| nearest(p, &sb)).sum();
    let backward: f64 = sb.iter().map(|p| nearest(p, &sa)).sum();
    Some((forward + backward) / (sa.len() + sb.len()) as f64)
}

fn random_mask(s: Dims, seed: u64, density: f64) -> Vec<bool> {
    let mut r = common::rng(seed);
    (0..s.iter().product())
        .map(|_| r.random_bool(density))
        .collect()
}

fn blob(s: Dims, seed: u64) -> Vec<bool> {
    let mut r = common::rng(seed);
    let c: [f64; 3] = std::array::from_fn(|a| r.random_range(0.25..0.75) * s[a] as f64);
    let rad: [f64; 3] = std::array::from_fn(|a| r.random_range(0.1..0.3) * s[a] as f64);
    let mut m = vec![false; s.iter().product()];
    for z in 0..s[2] {
        for y in 0..s[1] {
            for x in 0..s[0] {
                let p = [x as f64, y as f64, z as f64];
                let d: f64 = (0..3).map(|a| ((p[a] - c[a]) / rad[a]).powi(2)).sum();
                m[idx([x, y, z], s)] = d <= 1.0 || r.random_bool(0.02);
            }
        }
    }
    m
}

#[test]
fn dice_hand_count() {
    let mut p = [false; 9];
    let mut g = [false; 9];
    for i in [0, 1, 2, 3] {
        p[i] = true;
    }
    for i in [2, 3, 4, 5] {
        g[i] = true;
    }
    assert_eq!(dice_coefficient(&p, &g).unwrap(), 0.5);
    assert_eq!(dice_coefficient(&p, &p).unwrap(), 1.0);
    let q: Vec<bool> = p.iter().map(|v| !v).collect();
    assert_eq!(dice_coefficient(&p, &q).unwrap(), 0.0);
}

#[test]
fn single_voxels_along_an_axis() {
    let s = [6, 1, 1];
    let mut a = vec![false; 6];
    let mut b = vec![false; 6];
    a[1] = true;
    b[4] = true;
    assert_eq!(assd(&a, &b, s, [1.5, 1.0, 1.0]).unwrap(), Some(4.5));
    assert_eq!(assd(&a, &a, s, [1.5, 1.0, 1.0]).unwrap(), Some(0.0));
}

#[test]
fn offset_cubes_with_anisotropic_spacing() {
    let s = [8, 8, 8];
    let sp = [0.7, 1.1, 2.3];
    let cube = |o: [usize; 3]| {
        let mut m = vec![false; 512];
        for z in 0..3 {
            for y in 0..3 {
                for x in 0..3 {
                    m[idx([o[0] + x, o[1] + y, o[2] + z], s)] = true;
                }
            }
        }
        m
    };
    let a = cube([2, 2, 2]);
    for off in [[3, 2, 2], [2, 3, 2], [2, 2, 3]] {
        let b = cube(off);
        assert_eq!(assd(&a, &b, s, sp).unwrap(), assd_oracle(&a, &b, s, sp));
    }
}

#[test]
fn accelerated_assd_equals_all_pairs_on_16_cubed() {
    let s = [16, 16, 16];
    for seed in 0..20u64 {
        let a = blob(s, 2 * seed);
        let b = blob(s, 2 * seed + 1);
        let sp = [0.5 + seed as f64 * 0.1, 1.0, 1.7];
        assert_eq!(
            assd(&a, &b, s, sp).unwrap(),
            assd_oracle(&a, &b, s, sp),
            "seed {seed}"
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn surface_matches_neighbour_scan(seed in any::<u64>(), density in 0.1f64..0.95) {
        let s = [5, 5, 5];
        let m = random_mask(s, seed, density);
        prop_assert_eq!(extract_surface(&m, s).unwrap(), surface_oracle(&m, s));
    }

    #[test]
    fn assd_symmetry_and_spacing_homogeneity(
        seed in any::<u64>(),
        sp in prop::array::uniform3(0.3f64..3.0),
    ) {
        let s = [7, 6, 5];
        let a = random_mask(s, seed, 0.2);
        let b = random_mask(s, seed ^ 77, 0.2);
        let ab = assd(&a, &b, s, sp).unwrap();
        prop_assert_eq!(ab, assd(&b, &a, s, sp).unwrap());
        let doubled = assd(&a, &b, s, sp.map(|v| 2.0 * v)).unwrap();
        prop_assert_eq!(doubled, ab.map(|v| 2.0 * v));
    }

    #[test]
    fn shifting_both_masks_changes_nothing(
        seed in any::<u64>(),
        shift in prop::array::uniform3(0usize..3),
    ) {
        let inner = [5, 5, 4];
        let s = [8, 8, 7];
        let a = random_mask(inner, seed, 0.3);
        let b = random_mask(inner, seed ^ 5, 0.3);
        // embed with a one-voxel margin so out-of-grid neighbours never matter
        let place = |m: &[bool], off: [usize; 3]| {
            let mut out = vec![false; s.iter().product()];
            for z in 0..inner[2] {
                for y in 0..inner[1] {
                    for x in 0..inner[0] {
                        out[idx([x + off[0] + 1, y + off[1] + 1, z + off[2] + 1], s)] = m[idx([x, y, z], inner)];
                    }
                }
            }
            out
        };
        // dyadic spacing keeps the shifted physical coordinates exact
        let sp = [1.0, 1.25, 2.0];
        let (a0, b0) = (place(&a, [0, 0, 0]), place(&b, [0, 0, 0]));
        let (a1, b1) = (place(&a, shift), place(&b, shift));
        prop_assert_eq!(dice_coefficient(&a0, &b0).unwrap(), dice_coefficient(&a1, &b1).unwrap());
        prop_assert_eq!(assd(&a0, &b0, s, sp).unwrap(), assd(&a1, &b1, s, sp).unwrap());
    }
}

#[test]
fn evaluate_composes_per_volume_scores() {
    let ds = make_phantom_dataset(&common::small_phantom(3, 4)).unwrap();
    let truths = ds.target_truth.into_inner();
    let preds: Vec<LabelVolume> = ds.source.into_iter().map(|(_, _, l)| l).collect();
    let r = evaluate("fixture", &preds, &truths).unwrap();
    assert_eq!(r.classes, vec![1, 2]);
    for (v, (p, t)) in preds.iter().zip(&truths).enumerate() {
        for (k, &c) in r.classes.iter().enumerate() {
            let (pm, gm) = (p.class_mask(c), t.class_mask(c));
            assert_eq!(r.volumes[v][k].dice, dice_coefficient(&pm, &gm).unwrap());
            assert_eq!(
                r.volumes[v][k].assd,
                assd_oracle(&pm, &gm, t.shape(), t.spacing().0)
            );
        }
    }

    let same = evaluate("same", &truths, &truths).unwrap();
    for k in 0..2 {
        assert_eq!(same.dice[k].mean, Some(1.0));
        assert_eq!(same.dice[k].std, Some(0.0));
        assert_eq!(same.assd[k].mean, Some(0.0));
    }
    let one = evaluate("one", &preds[..1], &truths[..1]).unwrap();
    assert_eq!(one.dice[0].std, Some(0.0));
}
