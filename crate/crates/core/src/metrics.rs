//! Overlap and surface-distance metrics on 3D label grids.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::volume::{Dims, LabelVolume, Triple};

/// `2|P∩G| / (|P|+|G|)`; two empty masks score 1.
pub fn dice_coefficient(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        bail!(
            Shape,
            "dice of masks with {} and {} voxels",
            pred.len(),
            gt.len()
        );
    }
    let (mut inter, mut p, mut g) = (0u64, 0u64, 0u64);
    for (&a, &b) in pred.iter().zip(gt) {
        p += a as u64;
        g += b as u64;
        inter += (a && b) as u64;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Foreground voxels with a background or out-of-grid 6-neighbour, in storage order.
pub fn extract_surface(mask: &[bool], shape: Dims) -> Result<Vec<[usize; 3]>> {
    let [nx, ny, nz] = shape;
    if mask.len() != nx * ny * nz {
        bail!(Shape, "mask of {} voxels is not {:?}", mask.len(), shape);
    }
    let at = |x: usize, y: usize, z: usize| mask[x + nx * (y + ny * z)];
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !at(x, y, z) {
                    continue;
                }
                let interior = x > 0
                    && x + 1 < nx
                    && y > 0
                    && y + 1 < ny
                    && z > 0
                    && z + 1 < nz
                    && at(x - 1, y, z)
                    && at(x + 1, y, z)
                    && at(x, y - 1, z)
                    && at(x, y + 1, z)
                    && at(x, y, z - 1)
                    && at(x, y, z + 1);
                if !interior {
                    out.push([x, y, z]);
                }
            }
        }
    }
    Ok(out)
}

fn physical(points: &[[usize; 3]], spacing: Triple) -> Vec<Triple> {
    points
        .iter()
        .map(|p| {
            [
                p[0] as f64 * spacing[0],
                p[1] as f64 * spacing[1],
                p[2] as f64 * spacing[2],
            ]
        })
        .collect()
}

#[inline]
fn sq_dist(a: &Triple, b: &Triple) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Exact nearest distance from each query to `set`. The set is scanned outward
/// from the query's position in x order and the scan stops once the x gap alone
/// exceeds the best squared distance, so the minimum is over the same values a
/// full scan would compute.
fn nearest_distances(queries: &[Triple], set: &[Triple]) -> Vec<f64> {
    let mut sorted: Vec<Triple> = set.to_vec();
    sorted.sort_by(|a, b| a[0].total_cmp(&b[0]));
    queries
        .iter()
        .map(|q| {
            let start = sorted.partition_point(|p| p[0] < q[0]);
            let mut best = f64::INFINITY;
            let mut i = start;
            while i < sorted.len() {
                let dx = sorted[i][0] - q[0];
                if dx * dx > best {
                    break;
                }
                best = best.min(sq_dist(q, &sorted[i]));
                i += 1;
            }
            let mut i = start;
            while i > 0 {
                i -= 1;
                let dx = q[0] - sorted[i][0];
                if dx * dx > best {
                    break;
                }
                best = best.min(sq_dist(q, &sorted[i]));
            }
            libm::sqrt(best)
        })
        .collect()
}

/// Average symmetric surface distance in mm; `None` when either mask is empty.
pub fn assd(pred: &[bool], gt: &[bool], shape: Dims, spacing: Triple) -> Result<Option<f64>> {
    if pred.len() != gt.len() {
        bail!(
            Shape,
            "assd of masks with {} and {} voxels",
            pred.len(),
            gt.len()
        );
    }
    let sp = physical(&extract_surface(pred, shape)?, spacing);
    let sg = physical(&extract_surface(gt, shape)?, spacing);
    if sp.is_empty() || sg.is_empty() {
        return Ok(None);
    }
    // each direction summed on its own so that swapping the masks is exact
    let forward: f64 = nearest_distances(&sp, &sg).iter().sum();
    let backward: f64 = nearest_distances(&sg, &sp).iter().sum();
    Ok(Some((forward + backward) / (sp.len() + sg.len()) as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScores {
    pub dice: f64,
    /// `None` marks an undefined distance (an empty mask).
    pub assd: Option<f64>,
}

/// Mean and population standard deviation over the defined values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub count: usize,
    pub excluded: usize,
}

impl Summary {
    pub fn of(values: &[Option<f64>]) -> Self {
        let defined: Vec<f64> = values.iter().flatten().copied().collect();
        let excluded = values.len() - defined.len();
        if defined.is_empty() {
            return Summary {
                mean: None,
                std: None,
                count: 0,
                excluded,
            };
        }
        let n = defined.len() as f64;
        let mean = defined.iter().sum::<f64>() / n;
        let var = defined.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Summary {
            mean: Some(mean),
            std: Some(libm::sqrt(var)),
            count: defined.len(),
            excluded,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    /// Foreground classes scored, in order.
    pub classes: Vec<u8>,
    /// `volumes[v][k]` scores class `classes[k]` of volume `v`.
    pub volumes: Vec<Vec<ClassScores>>,
    pub dice: Vec<Summary>,
    pub assd: Vec<Summary>,
}

/// Per-volume, per-foreground-class scores with dataset summaries.
pub fn evaluate(method: &str, preds: &[LabelVolume], truths: &[LabelVolume]) -> Result<EvalReport> {
    if preds.len() != truths.len() {
        bail!(
            Validation,
            "{} predictions for {} reference volumes",
            preds.len(),
            truths.len()
        );
    }
    if preds.is_empty() {
        bail!(Validation, "nothing to evaluate");
    }
    let classes: Vec<u8> = (1..truths[0].classes()).collect();
    let mut volumes = Vec::with_capacity(preds.len());
    for (i, (p, t)) in preds.iter().zip(truths).enumerate() {
        if p.shape() != t.shape() {
            bail!(
                Shape,
                "volume {i}: prediction {:?} vs reference {:?}",
                p.shape(),
                t.shape()
            );
        }
        let mut row = Vec::with_capacity(classes.len());
        for &c in &classes {
            let pm = p.class_mask(c);
            let gm = t.class_mask(c);
            row.push(ClassScores {
                dice: dice_coefficient(&pm, &gm)?,
                assd: assd(&pm, &gm, t.shape(), t.spacing().0)?,
            });
        }
        volumes.push(row);
    }
    let dice = (0..classes.len())
        .map(|k| Summary::of(&volumes.iter().map(|r| Some(r[k].dice)).collect::<Vec<_>>()))
        .collect();
    let assd = (0..classes.len())
        .map(|k| Summary::of(&volumes.iter().map(|r| r[k].assd).collect::<Vec<_>>()))
        .collect();
    Ok(EvalReport {
        method: method.into(),
        classes,
        volumes,
        dice,
        assd,
    })
}

impl EvalReport {
    /// Mean Dice over volumes and foreground classes.
    pub fn mean_foreground_dice(&self) -> f64 {
        let means: Vec<f64> = self.dice.iter().filter_map(|s| s.mean).collect();
        means.iter().sum::<f64>() / means.len().max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_examples() {
        assert_eq!(dice_coefficient(&[false; 4], &[false; 4]).unwrap(), 1.0);
        assert_eq!(
            dice_coefficient(&[true, false], &[false, true]).unwrap(),
            0.0
        );
        assert!(dice_coefficient(&[true], &[true, false]).is_err());
    }

    #[test]
    fn cube_surface() {
        let m = [true; 27];
        let s = extract_surface(&m, [3, 3, 3]).unwrap();
        assert_eq!(s.len(), 26);
        assert!(!s.contains(&[1, 1, 1]));
    }

    #[test]
    fn empty_mask_is_undefined() {
        let mut a = [false; 8];
        a[0] = true;
        assert_eq!(assd(&a, &[false; 8], [2, 2, 2], [1.0; 3]).unwrap(), None);
    }

    #[test]
    fn summary_population_std() {
        let s = Summary::of(&[Some(1.0), Some(3.0), None]);
        assert_eq!(
            (s.mean, s.std, s.count, s.excluded),
            (Some(2.0), Some(1.0), 2, 1)
        );
        let one = Summary::of(&[Some(0.7)]);
        assert_eq!(one.std, Some(0.0));
    }
}
