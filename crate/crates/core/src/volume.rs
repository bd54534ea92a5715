//! Volumes, the preprocessing chain, and 2D slice extraction.
//!
//! Voxels are stored x-fastest (`x + nx·(y + ny·z)`), the NIfTI order. Axial
//! slices run along the third axis and become `ny × nx` images.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::scalar::Real;
use crate::tensor::{Shape, Tensor};

pub type Triple = [f64; 3];
pub type Dims = [usize; 3];

/// Millimetres per voxel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spacing(pub Triple);

impl Spacing {
    pub fn new(s: Triple) -> Result<Self> {
        if s.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            bail!(
                Validation,
                "spacing components must be positive and finite, got {:?}",
                s
            );
        }
        Ok(Spacing(s))
    }
}

fn check_dims(shape: Dims) -> Result<()> {
    if shape.contains(&0) {
        bail!(
            Validation,
            "shape components must be at least 1, got {:?}",
            shape
        );
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: Dims,
    spacing: Spacing,
    pub origin: Triple,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(shape: Dims, spacing: Spacing, data: Vec<f64>) -> Result<Self> {
        check_dims(shape)?;
        if data.len() != shape.iter().product::<usize>() {
            bail!(
                Validation,
                "{} voxels do not fill shape {:?}",
                data.len(),
                shape
            );
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            let [x, y, z] = unravel(i, shape);
            bail!(Validation, "non-finite intensity at voxel ({x}, {y}, {z})");
        }
        Ok(Volume {
            shape,
            spacing,
            origin: [0.0; 3],
            data,
        })
    }

    pub fn filled(shape: Dims, spacing: Spacing, value: f64) -> Result<Self> {
        check_dims(shape)?;
        Volume::new(shape, spacing, vec![value; shape.iter().product()])
    }

    pub fn shape(&self) -> Dims {
        self.shape
    }
    pub fn spacing(&self) -> Spacing {
        self.spacing
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    /// Axial slice `z` as a row-major `ny × nx` image.
    pub fn axial(&self, z: usize) -> &[f64] {
        let p = self.shape[0] * self.shape[1];
        &self.data[z * p..(z + 1) * p]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    shape: Dims,
    spacing: Spacing,
    classes: u8,
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(shape: Dims, spacing: Spacing, classes: u8, data: Vec<u8>) -> Result<Self> {
        check_dims(shape)?;
        if data.len() != shape.iter().product::<usize>() {
            bail!(
                Validation,
                "{} labels do not fill shape {:?}",
                data.len(),
                shape
            );
        }
        if let Some(i) = data.iter().position(|&v| v >= classes) {
            let [x, y, z] = unravel(i, shape);
            bail!(
                Validation,
                "label {} at ({x}, {y}, {z}) is outside {} classes",
                data[i],
                classes
            );
        }
        Ok(LabelVolume {
            shape,
            spacing,
            classes,
            data,
        })
    }

    pub fn shape(&self) -> Dims {
        self.shape
    }
    pub fn spacing(&self) -> Spacing {
        self.spacing
    }
    pub fn classes(&self) -> u8 {
        self.classes
    }
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn axial(&self, z: usize) -> &[u8] {
        let p = self.shape[0] * self.shape[1];
        &self.data[z * p..(z + 1) * p]
    }

    /// Binary mask of one class.
    pub fn class_mask(&self, class: u8) -> Vec<bool> {
        self.data.iter().map(|&v| v == class).collect()
    }

    pub fn matches(&self, v: &Volume) -> bool {
        self.shape == v.shape && self.spacing == v.spacing
    }
}

fn unravel(i: usize, shape: Dims) -> [usize; 3] {
    [
        i % shape[0],
        (i / shape[0]) % shape[1],
        i / (shape[0] * shape[1]),
    ]
}

// ------------------------------------------------------------- resampling

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Linear,
    Nearest,
}

/// Output extent for one axis.
pub fn resampled_extent(n: usize, spacing: f64, target: f64) -> usize {
    (libm::round(n as f64 * spacing / target) as usize).max(1)
}

/// Resamples one axis. Output voxel `i` samples input coordinate
/// `i · target / spacing` (first voxel centres coincide); coordinates past the
/// last voxel take the edge value.
fn resample_axis<V: Copy>(
    data: &[V],
    shape: Dims,
    axis: usize,
    n_out: usize,
    scale: f64,
    mut blend: impl FnMut(V, V, f64) -> V,
) -> (Vec<V>, Dims) {
    let mut out_shape = shape;
    out_shape[axis] = n_out;
    let n_in = shape[axis];
    let stride_in = match axis {
        0 => 1,
        1 => shape[0],
        _ => shape[0] * shape[1],
    };
    let stride_out = match axis {
        0 => 1,
        1 => out_shape[0],
        _ => out_shape[0] * out_shape[1],
    };
    let taps: Vec<(usize, usize, f64)> = (0..n_out)
        .map(|i| {
            let c = (i as f64 * scale).min((n_in - 1) as f64);
            let i0 = libm::floor(c) as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, c - i0 as f64)
        })
        .collect();
    let total: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(total);
    // iterate output voxels in storage order
    for idx in 0..total {
        let [x, y, z] = unravel(idx, out_shape);
        let pos = [x, y, z][axis];
        let (i0, i1, f) = taps[pos];
        let base = idx - pos * stride_out;
        // same coordinates on the other axes in the input grid
        let [bx, by, bz] = unravel(base, out_shape);
        let in_base = bx + shape[0] * (by + shape[1] * bz);
        out.push(blend(
            data[in_base + i0 * stride_in],
            data[in_base + i1 * stride_in],
            f,
        ));
    }
    (out, out_shape)
}

/// Resamples a volume onto `target` spacing; linear is separable trilinear.
pub fn resample(v: &Volume, target: Spacing, interp: Interp) -> Result<Volume> {
    let target = Spacing::new(target.0)?;
    if target == v.spacing {
        return Ok(v.clone());
    }
    let mut data = v.data.clone();
    let mut shape = v.shape;
    for axis in 0..3 {
        let n_out = resampled_extent(v.shape[axis], v.spacing.0[axis], target.0[axis]);
        let scale = target.0[axis] / v.spacing.0[axis];
        let (d, s) = match interp {
            Interp::Linear => resample_axis(&data, shape, axis, n_out, scale, |a, b, f| {
                if f == 0.0 {
                    a
                } else {
                    a * (1.0 - f) + b * f
                }
            }),
            Interp::Nearest => resample_axis(&data, shape, axis, n_out, scale, |a, b, f| {
                if f < 0.5 {
                    a
                } else {
                    b
                }
            }),
        };
        data = d;
        shape = s;
    }
    let mut out = Volume::new(shape, target, data)?;
    out.origin = v.origin;
    Ok(out)
}

/// Nearest-neighbour resampling of labels.
pub fn resample_labels(l: &LabelVolume, target: Spacing) -> Result<LabelVolume> {
    let target = Spacing::new(target.0)?;
    if target == l.spacing {
        return Ok(l.clone());
    }
    let mut data = l.data.clone();
    let mut shape = l.shape;
    for axis in 0..3 {
        let n_out = resampled_extent(l.shape[axis], l.spacing.0[axis], target.0[axis]);
        let scale = target.0[axis] / l.spacing.0[axis];
        let (d, s) = resample_axis(&data, shape, axis, n_out, scale, |a, b, f| {
            if f < 0.5 {
                a
            } else {
                b
            }
        });
        data = d;
        shape = s;
    }
    LabelVolume::new(shape, target, l.classes, data)
}

// --------------------------------------------------------- conform / clip

/// Per-axis `(source start, destination start, length)` of the copied block.
fn conform_plan(from: Dims, to: Dims) -> [(usize, usize, usize); 3] {
    let mut plan = [(0, 0, 0); 3];
    for a in 0..3 {
        plan[a] = if from[a] >= to[a] {
            ((from[a] - to[a]) / 2, 0, to[a])
        } else {
            (0, (to[a] - from[a]) / 2, from[a])
        };
    }
    plan
}

fn conform_data<V: Copy>(data: &[V], from: Dims, to: Dims, fill: V) -> Vec<V> {
    let plan = conform_plan(from, to);
    let mut out = vec![fill; to.iter().product()];
    for z in 0..plan[2].2 {
        for y in 0..plan[1].2 {
            let src = (plan[0].0) + from[0] * ((plan[1].0 + y) + from[1] * (plan[2].0 + z));
            let dst = (plan[0].1) + to[0] * ((plan[1].1 + y) + to[1] * (plan[2].1 + z));
            out[dst..dst + plan[0].2].copy_from_slice(&data[src..src + plan[0].2]);
        }
    }
    out
}

/// Centre-crops axes that are too large and symmetrically pads (with `fill`) axes that are too small.
pub fn conform_shape(v: &Volume, target: Dims, fill: f64) -> Result<Volume> {
    check_dims(target)?;
    if target == v.shape {
        return Ok(v.clone());
    }
    let mut out = Volume::new(
        target,
        v.spacing,
        conform_data(&v.data, v.shape, target, fill),
    )?;
    out.origin = v.origin;
    Ok(out)
}

pub fn conform_labels(l: &LabelVolume, target: Dims) -> Result<LabelVolume> {
    check_dims(target)?;
    LabelVolume::new(
        target,
        l.spacing,
        l.classes,
        conform_data(&l.data, l.shape, target, 0),
    )
}

/// Two-pass mean and population standard deviation.
pub fn mean_std(data: &[f64]) -> (f64, f64) {
    let n = data.len().max(1) as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}

/// Clamps every voxel to `[μ − 3σ, μ + 3σ]` of the input volume.
pub fn clip_intensities(v: &Volume) -> Volume {
    let (mean, std) = mean_std(&v.data);
    if std == 0.0 {
        return v.clone();
    }
    let (lo, hi) = (mean - 3.0 * std, mean + 3.0 * std);
    let mut out = v.clone();
    for x in &mut out.data {
        *x = x.clamp(lo, hi);
    }
    out
}

/// Affine map of `[min, max]` onto `[−1, 1]`; a constant volume maps to zeros.
pub fn normalize(v: &Volume) -> Volume {
    let (lo, hi) = v
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
            (a.min(x), b.max(x))
        });
    let mut out = v.clone();
    if hi <= lo {
        out.data.fill(0.0);
        return out;
    }
    let scale = 2.0 / (hi - lo);
    for x in &mut out.data {
        *x = ((*x - lo) * scale - 1.0).clamp(-1.0, 1.0);
    }
    out
}

/// Target grid and toggles of the preprocessing chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessConfig {
    pub spacing: Spacing,
    pub shape: Dims,
    pub clip: bool,
}

/// Resample, conform, clip, normalize. Padding uses the resampled minimum.
pub fn preprocess(v: &Volume, cfg: &PreprocessConfig) -> Result<Volume> {
    let r = resample(v, cfg.spacing, Interp::Linear)?;
    let fill = r.data.iter().copied().fold(f64::INFINITY, f64::min);
    let c = conform_shape(&r, cfg.shape, fill)?;
    let c = if cfg.clip { clip_intensities(&c) } else { c };
    Ok(normalize(&c))
}

pub fn preprocess_labels(l: &LabelVolume, cfg: &PreprocessConfig) -> Result<LabelVolume> {
    conform_labels(&resample_labels(l, cfg.spacing)?, cfg.shape)
}

// ----------------------------------------------------------------- slices

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Source,
    MappedSource,
    Target,
}

/// One axial slice, the unit of training.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSample {
    pub image: Vec<f64>,
    pub height: usize,
    pub width: usize,
    mask: Option<Vec<u8>>,
    pub domain: Domain,
    pub volume_id: String,
    pub slice_index: usize,
}

impl SliceSample {
    pub fn new(
        image: Vec<f64>,
        height: usize,
        width: usize,
        mask: Option<Vec<u8>>,
        domain: Domain,
        volume_id: &str,
        slice_index: usize,
    ) -> Result<Self> {
        if image.len() != height * width {
            bail!(
                Shape,
                "slice image has {} pixels, expected {}x{}",
                image.len(),
                height,
                width
            );
        }
        if let Some(m) = &mask {
            if m.len() != image.len() {
                bail!(
                    Shape,
                    "slice mask has {} pixels, image has {}",
                    m.len(),
                    image.len()
                );
            }
            if domain == Domain::Target {
                bail!(
                    Validation,
                    "target-domain slices carry no labels during training"
                );
            }
        }
        Ok(SliceSample {
            image,
            height,
            width,
            mask,
            domain,
            volume_id: volume_id.into(),
            slice_index,
        })
    }

    pub fn mask(&self) -> Option<&[u8]> {
        self.mask.as_deref()
    }

    /// Same slice with a new image and domain; the mask is carried over unchanged.
    pub fn with_image(&self, image: Vec<f64>, domain: Domain) -> Result<Self> {
        SliceSample::new(
            image,
            self.height,
            self.width,
            self.mask.clone(),
            domain,
            &self.volume_id,
            self.slice_index,
        )
    }
}

/// All axial slices of a volume (and its labels, when given).
pub fn extract_slices(
    v: &Volume,
    labels: Option<&LabelVolume>,
    domain: Domain,
    volume_id: &str,
) -> Result<Vec<SliceSample>> {
    if let Some(l) = labels {
        if l.shape != v.shape {
            bail!(
                Shape,
                "labels {:?} do not match volume {:?}",
                l.shape,
                v.shape
            );
        }
    }
    let [nx, ny, nz] = v.shape;
    (0..nz)
        .map(|z| {
            SliceSample::new(
                v.axial(z).to_vec(),
                ny,
                nx,
                labels.map(|l| l.axial(z).to_vec()),
                domain,
                volume_id,
                z,
            )
        })
        .collect()
}

/// Epoch-wise batching over a fixed slice list.
///
/// Each epoch visits every slice exactly once. With a shuffle seed the order is
/// a permutation drawn from `(seed, epoch)`; without one it is the input order.
#[derive(Debug, Clone)]
pub struct SliceBatches {
    len: usize,
    batch_size: usize,
    shuffle_seed: Option<u64>,
}

impl SliceBatches {
    pub fn new(len: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Self> {
        if batch_size == 0 {
            bail!(Config, "batch size must be at least 1");
        }
        Ok(SliceBatches {
            len,
            batch_size,
            shuffle_seed,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len.div_ceil(self.batch_size)
    }

    /// Index batches for one epoch.
    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len).collect();
        if let Some(seed) = self.shuffle_seed {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch),
            );
            order.shuffle(&mut rng);
        }
        order.chunks(self.batch_size).map(|c| c.to_vec()).collect()
    }
}

/// Slices of several volumes in lexicographic `(volume, slice)` order along the axial axis.
pub fn slice_dataset(
    volumes: &[(String, Volume, Option<LabelVolume>)],
    domain: Domain,
) -> Result<Vec<SliceSample>> {
    let mut out = Vec::new();
    for (id, v, l) in volumes {
        out.extend(extract_slices(v, l.as_ref(), domain, id)?);
    }
    Ok(out)
}

/// References to `set[i]` for each index.
pub fn pick<'a>(set: &'a [SliceSample], idx: &[usize]) -> Vec<&'a SliceSample> {
    idx.iter().map(|&i| &set[i]).collect()
}

/// Stacks slice images into an `N×1×H×W` tensor.
pub fn batch_images<T: Real>(samples: &[&SliceSample]) -> Result<Tensor<T>> {
    let Some(first) = samples.first() else {
        bail!(Shape, "empty batch");
    };
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height, s.width) != (h, w) {
            bail!(
                Shape,
                "batch mixes {}x{} and {}x{} slices",
                h,
                w,
                s.height,
                s.width
            );
        }
        data.extend(s.image.iter().map(|&v| T::of(v)));
    }
    Tensor::from_vec(Shape::new(samples.len(), 1, h, w), data)
}

/// Concatenated masks in `N×H×W` order; every sample must be labelled.
pub fn batch_masks(samples: &[&SliceSample]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for s in samples {
        let Some(m) = s.mask() else {
            bail!(
                Validation,
                "slice {} of {} has no mask",
                s.slice_index,
                s.volume_id
            );
        };
        out.extend_from_slice(m);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;

    fn sp(s: f64) -> Spacing {
        Spacing([s; 3])
    }

    fn indexed(n: usize) -> Volume {
        Volume::new([n; 3], sp(1.0), (0..n * n * n).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn nan_voxel_is_named() {
        let mut d = vec![0.0; 8];
        d[5] = f64::NAN;
        let err = Volume::new([2, 2, 2], sp(1.0), d).unwrap_err();
        assert!(format!("{err}").contains("(1, 0, 1)"), "{err}");
    }

    #[test]
    fn invalid_spacing_and_labels() {
        assert!(Spacing::new([1.0, 0.0, 1.0]).is_err());
        assert!(LabelVolume::new([1, 1, 2], sp(1.0), 3, vec![0, 3]).is_err());
        let v = indexed(2);
        assert!(resample(&v, Spacing([1.0, -1.0, 1.0]), Interp::Linear).is_err());
    }

    #[test]
    fn resample_identity_and_constant() {
        let v = indexed(4);
        assert_eq!(resample(&v, sp(1.0), Interp::Linear).unwrap(), v);
        let c = Volume::filled([5, 4, 3], Spacing([0.7, 1.1, 2.0]), 3.25).unwrap();
        for target in [[0.468, 0.468, 1.5], [2.0, 0.3, 0.9]] {
            let r = resample(&c, Spacing(target), Interp::Linear).unwrap();
            assert!(r.data().iter().all(|&x| x == 3.25));
            assert_eq!(r.spacing(), Spacing(target));
        }
    }

    #[test]
    fn resample_shape_rule() {
        let v = Volume::filled([10, 7, 3], Spacing([1.0, 1.0, 3.0]), 0.0).unwrap();
        let r = resample(&v, Spacing([2.0, 0.5, 1.5]), Interp::Nearest).unwrap();
        assert_eq!(r.shape(), [5, 14, 6]);
        let r = resample(&v, Spacing([100.0, 100.0, 100.0]), Interp::Linear).unwrap();
        assert_eq!(r.shape(), [1, 1, 1]);
    }

    #[test]
    fn ramp_resample_matches_scalar_oracle() {
        // independent 1D linear interpolation at coordinate i * 2
        fn oracle(values: &[f64], c: f64) -> f64 {
            let c = c.min((values.len() - 1) as f64);
            let i = c.floor() as usize;
            let j = (i + 1).min(values.len() - 1);
            values[i] + (values[j] - values[i]) * (c - i as f64)
        }
        let ramp: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let v = Volume::new([10, 1, 1], sp(1.0), ramp.clone()).unwrap();
        let r = resample(&v, Spacing([2.0, 1.0, 1.0]), Interp::Linear).unwrap();
        assert_eq!(r.shape(), [5, 1, 1]);
        for (i, &got) in r.data().iter().enumerate() {
            assert!((got - oracle(&ramp, i as f64 * 2.0)).abs() < 1e-12);
        }
        // upsampling hits fractional coordinates
        let r = resample(&v, Spacing([0.3, 1.0, 1.0]), Interp::Linear).unwrap();
        for (i, &got) in r.data().iter().enumerate() {
            assert!((got - oracle(&ramp, i as f64 * 0.3)).abs() < 1e-12);
        }
    }

    #[test]
    fn label_resampling_stays_integral() {
        let l = LabelVolume::new([4, 1, 1], sp(1.0), 3, vec![0, 1, 2, 1]).unwrap();
        let r = resample_labels(&l, Spacing([0.5, 1.0, 1.0])).unwrap();
        // half-way coordinates round up
        assert_eq!(r.data(), &[0, 1, 1, 2, 2, 1, 1, 1]);
    }

    #[test]
    fn conform_identity_pad_crop() {
        let v = indexed(4);
        assert_eq!(conform_shape(&v, [4, 4, 4], 0.0).unwrap(), v);
        let p = conform_shape(&v, [6, 6, 6], 0.0).unwrap();
        for z in 0..6 {
            for y in 0..6 {
                for x in 0..6 {
                    let border = [x, y, z].iter().any(|&c| c == 0 || c == 5);
                    let expect = if border {
                        0.0
                    } else {
                        v.get(x - 1, y - 1, z - 1)
                    };
                    assert_eq!(p.get(x, y, z), expect);
                }
            }
        }
        let big = indexed(8);
        let c = conform_shape(&big, [4, 4, 4], 0.0).unwrap();
        // oracle: central block [2, 6) per axis
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    let expect = ((x + 2) + 8 * ((y + 2) + 8 * (z + 2))) as f64;
                    assert_eq!(c.get(x, y, z), expect);
                }
            }
        }
    }

    #[test]
    fn clip_examples() {
        let v = Volume::new([3, 1, 1], sp(1.0), vec![-1.0, 0.0, 1.0]).unwrap();
        assert_eq!(clip_intensities(&v), v);
        let c = Volume::filled([2, 2, 2], sp(1.0), 4.0).unwrap();
        assert_eq!(clip_intensities(&c), c);
        let mut d = vec![0.0; 1001];
        d[1000] = 10.0;
        let v = Volume::new([1001, 1, 1], sp(1.0), d).unwrap();
        // direct-summation oracle, written independently of mean_std
        let n = 1001.0;
        let mut s = 0.0;
        for &x in v.data() {
            s += x;
        }
        let mu = s / n;
        let mut ss = 0.0;
        for &x in v.data() {
            ss += (x - mu) * (x - mu);
        }
        let sigma = (ss / n).sqrt();
        let out = clip_intensities(&v);
        assert!((out.data()[1000] - (mu + 3.0 * sigma)).abs() < 1e-12);
        assert_eq!(out.data()[0], 0.0);
    }

    #[test]
    fn normalize_examples() {
        let v = Volume::new([2, 1, 1], sp(1.0), vec![-1.0, 1.0]).unwrap();
        assert_eq!(normalize(&v), v);
        let c = Volume::filled([2, 1, 1], sp(1.0), 7.0).unwrap();
        assert!(normalize(&c).data().iter().all(|&x| x == 0.0));
        let v = Volume::new([3, 1, 1], sp(1.0), vec![0.0, 5.0, 10.0]).unwrap();
        assert_eq!(normalize(&v).data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn target_slices_reject_masks() {
        assert!(
            SliceSample::new(vec![0.0; 4], 2, 2, Some(vec![0; 4]), Domain::Target, "t", 0).is_err()
        );
        assert!(
            SliceSample::new(vec![0.0; 4], 2, 2, Some(vec![0; 3]), Domain::Source, "s", 0).is_err()
        );
        assert!(SliceSample::new(vec![0.0; 4], 2, 2, None, Domain::Target, "t", 0).is_ok());
    }

    #[test]
    fn batching_contract() {
        let b = SliceBatches::new(240, 8, Some(3)).unwrap();
        assert_eq!(b.batches_per_epoch(), 30);
        let e0 = b.epoch(0);
        assert_eq!(e0.len(), 30);
        let mut seen: Vec<usize> = e0.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..240).collect::<Vec<_>>());
        assert_eq!(
            b.epoch(0),
            SliceBatches::new(240, 8, Some(3)).unwrap().epoch(0)
        );
        assert_ne!(b.epoch(0), b.epoch(1));
        let plain = SliceBatches::new(5, 2, None).unwrap().epoch(0);
        assert_eq!(plain, vec![vec![0, 1], vec![2, 3], vec![4]]);
    }

    #[test]
    fn slice_dataset_order() {
        let a = Volume::filled([2, 2, 3], sp(1.0), 1.0).unwrap();
        let b = Volume::filled([2, 2, 2], sp(1.0), 2.0).unwrap();
        let ds = slice_dataset(
            &[("a".into(), a, None), ("b".into(), b, None)],
            Domain::Target,
        )
        .unwrap();
        let keys: Vec<(String, usize)> = ds
            .iter()
            .map(|s| (s.volume_id.clone(), s.slice_index))
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert_eq!(keys.len(), 5);
    }
}
