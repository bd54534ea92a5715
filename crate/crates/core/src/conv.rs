//! im2col / col2im kernels shared by convolution and its transpose.

use crate::scalar::Real;

/// Geometry of a square-kernel 2D convolution over one batch item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// `None` when the kernel does not fit the padded input.
    pub fn new(
        channels: usize,
        h: usize,
        w: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if kernel == 0 || stride == 0 || h + 2 * pad < kernel || w + 2 * pad < kernel {
            return None;
        }
        let ho = (h + 2 * pad - kernel) / stride + 1;
        let wo = (w + 2 * pad - kernel) / stride + 1;
        Some(ConvGeom {
            channels,
            h,
            w,
            kernel,
            stride,
            pad,
            ho,
            wo,
        })
    }

    /// Rows of the column matrix.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Columns of the column matrix.
    pub fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output columns `[lo, hi)` whose input column `ox·stride + kx − pad` lies inside the row.
#[inline]
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = if kx >= g.pad {
        0
    } else {
        (g.pad - kx).div_ceil(g.stride)
    };
    let hi = if g.w + g.pad > kx {
        (g.w + g.pad - kx).div_ceil(g.stride).min(g.wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds one `C×H×W` item into a `(C·k·k) × (Ho·Wo)` matrix with zero padding.
pub(crate) fn im2col<T: Real>(input: &[T], g: &ConvGeom, cols: &mut [T]) {
    let k = g.kernel;
    let p = g.positions();
    debug_assert_eq!(cols.len(), g.patch_len() * p);
    for c in 0..g.channels {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let out = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut out[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (d, &v) in dst[lo..hi]
                            .iter_mut()
                            .zip(src[first..].iter().step_by(g.stride))
                        {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a column matrix back onto a `C×H×W` item, accumulating.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, output: &mut [T]) {
    let k = g.kernel;
    let p = g.positions();
    for c in 0..g.channels {
        let plane = &mut output[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kx);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kx - g.pad;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[oy * g.wo + lo..oy * g.wo + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[first..first + hi - lo].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst[first..].iter_mut().step_by(g.stride).zip(s) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn geometry() {
        let g = ConvGeom::new(1, 64, 64, 4, 2, 1).unwrap();
        assert_eq!((g.ho, g.wo), (32, 32));
        let g = ConvGeom::new(1, 8, 8, 3, 1, 1).unwrap();
        assert_eq!((g.ho, g.wo), (8, 8));
        assert!(ConvGeom::new(1, 2, 2, 5, 1, 0).is_none());
    }

    fn naive_im2col(input: &[f64], g: &ConvGeom) -> vec::Vec<f64> {
        let mut out = vec::Vec::new();
        for c in 0..g.channels {
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    for oy in 0..g.ho {
                        for ox in 0..g.wo {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            let inside =
                                iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w;
                            out.push(if inside {
                                input[(c * g.h + iy as usize) * g.w + ix as usize]
                            } else {
                                0.0
                            });
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_matches_direct_indexing() {
        for (c, h, w, k, s, p) in [
            (2, 5, 4, 3, 2, 1),
            (1, 8, 8, 7, 1, 3),
            (3, 6, 7, 4, 2, 1),
            (1, 4, 4, 1, 1, 0),
            (2, 3, 5, 3, 3, 2),
        ] {
            let g = ConvGeom::new(c, h, w, k, s, p).unwrap();
            let x: vec::Vec<f64> = (0..c * h * w).map(|i| i as f64 + 1.0).collect();
            let mut cols = vec![f64::NAN; g.patch_len() * g.positions()];
            im2col(&x, &g, &mut cols);
            assert_eq!(cols, naive_im2col(&x, &g), "{:?}", g);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        for g in [
            ConvGeom::new(2, 5, 4, 3, 2, 1).unwrap(),
            ConvGeom::new(1, 6, 6, 3, 1, 1).unwrap(),
            ConvGeom::new(2, 3, 5, 3, 3, 2).unwrap(),
        ] {
            let x: vec::Vec<f64> = (0..g.channels * g.h * g.w)
                .map(|i| (i as f64 * 0.37).sin())
                .collect();
            let y: vec::Vec<f64> = (0..g.patch_len() * g.positions())
                .map(|i| (i as f64 * 0.11).cos())
                .collect();
            let mut cols = vec![0.0; y.len()];
            im2col(&x, &g, &mut cols);
            let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
            let mut back = vec![0.0; x.len()];
            col2im(&y, &g, &mut back);
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
