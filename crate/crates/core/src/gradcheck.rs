//! Central finite differences for checking reverse-mode gradients.

/// Relative error with an absolute floor so that two near-zero values compare equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / scale
}

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` where `f` is evaluated on a perturbed copy of `x`.
pub fn central_difference(
    x: &[f64],
    index: usize,
    step: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> f64 {
    let mut probe = x.to_vec();
    probe[index] = x[index] + step;
    let plus = f(&probe);
    probe[index] = x[index] - step;
    let minus = f(&probe);
    (plus - minus) / (2.0 * step)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Worst {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Compares `analytic[i]` with a central difference at every listed index; returns the worst case.
pub fn check_indices(
    x: &[f64],
    analytic: &[f64],
    indices: &[usize],
    step: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> Option<Worst> {
    let mut worst: Option<Worst> = None;
    for &i in indices {
        let numeric = central_difference(x, i, step, &mut f);
        let rel_error = relative_error(analytic[i], numeric);
        if worst.is_none_or(|w| rel_error > w.rel_error) {
            worst = Some(Worst {
                index: i,
                analytic: analytic[i],
                numeric,
                rel_error,
            });
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_derivative() {
        let x = [2.0];
        let d = central_difference(&x, 0, 1e-5, |v| v[0] * v[0] * v[0]);
        assert!(relative_error(12.0, d) < 1e-9);
        assert_eq!(relative_error(0.0, 1e-12), 1e-12 / 1e-8);
    }
}
