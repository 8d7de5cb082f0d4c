//! Central finite differences for gradient verification.

use crate::Matrix;

/// Central difference estimate of `d f / d x[i]` for each requested flat
/// index of `x`. `f` is evaluated on perturbed copies of `x`.
pub fn central_differences(
    x: &Matrix,
    indices: &[usize],
    step: f64,
    mut f: impl FnMut(&Matrix) -> f64,
) -> Vec<f64> {
    let mut probe = x.clone();
    indices
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + step;
            let up = f(&probe);
            probe.data_mut()[i] = orig - step;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`: relative where the gradient is large,
/// scaled by `floor` where both sides are tiny.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Worst relative error over a set of analytic/numeric pairs.
pub fn worst_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(*a, *n, floor))
        .fold(0.0, f64::max)
}

/// Up to `count` flat indices spread evenly across a tensor of `len` entries.
pub fn spread_indices(len: usize, count: usize) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    (0..count).map(|k| (k * len) / count + (k * 7919) % (len / count).max(1)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn differences_of_a_quadratic_are_exact_enough() {
        let x = Matrix::from_vec(1, 3, vec![1.0, -2.0, 0.5]);
        let d = central_differences(&x, &[0, 1, 2], 1e-5, |m| m.data().iter().map(|v| v * v).sum());
        for (got, want) in d.iter().zip([2.0, -4.0, 1.0]) {
            assert!((got - want).abs() < 1e-8);
        }
    }

    #[test]
    fn spread_indices_stay_in_range_and_are_distinct() {
        for len in [1, 5, 64, 1000] {
            let idx = spread_indices(len, 6);
            assert!(idx.iter().all(|&i| i < len));
            let mut sorted = idx.clone();
            sorted.dedup();
            assert_eq!(sorted.len(), idx.len());
        }
    }
}
