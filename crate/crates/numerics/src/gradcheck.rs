//! Central finite-difference checks for tape gradients.

use crate::tensor::Tensor;

/// Relative error with a small absolute floor so near-zero coordinates do
/// not dominate.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

/// Numerical gradient of `f` at `x` by central differences with step `h`,
/// for the coordinates in `coords` (all when `None`).
pub fn numeric_gradient(
    x: &Tensor,
    h: f64,
    coords: Option<&[usize]>,
    mut f: impl FnMut(&Tensor) -> f64,
) -> Vec<(usize, f64)> {
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };
    let mut probe = x.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (i, (up - down) / (2.0 * h))
        })
        .collect()
}

/// Largest relative error between `analytic` and central differences of `f`.
pub fn max_relative_error(
    x: &Tensor,
    analytic: &Tensor,
    h: f64,
    coords: Option<&[usize]>,
    f: impl FnMut(&Tensor) -> f64,
) -> f64 {
    numeric_gradient(x, h, coords, f)
        .into_iter()
        .map(|(i, n)| relative_error(analytic.data()[i], n))
        .fold(0.0, f64::max)
}
