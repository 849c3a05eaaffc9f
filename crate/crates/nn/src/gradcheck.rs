//! Central finite differences, used to validate hand-written backward
//! passes. Nothing here touches the autodiff tape.

/// Relative error with a small absolute floor so that two near-zero
/// gradients compare as equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-6;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Like [`relative_error`] but with the floor scaled by the magnitude of the
/// differentiated value, since finite-difference roundoff grows with it.
pub fn relative_error_scaled(analytic: f64, numeric: f64, value: f64) -> f64 {
    const FLOOR: f64 = 1e-6;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR * value.abs().max(1.0))
}

/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for each requested index.
pub fn central_difference<F>(mut f: F, x: &[f64], indices: &[usize], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    indices
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let plus = f(&probe);
            probe[i] = orig - eps;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// Richardson extrapolation of two central differences (`eps` and `eps/2`),
/// which cancels the leading `O(eps^2)` truncation term.
pub fn richardson_difference<F>(mut f: F, x: &[f64], indices: &[usize], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let coarse = central_difference(&mut f, x, indices, eps);
    let fine = central_difference(&mut f, x, indices, eps / 2.0);
    coarse
        .iter()
        .zip(fine)
        .map(|(c, f)| (4.0 * f - c) / 3.0)
        .collect()
}
