//! Finite-difference oracles for checking analytic gradients.

/// Central differences of `f` at every coordinate of `x`.
pub fn central_difference(x: &[f64], step: f64, f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let all: Vec<usize> = (0..x.len()).collect();
    central_difference_at(x, &all, step, f)
}

/// Central differences of `f` at the listed coordinates only.
pub fn central_difference_at(
    x: &[f64],
    coords: &[usize],
    step: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let plus = f(&probe);
            probe[i] = orig - step;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Central difference of `f` along direction `d`: `(f(x + hd) - f(x - hd)) / 2h`.
pub fn directional_difference(
    x: &[f64],
    d: &[f64],
    step: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> f64 {
    let plus: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + step * b).collect();
    let minus: Vec<f64> = x.iter().zip(d).map(|(a, b)| a - step * b).collect();
    (f(&plus) - f(&minus)) / (2.0 * step)
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`; zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if diff == 0.0 {
        0.0
    } else if scale == 0.0 {
        f64::INFINITY
    } else {
        diff / scale
    }
}
