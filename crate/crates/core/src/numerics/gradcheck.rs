use alloc::vec::Vec;

/// Central-difference estimate of `df/dp_i` for each coordinate in `coords`.
///
/// `params` is perturbed in place and restored before returning.
pub fn finite_diff_grad<F>(mut f: F, params: &mut [f64], coords: &[usize], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    coords
        .iter()
        .map(|&i| {
            let orig = params[i];
            params[i] = orig + step;
            let up = f(params);
            params[i] = orig - step;
            let down = f(params);
            params[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(floor);
    (a - b).abs() / scale
}
