//! Central finite differences for checking analytic gradients.

/// Default step of the central difference.
pub const STEP: f64 = 1e-5;

/// `d f / d x_i` by central differences for every `i` in `indices`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], indices: &[usize], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    indices
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Largest `|a - n| / max(1, |n|)` over paired entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic() {
        let x = [2.0, -1.0];
        let g = numeric_gradient(|v| v[0].powi(3) + 5.0 * v[1], &x, &[0, 1], STEP);
        assert!(max_relative_error(&[12.0, 5.0], &g) < 1e-8);
        assert_eq!(max_relative_error(&[1.0], &[3.0]), 2.0 / 3.0);
    }
}
