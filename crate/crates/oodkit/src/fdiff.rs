//! Central finite differences, used as the independent oracle for gradient
//! checks. Evaluates the target function numerically and never touches the
//! tape, so it cannot share bugs with the reverse-mode path it validates.

/// Central-difference gradient of `f` at `x` with step `h`.
///
/// `f` must be deterministic: it is re-evaluated 2·len(x) times.
pub fn central_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        grad.push((fp - fm) / (2.0 * h));
    }
    grad
}

/// Largest relative error between `got` and `want`, with an absolute floor so
/// near-zero gradients do not blow up the ratio.
pub fn max_relative_error(got: &[f64], want: &[f64], floor: f64) -> f64 {
    assert_eq!(got.len(), want.len());
    got.iter()
        .zip(want)
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let g = central_gradient(f, &[3.0, -1.5], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-8);
        assert!((g[1] + 3.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_floor() {
        assert!(max_relative_error(&[0.0], &[1e-12], 1e-6) < 1e-5);
        assert!(max_relative_error(&[1.0], &[2.0], 1e-6) == 0.5);
    }
}
