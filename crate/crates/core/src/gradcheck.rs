//! Finite-difference gradient oracle. Test support: computes gradients by
//! central differences only, independent of the tape's backward pass.

use ndarray::ArrayD;

/// Relative error with an absolute floor for near-zero pairs.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central-difference gradient of a scalar function at `x`.
pub fn finite_diff_grad<F>(f: F, x: &ArrayD<f64>, h: f64) -> ArrayD<f64>
where
    F: Fn(&ArrayD<f64>) -> f64,
{
    let mut g = ArrayD::zeros(x.raw_dim());
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let orig = xp.as_slice_mut().unwrap()[idx];
        xp.as_slice_mut().unwrap()[idx] = orig + h;
        let fp = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig - h;
        let fm = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig;
        g.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Largest elementwise relative error between an analytic gradient and the
/// finite-difference oracle.
pub fn max_grad_rel_err<F>(f: F, x: &ArrayD<f64>, analytic: &ArrayD<f64>, h: f64) -> f64
where
    F: Fn(&ArrayD<f64>) -> f64,
{
    let fd = finite_diff_grad(f, x, h);
    fd.iter()
        .zip(analytic.iter())
        .map(|(&a, &b)| rel_err(a, b))
        .fold(0.0, f64::max)
}
