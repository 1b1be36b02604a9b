//! Finite-difference gradient checking. The oracle side of every gradient
//! test: central differences computed without touching the tape.

/// Central-difference gradient of `f` at `theta` with step `h`.
pub fn central_difference_grad<F>(f: &F, theta: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut work = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = work[i];
        work[i] = orig + h;
        let fp = f(&work);
        work[i] = orig - h;
        let fm = f(&work);
        work[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Max relative error between an analytic gradient and central differences:
/// `max_i |g_i - d_i| / (|g_i| + |d_i| + 1e-12)`.
///
/// `f` evaluates the scalar objective, `analytic_grad` its claimed gradient;
/// the two must be independent computation paths for the check to mean
/// anything.
pub fn finite_difference_check<F, G>(f: &F, analytic_grad: &G, theta: &[f64], h: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    let numeric = central_difference_grad(f, theta, h);
    let analytic = analytic_grad(theta);
    assert_eq!(
        numeric.len(),
        analytic.len(),
        "gradient length mismatch: numeric {} vs analytic {}",
        numeric.len(),
        analytic.len()
    );
    numeric
        .iter()
        .zip(&analytic)
        .map(|(&d, &g)| (g - d).abs() / (g.abs() + d.abs() + 1e-12))
        .fold(0.0, f64::max)
}
