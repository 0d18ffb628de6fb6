//! Shared finite-difference oracle for gradient checks. Lives in test code
//! only and is independent of the reverse-mode implementation it checks.

use pcstyle::numerics::Matrix;

/// Central-difference gradient of a scalar function at x.
pub fn central_diff(f: &mut dyn FnMut(&Matrix) -> f64, x: &Matrix, h: f64) -> Matrix {
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let orig = probe[(i, j)];
            probe[(i, j)] = orig + h;
            let plus = f(&probe);
            probe[(i, j)] = orig - h;
            let minus = f(&probe);
            probe[(i, j)] = orig;
            grad[(i, j)] = (plus - minus) / (2.0 * h);
        }
    }
    grad
}

/// Relative error with an absolute floor so near-zero pairs compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

/// Largest per-component relative error between two gradients.
pub fn max_rel_err(analytic: &Matrix, numeric: &Matrix) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &b)| rel_err(a, b))
        .fold(0.0, f64::max)
}

/// Fraction of components whose relative error is below `tol`.
pub fn fraction_within(analytic: &Matrix, numeric: &Matrix, tol: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let total = analytic.data().len();
    let ok = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .filter(|(&a, &b)| rel_err(a, b) < tol)
        .count();
    ok as f64 / total as f64
}
