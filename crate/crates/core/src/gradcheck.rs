//! Central finite differences, the gradient oracle for every backward rule.

use crate::tensor::Matrix;

/// Default step for central differences in `f64`.
pub const FD_STEP: f64 = 1e-5;
/// Relative-error ceiling for backward vs finite differences.
pub const FD_TOLERANCE: f64 = 1e-4;

/// `(f(p + h·e_ij) − f(p − h·e_ij)) / 2h` for every entry of `p`.
pub fn finite_diff_grad(mut f: impl FnMut(&Matrix) -> f64, p: &Matrix, h: f64) -> Matrix {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = p.clone();
    let mut out = Matrix::zeros(p.rows(), p.cols());
    for i in 0..p.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, with both-near-zero treated as agreement.
pub fn rel_error(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape(), "rel_error shape mismatch");
    let diff = a.sub(b).expect("shapes checked").frobenius();
    let scale = a.frobenius().max(b.frobenius());
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}
