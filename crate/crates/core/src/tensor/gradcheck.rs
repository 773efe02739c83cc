//! Central-finite-difference gradient verification.
//!
//! Only meaningful in `f64`; the `f32` engine shares the same op code, so a
//! pass here certifies both.

use super::{Elem, Tensor};

/// Compares the analytic gradient of a scalar-valued function against
/// central finite differences perturbing every coordinate of `x`.
///
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<E, F>(f: F, x: &Tensor<E>, h: f64) -> f64
where
    E: Elem,
    F: Fn(&Tensor<E>) -> Tensor<E>,
{
    let probe = Tensor::param(x.shape().to_vec(), x.to_vec());
    let loss = f(&probe);
    assert_eq!(loss.numel(), 1, "grad_check requires a scalar-valued function");
    loss.backward();
    let analytic = probe
        .grad()
        .expect("grad_check: function does not depend on x");

    let n = x.numel();
    let base = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..n {
        let mut plus = base.clone();
        plus[i] = plus[i] + E::from_f64(h);
        let mut minus = base.clone();
        minus[i] = minus[i] - E::from_f64(h);
        let fp = f(&Tensor::new(x.shape().to_vec(), plus)).item().to_f64();
        let fm = f(&Tensor::new(x.shape().to_vec(), minus)).item().to_f64();
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i].to_f64();
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let rel = (a - numeric).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_exact_unit_gradient() {
        // Power-of-two step and dyadic inputs keep every difference exact,
        // so the check reports literally zero error for f = sum(x).
        let x: Tensor<f64> = Tensor::new(vec![2, 3], vec![0.25, -1.5, 4.0, 0.0, 2.5, -0.75]);
        let err = grad_check(|t| t.sum_all(), &x, 0.25);
        assert_eq!(err, 0.0);
    }

    #[test]
    fn sum_of_squares_matches_to_roundoff() {
        // f = sum(x^2) at [1,2]: analytic [2,4]; central differences are
        // exact for quadratics up to roundoff.
        let x: Tensor<f64> = Tensor::new(vec![2], vec![1.0, 2.0]);
        let err = grad_check(|t| t.mul(t).sum_all(), &x, 1e-5);
        assert!(err < 1e-8, "relative error {err}");
    }
}
