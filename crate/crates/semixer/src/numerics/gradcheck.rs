//! Central-difference gradient verification.
//!
//! The checker perturbs inputs one coordinate at a time and compares the
//! resulting difference quotient against the analytic gradient. It is the
//! reference every backward rule in this crate is tested against.

use super::tensor::Tensor;
use crate::{Error, Result};

fn validate_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!(
            "grad check step {eps:e} outside [1e-7, 1e-3]"
        )));
    }
    Ok(())
}

/// Max over `coords` of |analytic - central| / max(1, |central|), where
/// central = (f(x + eps e_i) - f(x - eps e_i)) / (2 eps).
pub fn grad_check_coords(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    analytic: &[f64],
    x: &Tensor,
    coords: &[usize],
    eps: f64,
) -> Result<f64> {
    validate_eps(eps)?;
    if analytic.len() != x.len() {
        return Err(Error::Shape {
            op: "grad_check analytic length",
            lhs: vec![analytic.len()],
            rhs: x.shape().to_vec(),
        });
    }
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for &i in coords {
        assert!(i < x.len(), "coordinate {i} out of range");
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        let central = (fp - fm) / (2.0 * eps);
        if !central.is_finite() || !analytic[i].is_finite() {
            return Err(Error::NonFinite(format!(
                "grad check coordinate {i}: analytic {} vs central {central}",
                analytic[i]
            )));
        }
        let rel = (analytic[i] - central).abs() / central.abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Check every coordinate of `x`.
pub fn grad_check(
    f: impl FnMut(&Tensor) -> Result<f64>,
    analytic: &[f64],
    x: &Tensor,
    eps: f64,
) -> Result<f64> {
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(f, analytic, x, &coords, eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_eps() {
        let x = Tensor::scalar(1.0);
        let f = |x: &Tensor| -> Result<f64> { Ok(x.data()[0]) };
        assert!(grad_check(f, &[1.0], &x, 1e-8).is_err());
        let f2 = |x: &Tensor| -> Result<f64> { Ok(x.data()[0]) };
        assert!(grad_check(f2, &[1.0], &x, 1e-2).is_err());
    }

    #[test]
    fn detects_wrong_gradient() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let f = |x: &Tensor| -> Result<f64> { Ok(x.data().iter().map(|v| v * v).sum()) };
        // true grad is [2, 4]; feed a wrong one
        let err = grad_check(f, &[2.0, 5.0], &x, 1e-5).unwrap();
        assert!(err > 0.2);
    }

    #[test]
    fn subset_of_coordinates() {
        let x = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let f = |x: &Tensor| -> Result<f64> { Ok(x.data().iter().map(|v| v * v * v).sum()) };
        let analytic = [3.0, 12.0, 27.0, 48.0];
        let err = grad_check_coords(f, &analytic, &x, &[0, 3], 1e-4).unwrap();
        assert!(err < 1e-4, "err {err}");
    }
}
