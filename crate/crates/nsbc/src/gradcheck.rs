//! Central finite-difference comparison against analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Maximum over coordinates of `|analytic - central| / max(1, |analytic|)`,
/// where `central` is the two-sided difference quotient of `f` at `x` with
/// step `h`.
pub fn finite_diff_check<T: Scalar>(
    f: &mut dyn FnMut(&Tensor<T>) -> T,
    x: &Tensor<T>,
    analytic: &Tensor<T>,
    h: T,
) -> Result<T> {
    if h <= T::zero() {
        return Err(Error::invalid("finite_diff_check", "step must be positive"));
    }
    if x.shape() != analytic.shape() {
        return Err(Error::shape(
            "finite_diff_check",
            format!("{:?} vs {:?}", x.shape(), analytic.shape()),
        ));
    }
    let two = T::from_f64(2.0);
    let mut worst = T::zero();
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        let central = (plus - minus) / (two * h);
        let a = analytic.data()[i];
        let err = (a - central).abs() / T::one().max(a.abs());
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_tight() {
        // f(x) = sum(x_i^2), analytic gradient 2x
        let x = Tensor::new(vec![3], vec![0.3f64, -1.2, 2.0]).unwrap();
        let analytic = x.map(|v| 2.0 * v);
        let mut f = |t: &Tensor<f64>| t.data().iter().map(|v| v * v).sum::<f64>();
        let err = finite_diff_check(&mut f, &x, &analytic, 1e-4).unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap();
        let analytic = Tensor::zeros(&[2]);
        let mut f = |_: &Tensor<f64>| 7.5;
        let err = finite_diff_check(&mut f, &x, &analytic, 1e-4).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn relu_far_from_kink_is_locally_linear() {
        let x = Tensor::new(vec![2], vec![2.0f64, -3.0]).unwrap();
        let analytic = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let mut f = |t: &Tensor<f64>| t.data().iter().map(|&v| v.max(0.0)).sum::<f64>();
        let err = finite_diff_check(&mut f, &x, &analytic, 1e-4).unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::new(vec![1], vec![1.0f64]).unwrap();
        let analytic = Tensor::zeros(&[1]);
        let mut f = |_: &Tensor<f64>| 0.0;
        assert!(finite_diff_check(&mut f, &x, &analytic, 0.0).is_err());
    }
}
