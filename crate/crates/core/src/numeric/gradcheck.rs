use super::matrix::Matrix;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Compares analytic gradients against central differences.
///
/// `loss` returns the loss value and its gradient for each parameter (same
/// order and shapes as `params`). Returns the largest
/// `|analytic − fd| / max(1, |fd|)` over all coordinates.
pub fn grad_check<F>(params: &[Matrix], h: f64, mut loss: F) -> Result<f64>
where
    F: FnMut(&[Matrix]) -> Result<(f64, Vec<Matrix>)>,
{
    let (value, analytic) = loss(params)?;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    if analytic.len() != params.len() {
        return Err(Error::LengthMismatch {
            left: analytic.len(),
            right: params.len(),
        });
    }

    let mut work: Vec<Matrix> = params.to_vec();
    let mut worst = 0.0f64;
    for p in 0..params.len() {
        if analytic[p].shape() != params[p].shape() {
            return Err(Error::ShapeMismatch {
                expected: params[p].shape(),
                got: analytic[p].shape(),
            });
        }
        for k in 0..params[p].len() {
            let orig = params[p].data()[k];
            work[p].data_mut()[k] = orig + h;
            let (up, _) = loss(&work)?;
            work[p].data_mut()[k] = orig - h;
            let (down, _) = loss(&work)?;
            work[p].data_mut()[k] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFiniteLoss);
            }
            let fd = (up - down) / (2.0 * h);
            let err = (analytic[p].data()[k] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64) -> Matrix {
        Matrix::new(1, 1, vec![x]).unwrap()
    }

    #[test]
    fn square_at_three() {
        let err = grad_check(&[scalar(3.0)], DEFAULT_STEP, |p| {
            let x = p[0].get(0, 0);
            Ok((x * x, vec![scalar(2.0 * x)]))
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_has_zero_error() {
        let err = grad_check(&[scalar(1.0), Matrix::zeros(2, 3)], DEFAULT_STEP, |p| {
            Ok((4.2, p.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect()))
        })
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let err = grad_check(&[scalar(3.0)], DEFAULT_STEP, |p| {
            let x = p[0].get(0, 0);
            Ok((x * x, vec![scalar(x)]))
        })
        .unwrap();
        assert!(err > 0.4);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let res = grad_check(&[scalar(0.0)], DEFAULT_STEP, |p| {
            let x = p[0].get(0, 0);
            Ok((if x < 0.0 { f64::NAN } else { x }, vec![scalar(1.0)]))
        });
        assert!(matches!(res, Err(Error::NonFiniteLoss)));
    }
}
