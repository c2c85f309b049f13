//! Vector-level primitives shared by retrieval, distillation and evaluation.

use super::matrix::{dot, norm};
use crate::error::{Error, Result};

/// Norms below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-30;

fn check_finite(v: &[f64], what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(())
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    check_finite(v, "l2_normalize input")?;
    let n = norm(v);
    if n < ZERO_NORM {
        return Err(Error::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// `a·b / (‖a‖‖b‖)` clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a, b)?;
    check_finite(a, "cosine input")?;
    check_finite(b, "cosine input")?;
    let (na, nb) = (norm(a), norm(b));
    if na < ZERO_NORM || nb < ZERO_NORM {
        return Err(Error::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    check_finite(z, "softmax input")?;
    if z.is_empty() {
        return Err(Error::EmptyInput);
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `ln Σ exp(z)` with max subtraction.
pub(crate) fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.iter().map(|x| (x - max).exp()).sum();
    max + s.ln()
}

/// `-ln p[y]`.
pub fn cross_entropy(y: usize, p: &[f64]) -> Result<f64> {
    check_finite(p, "probabilities")?;
    if y >= p.len() {
        return Err(Error::IndexOutOfRange {
            index: y,
            len: p.len(),
        });
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || p.iter().any(|&x| x < 0.0) {
        return Err(Error::InvalidDistribution { sum });
    }
    // p[y] == 0 gives +inf, which is the honest value of the loss.
    Ok(-p[y].ln())
}

/// Cosine distillation loss `1 - cos(t_hat, t)`.
pub fn kd_loss(t: &[f64], t_hat: &[f64]) -> Result<f64> {
    let c = cosine_similarity(t_hat, t)?;
    Ok(1.0 - c)
}

/// Gradients of [`kd_loss`] with respect to `(t, t_hat)`.
pub fn kd_loss_grad(t: &[f64], t_hat: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dims(t, t_hat)?;
    let (nt, nh) = (norm(t), norm(t_hat));
    if nt < ZERO_NORM || nh < ZERO_NORM {
        return Err(Error::ZeroVector);
    }
    let c = dot(t, t_hat) / (nt * nh);
    let inv = 1.0 / (nt * nh);
    let d_hat = t
        .iter()
        .zip(t_hat)
        .map(|(&a, &b)| -(a * inv - c * b / (nh * nh)))
        .collect();
    let d_t = t
        .iter()
        .zip(t_hat)
        .map(|(&a, &b)| -(b * inv - c * a / (nt * nt)))
        .collect();
    Ok((d_t, d_hat))
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[1.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0]);
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::ZeroVector)));
        assert!(matches!(l2_normalize(&[1e-31, 0.0]), Err(Error::ZeroVector)));
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]),
            Err(Error::ZeroVector)
        ));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(softmax(&[1.0, 2.0]).unwrap(), softmax(&[11.0, 12.0]).unwrap());
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1] < 1e-300);
        assert!(softmax(&[f64::NAN]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(0, &[1.0, 0.0]).unwrap(), 0.0);
        assert!((cross_entropy(0, &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((cross_entropy(0, &[0.25, 0.75]).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(matches!(
            cross_entropy(2, &[0.5, 0.5]),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            cross_entropy(0, &[0.5, 0.6]),
            Err(Error::InvalidDistribution { .. })
        ));
    }

    #[test]
    fn kd_examples() {
        assert_eq!(kd_loss(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(kd_loss(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]).unwrap(), 2.0);
        assert_eq!(kd_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
    }

    #[test]
    fn kd_grad_matches_central_difference() {
        let t = [0.3, -1.2, 0.7];
        let h = [1.1, 0.4, -0.2];
        let (gt, gh) = kd_loss_grad(&t, &h).unwrap();
        let eps = 1e-6;
        for k in 0..3 {
            let mut p = h;
            let mut m = h;
            p[k] += eps;
            m[k] -= eps;
            let fd = (kd_loss(&t, &p).unwrap() - kd_loss(&t, &m).unwrap()) / (2.0 * eps);
            assert!((fd - gh[k]).abs() < 1e-8);
            let mut p = t;
            let mut m = t;
            p[k] += eps;
            m[k] -= eps;
            let fd = (kd_loss(&p, &h).unwrap() - kd_loss(&m, &h).unwrap()) / (2.0 * eps);
            assert!((fd - gt[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn argmax_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }
}
