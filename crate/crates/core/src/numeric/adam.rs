use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam moments for an ordered list of parameters.
///
/// The bias-corrected step is followed by decoupled weight decay
/// `p ← p − lr·wd·p` applied to the updated value.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl AdamState {
    /// Zero moments shaped like `params`.
    pub fn new(config: AdamConfig, params: &[&Matrix]) -> Self {
        Self {
            config,
            step: 0,
            first: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            second: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Matrix], &[Matrix]) {
        (&self.first, &self.second)
    }

    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::LengthMismatch {
                left: params.len(),
                right: grads.len(),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(Error::ShapeMismatch {
                    expected: p.shape(),
                    got: g.shape(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFinite("gradient"));
            }
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let decay = lr * weight_decay;

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for (k, &gk) in g.data().iter().enumerate() {
                md[k] = beta1 * md[k] + (1.0 - beta1) * gk;
                vd[k] = beta2 * vd[k] + (1.0 - beta2) * gk * gk;
                let m_hat = md[k] / c1;
                let v_hat = vd[k] / c2;
                pd[k] -= lr * m_hat / (v_hat.sqrt() + eps);
                pd[k] -= decay * pd[k];
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64) -> Matrix {
        Matrix::new(1, 1, vec![x]).unwrap()
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = Matrix::new(2, 2, vec![0.3, -1.0, 2.5, 7.0]).unwrap();
        let before = p.clone();
        let mut state = AdamState::new(cfg, &[&p]);
        for _ in 0..5 {
            state.step(&mut [&mut p], &[Matrix::zeros(2, 2)]).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(state.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g and v̂ = g² after one step, so the move is lr·g/(|g| + ε).
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = scalar(1.0);
        let mut state = AdamState::new(cfg, &[&p]);
        state.step(&mut [&mut p], &[scalar(0.5)]).unwrap();
        let expected = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((p.get(0, 0) - expected).abs() < 1e-15);
        assert!((1.0 - p.get(0, 0) - 1e-3).abs() < 1e-10);
    }

    #[test]
    fn parameters_update_independently() {
        let cfg = AdamConfig::default();
        let (mut a, mut b) = (scalar(1.0), scalar(-2.0));
        let mut joint = AdamState::new(cfg, &[&a, &b]);
        let (mut a1, mut b1) = (scalar(1.0), scalar(-2.0));
        let mut sa = AdamState::new(cfg, &[&a1]);
        let mut sb = AdamState::new(cfg, &[&b1]);
        for k in 0..4 {
            let ga = scalar(0.1 * k as f64 - 0.2);
            let gb = scalar(3.0 - k as f64);
            joint.step(&mut [&mut a, &mut b], &[ga.clone(), gb.clone()]).unwrap();
            sa.step(&mut [&mut a1], &[ga]).unwrap();
            sb.step(&mut [&mut b1], &[gb]).unwrap();
        }
        assert_eq!(a, a1);
        assert_eq!(b, b1);
    }

    #[test]
    fn decoupled_decay_shrinks_after_step() {
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut p = scalar(2.0);
        let mut state = AdamState::new(cfg, &[&p]);
        state.step(&mut [&mut p], &[scalar(0.0)]).unwrap();
        assert!((p.get(0, 0) - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn rejects_shape_mismatch() {
        let mut p = Matrix::zeros(2, 2);
        let mut state = AdamState::new(AdamConfig::default(), &[&p]);
        assert!(matches!(
            state.step(&mut [&mut p], &[Matrix::zeros(1, 2)]),
            Err(Error::ShapeMismatch { .. })
        ));
        assert_eq!(state.step_count(), 0);
    }
}
