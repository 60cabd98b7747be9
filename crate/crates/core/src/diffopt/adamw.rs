use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }
}

/// Adam with decoupled weight decay.
///
/// Each parameter is updated as
/// `theta -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, params: &[Tensor]) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.rows(), t.cols());
        Self { config, step: 0, m: params.iter().map(zeros).collect(), v: params.iter().map(zeros).collect() }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::DimensionMismatch { expected: self.m.len(), actual: grads.len().min(params.len()) });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::ShapeMismatch { op: "adamw_step", lhs: p.shape(), rhs: g.shape() });
            }
        }
        self.step += 1;
        let AdamWConfig { lr, beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let p = p.data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * p[i]);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data().iter()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_on_square_moves_by_lr() {
        // f(theta) = theta^2, gradient 2 at theta = 1.
        let mut p = vec![Tensor::scalar(1.0)];
        let mut opt = AdamWState::new(AdamWConfig::new(0.1, 0.0), &p);
        opt.step(&mut p, &[Tensor::scalar(2.0)]).unwrap();
        assert!((p[0].item() - 0.9).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = vec![Tensor::row(vec![1.0, -3.0])];
        let mut opt = AdamWState::new(AdamWConfig::new(0.1, 0.0), &p);
        opt.step(&mut p, &[Tensor::zeros(1, 2)]).unwrap();
        assert_eq!(p[0].data(), &[1.0, -3.0]);
    }

    #[test]
    fn decoupled_decay_shrinks_geometrically() {
        let mut p = vec![Tensor::scalar(2.0)];
        let mut opt = AdamWState::new(AdamWConfig::new(0.1, 0.1), &p);
        opt.step(&mut p, &[Tensor::scalar(0.0)]).unwrap();
        assert!((p[0].item() - 2.0 * (1.0 - 0.01)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = vec![Tensor::zeros(2, 2)];
        let mut opt = AdamWState::new(AdamWConfig::new(0.1, 0.0), &p);
        assert!(opt.step(&mut p, &[Tensor::zeros(1, 2)]).is_err());
    }

    #[test]
    fn update_is_independent_of_parameter_order() {
        let a = Tensor::row(vec![0.5, -1.0]);
        let b = Tensor::row(vec![2.0]);
        let ga = Tensor::row(vec![0.3, 0.1]);
        let gb = Tensor::row(vec![-0.7]);
        let cfg = AdamWConfig::new(0.01, 0.05);
        let mut fwd = vec![a.clone(), b.clone()];
        let mut rev = vec![b, a];
        let mut o1 = AdamWState::new(cfg, &fwd);
        let mut o2 = AdamWState::new(cfg, &rev);
        for _ in 0..3 {
            o1.step(&mut fwd, &[ga.clone(), gb.clone()]).unwrap();
            o2.step(&mut rev, &[gb.clone(), ga.clone()]).unwrap();
        }
        assert_eq!(fwd[0], rev[1]);
        assert_eq!(fwd[1], rev[0]);
    }

    #[test]
    fn clipping_caps_the_joint_norm_and_keeps_direction() {
        let mut g = vec![Tensor::row(vec![3.0, 0.0]), Tensor::row(vec![4.0])];
        let before = clip_grad_norm(&mut g, 1.0);
        assert!((before - 5.0).abs() < 1e-12);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-12);
        assert!((g[1].data()[0] - 0.8).abs() < 1e-12);
        let mut small = vec![Tensor::row(vec![0.1])];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0].data()[0], 0.1);
    }
}
