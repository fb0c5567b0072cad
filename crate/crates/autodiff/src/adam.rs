//! Adam optimizer over flat parameter tensors. Updates are elementwise and
//! sequential, so training is bitwise reproducible.

use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam state for one list of parameter tensors, matched by position.
#[derive(Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &[Tensor]) -> Self {
        let m = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        let v = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Adam { cfg, m, v, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update. `grads[i]` must match `params[i]` in shape; a `None` grad
    /// leaves that parameter (and its moments) untouched.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>]) {
        assert_eq!(params.len(), self.m.len(), "optimizer built for {} params, got {}", self.m.len(), params.len());
        assert_eq!(params.len(), grads.len(), "{} params but {} grads", params.len(), grads.len());
        self.t += 1;
        let t = self.t as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            let Some(g) = g else { continue };
            assert_eq!(p.shape(), g.shape(), "grad shape {:?} != param shape {:?}", g.shape(), p.shape());
            let (b1, b2, eps, lr) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps, self.cfg.lr);
            for ((pv, gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()))
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        // f(p) = sum((p - 3)^2); gradient 2(p - 3).
        let mut params = vec![Tensor::zeros(vec![4])];
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &params);
        for _ in 0..400 {
            let grad = Tensor::new(
                vec![4],
                params[0].data().iter().map(|p| 2.0 * (p - 3.0)).collect(),
            );
            adam.step(&mut params, &[Some(grad)]);
        }
        for p in params[0].data() {
            assert!((p - 3.0).abs() < 1e-3, "did not converge: {p}");
        }
    }

    #[test]
    fn identical_runs_are_bitwise_equal() {
        let run = || {
            let mut params = vec![Tensor::new(vec![3], vec![0.3, -0.7, 1.1])];
            let mut adam = Adam::new(AdamConfig::default(), &params);
            for step in 0..50 {
                let grad = Tensor::new(
                    vec![3],
                    params[0].data().iter().map(|p| p * 0.5 + step as f64 * 1e-3).collect(),
                );
                adam.step(&mut params, &[Some(grad)]);
            }
            params[0].data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn none_grad_skips_parameter() {
        let mut params = vec![Tensor::full(vec![2], 1.0), Tensor::full(vec![2], 1.0)];
        let mut adam = Adam::new(AdamConfig::default(), &params);
        adam.step(&mut params, &[None, Some(Tensor::full(vec![2], 1.0))]);
        assert_eq!(params[0].data(), &[1.0, 1.0]);
        assert_ne!(params[1].data(), &[1.0, 1.0]);
    }
}
