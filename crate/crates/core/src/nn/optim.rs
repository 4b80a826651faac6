use super::params::ModelParams;
use super::Tensor;

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients.
    pub fn step(&mut self, params: &mut ModelParams) {
        if self.m.is_empty() {
            self.m = params
                .iter()
                .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
                .collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.requires_grad {
                continue;
            }
            for (((x, g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *x -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ModelParams, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm > max_norm && norm > 0.0 {
        params.scale_grads(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = ModelParams::new();
        let id = params.add("x", Tensor::from_rows(&[[1.0, -2.0]]));
        params.get_mut(id).grad = Tensor::from_rows(&[[0.5, -3.0]]);
        let mut adam = Adam::new(0.1);
        adam.step(&mut params);
        let v = params.value(id).data();
        assert!((v[0] - 0.9).abs() < 1e-6);
        assert!((v[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut params = ModelParams::new();
        let id = params.add("x", Tensor::from_rows(&[[5.0, -3.0]]));
        let mut adam = Adam::new(0.1);
        for _ in 0..500 {
            let x = params.value(id).clone();
            params.get_mut(id).grad = x.map(|v| 2.0 * (v - 1.0));
            adam.step(&mut params);
        }
        for &v in params.value(id).data() {
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut params = ModelParams::new();
        let id = params.add("x", Tensor::zeros(1, 2));
        params.get_mut(id).grad = Tensor::from_rows(&[[3.0, 4.0]]);
        assert_eq!(clip_grad_norm(&mut params, 1.0), 5.0);
        assert!((params.grad_norm() - 1.0).abs() < 1e-12);
    }
}
