//! Adam optimizer over named parameter sets.

use crate::tensor::Tensor;

pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &[(String, Tensor)]) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        }
    }

    /// Apply one update from the accumulated gradients, then clear them.
    /// Parameters with no gradient this step are left untouched.
    pub fn step(&mut self, params: &[(String, Tensor)]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, (_, tensor)) in params.iter().enumerate() {
            let Some(grad) = tensor.grad() else { continue };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            tensor.update_data(|data| {
                for i in 0..data.len() {
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            });
            tensor.zero_grad();
        }
    }
}
