//! Adam optimizer over a parameter registry.

use crate::numerics::Tensor;

/// Adam with bias correction. Moment buffers are allocated per parameter
/// tensor and keyed by position in the parameter list, so the same list
/// must be passed to every step.
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
    pub fn new(lr: f64) -> Adam {
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

    /// Apply one update from the gradients currently stored on `params`.
    /// Parameters without a gradient this step keep their value and their
    /// moment estimates.
    pub fn step(&mut self, params: &[&Tensor]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(
            self.m.len(),
            params.len(),
            "optimizer was built for {} tensors, got {}",
            self.m.len(),
            params.len()
        );
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter().enumerate() {
            let Some(grad) = p.grad() else { continue };
            let mut data = p.to_vec();
            for (j, g) in grad.iter().enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                data[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.set_data(&data);
        }
    }
}
