//! Adam optimizer over a flat parameter vector.

pub struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(learning_rate: f64, dim: usize) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    /// Apply one update in place. `params` and `grads` must both match
    /// the dimension given at construction.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bias1 = 1.0 - self.beta1.powi(self.t as i32);
        let bias2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bias1;
            let v_hat = self.v[i] / bias2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first update has magnitude ~lr.
        let mut adam = Adam::new(0.1, 2);
        let mut params = vec![0.0, 1.0];
        adam.step(&mut params, &[0.5, -2.0]);
        assert!((params[0] - (-0.1)).abs() < 1e-6);
        assert!((params[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn converges_on_quadratic() {
        // minimize (x - 3)^2
        let mut adam = Adam::new(0.05, 1);
        let mut x = vec![0.0];
        for _ in 0..2000 {
            let g = 2.0 * (x[0] - 3.0);
            adam.step(&mut x, &[g]);
        }
        assert!((x[0] - 3.0).abs() < 1e-3, "x = {}", x[0]);
    }
}
