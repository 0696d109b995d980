//! Bias-corrected Adam on flat parameter slices.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], hp: &AdamParams) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - hp.beta1.powf(self.t as f64);
        let c2 = 1.0 - hp.beta2.powf(self.t as f64);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = hp.beta1 * self.m[i] + (1.0 - hp.beta1) * g;
            self.v[i] = hp.beta2 * self.v[i] + (1.0 - hp.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![0.3, -2.0, 5.0];
        let before = p.clone();
        let mut s = AdamState::new(3);
        for _ in 0..10 {
            s.step(&mut p, &[0.0; 3], &AdamParams::default());
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let hp = AdamParams::default();
        let grads = [1e-3, -4.0, 250.0, -1e-2];
        let mut p = vec![0.0; 4];
        AdamState::new(4).step(&mut p, &grads, &hp);
        for (d, g) in p.iter().zip(grads) {
            assert!(d.abs() >= 0.9 * hp.lr && d.abs() <= hp.lr);
            assert!(d.signum() == -g.signum());
        }
    }

    #[test]
    fn minimizes_squared_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut w: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut s = AdamState::new(5);
        let hp = AdamParams::default();
        let norm = |w: &[f64]| w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut reached = None;
        for step in 1..=50_000 {
            let g: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
            s.step(&mut w, &g, &hp);
            if norm(&w) < 1e-6 {
                reached = Some(step);
                break;
            }
        }
        assert!(reached.is_some(), "final norm {}", norm(&w));
    }
}
