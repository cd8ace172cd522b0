//! Adam with optional global-norm gradient clipping.

use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: Option<f64>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(shapes: &[usize], clip: Option<f64>) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// One update of `params` against `grads` (same order and sizes as
    /// given to [`Adam::new`]); returns the pre-clipping gradient norm.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> f64 {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let scale = match self.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj * scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                *w -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimises_a_quadratic() {
        let mut x = Tensor::vector(vec![3.0, -2.0]);
        let mut opt = Adam::new(&[2], None);
        for _ in 0..2000 {
            let g = x.scale(2.0);
            opt.step(&mut [&mut x], &[g], 0.05);
        }
        assert!(x.data().iter().all(|v| v.abs() < 1e-3), "{:?}", x.data());
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut x = Tensor::vector(vec![1.0]);
        let mut opt = Adam::new(&[1], None);
        opt.step(&mut [&mut x], &[Tensor::vector(vec![5.0])], 0.1);
        assert!((x.data()[0] - 0.9).abs() < 1e-6);
    }
}
