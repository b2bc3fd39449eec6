use super::{Matrix, ParamSet};

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros: Vec<Matrix> = params
            .values()
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Matrix]) {
        assert_eq!(grads.len(), params.len(), "one gradient per tensor");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                *w -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", Matrix::row_vector(&[3.0, -2.0]));
        let mut opt = Adam::new(&ps, 0.1);
        for _ in 0..500 {
            let g = ps.get(id).map(|v| 2.0 * (v - 1.0));
            opt.step(&mut ps, &[g]);
        }
        assert!(ps.get(id).data().iter().all(|v| (v - 1.0).abs() < 1e-3));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", Matrix::row_vector(&[0.0]));
        let mut opt = Adam::new(&ps, 0.01);
        opt.step(&mut ps, &[Matrix::row_vector(&[5.0])]);
        assert!((ps.get(id).get(0, 0) + 0.01).abs() < 1e-9);
    }
}
