use std::collections::HashMap;

use super::Tensor;

/// Adam with bias correction. Moment buffers are keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every `(name, param, grad)` triple.
    pub fn step<'a, I>(&mut self, updates: I)
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor, &'a Tensor)>,
    {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, param, grad) in updates {
            let n = param.len();
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; n]);
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; n]);
            for (((p, &g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let mut opt = Adam::new(0.1);
        let mut x = Tensor::scalar(5.0);
        for _ in 0..500 {
            let g = Tensor::scalar(2.0 * x.item());
            opt.step([("x", &mut x, &g)]);
        }
        assert!(x.item().abs() < 1e-2);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut opt = Adam::new(0.0);
        let mut x = Tensor::scalar(1.25);
        let g = Tensor::scalar(3.0);
        opt.step([("x", &mut x, &g)]);
        assert_eq!(x.item().to_bits(), 1.25f64.to_bits());
    }
}
