use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::{Param, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with bias correction. Moment buffers are keyed by parameter order,
/// so the same parameter list must be passed to every `step`.
#[derive(Debug, Clone)]
pub struct Adam<T: Real> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<ArrayD<T>>,
    second: Vec<ArrayD<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Param<T>]) {
        if self.first.is_empty() {
            self.first = params
                .iter()
                .map(|p| ArrayD::zeros(p.value.raw_dim()))
                .collect();
            self.second = self.first.clone();
        }
        assert_eq!(
            self.first.len(),
            params.len(),
            "parameter list changed between steps"
        );
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let lr = T::lit(c.lr);
        let wd = T::lit(c.weight_decay);
        let (bc1, bc2, eps) = (T::lit(bc1), T::lit(bc2), T::lit(c.eps));
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let p: &mut Param<T> = p;
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    let g = g + wd * *w;
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *w -= lr * mh / (vh.sqrt() + eps);
                });
        }
    }
}

/// Adam state for a single free-standing array (used by the mask optimizer).
#[derive(Debug, Clone)]
pub struct AdamState<T: Real> {
    config: AdamConfig,
    step: u64,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self {
            config,
            step: 0,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }

    pub fn update(&mut self, values: &mut [T], grads: &[T]) {
        assert_eq!(values.len(), self.m.len());
        self.step += 1;
        let c = &self.config;
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let (b1, b2, lr, eps) = (
            T::lit(c.beta1),
            T::lit(c.beta2),
            T::lit(c.lr),
            T::lit(c.eps),
        );
        for i in 0..values.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            values[i] -= lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn minimises_quadratic() {
        let mut p = Param::new(arr1(&[3.0f64, -2.0]));
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        for _ in 0..500 {
            p.grad = p.value.mapv(|w| 2.0 * w);
            opt.step(&mut [&mut p]);
        }
        assert!(p.value.iter().all(|w| w.abs() < 1e-2), "{:?}", p.value);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = Param::new(arr1(&[1.5f32, 0.25]));
        let before = p.value.clone();
        let mut opt = Adam::new(AdamConfig {
            lr: 0.0,
            ..Default::default()
        });
        p.grad.fill(3.0);
        opt.step(&mut [&mut p]);
        assert_eq!(p.value, before);
    }
}
