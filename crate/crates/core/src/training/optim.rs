//! Adam with linear warmup, inverse-square-root decay and global-norm clipping.

use std::collections::HashMap;

use crate::compute::{ParamStore, Real};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            warmup: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 1.0,
        }
    }
}

impl AdamConfig {
    /// Learning rate at 1-based step `t`.
    pub fn rate(&self, t: usize) -> f64 {
        let t = t.max(1) as f64;
        let w = self.warmup.max(1) as f64;
        self.lr * (t / w).min((w / t).sqrt())
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: usize,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// One update of every parameter. Parameters absent from `grads` are
    /// treated as having zero gradient. Returns the pre-clip gradient norm.
    pub fn update<T: Real>(&mut self, params: &mut ParamStore<T>, grads: &HashMap<String, Vec<T>>) -> Result<f64> {
        let mut sq = 0.0f64;
        for g in grads.values() {
            for &x in g {
                let x = x.as_f64();
                if !x.is_finite() {
                    return Err(Error::Training(format!("non-finite gradient at step {}", self.step + 1)));
                }
                sq += x * x;
            }
        }
        let norm = sq.sqrt();
        let scale = if norm > self.config.clip { self.config.clip / norm } else { 1.0 };
        self.step += 1;
        let c = &self.config;
        let lr = c.rate(self.step);
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let n = p.numel();
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let g = grads.get(name);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i].as_f64() * scale);
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                *w -= T::lit(lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps));
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::Tensor;

    fn store(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(x)).unwrap();
        s
    }

    fn grad(x: f64) -> HashMap<String, Vec<f64>> {
        HashMap::from([("w".to_string(), vec![x])])
    }

    #[test]
    fn zero_gradients_leave_parameters() {
        let mut s = store(0.7);
        let mut a = Adam::new(AdamConfig::default());
        for _ in 0..3 {
            a.update(&mut s, &grad(0.0)).unwrap();
            a.update(&mut s, &HashMap::new()).unwrap();
        }
        assert_eq!(s.get("w").unwrap().data()[0], 0.7);
    }

    #[test]
    fn scalar_recurrence_oracle() {
        let c = AdamConfig { lr: 0.01, warmup: 4, ..AdamConfig::default() };
        let mut s = store(1.0);
        let mut a = Adam::new(c.clone());
        let (mut m, mut v, mut w) = (0.0f64, 0.0f64, 1.0f64);
        for t in 1..=6 {
            a.update(&mut s, &grad(0.5)).unwrap();
            m = 0.9 * m + 0.1 * 0.5;
            v = 0.999 * v + 0.001 * 0.25;
            let lr = 0.01 * if t <= 4 { t as f64 / 4.0 } else { (4.0 / t as f64).sqrt() };
            w -= lr * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            assert!((s.get("w").unwrap().data()[0] - w).abs() < 1e-15, "step {t}");
        }
        // First step with unit gradient moves by lr·1/(1+ε) after warmup scaling.
        let mut s = store(0.0);
        let mut a = Adam::new(AdamConfig { warmup: 1, ..AdamConfig::default() });
        a.update(&mut s, &grad(1.0)).unwrap();
        assert!((s.get("w").unwrap().data()[0] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn clipping_keeps_direction() {
        let mut s1 = ParamStore::new();
        s1.insert("w", Tensor::vector(vec![0.0f64, 0.0])).unwrap();
        let mut s2 = s1.clone();
        let small = HashMap::from([("w".to_string(), vec![0.3, -0.4])]);
        let big = HashMap::from([("w".to_string(), vec![0.3e6, -0.4e6])]);
        let (mut a1, mut a2) = (Adam::new(AdamConfig::default()), Adam::new(AdamConfig::default()));
        // 0.6/-0.8 is the unit-norm version of both.
        let unit = HashMap::from([("w".to_string(), vec![0.6, -0.8])]);
        a1.update(&mut s1, &big).unwrap();
        a2.update(&mut s2, &unit).unwrap();
        let (w1, w2) = (s1.get("w").unwrap().data().to_vec(), s2.get("w").unwrap().data().to_vec());
        assert!(w1.iter().zip(&w2).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(a1.update(&mut s1, &small).unwrap(), 0.5);
    }

    #[test]
    fn non_finite_gradient_is_a_training_error() {
        let mut s = store(0.0);
        let mut a = Adam::new(AdamConfig::default());
        assert!(matches!(a.update(&mut s, &grad(f64::NAN)), Err(Error::Training(_))));
    }
}
