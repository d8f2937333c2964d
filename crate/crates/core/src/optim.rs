//! Poly learning-rate schedule and AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use fino_tensor::{ParamStore, Tensor};

use crate::error::{FinoError, Result};

/// `base * (1 - step / total)^power`.
pub fn poly_lr(step: usize, total: usize, base: f64, power: f64) -> Result<f64> {
    if step > total {
        return Err(FinoError::Config(format!("step {step} is past the schedule end {total}")));
    }
    if total == 0 {
        return Ok(base);
    }
    Ok(base * (1.0 - step as f64 / total as f64).powf(power))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if !ok {
            return Err(FinoError::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Moment estimates, keyed like the parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    /// Steps skipped because a gradient was not finite.
    pub skipped: usize,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            skipped: 0,
        }
    }

    /// Applies one update with learning rate `lr`. Returns `false` (and
    /// leaves everything untouched) when any gradient is non-finite.
    pub fn update(&mut self, store: &mut ParamStore, lr: f64) -> bool {
        if store.iter().any(|(_, p)| !p.grad.is_finite()) {
            self.skipped += 1;
            return false;
        }
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let decay = 1.0 - lr * weight_decay;
        for (name, p) in store.iter_mut() {
            let m = self.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.value.shape()));
            let v = self.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.value.shape()));
            let (w, g) = (p.value.data_mut(), p.grad.data());
            for i in 0..w.len() {
                let mi = &mut m.data_mut()[i];
                let vi = &mut v.data_mut()[i];
                *mi = beta1 * *mi + (1.0 - beta1) * g[i];
                *vi = beta2 * *vi + (1.0 - beta2) * g[i] * g[i];
                w[i] *= decay;
                w[i] -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(w)).unwrap();
        s
    }

    #[test]
    fn schedule() {
        assert_eq!(poly_lr(0, 300, 0.001, 0.9).unwrap(), 0.001);
        assert_eq!(poly_lr(300, 300, 0.001, 0.9).unwrap(), 0.0);
        assert!((poly_lr(50, 100, 0.001, 1.0).unwrap() - 0.0005).abs() < 1e-18);
        assert!(poly_lr(301, 300, 0.001, 0.9).is_err());
        let lrs: Vec<f64> = (0..=40).map(|s| poly_lr(s, 40, 0.01, 0.9).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn zero_grad_behaviour() {
        let mut s = scalar_store(2.0);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        opt.update(&mut s, 0.1);
        assert_eq!(s.value("w").unwrap().item(), 2.0);
        let mut s = scalar_store(2.0);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.01, ..Default::default() });
        opt.update(&mut s, 0.1);
        assert_eq!(s.value("w").unwrap().item(), 2.0 * (1.0 - 0.1 * 0.01));
    }

    #[test]
    fn quadratic_matches_scalar_reference() {
        let mut s = scalar_store(1.0);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=50 {
            let g = 2.0 * s.value("w").unwrap().item();
            s.get_mut("w").unwrap().grad = Tensor::scalar(g);
            opt.update(&mut s, 0.1);
            let gr = 2.0 * w;
            m = 0.9 * m + 0.1 * gr;
            v = 0.999 * v + 0.001 * gr * gr;
            w -= 0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            assert!((s.value("w").unwrap().item() - w).abs() < 1e-12);
        }
        assert!(w.abs() < 0.05);
    }

    #[test]
    fn non_finite_grad_skips() {
        let mut s = scalar_store(1.0);
        s.get_mut("w").unwrap().grad = Tensor::scalar(f64::NAN);
        let mut opt = AdamW::new(AdamWConfig::default());
        assert!(!opt.update(&mut s, 0.1));
        assert_eq!((opt.skipped, opt.step), (1, 0));
        assert_eq!(s.value("w").unwrap().item(), 1.0);
    }
}
