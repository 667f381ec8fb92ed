use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay: `p ← p − lr·wd·p` before the Adam update.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update. Parameters without an entry in `grads` are left alone.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::shape("adam_step", format!("no parameter named `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("`{name}`: parameter {:?}, gradient {:?}", p.shape(), g.shape()),
                ));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let n = p.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (k, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                *pv -= lr * weight_decay * *pv;
                m[k] = beta1 * m[k] + (1.0 - beta1) * gv;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gv * gv;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> (ParamStore, BTreeMap<String, Tensor>) {
        let mut p = ParamStore::new();
        p.insert(name, Tensor::from_vec(vec![v]));
        (p, BTreeMap::new())
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut p, mut g) = one("w", 0.7);
        g.insert("w".into(), Tensor::from_vec(vec![0.0]));
        let mut adam = AdamState::new(AdamConfig { lr: 0.1, ..AdamConfig::default() });
        for _ in 0..10 {
            adam.step(&mut p, &g).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data(), &[0.7]);
    }

    #[test]
    fn first_step_is_lr_sized() {
        let (mut p, mut g) = one("w", 0.0);
        g.insert("w".into(), Tensor::from_vec(vec![1.0]));
        let mut adam = AdamState::new(AdamConfig { lr: 0.1, ..AdamConfig::default() });
        adam.step(&mut p, &g).unwrap();
        // m̂ = 1, v̂ = 1  ⇒  Δ = −0.1 / (1 + 1e-8)
        let delta = p.get("w").unwrap().data()[0];
        assert!((delta + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_descends() {
        let (mut p, mut g) = one("w", 0.0);
        g.insert("w".into(), Tensor::from_vec(vec![-2.0]));
        let mut adam = AdamState::new(AdamConfig { lr: 0.01, ..AdamConfig::default() });
        let mut last = 0.0;
        for _ in 0..50 {
            adam.step(&mut p, &g).unwrap();
            let now = p.get("w").unwrap().data()[0];
            assert!(now > last);
            last = now;
        }
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let (mut p, mut g) = one("w", 2.0);
        g.insert("w".into(), Tensor::from_vec(vec![0.0]));
        let mut adam = AdamState::new(AdamConfig { lr: 0.1, weight_decay: 0.5, ..AdamConfig::default() });
        adam.step(&mut p, &g).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let (mut p, mut g) = one("w", 0.0);
        g.insert("w".into(), Tensor::from_vec(vec![1.0, 2.0]));
        let mut adam = AdamState::new(AdamConfig::default());
        assert!(adam.step(&mut p, &g).is_err());
        assert_eq!(adam.step, 0);
    }
}
