//! Adam with decoupled weight decay, global-norm clipping and a cosine
//! learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub type GradMap = BTreeMap<String, Tensor>;

/// Learning rate after `step` of `total` steps: linear warm-up, then cosine
/// decay from `base` to `min`.
pub fn cosine_lr(base: f64, min: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    min + 0.5 * (base - min) * (1.0 + (PI * progress).cos())
}

pub fn global_norm(grads: &GradMap) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their joint norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut GradMap, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

/// Only linear-layer matrices are decayed.
pub fn decays(name: &str) -> bool {
    name.ends_with(".w")
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &GradMap, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "optimizer update",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let decay = if decays(name) { lr * self.weight_decay } else { 0.0 };
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = md[i] / c1;
                let vhat = vd[i] / c2;
                pd[i] -= decay * pd[i] + lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Moments as named tensors (`m/<name>`, `v/<name>`) plus the step count.
    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, t) in &self.m {
            s.insert(format!("m/{n}"), t.clone());
        }
        for (n, t) in &self.v {
            s.insert(format!("v/{n}"), t.clone());
        }
        s.insert("step", Tensor::scalar(self.step as f64));
        s
    }

    pub fn from_store(store: &ParamStore, weight_decay: f64) -> Result<Self> {
        let mut opt = Self::new(weight_decay);
        for (name, t) in store.iter() {
            if let Some(n) = name.strip_prefix("m/") {
                opt.m.insert(n.to_string(), t.clone());
            } else if let Some(n) = name.strip_prefix("v/") {
                opt.v.insert(n.to_string(), t.clone());
            } else if name == "step" {
                opt.step = t.item() as u64;
            } else {
                return Err(Error::format(format!("unexpected optimizer entry {name}")));
            }
        }
        Ok(opt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1.0, 0.0, 0, 100, 0), 1.0);
        assert!((cosine_lr(1.0, 0.0, 50, 100, 0) - 0.5).abs() < 1e-12);
        assert!(cosine_lr(1.0, 0.0, 100, 100, 0).abs() < 1e-12);
        assert!((cosine_lr(1.0, 0.0, 4, 100, 10) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = GradMap::new();
        g.insert("a".into(), Tensor::vector(vec![3.0, 4.0]));
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
        assert_eq!(clip_global_norm(&mut g, 2.0), global_norm(&g));
    }

    #[test]
    fn adam_minimises_quadratic_and_zero_lr_is_inert() {
        let mut p = ParamStore::new();
        p.insert("x.w", Tensor::vector(vec![2.0, -3.0]));
        let before = p.clone();
        let mut opt = AdamW::new(0.05);
        let mut g = GradMap::new();
        g.insert("x.w".into(), Tensor::vector(vec![1.0, 1.0]));
        opt.update(&mut p, &g, 0.0).unwrap();
        assert_eq!(p, before);
        for _ in 0..2000 {
            let x = p.get("x.w").unwrap().clone();
            g.insert("x.w".into(), x.map(|v| 2.0 * v));
            opt.update(&mut p, &g, 0.01).unwrap();
        }
        assert!(p.get("x.w").unwrap().data().iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn state_round_trips() {
        let mut p = ParamStore::new();
        p.insert("x.b", Tensor::vector(vec![1.0]));
        let mut opt = AdamW::new(0.0);
        let mut g = GradMap::new();
        g.insert("x.b".into(), Tensor::vector(vec![0.5]));
        opt.update(&mut p, &g, 0.1).unwrap();
        let back = AdamW::from_store(&opt.to_store(), 0.0).unwrap();
        assert_eq!(back, opt);
    }
}
