//! SGD with momentum, Adam, and the cosine learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use super::graph::Gradients;
use super::tensor::Tensor;
use crate::error::{EasError, Result};

pub type ParamMap<T = f32> = BTreeMap<String, Tensor<T>>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    SgdMomentum { momentum: f32, weight_decay: f32 },
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f32,
    steps: u64,
    first: BTreeMap<String, Vec<f32>>,
    second: BTreeMap<String, Vec<f32>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f32) -> Self {
        Optimizer { kind, lr, steps: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every parameter that has a gradient. Nothing is
    /// modified when any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamMap, grads: &Gradients) -> Result<()> {
        for (name, g) in &grads.by_name {
            if !g.all_finite() {
                return Err(EasError::NonFiniteGradient(name.clone()));
            }
            if let Some(p) = params.get(name) {
                if p.shape() != g.shape() {
                    return Err(EasError::Shape(format!(
                        "gradient for `{name}` has shape {:?}, parameter {:?}",
                        g.shape(),
                        p.shape()
                    )));
                }
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        for (name, g) in &grads.by_name {
            let Some(p) = params.get_mut(name) else { continue };
            let n = p.len();
            match self.kind {
                OptimizerKind::SgdMomentum { momentum, weight_decay } => {
                    let v = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                    for ((w, &d), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                        let d = d + weight_decay * *w;
                        *vi = momentum * *vi + d;
                        *w -= self.lr * *vi;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                    let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for (((w, &d), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = beta1 * *mi + (1.0 - beta1) * d;
                        *vi = beta2 * *vi + (1.0 - beta2) * d * d;
                        let mhat = *mi / c1;
                        let vhat = *vi / c2;
                        *w -= self.lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// `lr0 * 0.5 * (1 + cos(pi * progress / total))`.
pub fn cosine_lr(lr0: f64, progress: f64, total: f64) -> f64 {
    if total <= 0.0 {
        return lr0;
    }
    lr0 * 0.5 * (1.0 + (PI * progress / total).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f32) -> (ParamMap, Gradients) {
        let mut p = ParamMap::new();
        p.insert(name.into(), Tensor::scalar(0.0));
        let mut g = Gradients::default();
        g.by_name.insert(name.into(), Tensor::scalar(v));
        (p, g)
    }

    #[test]
    fn sgd_plain_step() {
        let (mut p, g) = one("w", 1.0);
        let mut opt = Optimizer::new(OptimizerKind::SgdMomentum { momentum: 0.0, weight_decay: 0.0 }, 0.1);
        opt.step(&mut p, &g).unwrap();
        assert!((p["w"].item() + 0.1).abs() < 1e-7);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let (mut p, g) = one("w", 1.0);
        let mut opt = Optimizer::new(OptimizerKind::SgdMomentum { momentum: 0.9, weight_decay: 0.0 }, 0.1);
        opt.step(&mut p, &g).unwrap();
        opt.step(&mut p, &g).unwrap();
        // v1 = 1, v2 = 1.9, w = -(0.1 + 0.19)
        assert!((p["w"].item() + 0.29).abs() < 1e-6);
    }

    #[test]
    fn adam_first_step_is_bias_corrected() {
        // m = 0.1, v = 0.001; mhat = 1, vhat = 1; step = lr * 1 / (1 + 1e-8)
        let expected = -1e-3 / (1.0 + 1e-8);
        let (mut p, g) = one("w", 1.0);
        let mut opt = Optimizer::new(OptimizerKind::adam(), 1e-3);
        opt.step(&mut p, &g).unwrap();
        assert!((p["w"].item() as f64 - expected).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let (mut p, g) = one("head.w", f32::NAN);
        let mut opt = Optimizer::new(OptimizerKind::adam(), 1e-3);
        match opt.step(&mut p, &g) {
            Err(EasError::NonFiniteGradient(n)) => assert_eq!(n, "head.w"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(p["head.w"].item(), 0.0);
    }

    #[test]
    fn cosine_endpoints() {
        assert!((cosine_lr(0.01, 0.0, 120.0) - 0.01).abs() < 1e-15);
        assert!(cosine_lr(0.01, 120.0, 120.0).abs() < 1e-15);
        assert!((cosine_lr(0.01, 60.0, 120.0) - 0.005).abs() < 1e-15);
    }
}
