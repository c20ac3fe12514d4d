use super::Parameter;
use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Update rule selector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    AdamW { beta1: f64, beta2: f64, epsilon: f64 },
}

#[derive(Debug, Clone, Default)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// First-order optimizer over named parameters. State is keyed by parameter
/// name, so the same optimizer can be reused across steps; steps are
/// deterministic given prior state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    state: BTreeMap<String, Slot>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, weight_decay: f64) -> Self {
        Optimizer { kind, learning_rate, weight_decay, state: BTreeMap::new(), steps: 0 }
    }

    pub fn sgd_momentum(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self::new(OptimizerKind::SgdMomentum { momentum }, learning_rate, weight_decay)
    }

    /// AdamW with the usual (0.9, 0.999, 1e-8) moment constants.
    pub fn adamw(learning_rate: f64, weight_decay: f64) -> Self {
        Self::new(
            OptimizerKind::AdamW { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 },
            learning_rate,
            weight_decay,
        )
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Apply one update to every parameter. Every parameter must carry a
    /// gradient; shapes never change.
    pub fn step(&mut self, params: &mut [&mut Parameter]) -> Result<()> {
        for p in params.iter() {
            if p.value.grad().is_none() {
                return Err(Error::MissingGradient(p.name.clone()));
            }
        }
        self.steps += 1;
        let lr = self.learning_rate;
        let wd = self.weight_decay;
        for p in params.iter_mut() {
            let n = p.value.numel();
            let slot = self.state.entry(p.name.clone()).or_insert_with(|| Slot {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            if slot.m.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "optimizer_step",
                    lhs: p.value.shape().to_vec(),
                    rhs: vec![slot.m.len()],
                });
            }
            let grad = p.value.grad().expect("checked above").to_vec();
            match self.kind {
                OptimizerKind::SgdMomentum { momentum } => {
                    for i in 0..n {
                        let g = grad[i] + wd * p.value.data()[i];
                        slot.m[i] = momentum * slot.m[i] + g;
                        p.value.data_mut()[i] -= lr * slot.m[i];
                    }
                }
                OptimizerKind::AdamW { beta1, beta2, epsilon } => {
                    let t = self.steps as i32;
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    for i in 0..n {
                        let g = grad[i];
                        slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g;
                        slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g * g;
                        let m_hat = slot.m[i] / bc1;
                        let v_hat = slot.v[i] / bc2;
                        let update = m_hat / (v_hat.sqrt() + epsilon) + wd * p.value.data()[i];
                        p.value.data_mut()[i] -= lr * update;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn param(name: &str, vals: &[f64]) -> Parameter {
        Parameter::new(name, Tensor::from_vec(&[vals.len()], vals.to_vec()).unwrap())
    }

    #[test]
    fn plain_sgd_step() {
        let mut p = param("w", &[1.0]);
        p.value.accumulate_grad(&[1.0]).unwrap();
        let mut opt = Optimizer::sgd_momentum(0.1, 0.0, 0.0);
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.value.data(), &[0.9]);
    }

    #[test]
    fn zero_lr_is_identity_on_values() {
        let mut p = param("w", &[0.25, -3.5]);
        p.value.accumulate_grad(&[7.0, -2.0]).unwrap();
        let before = p.value.data().to_vec();
        let mut opt = Optimizer::adamw(0.0, 0.05);
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.value.data(), before.as_slice());
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut p = param("router.weight", &[1.0]);
        let mut opt = Optimizer::sgd_momentum(0.1, 0.9, 0.0);
        let err = opt.step(&mut [&mut p]).unwrap_err();
        assert!(err.to_string().contains("router.weight"), "{err}");
    }

    // Reference AdamW update, written independently of the optimizer:
    // decoupled weight decay, bias-corrected moments.
    fn adamw_reference(p0: f64, g: f64, lr: f64, wd: f64, t: u32) -> f64 {
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        for step in 1..=t {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1_pow(b1, step));
            let vh = v / (1.0 - b1_pow(b2, step));
            p -= lr * (mh / (vh.sqrt() + eps) + wd * p);
        }
        p
    }

    fn b1_pow(b: f64, t: u32) -> f64 {
        let mut acc = 1.0;
        for _ in 0..t {
            acc *= b;
        }
        acc
    }

    #[test]
    fn adamw_matches_scalar_reference() {
        for &(g, lr, wd, t) in &[(0.3, 1e-2, 0.05, 1u32), (-1.7, 1e-3, 0.0, 3), (0.01, 0.1, 0.01, 5)] {
            let mut p = param("w", &[2.0]);
            let mut opt = Optimizer::adamw(lr, wd);
            for _ in 0..t {
                p.value.zero_grad();
                p.value.accumulate_grad(&[g]).unwrap();
                opt.step(&mut [&mut p]).unwrap();
            }
            let expect = adamw_reference(2.0, g, lr, wd, t);
            assert!(
                (p.value.data()[0] - expect).abs() < 1e-12,
                "got {} want {expect}",
                p.value.data()[0]
            );
        }
    }

    #[test]
    fn adamw_first_step_moves_against_gradient() {
        let mut p = param("w", &[0.0]);
        p.value.accumulate_grad(&[0.5]).unwrap();
        let mut opt = Optimizer::adamw(1e-4, 0.0);
        opt.step(&mut [&mut p]).unwrap();
        assert!(p.value.data()[0] < 0.0);
    }
}
