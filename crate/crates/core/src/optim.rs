//! Adam.

use alloc::collections::BTreeMap;
use alloc::format;

use crate::error::{Error, Result};
use crate::params::{ParamKey, ParamKind, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    /// Completed updates; drives bias correction.
    pub step: u64,
    pub lr: f64,
    pub moments: BTreeMap<ParamKey, Moments>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, lr: f64) -> Self {
        OptimizerState { config, step: 0, lr, moments: BTreeMap::new() }
    }

    /// Allocates zero moments for every trainable tensor of `set`.
    pub fn register(&mut self, set: &ParamSet) {
        for (i, p) in set.iter().enumerate() {
            if p.kind == ParamKind::Trainable {
                self.moments
                    .entry(set.key(i))
                    .or_insert_with(|| Moments { m: Tensor::zeros(p.tensor.shape()), v: Tensor::zeros(p.tensor.shape()) });
            }
        }
    }

    /// One Adam update of every registered parameter in `sets`. Parameters
    /// without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, sets: &mut [&mut ParamSet], grads: &BTreeMap<ParamKey, Tensor>) -> Result<()> {
        for (key, g) in grads {
            if self.moments.contains_key(key) && !g.is_finite() {
                return Err(Error::NonFiniteLoss { what: format!("gradient of param {:?}", key), step: self.step });
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - libm::pow(beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(beta2, self.step as f64);
        let lr = self.lr;
        for set in sets.iter_mut() {
            for i in 0..set.len() {
                let key = set.key(i);
                let Some(mom) = self.moments.get_mut(&key) else { continue };
                let g = grads.get(&key);
                let p = set.tensor_mut(i).data_mut();
                let (m, v) = (mom.m.data_mut(), mom.v.data_mut());
                for j in 0..p.len() {
                    let gj = g.map_or(0.0, |g| g.data()[j] as f64);
                    let mj = beta1 * m[j] as f64 + (1.0 - beta1) * gj;
                    let vj = beta2 * v[j] as f64 + (1.0 - beta2) * gj * gj;
                    m[j] = mj as f32;
                    v[j] = vj as f32;
                    let update = lr * (mj / bc1) / (libm::sqrt(vj / bc2) + eps);
                    p[j] = (p[j] as f64 - update) as f32;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::NetId;
    use crate::tensor::Shape;

    fn set_with(v: f32) -> ParamSet {
        let mut s = ParamSet::new(NetId(9));
        s.push("w", Tensor::full(Shape::new(1, 2, 1, 1), v), ParamKind::Trainable, 1);
        s.push("buf", Tensor::full(Shape::new(1, 2, 1, 1), 3.0), ParamKind::Buffer, 1);
        s
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut s = set_with(1.0);
        let mut opt = OptimizerState::new(AdamConfig::default(), 0.1);
        opt.register(&s);
        let mut grads = BTreeMap::new();
        grads.insert(s.key(0), Tensor::from_vec(Shape::new(1, 2, 1, 1), alloc::vec![2.0, -0.5]).unwrap());
        opt.step(&mut [&mut s], &grads).unwrap();
        let d = s.tensor(0).data();
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] - 1.1).abs() < 1e-6, "{d:?}");
        assert_eq!(s.tensor(1).data(), &[3.0, 3.0]);
    }

    #[test]
    fn zero_lr_leaves_params_bitwise() {
        let mut s = set_with(0.123);
        let before = s.fingerprint();
        let mut opt = OptimizerState::new(AdamConfig::default(), 0.0);
        opt.register(&s);
        let mut grads = BTreeMap::new();
        grads.insert(s.key(0), Tensor::full(Shape::new(1, 2, 1, 1), 5.0));
        opt.step(&mut [&mut s], &grads).unwrap();
        assert_eq!(s.fingerprint(), before);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn non_finite_gradient_rejected_before_update() {
        let mut s = set_with(1.0);
        let before = s.fingerprint();
        let mut opt = OptimizerState::new(AdamConfig::default(), 0.1);
        opt.register(&s);
        let mut grads = BTreeMap::new();
        grads.insert(s.key(0), Tensor::full(Shape::new(1, 2, 1, 1), f32::NAN));
        assert!(matches!(opt.step(&mut [&mut s], &grads), Err(Error::NonFiniteLoss { .. })));
        assert_eq!(s.fingerprint(), before);
        assert_eq!(opt.step, 0);
    }
}
