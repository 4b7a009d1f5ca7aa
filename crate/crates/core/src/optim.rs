//! Adam with bias correction.

use alloc::vec::Vec;

use crate::math;
use crate::{Error, Gradients, ParamStore, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for every parameter of a store, plus the shared
/// step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.tensor.shape())).collect();
        AdamState {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        Adam {
            config,
            state: AdamState::new(store),
        }
    }

    /// Apply one update to every trainable parameter that has a gradient.
    /// Frozen parameters are never written, even if a gradient is supplied.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if self.state.first.len() != store.len() {
            return Err(Error::TreeMismatch(alloc::format!(
                "optimizer tracks {} parameters, store has {}",
                self.state.first.len(),
                store.len()
            )));
        }
        for (id, g) in grads.params() {
            if g.shape() != store.tensor(id).shape() {
                return Err(Error::shape("adam_step", store.tensor(id).shape(), g.shape()));
            }
        }
        self.state.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.state.step as f64;
        let c1 = 1.0 - math::pow(beta1, t);
        let c2 = 1.0 - math::pow(beta2, t);
        for (id, g) in grads.params() {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let m = self.state.first[id.index()].data_mut();
            let v = self.state.second[id.index()].data_mut();
            for (((w, &gi), mi), vi) in p.tensor.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (math::sqrt(vhat) + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    fn store() -> (ParamStore, crate::ParamId) {
        let mut s = ParamStore::new();
        let id = s
            .add("w", Tensor::new([3], alloc::vec![0.5, -1.0, 2.0]).unwrap())
            .unwrap();
        (s, id)
    }

    fn grads_for(s: &ParamStore, id: crate::ParamId, g: &[f64]) -> Gradients {
        let mut tape = Tape::new();
        let w = tape.param(s, id);
        let c = tape.constant(Tensor::new([3], g.to_vec()).unwrap());
        let p = tape.mul(w, c).unwrap();
        let loss = tape.sum(p).unwrap();
        tape.backward(loss).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut s, id) = store();
        let before = s.clone();
        let g = grads_for(&s, id, &[0.0, 0.0, 0.0]);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        adam.step(&mut s, &g).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let (mut s, id) = store();
        let before = s.tensor(id).clone();
        let grad = [0.3, -2.0, 1e-3];
        let g = grads_for(&s, id, &grad);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        adam.step(&mut s, &g).unwrap();
        for i in 0..3 {
            // hand oracle: mhat = g, vhat = g^2, so the step is lr * g / (|g| + eps)
            let expect = before.data()[i] - 1e-3 * grad[i] / (grad[i].abs() + 1e-8);
            assert!((s.tensor(id).data()[i] - expect).abs() < 1e-15);
            let moved = before.data()[i] - s.tensor(id).data()[i];
            assert!((moved - 1e-3 * grad[i].signum()).abs() < 1e-7);
        }
    }

    #[test]
    fn frozen_params_are_never_written() {
        let (mut s, id) = store();
        let g = grads_for(&s, id, &[1.0, 1.0, 1.0]);
        s.set_trainable([id], false);
        let before = s.clone();
        let mut adam = Adam::new(AdamConfig::default(), &s);
        adam.step(&mut s, &g).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let (mut s, id) = store();
        let g = grads_for(&s, id, &[1.0, 1.0, 1.0]);
        let mut other = ParamStore::new();
        let oid = other.add("w", Tensor::zeros([2])).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &other);
        assert!(matches!(adam.step(&mut other, &g), Err(Error::Shape { .. })));
        let _ = (oid, &mut s);
    }
}
