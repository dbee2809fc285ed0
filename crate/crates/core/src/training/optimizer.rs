use std::collections::BTreeMap;

use cife_tensor::Tensor;

use crate::error::{CifeError, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// Moment accumulators keyed by parameter name, for trainable parameters only.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    step: u64,
    first: BTreeMap<String, Vec<f32>>,
    second: BTreeMap<String, Vec<f32>>,
}

impl OptimizerState {
    pub fn new(trainable: &ParamStore) -> Self {
        let zeros: BTreeMap<String, Vec<f32>> = trainable.iter().map(|(k, t)| (k.clone(), vec![0.0; t.numel()])).collect();
        OptimizerState {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.first.keys().map(String::as_str)
    }
}

/// Bias-corrected adaptive-moment update of every parameter named in `state`.
///
/// `grads` must name exactly the parameters `state` tracks; any other name is a
/// frozen parameter and is rejected.
pub fn apply_gradients(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor<f32>>,
    state: &mut OptimizerState,
    cfg: &AdamConfig,
) -> Result<()> {
    if let Some(name) = grads.keys().find(|k| !state.first.contains_key(*k)) {
        return Err(CifeError::Freeze(format!("gradient supplied for frozen parameter `{name}`")));
    }
    if let Some(name) = state.first.keys().find(|k| !grads.contains_key(*k)) {
        return Err(CifeError::Freeze(format!("no gradient for trainable parameter `{name}`")));
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - cfg.beta1.powf(t);
    let c2 = 1.0 - cfg.beta2.powf(t);
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let lr = cfg.learning_rate;
    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| CifeError::MissingParam(name.clone()))?;
        if p.shape() != g.shape() {
            return Err(CifeError::Config(format!(
                "gradient for `{name}` has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let m = state.first.get_mut(name).expect("checked");
        let v = state.second.get_mut(name).expect("checked");
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = *mi as f64 / c1;
            let vhat = *vi as f64 / c2;
            *pi -= (lr * mhat / (vhat.sqrt() + cfg.epsilon)) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64) -> AdamConfig {
        AdamConfig {
            learning_rate: lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [3.0f32, -0.25] {
            let mut p = ParamStore::new();
            p.insert("w", Tensor::scalar(1.0));
            let mut s = OptimizerState::new(&p);
            let grads = BTreeMap::from([("w".to_string(), Tensor::scalar(g))]);
            apply_gradients(&mut p, &grads, &mut s, &cfg(0.01)).unwrap();
            let moved = p.get("w").unwrap().item() - 1.0;
            assert!((moved + 0.01 * g.signum()).abs() < 1e-6, "{moved}");
        }
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_fn([3], |i| i as f32));
        let before = p.clone();
        let mut s = OptimizerState::new(&p);
        let grads = BTreeMap::from([("w".to_string(), Tensor::zeros([3]))]);
        apply_gradients(&mut p, &grads, &mut s, &cfg(0.1)).unwrap();
        assert!(p.bitwise_eq(&before));
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn rejects_frozen_and_missing_gradients() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::scalar(0.0));
        p.insert("b", Tensor::scalar(0.0));
        let mut s = OptimizerState::new(&p.filter_prefix("a"));
        let both = BTreeMap::from([("a".to_string(), Tensor::scalar(1.0)), ("b".to_string(), Tensor::scalar(1.0))]);
        assert!(matches!(apply_gradients(&mut p, &both, &mut s, &cfg(0.1)), Err(CifeError::Freeze(_))));
        assert!(apply_gradients(&mut p, &BTreeMap::new(), &mut s, &cfg(0.1)).is_err());
        assert_eq!(s.step(), 0);
    }
}
