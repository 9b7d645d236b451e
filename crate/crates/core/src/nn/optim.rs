use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// First and second moments keyed by parameter path.
    pub moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let moments = params
            .iter()
            .map(|(k, p)| (k.clone(), (vec![0.0; p.value.len()], vec![0.0; p.value.len()])))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments,
        }
    }
}

/// One Adam update from the gradients held in `params`, which are zeroed
/// afterwards. Nothing is modified when any gradient is non-finite.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    for (path, p) in params.iter() {
        if let Some(i) = p.grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient of {path}[{i}] = {}", p.grad[i]),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (path, p) in params.iter_mut() {
        let n = p.value.len();
        let (m, v) = state
            .moments
            .entry(path.clone())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        for i in 0..n {
            let g = p.grad[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p.value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    params.zero_grad();
    Ok(())
}

/// Reduce-on-plateau learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    pub best: Option<f64>,
    pub epochs_since_improvement: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            patience: 10,
            factor: 0.1,
            min_lr: 1e-6,
            best: None,
            epochs_since_improvement: 0,
        }
    }

    /// Records `metric` and returns the (possibly reduced) learning rate.
    pub fn step(&mut self, metric: f64) -> f64 {
        if self.best.is_none_or(|best| metric < best) {
            self.best = Some(metric);
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
            if self.epochs_since_improvement > self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.epochs_since_improvement = 0;
            }
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", vec![1], vec![v]).unwrap();
        s
    }

    #[test]
    fn single_step_moves_by_lr() {
        // m_hat = v_hat = 1 after one step, so the update is lr / (1 + eps)
        let mut params = scalar_store(0.0);
        params.param_mut("w").grad[0] = 1.0;
        let mut state = AdamState::new(&params, 0.1);
        adam_step(&mut params, &mut state).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((params.get("w")[0] - expected).abs() < 1e-15);
        assert_eq!(params.param("w").grad[0], 0.0);
    }

    #[test]
    fn zero_gradient_is_noop() {
        let mut params = scalar_store(0.7);
        let mut state = AdamState::new(&params, 0.1);
        adam_step(&mut params, &mut state).unwrap();
        assert_eq!(params.get("w")[0], 0.7);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn moments_decay_under_zero_gradient() {
        let mut params = scalar_store(0.0);
        let mut state = AdamState::new(&params, 0.1);
        params.param_mut("w").grad[0] = 1.0;
        adam_step(&mut params, &mut state).unwrap();
        let (m1, v1) = (state.moments["w"].0[0], state.moments["w"].1[0]);
        adam_step(&mut params, &mut state).unwrap();
        assert!((state.moments["w"].0[0] - 0.9 * m1).abs() < 1e-18);
        assert!((state.moments["w"].1[0] - 0.999 * v1).abs() < 1e-18);
    }

    #[test]
    fn deterministic_trajectories() {
        let run = || {
            let mut params = scalar_store(1.0);
            let mut state = AdamState::new(&params, 0.05);
            let mut trace = Vec::new();
            for _ in 0..5 {
                params.param_mut("w").grad[0] = 0.3;
                adam_step(&mut params, &mut state).unwrap();
                trace.push(params.get("w")[0].to_bits());
            }
            trace
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut params = scalar_store(1.0);
        params.param_mut("w").grad[0] = f64::NAN;
        let mut state = AdamState::new(&params, 0.1);
        let err = adam_step(&mut params, &mut state).unwrap_err();
        assert!(err.to_string().contains("w[0]"));
        assert_eq!(params.get("w")[0], 1.0);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn plateau_improving_keeps_lr() {
        let mut s = PlateauScheduler::new(5e-2);
        for i in 0..50 {
            assert_eq!(s.step(1.0 / (i + 1) as f64), 5e-2);
        }
    }

    #[test]
    fn plateau_reduces_after_patience() {
        let mut s = PlateauScheduler::new(5e-2);
        // first call sets the best, the next 10 stagnate within patience
        for _ in 0..11 {
            assert_eq!(s.step(1.0), 5e-2);
        }
        let lr = s.step(1.0);
        assert!((lr - 5e-3).abs() < 1e-15);
        assert_eq!(s.epochs_since_improvement, 0);
    }

    #[test]
    fn plateau_floors_at_min_lr() {
        let mut s = PlateauScheduler::new(1e-6);
        for _ in 0..100 {
            assert_eq!(s.step(1.0), 1e-6);
        }
        let mut s = PlateauScheduler::new(5e-2);
        let mut last = s.lr;
        for _ in 0..200 {
            let lr = s.step(2.0);
            assert!(lr <= last && lr >= 1e-6);
            last = lr;
        }
        assert_eq!(last, 1e-6);
    }
}
