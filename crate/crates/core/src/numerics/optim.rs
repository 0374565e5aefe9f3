//! Adam with a Noam warmup/decay learning-rate schedule.

use std::collections::{BTreeMap, HashMap};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `lr(step) = k · d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoamSchedule {
    pub k: f64,
    pub d_model: f64,
    pub warmup: f64,
}

impl Default for NoamSchedule {
    fn default() -> Self {
        NoamSchedule {
            k: 4.0,
            d_model: 512.0,
            warmup: 8000.0,
        }
    }
}

impl NoamSchedule {
    /// Learning rate at a 1-based step.
    pub fn lr(&self, step: u64) -> f64 {
        let s = step.max(1) as f64;
        self.k * self.d_model.powf(-0.5) * s.powf(-0.5).min(s * self.warmup.powf(-1.5))
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub schedule: NoamSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new(schedule: NoamSchedule, beta1: f64, beta2: f64, eps: f64) -> Self {
        OptimizerState {
            schedule,
            beta1,
            beta2,
            eps,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// One Adam update over the parameters that received a gradient.
///
/// Parameters absent from `grads` keep their values and moments (lazy update), so a
/// predictor head that a step never touched is left alone. Returns the learning rate used.
pub fn optimizer_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
) -> Result<f64> {
    if grads.is_empty() {
        return Err(Error::contract("optimizer step without any gradient"));
    }
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::contract(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::Dimension {
                op: "optimizer_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        g.check_finite(&format!("gradient of `{name}`"))?;
    }
    state.step += 1;
    let t = state.step as f64;
    let lr = state.schedule.lr(state.step);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
        for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noam_peak_at_warmup() {
        let s = NoamSchedule::default();
        let expected = 4.0 / (512f64.sqrt() * 8000f64.sqrt());
        assert!((s.lr(8000) - expected).abs() < 1e-15);
        assert!((s.lr(8000) - 1.976e-3).abs() < 1e-6);
    }

    #[test]
    fn noam_linear_during_warmup_then_decays() {
        let s = NoamSchedule::default();
        let r = s.lr(200) / s.lr(100);
        assert!((r - 2.0).abs() < 1e-12);
        assert!((s.lr(7000) / s.lr(1000) - 7.0).abs() < 1e-12);
        assert!(s.lr(32000) < s.lr(8000));
        assert!((s.lr(32000) / s.lr(8000) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), Tensor::new(&[2], vec![0.5, -0.25]).unwrap());
        let before = params.clone();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::zeros(&[2]));
        let mut st = OptimizerState::new(NoamSchedule::default(), 0.9, 0.999, 1e-8);
        for _ in 0..3 {
            optimizer_step(&mut params, &grads, &mut st).unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(st.step(), 3);
    }

    #[test]
    fn first_step_moves_against_gradient_by_lr() {
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), Tensor::new(&[1], vec![1.0]).unwrap());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::new(&[1], vec![3.0]).unwrap());
        let mut st = OptimizerState::new(NoamSchedule::default(), 0.9, 0.999, 0.0);
        let lr = optimizer_step(&mut params, &grads, &mut st).unwrap();
        // bias-corrected first Adam step has magnitude exactly lr
        assert!((params["w"].data()[0] - (1.0 - lr)).abs() < 1e-15);
    }

    #[test]
    fn errors_on_empty_or_unknown_grads() {
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), Tensor::zeros(&[1]));
        let mut st = OptimizerState::new(NoamSchedule::default(), 0.9, 0.999, 1e-8);
        assert!(optimizer_step(&mut params, &BTreeMap::new(), &mut st).is_err());
        let mut grads = BTreeMap::new();
        grads.insert("nope".to_string(), Tensor::zeros(&[1]));
        assert!(optimizer_step(&mut params, &grads, &mut st).is_err());
        assert_eq!(st.step(), 0);
    }
}
