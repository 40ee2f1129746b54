use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{NumericsError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Per-parameter first/second moments plus the shared step counter.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, ..Default::default() }
    }

    /// One bias-corrected Adam update of every parameter that has a
    /// gradient. Parameters absent from `grads` are left untouched but the
    /// step counter still advances.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<(), NumericsError> {
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| NumericsError::UnknownParameter(name.clone()))?;
            if p.len() != g.len() {
                return Err(NumericsError::ShapeMismatch {
                    op: "adam_step",
                    detail: format!("{name}: param {} vs grad {}", p.len(), g.len()),
                });
            }
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *w -= lr * mhat / (vhat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// Inverse-square-root schedule with linear warmup:
/// `lr(t) = d^-1/2 * min(t^-1/2, t * warmup^-3/2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub model_dim: usize,
    pub warmup: u64,
}

impl LrSchedule {
    pub fn new(model_dim: usize, warmup: u64) -> Self {
        Self { model_dim, warmup }
    }

    pub fn lr_at(&self, t: u64) -> Result<f64, NumericsError> {
        if t < 1 {
            return Err(NumericsError::Precondition("learning-rate step must be >= 1"));
        }
        let t = t as f64;
        let w = self.warmup.max(1) as f64;
        let d = self.model_dim as f64;
        Ok(d.powf(-0.5) * t.powf(-0.5).min(t * w.powf(-1.5)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("p".to_string(), Tensor::vector(vec![value]))])
    }

    #[test]
    fn zero_gradient_leaves_params_alone() {
        let mut params = single(1.25);
        let mut state = AdamState::new(AdamConfig::default());
        let grads = BTreeMap::from([("p".to_string(), vec![0.0])]);
        state.step(&mut params, &grads, 0.1).unwrap();
        assert_eq!(params["p"].data(), &[1.25]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the first update is lr * g / (|g| + eps).
        let g = 0.37;
        let lr = 1e-2;
        let mut params = single(0.0);
        let mut state = AdamState::new(AdamConfig::default());
        let grads = BTreeMap::from([("p".to_string(), vec![g])]);
        state.step(&mut params, &grads, lr).unwrap();
        let expected = -lr * g / (g + 1e-8);
        assert!((params["p"].data()[0] - expected).abs() < 1e-15);
        assert!((params["p"].data()[0].abs() - lr).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = single(0.0);
        let mut state = AdamState::new(AdamConfig::default());
        let grads = BTreeMap::from([("p".to_string(), vec![1.0, 2.0])]);
        assert!(state.step(&mut params, &grads, 0.1).is_err());
    }

    #[test]
    fn schedule_values() {
        let s = LrSchedule::new(16, 4000);
        let peak = s.lr_at(4000).unwrap();
        assert!((peak - 0.25 * 4000f64.powf(-0.5)).abs() < 1e-15);
        assert!((peak - 3.9528e-3).abs() < 1e-7);
        let first = s.lr_at(1).unwrap();
        assert!((first - 0.25 * 4000f64.powf(-1.5)).abs() < 1e-18);
        assert!((first - 9.882e-7).abs() < 1e-10);
        // Both branches meet at the warmup step.
        let t = 4000f64;
        assert!((t.powf(-0.5) - t * 4000f64.powf(-1.5)).abs() < 1e-15);
        assert!(s.lr_at(0).is_err());
    }

    #[test]
    fn schedule_rises_then_falls() {
        let s = LrSchedule::new(24, 4000);
        let mut prev = 0.0;
        for t in 1..=4000 {
            let lr = s.lr_at(t).unwrap();
            assert!(lr > prev);
            prev = lr;
        }
        for t in 4001..9000 {
            let lr = s.lr_at(t).unwrap();
            assert!(lr < prev && lr > 0.0);
            prev = lr;
        }
    }
}
