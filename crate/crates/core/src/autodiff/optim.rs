use serde::{Deserialize, Serialize};

use super::params::{GradMap, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled weight decay; 0 gives plain Adam.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adaptive-moment optimizer state, one moment pair per parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self;
        let valid = c.learning_rate > 0.0
            && (0.0..1.0).contains(&c.beta1)
            && (0.0..1.0).contains(&c.beta2)
            && c.epsilon > 0.0
            && c.epsilon < 1e-2
            && c.weight_decay >= 0.0;
        if valid {
            Ok(())
        } else {
            Err(Error::contract(format!("invalid optimizer config {c:?}")))
        }
    }
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Vec<f64>> = params
            .entries()
            .iter()
            .map(|e| vec![0.0; e.value.len()])
            .collect();
        Ok(Self {
            config,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
        })
    }

    /// One bias-corrected update of every parameter in `params`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradMap) -> Result<()> {
        // validate before touching anything so a failed step leaves state intact
        for id in params.ids() {
            if grads.get(id).is_none() {
                return Err(Error::MissingGradient(params.name(id).to_string()));
            }
        }
        self.step_count += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
            weight_decay: wd,
        } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);

        for id in params.ids() {
            let g = grads.get(id).expect("checked above");
            let m = &mut self.first_moment[id.0];
            let v = &mut self.second_moment[id.0];
            let w = params.get_mut(id).data_mut();
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * w[i]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{ParamId, Tensor};

    fn store(values: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::row(values));
        s
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = store(vec![1.0, -2.0, 3.0]);
        let before = p.clone();
        let mut adam = Adam::new(AdamConfig::default(), &p).unwrap();
        let zeros = GradMap::zeros(&p);
        adam.step(&mut p, &zeros).unwrap();
        assert_eq!(p, before);
        assert_eq!(adam.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient() {
        let mut p = store(vec![0.0, 0.0]);
        let cfg = AdamConfig {
            learning_rate: 0.01,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &p).unwrap();
        let mut g = GradMap::empty(1);
        g.set(ParamId(0), vec![0.3, -5.0]);
        adam.step(&mut p, &g).unwrap();
        let w = p.get(ParamId(0)).data();
        assert!((w[0] + 0.01).abs() < 1e-8);
        assert!((w[1] - 0.01).abs() < 1e-8);
    }

    #[test]
    fn two_steps_match_scalar_reference() {
        // scalar transcription of the update rule
        let (lr, b1, b2, eps, g) = (0.05, 0.9, 0.999, 1e-8, 0.7);
        let (mut w, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
        }

        let mut p = store(vec![1.5]);
        let cfg = AdamConfig {
            learning_rate: lr,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &p).unwrap();
        let mut grads = GradMap::empty(1);
        grads.set(ParamId(0), vec![g]);
        adam.step(&mut p, &grads).unwrap();
        adam.step(&mut p, &grads).unwrap();
        assert_eq!(p.get(ParamId(0)).data()[0], w);
        assert_eq!(adam.step_count, 2);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut p = store(vec![1.0]);
        let mut adam = Adam::new(AdamConfig::default(), &p).unwrap();
        let err = adam.step(&mut p, &GradMap::empty(1)).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(ref n) if n == "w"));
        assert_eq!(adam.step_count, 0);
    }
}
