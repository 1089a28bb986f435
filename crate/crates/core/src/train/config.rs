use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::AdamConfig;
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::model::ModelConfig;
use crate::planner::PlannerConfig;
use crate::selection::SelectionWeights;
use crate::sim::{ObserverConfig, ScenarioConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Line-delimited JSON episodes; generated in memory when absent.
    pub dataset: Option<PathBuf>,
    pub episodes: usize,
    pub first_seed: u64,
    pub scenario: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            episodes: 200,
            first_seed: 0,
            scenario: "mixed".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_score: f64,
    pub lambda_rec: f64,
    pub lambda_flow: f64,
    /// Penalize every mode with the trajectory loss instead of only `n*`.
    pub traj_all_modes: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_score: 0.5,
            lambda_rec: 0.2,
            lambda_flow: 0.1,
            traj_all_modes: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Restrict training to the first `max_samples` (episode, tick) pairs
    /// of the train split; 0 means all.
    pub max_samples: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 8,
            learning_rate: 1e-4,
            weight_decay: 0.0,
            clip_norm: 5.0,
            max_samples: 0,
        }
    }
}

/// Everything that determines a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub observer: ObserverConfig,
    pub planner: PlannerConfig,
    pub flow: FlowConfig,
    pub selection: SelectionWeights,
    pub loss: LossWeights,
    pub train: OptimConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `key=value` overrides with dotted keys (`flow.K=5`). Values
    /// are parsed as TOML literals, falling back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for ov in overrides {
            let (key, raw) = ov
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{}' is not key=value", ov.as_ref())))?;
            set_path(&mut doc, key.trim(), parse_literal(raw.trim()))?;
        }
        let cfg: RunConfig = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.flow.validate()?;
        self.selection.validate()?;
        ScenarioConfig::by_name(&self.data.scenario)?;
        let l = &self.loss;
        for (name, v) in [
            ("loss.lambda_score", l.lambda_score),
            ("loss.lambda_rec", l.lambda_rec),
            ("loss.lambda_flow", l.lambda_flow),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.train.clip_norm.is_nan() || self.train.clip_norm <= 0.0 {
            return Err(Error::Config("train.clip_norm must be > 0".into()));
        }
        if self.planner.obs_dim != self.observer.feature_dim {
            return Err(Error::Config(format!(
                "planner.obs_dim ({}) must equal observer.feature_dim ({})",
                self.planner.obs_dim, self.observer.feature_dim
            )));
        }
        self.adam()?;
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            planner: self.planner.clone(),
            flow: self.flow.clone(),
        }
    }

    pub fn adam(&self) -> Result<AdamConfig> {
        let cfg = AdamConfig {
            learning_rate: self.train.learning_rate,
            weight_decay: self.train.weight_decay,
            ..AdamConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(doc: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("'{key}': '{part}' is not inside a table")))?;
        if i + 1 == parts.len() {
            // optional fields are absent from the serialized document
            let known = table.contains_key(*part) || *part == "dataset";
            if !known {
                return Err(Error::Config(format!("unknown config key '{key}'")));
            }
            table.insert(part.to_string(), value);
            return Ok(());
        }
        cur = table
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config section in '{key}'")))?;
    }
    Err(Error::Config("empty override key".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_loss_weights_and_optimizer() {
        let c = RunConfig::default();
        assert_eq!((c.loss.lambda_score, c.loss.lambda_rec, c.loss.lambda_flow), (0.5, 0.2, 0.1));
        assert_eq!(c.train.learning_rate, 1e-4);
        assert_eq!(c.flow.k, 5);
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = RunConfig::default();
        let text = c.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
        let partial = RunConfig::from_toml_str("seed = 3\n[flow]\nK = 10\n").unwrap();
        assert_eq!(partial.seed, 3);
        assert_eq!(partial.flow.k, 10);
        assert_eq!(partial.planner, PlannerConfig::default());
        assert!(RunConfig::from_toml_str("[flow]\nsteps = 3\n").is_err());
    }

    #[test]
    fn overrides() {
        let c = RunConfig::default()
            .with_overrides(&[
                "flow.K=3",
                "flow.target_convention=path_derivative",
                "selection.lambda_theta=0.0",
                "data.dataset=data/train.jsonl",
                "flow.kind=static",
            ])
            .unwrap();
        assert_eq!(c.flow.k, 3);
        assert_eq!(c.flow.target_convention, crate::flow::TargetConvention::PathDerivative);
        assert_eq!(c.selection.lambda_theta, 0.0);
        assert_eq!(c.data.dataset, Some(PathBuf::from("data/train.jsonl")));
        assert!(RunConfig::default().with_overrides(&["flow.steps=3"]).is_err());
        assert!(RunConfig::default().with_overrides(&["flow.K"]).is_err());
        assert!(RunConfig::default().with_overrides(&["flow.K=0"]).is_err());
    }
}
