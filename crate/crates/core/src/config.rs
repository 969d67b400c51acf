//! Run configuration and its named profiles.
//!
//! A config file is a JSON object whose fields override a profile. The profile
//! is picked by the optional `"profile"` key (`full` when absent):
//!
//! ```json
//! {"profile": "toy", "optim": {"epochs": 40}, "data": {"path": "data/train"}}
//! ```
//!
//! Objects merge key by key, except `data`, which replaces the profile's data
//! source as a whole. Top-level `seed` and `avg_mode` are copied into the
//! model section.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cross::AvgMode;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objective::LossWeights;
use crate::optim::AdamWConfig;
use crate::scene::SceneSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub wd: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch: usize,
    pub epochs: usize,
}

impl OptimConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, wd: self.wd, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        let a = AdamWConfig::default();
        Self { lr: a.lr, wd: a.wd, beta1: a.beta1, beta2: a.beta2, eps: a.eps, batch: 8, epochs: 200 }
    }
}

/// In-memory generation settings; the scene geometry comes from the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    pub count: usize,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gen: Option<GenConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: String,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub seed: u64,
    pub avg_mode: AvgMode,
    pub tau: f64,
    /// Restrict the consistency term to labelled pixels.
    #[serde(default)]
    pub consistency_masked: bool,
}

pub const TOY_LR: f64 = 2e-3;
pub const TOY_EPOCHS: usize = 200;

impl RunConfig {
    pub fn profile(name: &str) -> Result<Self> {
        let base = Self {
            profile: "full".into(),
            model: ModelConfig::full(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
            seed: 0,
            avg_mode: AvgMode::Continuous,
            tau: 0.5,
            consistency_masked: false,
        };
        match name {
            "full" => Ok(base),
            "toy" => Ok(Self {
                profile: "toy".into(),
                model: ModelConfig::toy(),
                optim: OptimConfig { lr: TOY_LR, epochs: TOY_EPOCHS, ..OptimConfig::default() },
                data: DataConfig { path: None, gen: Some(GenConfig { seed: 0, count: 200, noise: 0.1 }) },
                ..base
            }),
            other => Err(Error::Config(format!("unknown profile `{other}` (expected full|toy)"))),
        }
    }

    /// Overlays `doc` on its profile, then validates.
    pub fn from_value(doc: Value) -> Result<Self> {
        let Value::Object(_) = &doc else {
            return Err(Error::Config("run config must be a JSON object".into()));
        };
        let profile = match doc.get("profile") {
            None => "full".to_string(),
            Some(Value::String(s)) => s.clone(),
            Some(other) => return Err(Error::Config(format!("profile must be a string, got {other}"))),
        };
        let mut merged = serde_json::to_value(Self::profile(&profile)?)?;
        if doc.get("data").is_some() {
            merged["data"] = Value::Object(Default::default());
        }
        merge(&mut merged, doc);
        let mut cfg: Self =
            serde_json::from_value(merged).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.model.seed = cfg.seed;
        cfg.model.avg_mode = cfg.avg_mode;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_value(serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Every problem with the config, reported together.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut check = |r: Result<()>| {
            if let Err(e) = r {
                problems.push(match e {
                    Error::Config(s) => s,
                    other => other.to_string(),
                });
            }
        };
        check(self.model.validate());
        check(self.loss.validate());
        check(self.optim.adamw().validate());
        if self.optim.batch == 0 {
            problems.push("optim.batch must be >= 1".into());
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            problems.push(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        match (&self.data.path, &self.data.gen) {
            (Some(_), Some(_)) => problems.push("data: give either path or gen, not both".into()),
            (None, Some(g)) => {
                if g.count == 0 {
                    problems.push("data.gen.count must be >= 1".into());
                }
                if let Err(Error::Config(s)) = self.scene_spec(g.noise).validate() {
                    problems.push(format!("data.gen: {s}"));
                }
            }
            _ => {}
        }
        if self.model.seed != self.seed || self.model.avg_mode != self.avg_mode {
            problems.push("model.seed/model.avg_mode must equal the top-level seed/avg_mode".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn scene_spec(&self, noise: f64) -> SceneSpec {
        let m = &self.model;
        SceneSpec { h: m.h, w: m.w, classes: m.num_classes, c1: m.c1, c2: m.c2, noise }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_profile_defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!((c.optim.lr, c.optim.wd, c.optim.batch, c.optim.epochs), (1e-4, 1e-3, 8, 200));
        assert_eq!((c.model.h, c.model.w, c.model.depth), (32, 32, 9));
        assert_eq!((c.loss.lambda1, c.loss.lambda2, c.tau), (1.0, 0.1, 0.5));
    }

    #[test]
    fn toy_overlay() {
        let c = RunConfig::from_json(r#"{"profile":"toy","optim":{"epochs":3},"seed":5,"avg_mode":"discretized"}"#).unwrap();
        assert_eq!((c.model.h, c.model.depth, c.model.d_model, c.model.d_state), (8, 2, 16, 4));
        assert_eq!(c.optim.epochs, 3);
        assert_eq!(c.optim.batch, 8);
        assert_eq!(c.model.seed, 5);
        assert_eq!(c.model.avg_mode, AvgMode::Discretized);
        let c = RunConfig::from_json(r#"{"profile":"toy","data":{"path":"d"}}"#).unwrap();
        assert_eq!(c.data, DataConfig { path: Some("d".into()), gen: None });
    }

    #[test]
    fn lambda_order_is_enforced() {
        let err = RunConfig::from_json(r#"{"loss":{"lambda1":0.1,"lambda2":0.5}}"#).unwrap_err().to_string();
        assert!(err.contains("lambda1 > lambda2"), "{err}");
    }

    #[test]
    fn problems_are_listed_together() {
        let err = RunConfig::from_json(r#"{"tau":1.5,"optim":{"batch":0},"model":{"depth":0}}"#).unwrap_err().to_string();
        assert!(err.contains("tau") && err.contains("batch") && err.contains("depth"), "{err}");
        assert!(RunConfig::from_json(r#"{"bogus":1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"profile":"huge"}"#).is_err());
    }
}
