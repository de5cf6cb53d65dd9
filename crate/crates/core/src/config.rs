//! Run configuration files: a preset plus overrides, parsed strictly.
//!
//! ```json
//! {
//!   "preset": "power",
//!   "train": { "steps": 20000, "seed": 3 },
//!   "eval": { "mask": "bernoulli:0.5", "trials": 5, "importance_samples": 20000 },
//!   "data": "power.csv",
//!   "schema": "power.schema.json",
//!   "checkpoint": "power.ace"
//! }
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::Value;

use crate::data::SplitFractions;
use crate::error::{AceError, Result};
use crate::eval::EvalProtocol;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub train: TrainConfig,
    pub eval: EvalProtocol,
    pub data: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Training log CSV.
    pub log: Option<PathBuf>,
    pub split: SplitFractions,
    /// MCAR rate injected into the train and validation splits.
    pub missing_rate: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: None,
            train: TrainConfig::default(),
            eval: EvalProtocol::default(),
            data: None,
            schema: None,
            checkpoint: None,
            log: None,
            split: SplitFractions::default(),
            missing_rate: 0.0,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    preset: Option<String>,
    #[serde(default)]
    train: Option<Value>,
    #[serde(default)]
    eval: EvalProtocol,
    data: Option<PathBuf>,
    schema: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    log: Option<PathBuf>,
    #[serde(default)]
    split: SplitFractions,
    #[serde(default)]
    missing_rate: f64,
}

/// The preset's training config (or the defaults) with `overrides` applied
/// field by field. Unknown override keys are rejected.
pub fn resolve_train_config(preset: Option<&str>, overrides: Option<&Value>) -> Result<TrainConfig> {
    let base = match preset {
        Some(name) => TrainConfig::preset(name)?,
        None => TrainConfig::default(),
    };
    let Some(over) = overrides else { return Ok(base) };
    let Value::Object(over) = over else {
        return Err(AceError::config("`train` must be a JSON object"));
    };
    let Value::Object(mut merged) = serde_json::to_value(&base)? else {
        unreachable!("TrainConfig serializes to an object")
    };
    for (k, v) in over {
        if !merged.contains_key(k) {
            return Err(AceError::config(format!("train: unknown field `{k}`")));
        }
        merged.insert(k.clone(), v.clone());
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| AceError::config(format!("train: {e}")))
}

impl RunConfig {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let raw: RawRunConfig = serde_json::from_str(text).map_err(|e| AceError::config(e.to_string()))?;
        let train = resolve_train_config(raw.preset.as_deref(), raw.train.as_ref())?;
        let resolve = |p: Option<PathBuf>| p.map(|p| if p.is_relative() { base_dir.join(p) } else { p });
        let cfg = RunConfig {
            preset: raw.preset,
            train,
            eval: raw.eval,
            data: resolve(raw.data),
            schema: resolve(raw.schema),
            checkpoint: resolve(raw.checkpoint),
            log: resolve(raw.log),
            split: raw.split,
            missing_rate: raw.missing_rate,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AceError::io(path, e))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        RunConfig::from_json(&text, dir).map_err(|e| match e {
            AceError::Config(m) => AceError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.eval.validate()?;
        self.split.sizes(0)?;
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(AceError::config("missing_rate: must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_with_overrides() {
        let cfg = RunConfig::from_json(
            r#"{"preset":"power","train":{"steps":10,"warmup_steps":2},"data":"p.csv"}"#,
            Path::new("/runs"),
        )
        .unwrap();
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.train.dropout, 0.2);
        assert_eq!(cfg.train.learning_rate, 1e-4);
        assert_eq!(cfg.train.batch_size, 512);
        assert_eq!(cfg.data.as_deref(), Some(Path::new("/runs/p.csv")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = Path::new(".");
        for bad in [
            r#"{"trian":{}}"#,
            r#"{"train":{"stepz":3}}"#,
            r#"{"eval":{"trails":3}}"#,
            r#"{"split":{"train":0.8,"val":0.1,"test":0.1,"extra":0}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(bad, dir), Err(AceError::Config(_))), "{bad}");
        }
    }

    #[test]
    fn invalid_values_name_the_field() {
        let err = RunConfig::from_json(r#"{"train":{"dropout":1.5}}"#, Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("dropout"), "{err}");
        let err = RunConfig::from_json(r#"{"preset":"mnist"}"#, Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("mnist"), "{err}");
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}", Path::new(".")).unwrap(), RunConfig::default());
    }
}
