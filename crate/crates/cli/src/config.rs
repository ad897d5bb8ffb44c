//! Experiment configuration: presets, JSON overrides and validation.

use std::path::Path;

use mmkd::distill::DistillConfig;
use mmkd::models::{Modality, Task};
use mmkd::synthdata::{DatasetConfig, SplitMode};
use mmkd::training::TrainConfig;
use mmkd::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const PRESETS: [&str; 3] = ["compositional", "iid", "weak-spectro"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Preset the configuration was resolved from.
    pub preset: String,
    pub label: String,
    pub dataset: DatasetConfig,
    pub task: Task,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    /// Teacher ensemble members, in modality order.
    pub modalities: Vec<Modality>,
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let dataset = DatasetConfig::preset(name)?;
        let (task, modalities) = match dataset.split_mode {
            // Verbs on unseen objects, taught by video-only modalities.
            SplitMode::Compositional => (
                Task::Verb,
                vec![Modality::Appearance, Modality::Flow, Modality::Layout],
            ),
            SplitMode::Iid => (Task::NounVerb, Modality::ALL.to_vec()),
        };
        Ok(Self {
            preset: name.to_string(),
            label: name.to_string(),
            dataset,
            task,
            train: TrainConfig {
                epochs: PRESET_EPOCHS,
                ..TrainConfig::default()
            },
            distill: DistillConfig::default(),
            modalities,
        })
    }

    /// Resolves a JSON document: `preset` (default `compositional`) supplies
    /// every field, the document's remaining keys override it.
    pub fn from_value(doc: &Value) -> Result<Self> {
        let obj = doc
            .as_object()
            .ok_or_else(|| Error::config("config", "top level must be a JSON object"))?;
        let preset = match obj.get("preset") {
            None => "compositional",
            Some(Value::String(s)) => s.as_str(),
            Some(_) => return Err(Error::config("preset", "must be a string")),
        };
        let mut base = serde_json::to_value(Self::preset(preset)?)?;
        merge(&mut base, doc);
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        let doc: Value = serde_json::from_str(&text).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        Self::from_value(&doc)
    }

    /// Uses one seed for data, initialization and views.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.dataset.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        self.distill.validate()?;
        if self.distill.holdout_size != self.dataset.holdout_size {
            return Err(Error::config(
                "distill.holdout_size",
                format!(
                    "{} differs from dataset.holdout_size {}",
                    self.distill.holdout_size, self.dataset.holdout_size
                ),
            ));
        }
        if self.modalities.is_empty() {
            return Err(Error::config("modalities", "at least one teacher modality required"));
        }
        if self.modalities.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("modalities", "must be distinct and in modality order"));
        }
        if self.dataset.split_mode == SplitMode::Compositional && self.task != Task::Verb {
            return Err(Error::config(
                "task",
                "compositional splits hold nouns out, so only the verb task is learnable",
            ));
        }
        Ok(())
    }
}

/// Desk schedule of every preset: distilled students need more steps than
/// cross-entropy training to fit softened targets.
pub const PRESET_EPOCHS: usize = 30;

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn presets_resolve_and_validate() {
        for p in PRESETS {
            let c = ExperimentConfig::preset(p).unwrap();
            c.validate().unwrap();
            let round = ExperimentConfig::from_value(&serde_json::to_value(&c).unwrap()).unwrap();
            assert_eq!(round, c);
        }
        let w = ExperimentConfig::preset("weak-spectro").unwrap();
        assert_eq!(w.task, Task::NounVerb);
        assert_eq!(w.modalities.len(), 4);
    }

    #[test]
    fn overrides_merge_into_the_preset() {
        let c = ExperimentConfig::from_value(&json!({
            "preset": "iid",
            "dataset": {"num_val": 64},
            "distill": {"lambda": 1.0}
        }))
        .unwrap();
        assert_eq!(c.dataset.num_val, 64);
        assert_eq!(c.dataset.split_mode, SplitMode::Iid);
        assert_eq!(c.distill.lambda, 1.0);
        assert_eq!(c.distill.gamma, 1.0);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_named() {
        let err = ExperimentConfig::from_value(&json!({"dataset": {"num_frames": 3}})).unwrap_err();
        assert!(err.to_string().contains("num_frames"), "{err}");
        match ExperimentConfig::from_value(&json!({"distill": {"lambda": 1.5}})) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "lambda"),
            other => panic!("{other:?}"),
        }
        assert!(ExperimentConfig::from_value(&json!({"preset": "nope"})).is_err());
        assert!(ExperimentConfig::from_value(&json!({"modalities": []})).is_err());
    }
}
