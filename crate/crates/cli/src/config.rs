use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fspool::models::PoolKind;
use fspool::train::{AeConfig, ClassifierConfig, LossKind, ModelChoice, Task};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Autoencoder,
    Classifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MnistSource {
    /// Falls back to `$MNIST_DIR`, then `data/mnist`.
    pub dir: Option<PathBuf>,
    pub train_size: usize,
    pub test_size: usize,
}

impl Default for MnistSource {
    fn default() -> Self {
        Self {
            dir: None,
            train_size: 10_000,
            test_size: 2_000,
        }
    }
}

impl MnistSource {
    pub fn resolved_dir(&self) -> PathBuf {
        self.dir
            .clone()
            .or_else(|| std::env::var_os("MNIST_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data/mnist"))
    }
}

/// Everything a `train` invocation needs; written out as resolved-config.json.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub autoencoder: AeConfig,
    pub classifier: ClassifierConfig,
    pub mnist: MnistSource,
    pub pretrained: Option<PathBuf>,
}

impl RunConfig {
    /// Defaults that depend on the task and model: MNIST runs use the hard
    /// sort and σ = 0.05, the baseline trains with Chamfer unless told
    /// otherwise.
    pub fn defaults_for(task: Task, model: ModelChoice) -> Self {
        let loss = match model {
            ModelChoice::FspoolAe => LossKind::Direct,
            ModelChoice::Baseline => LossKind::Chamfer,
        };
        let autoencoder = match task {
            Task::Polygon => AeConfig::polygon(model, loss, 4),
            Task::Mnist => AeConfig::mnist(model, loss, PoolKind::Fspool),
        };
        Self {
            autoencoder,
            ..Self::default()
        }
    }

    pub fn is_mnist(&self) -> bool {
        self.mode == Mode::Classifier || self.autoencoder.task == Task::Mnist
    }
}

/// Recursively copies the non-null entries of `top` over `base`.
pub fn overlay(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                if v.is_null() {
                    continue;
                }
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => overlay(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

pub fn read_config_file(path: &Path) -> Result<Value> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Defaults chosen from `task`/`model` (flag first, then file), overlaid
/// with the file.
pub fn merge(
    file: Option<Value>,
    task: Option<Task>,
    model: Option<ModelChoice>,
) -> Result<RunConfig> {
    let file = file.unwrap_or(Value::Object(Default::default()));
    let from_file = |key: &str| file.get("autoencoder").and_then(|a| a.get(key)).cloned();
    let task = match task {
        Some(t) => t,
        None => from_file("task")
            .map(serde_json::from_value)
            .transpose()?
            .unwrap_or(Task::Polygon),
    };
    let model = match model {
        Some(m) => m,
        None => from_file("model")
            .map(serde_json::from_value)
            .transpose()?
            .unwrap_or(ModelChoice::FspoolAe),
    };
    let mut base = serde_json::to_value(RunConfig::defaults_for(task, model))?;
    overlay(&mut base, file);
    serde_json::from_value(base).context("config file does not match the run configuration")
}

#[cfg(test)]
mod tests {
    use super::*;
    use fspool::sortops::SortMode;
    use serde_json::json;

    #[test]
    fn overlay_keeps_unset_keys() {
        let mut a = json!({"x": 1, "o": {"a": 1, "b": 2}});
        overlay(&mut a, json!({"o": {"b": 3}, "y": null}));
        assert_eq!(a, json!({"x": 1, "o": {"a": 1, "b": 3}}));
    }

    #[test]
    fn task_defaults_follow_the_file() {
        let c = merge(Some(json!({"autoencoder": {"task": "mnist"}})), None, None).unwrap();
        assert_eq!(c.autoencoder.sort, SortMode::Hard);
        assert_eq!(c.autoencoder.sigma, 0.05);
        let c = merge(None, None, Some(ModelChoice::Baseline)).unwrap();
        assert_eq!(c.autoencoder.loss, LossKind::Chamfer);
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = merge(
            Some(json!({"autoencoder": {"n_points": 8, "steps": 5}})),
            None,
            None,
        )
        .unwrap();
        let back = merge(Some(serde_json::to_value(&c).unwrap()), None, None).unwrap();
        assert_eq!(c, back);
        assert!(merge(Some(json!({"typo": 1})), None, None).is_err());
    }
}
