//! Run configuration: one JSON document that fully determines a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tasks::charlm::{CharLmConfig, CharLmTask};
use crate::tasks::collision::{CollisionConfig, CollisionTask};
use crate::tasks::copy::{CopyConfig, CopyTask};
use crate::train::{TaskStream, TrainConfig};

/// Environment variable that reroots relative run directories.
pub const RUN_ROOT_ENV: &str = "EXPIRE_SPAN_RUN_ROOT";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskConfig {
    Copy(CopyConfig),
    Collision(CollisionConfig),
    CollisionEasy(CollisionConfig),
    CharLm(CharLmConfig),
}

impl TaskConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            TaskConfig::Copy(_) => "copy",
            TaskConfig::Collision(_) => "collision",
            TaskConfig::CollisionEasy(_) => "collision_easy",
            TaskConfig::CharLm(_) => "char_lm",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: TaskConfig,
    pub model: ModelConfig,
    #[serde(default = "default_train")]
    pub train: TrainConfig,
    pub run_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn default_train() -> TrainConfig {
    serde_json::from_str("{}").expect("train config defaults")
}

impl RunConfig {
    /// Parse a config document, propagate the run seed into nested configs,
    /// and report which sections fell back to defaults.
    pub fn from_json(text: &str) -> Result<(Self, Vec<String>)> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let mut cfg: RunConfig = serde_json::from_value(raw.clone())?;
        let defaulted = missing_keys(&raw, &serde_json::to_value(&cfg)?);

        // One seed rules the run.
        cfg.train.seed = cfg.seed;
        match &mut cfg.task {
            TaskConfig::Copy(c) => c.seed = cfg.seed,
            TaskConfig::Collision(c) | TaskConfig::CollisionEasy(c) => c.seed = cfg.seed,
            TaskConfig::CharLm(c) => c.seed = cfg.seed,
        }
        // The easy variant is a mode of the same generator.
        if let TaskConfig::CollisionEasy(c) = &mut cfg.task {
            c.easy_mode = true;
        }
        if let TaskConfig::Collision(c) = &mut cfg.task {
            c.easy_mode = false;
        }
        Ok((cfg, defaulted))
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<String>)> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Build the task stream and finalize the model vocab from it. A zero
    /// `model.vocab_size` means "derive from the task".
    pub fn build_task(&mut self) -> Result<Box<dyn TaskStream>> {
        let (stream, vocab): (Box<dyn TaskStream>, usize) = match &self.task {
            TaskConfig::Copy(c) => {
                c.validate()?;
                (Box::new(CopyTask { cfg: c.clone() }), crate::tasks::copy::VOCAB)
            }
            TaskConfig::Collision(c) | TaskConfig::CollisionEasy(c) => {
                c.validate()?;
                let v = c.vocab_size();
                (Box::new(CollisionTask { cfg: c.clone() }), v)
            }
            TaskConfig::CharLm(c) => {
                let t = CharLmTask::from_config(c)?;
                let v = t.vocab_size();
                (Box::new(t), v)
            }
        };
        if self.model.vocab_size == 0 {
            self.model.vocab_size = vocab;
        } else if self.model.vocab_size != vocab {
            return Err(Error::Config(format!(
                "model.vocab_size {} does not match the task vocabulary {vocab}",
                self.model.vocab_size
            )));
        }
        self.model.validate()?;
        self.train.validate()?;
        Ok(stream)
    }

    /// Run directory, rerooted by the environment override when set.
    pub fn resolved_run_dir(&self) -> PathBuf {
        match std::env::var_os(RUN_ROOT_ENV) {
            Some(root) if self.run_dir.is_relative() => PathBuf::from(root).join(&self.run_dir),
            _ => self.run_dir.clone(),
        }
    }
}

/// Keys present in the echoed config but absent from the user document, two
/// levels deep. These are the fields that fell back to defaults.
fn missing_keys(given: &serde_json::Value, echoed: &serde_json::Value) -> Vec<String> {
    let mut out = Vec::new();
    let (Some(g), Some(e)) = (given.as_object(), echoed.as_object()) else {
        return out;
    };
    for (k, ev) in e {
        match g.get(k) {
            None => out.push(k.clone()),
            Some(gv) => {
                if let (Some(go), Some(eo)) = (gv.as_object(), ev.as_object()) {
                    for k2 in eo.keys() {
                        if !go.contains_key(k2) {
                            out.push(format!("{k}.{k2}"));
                        }
                    }
                    let _ = go;
                }
            }
        }
    }
    out.sort();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "task": { "kind": "copy", "distance": 64 },
        "model": { "vocab_size": 0, "max_span": 128, "block_size": 32 },
        "run_dir": "runs/test",
        "seed": 7
    }"#;

    #[test]
    fn defaults_are_reported() {
        let (cfg, defaulted) = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.seed, 7);
        assert!(defaulted.iter().any(|k| k == "train"), "{defaulted:?}");
        assert!(defaulted.iter().any(|k| k == "model.n_layers"));
    }

    #[test]
    fn vocab_derived_from_task() {
        let (mut cfg, _) = RunConfig::from_json(MINIMAL).unwrap();
        cfg.build_task().unwrap();
        assert_eq!(cfg.model.vocab_size, crate::tasks::copy::VOCAB);
    }

    #[test]
    fn bad_vocab_is_a_config_error() {
        let (mut cfg, _) = RunConfig::from_json(MINIMAL).unwrap();
        cfg.model.vocab_size = 3;
        assert!(matches!(cfg.build_task(), Err(Error::Config(_))));
    }

    #[test]
    fn easy_kind_forces_easy_mode() {
        let text = r#"{
            "task": { "kind": "collision_easy", "episode_steps": 64, "easy_mode": false },
            "model": { "vocab_size": 0, "max_span": 64, "block_size": 16 },
            "run_dir": "runs/x"
        }"#;
        let (cfg, _) = RunConfig::from_json(text).unwrap();
        match cfg.task {
            TaskConfig::CollisionEasy(c) => assert!(c.easy_mode),
            _ => panic!("wrong task kind"),
        }
    }

    #[test]
    fn run_root_env_reroots_relative_dirs() {
        let (cfg, _) = RunConfig::from_json(MINIMAL).unwrap();
        std::env::set_var(RUN_ROOT_ENV, "/tmp/xroot");
        let dir = cfg.resolved_run_dir();
        std::env::remove_var(RUN_ROOT_ENV);
        assert_eq!(dir, PathBuf::from("/tmp/xroot/runs/test"));
    }
}
