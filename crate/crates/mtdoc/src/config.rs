//! Run configuration: one JSON file drives data, model, and training.

use crate::docdata::SynthSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pretrain::{MixtureSpec, PretrainConfig, TaskToggles};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSection {
    pub steps: u64,
    pub lr: f64,
    /// Optional linear decay target for the learning rate.
    pub lr_final: Option<f64>,
    pub mask_rate: f64,
    /// Named toggle set: "full", "ablation1" (MLM+DC+LSC), or "ablation2"
    /// (adds RE+VQA).
    pub toggles: String,
    pub mixture: Option<MixtureSpec>,
    pub checkpoint_every: u64,
    pub early_stop_loss: Option<f64>,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            steps: 2_000,
            lr: 1e-3,
            lr_final: None,
            mask_rate: 0.30,
            toggles: "full".into(),
            mixture: None,
            checkpoint_every: 0,
            early_stop_loss: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Mandatory; every run must be reproducible.
    pub seed: Option<u64>,
    pub model: ModelConfig,
    /// Synthetic corpus parameters, used when `data_dir` is unset.
    pub synth: SynthSpec,
    /// Directory of per-role JSONL files (as written by `gen-data`).
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub pretrain: PretrainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            model: ModelConfig::default(),
            synth: SynthSpec::default(),
            data_dir: None,
            out_dir: PathBuf::from("out"),
            pretrain: PretrainSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed.is_none() {
            return Err(Error::Config("config must set a seed".into()));
        }
        if let Some(dir) = &self.data_dir {
            if !dir.is_dir() {
                return Err(Error::Config(format!(
                    "data_dir {} is not a directory",
                    dir.display()
                )));
            }
        }
        TaskToggles::named(&self.pretrain.toggles)?;
        if let Some(m) = &self.pretrain.mixture {
            m.validate()?;
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("validated")
    }

    pub fn pretrain_config(&self) -> Result<PretrainConfig> {
        Ok(PretrainConfig {
            steps: self.pretrain.steps,
            lr: self.pretrain.lr,
            lr_final: self.pretrain.lr_final,
            mask_rate: self.pretrain.mask_rate,
            mixture: self
                .pretrain
                .mixture
                .clone()
                .unwrap_or_default(),
            toggles: TaskToggles::named(&self.pretrain.toggles)?,
            seed: self.seed(),
            checkpoint_every: self.pretrain.checkpoint_every,
            out_dir: Some(self.out_dir.clone()),
            early_stop_loss: self.pretrain.early_stop_loss,
            start_step: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_missing_seed() {
        let cfg = RunConfig::default();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.seed = Some(1);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"seed": 7, "pretrain": {"steps": 5, "toggles": "ablation1"}}"#)
            .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.seed(), 7);
        assert_eq!(cfg.pretrain.steps, 5);
        let pc = cfg.pretrain_config().unwrap();
        assert_eq!(pc.toggles.enabled.len(), 3);
        assert_eq!(pc.mixture.total(), 32);
    }

    #[test]
    fn bad_json_and_bad_toggles_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, "{nope").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::Config(_))));
        std::fs::write(&path, r#"{"seed": 1, "pretrain": {"toggles": "wat"}}"#).unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::load(&dir.path().join("missing.json")),
            Err(Error::Config(_))
        ));
    }
}
