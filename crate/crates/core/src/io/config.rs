//! Run configuration: one JSON document drives data generation, backbone
//! training, calibration and evaluation, so that a whole experiment is
//! reproducible from the config and a seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{QartError, Result};
use crate::model::NetConfig;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            t_max: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub count: usize,
    pub hr_size: usize,
    pub noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            count: 12,
            hr_size: 128,
            noise: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneTrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Toy-scale learning rate; real-scale finetunes run far lower.
    pub lr: f64,
    pub timestep: usize,
}

impl Default for BackboneTrainConfig {
    fn default() -> Self {
        BackboneTrainConfig {
            steps: 600,
            batch: 2,
            lr: 2e-3,
            timestep: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibConfig {
    pub w_bits: u32,
    pub a_bits: u32,
    /// Rank of the full-precision skip; None picks ceil(min_dim/16).
    pub rank: Option<usize>,
    /// Rank of the low-rank weight correction; None mirrors `rank`.
    pub rank_f: Option<usize>,
    /// Optimization steps per per-module stage.
    pub stage_steps: usize,
    /// Additional end-to-end steps for extended training.
    pub et_steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// The per-module objective is `module_mse + image_loss / this`.
    pub module_loss_weight: f64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        CalibConfig {
            w_bits: 4,
            a_bits: 4,
            rank: None,
            rank_f: None,
            stage_steps: 120,
            et_steps: 360,
            batch: 2,
            lr: 1e-3,
            module_loss_weight: 10.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub net: NetConfig,
    pub schedule: ScheduleConfig,
    pub data: DataConfig,
    pub backbone: BackboneTrainConfig,
    pub calib: CalibConfig,
    /// Timesteps probed when sweeping for the retraining target.
    pub sweep_timesteps: Vec<usize>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            net: NetConfig::default(),
            schedule: ScheduleConfig::default(),
            data: DataConfig::default(),
            backbone: BackboneTrainConfig::default(),
            calib: CalibConfig::default(),
            sweep_timesteps: vec![1, 250, 500, 750, 1000],
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| {
            QartError::Config(format!("reading {}: {}", path.as_ref().display(), e))
        })?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| {
            QartError::Config(format!("parsing {}: {}", path.as_ref().display(), e))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        let bits_ok = |b: u32| b == 32 || (2..=8).contains(&b);
        if !bits_ok(self.calib.w_bits) || !bits_ok(self.calib.a_bits) {
            return Err(QartError::Config(format!(
                "bit widths must be 2..=8 or 32, got W{}A{}",
                self.calib.w_bits, self.calib.a_bits
            )));
        }
        if self.data.count == 0 {
            return Err(QartError::Config("data.count must be positive".into()));
        }
        if self.data.hr_size != self.net.lr_size * 4 {
            return Err(QartError::Config(format!(
                "data.hr_size {} must be 4x net.lr_size {}",
                self.data.hr_size, self.net.lr_size
            )));
        }
        if self.backbone.batch == 0 || self.calib.batch == 0 {
            return Err(QartError::Config("batch sizes must be positive".into()));
        }
        if self.backbone.batch > self.data.count || self.calib.batch > self.data.count {
            return Err(QartError::Config(format!(
                "batch sizes ({}, {}) cannot exceed data.count {}",
                self.backbone.batch, self.calib.batch, self.data.count
            )));
        }
        if self.backbone.timestep < 1 || self.backbone.timestep > self.schedule.t_max {
            return Err(QartError::Config(format!(
                "backbone.timestep {} outside 1..={}",
                self.backbone.timestep, self.schedule.t_max
            )));
        }
        if self.sweep_timesteps.is_empty()
            || self
                .sweep_timesteps
                .iter()
                .any(|&t| t < 1 || t > self.schedule.t_max)
        {
            return Err(QartError::Config(format!(
                "sweep_timesteps {:?} must be nonempty within 1..={}",
                self.sweep_timesteps, self.schedule.t_max
            )));
        }
        if self.calib.module_loss_weight <= 0.0 {
            return Err(QartError::Config(
                "module_loss_weight must be positive".into(),
            ));
        }
        if !(self.backbone.lr > 0.0) || !(self.calib.lr > 0.0) {
            return Err(QartError::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    /// Effective settings as pretty JSON, written next to every run's
    /// artifacts so results are traceable to their inputs.
    pub fn echo(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Output directory, overridable with the QART_OUT environment variable.
    pub fn resolved_out_dir(&self) -> PathBuf {
        match std::env::var_os("QART_OUT") {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.out_dir.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_echo_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let echoed = cfg.echo();
        let back: RunConfig = serde_json::from_str(&echoed).unwrap();
        back.validate().unwrap();
        assert_eq!(back.calib.w_bits, cfg.calib.w_bits);
        assert_eq!(back.sweep_timesteps, cfg.sweep_timesteps);
    }

    #[test]
    fn partial_files_fill_from_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"seed": 7, "calib": {"w_bits": 2, "a_bits": 8}}"#).unwrap();
        let cfg = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.calib.w_bits, 2);
        assert_eq!(cfg.calib.a_bits, 8);
        assert_eq!(cfg.data.count, DataConfig::default().count);
    }

    #[test]
    fn unknown_fields_and_bad_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"sede": 7}"#).unwrap();
        assert!(matches!(
            RunConfig::from_file(&path).unwrap_err(),
            QartError::Config(_)
        ));

        std::fs::write(&path, r#"{"calib": {"w_bits": 9}}"#).unwrap();
        assert!(matches!(
            RunConfig::from_file(&path).unwrap_err(),
            QartError::Config(_)
        ));

        std::fs::write(&path, r#"{"data": {"hr_size": 64}}"#).unwrap();
        assert!(matches!(
            RunConfig::from_file(&path).unwrap_err(),
            QartError::Config(_)
        ));

        std::fs::write(&path, r#"{"sweep_timesteps": [0]}"#).unwrap();
        assert!(matches!(
            RunConfig::from_file(&path).unwrap_err(),
            QartError::Config(_)
        ));
    }

    #[test]
    fn out_dir_env_override() {
        let cfg = RunConfig::default();
        // Serial test safety: the variable is restored immediately.
        std::env::set_var("QART_OUT", "/tmp/elsewhere");
        let resolved = cfg.resolved_out_dir();
        std::env::remove_var("QART_OUT");
        assert_eq!(resolved, PathBuf::from("/tmp/elsewhere"));
        assert_eq!(cfg.resolved_out_dir(), PathBuf::from("out"));
    }
}
