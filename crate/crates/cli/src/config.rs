//! Run configuration: a TOML file merged with command-line overrides.

use std::path::Path;

use anyhow::Context;
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use dfrf::diffmath::Profile;
use dfrf::model::ModelConfig;
use dfrf::training::TrainConfig;

use crate::UsageError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Small networks sized for CPU training.
    #[default]
    Desk,
    /// Full-size networks (8x256 field with a skip connection).
    Paper,
}

impl Preset {
    pub fn model(self, condition_dim: usize) -> ModelConfig {
        match self {
            Preset::Desk => ModelConfig::desk(condition_dim),
            Preset::Paper => ModelConfig::paper(condition_dim),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: Preset,
    pub train: TrainConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProfileArg {
    F32,
    F64,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::F32 => Profile::F32,
            ProfileArg::F64 => Profile::F64,
        }
    }
}

/// Flags overriding the config file; every training setting is addressable.
#[derive(Args, Debug, Default, Clone)]
pub struct Overrides {
    /// TOML run configuration (`model = "desk"` and a `[train]` table).
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    #[arg(long, value_enum)]
    pub model: Option<Preset>,
    #[arg(long)]
    pub coarse_iters: Option<usize>,
    #[arg(long)]
    pub joint_iters: Option<usize>,
    #[arg(long)]
    pub finetune_iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_final: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub rays: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Number of reference frames.
    #[arg(long)]
    pub refs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub profile: Option<ProfileArg>,
    /// Enable or disable offset prediction in the joint stage.
    #[arg(long)]
    pub warp: Option<bool>,
    #[arg(long)]
    pub clip_frames: Option<usize>,
    #[arg(long)]
    pub log_every: Option<usize>,
}

impl Overrides {
    /// Config file (or defaults) with every given flag applied, validated.
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => load(path)?,
            None => RunConfig::default(),
        };
        let t = &mut cfg.train;
        macro_rules! set {
            ($($flag:ident => $field:expr),* $(,)?) => {
                $(if let Some(v) = self.$flag { $field = v.into(); })*
            };
        }
        set! {
            model => cfg.model,
            coarse_iters => t.coarse_iters,
            joint_iters => t.joint_iters,
            finetune_iters => t.finetune_iters,
            lr => t.lr,
            lr_final => t.lr_final,
            lambda => t.lambda,
            rays => t.rays_per_batch,
            samples => t.samples_per_ray,
            refs => t.n_references,
            seed => t.seed,
            profile => t.profile,
            warp => t.warp,
            clip_frames => t.clip_frames,
            log_every => t.log_every,
        }
        cfg.train
            .validate()
            .map_err(|e| UsageError(format!("invalid configuration: {e}")))?;
        Ok(cfg)
    }
}

fn load(path: &Path) -> anyhow::Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())).into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "model = \"desk\"\n[train]\nseed = 7\nlr = 1e-3\nwarp = false\n").unwrap();
        let o = Overrides {
            config: Some(path),
            seed: Some(9),
            ..Overrides::default()
        };
        let cfg = o.resolve().unwrap();
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.train.lr, 1e-3);
        assert!(!cfg.train.warp);
        assert_eq!(cfg.train.n_references, 4);
    }

    #[test]
    fn unknown_keys_and_invalid_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[train]\nlearning_rate = 1.0\n").unwrap();
        let o = Overrides {
            config: Some(path),
            ..Overrides::default()
        };
        assert!(o.resolve().unwrap_err().downcast_ref::<UsageError>().is_some());
        let o = Overrides {
            lambda: Some(-1.0),
            ..Overrides::default()
        };
        assert!(o.resolve().unwrap_err().downcast_ref::<UsageError>().is_some());
    }

    #[test]
    fn resolved_config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), cfg);
    }
}
