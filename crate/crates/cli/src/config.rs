use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use lteode::data::{ShockScenario, WindowLayout};
use lteode::dynamics::MaskMode;
use lteode::model::ModelConfig;
use lteode::training::{TrainConfig, Variant};

use crate::DataError;

/// Flat run configuration. Every key is optional in the file; command-line
/// flags override whatever the file says.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Directory holding `series.csv`, `meta.json` and optionally `events.csv`.
    pub data: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,

    pub n_nodes: usize,
    pub total_t: usize,
    pub level: f64,
    pub amplitude: f64,
    pub period: f64,
    pub diffusion: f64,
    pub shock_rate: f64,
    pub shock_min: f64,
    pub shock_max: f64,
    pub shock_decay: f64,
    pub tick_seconds: f64,

    pub window: usize,
    pub horizon: usize,
    pub stride: usize,

    pub proj_dim: usize,
    pub embed_dim: usize,
    pub steps: usize,
    pub mask_grad: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<f64>,

    pub variant: Variant,
    /// Penalty weight used whenever the manifold-penalty variant is trained.
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub clip_norm: f64,

    /// Penalty weights tried by `collapse`.
    pub lambdas: Vec<f64>,
    /// Step counts covered by `nfe-report`.
    pub steps_list: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sc = ShockScenario::default();
        let tc = TrainConfig::new(Variant::Full);
        RunConfig {
            seed: sc.seed,
            out: PathBuf::from("out"),
            data: PathBuf::from("data"),
            checkpoint: None,
            n_nodes: sc.n_nodes,
            total_t: sc.total_t,
            level: sc.level,
            amplitude: sc.amplitude,
            period: sc.period,
            diffusion: sc.diffusion,
            shock_rate: sc.shock_rate,
            shock_min: sc.shock_min,
            shock_max: sc.shock_max,
            shock_decay: sc.shock_decay,
            tick_seconds: 300.0,
            window: 12,
            horizon: 12,
            stride: 1,
            proj_dim: 30,
            embed_dim: 10,
            steps: tc.steps,
            mask_grad: false,
            sparsity: None,
            variant: Variant::Full,
            lambda: 0.1,
            lr: tc.lr,
            epochs: tc.epochs,
            batch_size: tc.batch_size,
            patience: tc.patience,
            clip_norm: tc.clip_norm,
            lambdas: vec![0.1],
            steps_list: vec![1, 2, 4, 6, 8],
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| DataError(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| DataError(format!("config {}: {}", path.display(), e.message())).into())
    }

    /// Persist the resolved configuration next to the run's outputs.
    pub fn write_resolved(&self) -> Result<()> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let text = toml::to_string(self).context("serializing config")?;
        let path = self.out.join("config.toml");
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn scenario(&self) -> ShockScenario {
        ShockScenario {
            n_nodes: self.n_nodes,
            total_t: self.total_t,
            level: self.level,
            amplitude: self.amplitude,
            period: self.period,
            diffusion: self.diffusion,
            shock_rate: self.shock_rate,
            shock_min: self.shock_min,
            shock_max: self.shock_max,
            shock_decay: self.shock_decay,
            seed: self.seed,
        }
    }

    pub fn layout(&self) -> WindowLayout {
        WindowLayout {
            stride: self.stride,
            ..WindowLayout::new(self.window, self.horizon)
        }
    }

    pub fn model(&self, n_nodes: usize, in_dim: usize) -> ModelConfig {
        ModelConfig {
            proj_dim: self.proj_dim,
            embed_dim: self.embed_dim,
            steps: self.steps,
            mask_mode: self.variant.mask_mode(),
            mask_grad: self.mask_grad,
            sparsity: self.sparsity,
            ..ModelConfig::new(n_nodes, in_dim, self.window, self.horizon)
        }
    }

    pub fn train(&self) -> TrainConfig {
        let base = TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            steps: self.steps,
            patience: self.patience,
            clip_norm: self.clip_norm,
            ..TrainConfig::new(self.variant)
        };
        base.for_variant(self.variant, self.lambda)
    }

    pub fn series_path(&self) -> PathBuf {
        self.data.join("series.csv")
    }

    pub fn meta_path(&self) -> PathBuf {
        self.data.join("meta.json")
    }

    pub fn events_path(&self) -> PathBuf {
        self.data.join("events.csv")
    }
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Flat TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    #[arg(long)]
    pub n_nodes: Option<usize>,
    #[arg(long)]
    pub total_t: Option<usize>,
    #[arg(long)]
    pub amplitude: Option<f64>,
    #[arg(long)]
    pub period: Option<f64>,
    #[arg(long)]
    pub diffusion: Option<f64>,
    /// Expected shocks per node per 100 ticks.
    #[arg(long)]
    pub shock_rate: Option<f64>,
    #[arg(long)]
    pub shock_min: Option<f64>,
    #[arg(long)]
    pub shock_max: Option<f64>,
    #[arg(long)]
    pub shock_decay: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory written by `generate-data` (or laid out the same way).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Penalty weight for the manifold-penalty variant.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
}

fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
    if let Some(v) = v {
        *slot = v.clone();
    }
}

impl CommonArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        set(&mut cfg.seed, &self.seed);
        set(&mut cfg.out, &self.out);
        Ok(cfg)
    }
}

impl ScenarioArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.n_nodes, &self.n_nodes);
        set(&mut cfg.total_t, &self.total_t);
        set(&mut cfg.amplitude, &self.amplitude);
        set(&mut cfg.period, &self.period);
        set(&mut cfg.diffusion, &self.diffusion);
        set(&mut cfg.shock_rate, &self.shock_rate);
        set(&mut cfg.shock_min, &self.shock_min);
        set(&mut cfg.shock_max, &self.shock_max);
        set(&mut cfg.shock_decay, &self.shock_decay);
    }
}

impl DataArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.data, &self.data);
        set(&mut cfg.window, &self.window);
        set(&mut cfg.horizon, &self.horizon);
        set(&mut cfg.batch_size, &self.batch_size);
    }
}

impl TrainArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.variant, &self.variant);
        set(&mut cfg.steps, &self.steps);
        set(&mut cfg.epochs, &self.epochs);
        set(&mut cfg.lr, &self.lr);
        set(&mut cfg.lambda, &self.lambda);
        set(&mut cfg.patience, &self.patience);
    }
}

/// `MaskMode` for flags, parsed through its `FromStr`.
pub fn parse_mask_mode(s: &str) -> std::result::Result<MaskMode, String> {
    s.parse().map_err(|e: lteode::Error| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: RunConfig = toml::from_str("epochs = 3\nvariant = \"no_mask\"\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.variant, Variant::NoMask);
        assert_eq!(cfg.window, 12);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(toml::from_str::<RunConfig>("epoch = 3\n").is_err());
    }

    #[test]
    fn lambda_only_reaches_penalty_variant() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.train().lambda, 0.0);
        cfg.variant = Variant::ManifoldPenalty;
        assert_eq!(cfg.train().lambda, 0.1);
        assert!(cfg.train().validate().is_ok());
    }
}
