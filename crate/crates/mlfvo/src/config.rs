//! Line-based key=value run configuration with section prefixes
//! (e.g. `train.lr_initial=1e-4`). Unknown keys are rejected.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::Intrinsics;
use crate::losses::LossWeights;
use crate::networks::{DepthNetConfig, FusionStrategy, PoseNetConfig};
use crate::training::TrainConfig;

/// Synthetic scene generation settings (`synth.` section).
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub frames: usize,
    pub plane_z: f64,
    pub step_z: f64,
    pub texture_frequency: f64,
    pub texture_seed: u64,
    pub occluders: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            frames: 10,
            plane_z: 2.0,
            step_z: 0.04,
            texture_frequency: 0.4,
            texture_seed: 7,
            occluders: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_root: PathBuf,
    pub sequence: String,
    pub height: usize,
    pub width: usize,
    pub depth: DepthNetConfig,
    pub pose: PoseNetConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_root: PathBuf::from("."),
            sequence: "00".into(),
            height: 64,
            width: 192,
            depth: DepthNetConfig::default(),
            pose: PoseNetConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, val: &str) -> Result<T> {
    val.parse().map_err(|_| Error::Config(format!("invalid value for {key}: {val:?}")))
}

fn parse_bool(key: &str, val: &str) -> Result<bool> {
    match val {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean for {key}: {val:?}"))),
    }
}

fn parse_usize_list(key: &str, val: &str) -> Result<Vec<usize>> {
    val.split(',').map(|t| parse_num(key, t.trim())).collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, val)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key=value, got {raw:?}", ln + 1)));
            };
            let (key, val) = (key.trim(), val.trim());
            cfg.apply(key, val)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn apply(&mut self, key: &str, val: &str) -> Result<()> {
        match key {
            "data.root" => self.data_root = PathBuf::from(val),
            "data.sequence" => self.sequence = val.to_string(),
            "data.height" => self.height = parse_num(key, val)?,
            "data.width" => self.width = parse_num(key, val)?,
            "model.strategy" => self.pose.strategy = FusionStrategy::parse(val)?,
            "model.depth_channels" => self.depth.encoder_channels = parse_usize_list(key, val)?,
            "model.pose_widths" => self.pose.widths = parse_usize_list(key, val)?,
            "model.ce_threshold" => self.pose.ce_threshold = parse_num(key, val)?,
            "model.min_depth" => self.depth.min_depth = parse_num(key, val)?,
            "model.max_depth" => self.depth.max_depth = parse_num(key, val)?,
            "model.regressor_hidden" => {
                let v = parse_usize_list(key, val)?;
                if v.len() != 2 {
                    return Err(Error::Config(format!("{key} needs two values, got {val:?}")));
                }
                self.pose.regressor_hidden = (v[0], v[1]);
            }
            "model.output_scale" => self.pose.output_scale = parse_num(key, val)?,
            "model.normalize_depth_input" => {
                self.pose.normalize_depth_input = parse_bool(key, val)?
            }
            "train.batch_size" => self.train.batch_size = parse_num(key, val)?,
            "train.epochs" => self.train.epochs = parse_num(key, val)?,
            "train.lr_initial" => self.train.lr_initial = parse_num(key, val)?,
            "train.lr_after" => self.train.lr_after = parse_num(key, val)?,
            "train.lr_switch_epoch" => self.train.lr_switch_epoch = parse_num(key, val)?,
            "train.seed" => self.train.seed = parse_num(key, val)?,
            "train.deterministic" => self.train.deterministic = parse_bool(key, val)?,
            "loss.lambda1" => self.train.weights.lambda1 = parse_num(key, val)?,
            "loss.lambda2" => self.train.weights.lambda2 = parse_num(key, val)?,
            "loss.lambda3" => self.train.weights.lambda3 = parse_num(key, val)?,
            "loss.alpha" => self.train.weights.alpha = parse_num(key, val)?,
            "loss.ssim_weight" => self.train.weights.ssim_weight = parse_num(key, val)?,
            "synth.frames" => self.synth.frames = parse_num(key, val)?,
            "synth.plane_z" => self.synth.plane_z = parse_num(key, val)?,
            "synth.step_z" => self.synth.step_z = parse_num(key, val)?,
            "synth.texture_frequency" => self.synth.texture_frequency = parse_num(key, val)?,
            "synth.texture_seed" => self.synth.texture_seed = parse_num(key, val)?,
            "synth.occluders" => self.synth.occluders = parse_num(key, val)?,
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.height % 16 != 0 || self.width % 16 != 0 {
            return Err(Error::Config(format!(
                "data.height and data.width must be divisible by 16, got {}x{}",
                self.height, self.width
            )));
        }
        self.depth.validate()?;
        self.pose.validate()?;
        self.train.validate()
    }

    /// Pinhole intrinsics for the configured resolution, used when
    /// generating synthetic data (roughly a 60 degree horizontal fov).
    pub fn synth_intrinsics(&self) -> Result<Intrinsics> {
        let fx = self.width as f64 * 0.9;
        Intrinsics::new(
            fx,
            fx,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
            self.width,
            self.height,
        )
    }

    pub fn loss_weights(&self) -> &LossWeights {
        &self.train.weights
    }
}
