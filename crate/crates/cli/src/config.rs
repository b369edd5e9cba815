//! TOML run configs: file values, then command-line overrides, then a
//! resolved snapshot written next to the outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tryon_core::backbone::BackboneConfig;
use tryon_core::pipeline::PipelineMode;
use tryon_core::training::TrainConfig;
use tryon_core::{Error, Result};

pub const SNAPSHOT_FILE: &str = "resolved_config.toml";

/// Reads `path` into `T`, accepting a snapshot written for the same command.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>, command: &str) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if let Some(c) = table.remove("command") {
        if c.as_str() != Some(command) {
            return Err(Error::Config(format!("{} is a snapshot for `{c}`, not `{command}`", path.display())));
        }
    }
    table.try_into().map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct Snapshot<'a, T> {
    command: &'a str,
    #[serde(flatten)]
    config: &'a T,
}

pub fn write_snapshot<T: Serialize>(dir: &Path, command: &str, config: &T) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let text = toml::to_string(&Snapshot { command, config })
        .map_err(|e| Error::Config(format!("cannot serialize resolved config: {e}")))?;
    let path = dir.join(SNAPSHOT_FILE);
    fs::write(&path, text)?;
    Ok(path)
}

pub fn require(p: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    p.clone().ok_or_else(|| Error::Config(format!("missing {what}")))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub backbone: Option<BackboneConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub out: Option<PathBuf>,
    pub limit: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { out: None, limit: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildConfig {
    pub input: Option<PathBuf>,
    pub mode: PipelineMode,
    pub seed: u64,
    pub clients: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub limit: Option<usize>,
    pub n_samples: usize,
    pub k_top: usize,
    pub face_scale: f32,
    pub body_scale: f32,
    pub mask_retries: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        let o = tryon_core::pipeline::PipelineOptions::default();
        Self {
            input: None,
            mode: PipelineMode::ShopPair,
            seed: 0,
            clients: None,
            out: None,
            limit: None,
            n_samples: o.n_samples,
            k_top: o.k_top,
            face_scale: o.scales.0,
            body_scale: o.scales.1,
            mask_retries: o.mask_retries,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub manifest: Option<PathBuf>,
    pub backbone: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub log_every: u64,
    pub train: TrainConfig,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self { manifest: None, backbone: None, out: None, resume: None, log_every: 1, train: TrainConfig::default() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum VideoFormat {
    /// PNG frames plus `index.json`.
    #[default]
    Frames,
    /// Single raw `f32` container.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub checkpoint: Option<PathBuf>,
    pub human: Option<PathBuf>,
    pub garments: Vec<PathBuf>,
    pub pose: Option<PathBuf>,
    pub prompt: String,
    pub steps: usize,
    pub seed: u64,
    pub alpha: f32,
    pub beta: f32,
    /// Interpolation weight of the first garment; `interpolate` only.
    pub gamma: Option<f32>,
    pub out: Option<PathBuf>,
    pub format: VideoFormat,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            human: None,
            garments: Vec::new(),
            pose: None,
            prompt: String::new(),
            steps: tryon_core::sampling::DEFAULT_STEPS,
            seed: 0,
            alpha: tryon_core::dual::DEFAULT_ALPHA,
            beta: tryon_core::dual::DEFAULT_BETA,
            gamma: None,
            out: None,
            format: VideoFormat::Frames,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    /// `stub` or an HTTP endpoint serving the `features.*` tasks.
    pub backend: String,
    pub image_dim: usize,
    pub i3d_dim: usize,
    pub resnext_dim: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        use tryon_core::metrics::{ConvStack, FeatureExtractor, PoolPyramid};
        Self {
            backend: "stub".into(),
            image_dim: ConvStack::standard().dim(),
            i3d_dim: PoolPyramid::i3d().dim(),
            resnext_dim: PoolPyramid::resnext().dim(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub pairs: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub layout: String,
    /// Datasets to keep; empty keeps all.
    pub datasets: Vec<String>,
    pub extractors: ExtractorConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { pairs: None, out: None, layout: "table1".into(), datasets: Vec::new(), extractors: ExtractorConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub addr: String,
    pub max_requests: Option<usize>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self { addr: "127.0.0.1:8765".into(), max_requests: None }
    }
}
