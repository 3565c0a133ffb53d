//! Run configuration: built-in preset, then an optional TOML file, then
//! command-line flags, each layer overriding the previous one.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use spectttra::{
    AugmentConfig, ClipConfig, EncoderConfig, FrontendConfig, ModelConfig, PatchConfig, SpectrogramConfig,
    TrainConfig, TrainSetup, Variant,
};

use crate::UsageError;

pub const TINY: &str = include_str!("../../../configs/tiny.toml");
pub const FULL: &str = include_str!("../../../configs/full.toml");

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub spectrogram: SpectrogramConfig,
    pub frontend: FrontendConfig,
    pub encoder: EncoderConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub paths: Paths,
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                // a new frontend kind replaces the whole table
                if k == "frontend" && o.get("kind").is_some_and(|kind| Some(kind) != b.get("kind")) {
                    base.insert(k, toml::Value::Table(o));
                } else {
                    merge(b, o);
                }
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn preset_text(name: &str) -> anyhow::Result<&'static str> {
    match name {
        "tiny" => Ok(TINY),
        "full" => Ok(FULL),
        other => Err(UsageError(format!("unknown preset {other:?} (tiny, full)")).into()),
    }
}

impl RunConfig {
    /// Preset overlaid with the TOML file at `path`, if any.
    pub fn load(preset: &str, path: Option<&Path>) -> anyhow::Result<Self> {
        let mut table: toml::Table = preset_text(preset)?.parse().context("built-in preset")?;
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let user: toml::Table = text
                .parse()
                .map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
            merge(&mut table, user);
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e| UsageError(format!("invalid configuration: {e}")).into())
    }

    pub fn set_variant(&mut self, name: &str) -> anyhow::Result<()> {
        self.frontend = if name == "vit" {
            FrontendConfig::Vit(PatchConfig::default())
        } else {
            let v: Variant = name.parse().map_err(|e: spectttra::Error| UsageError(e.to_string()))?;
            FrontendConfig::Spectttra(ClipConfig::from_variant(v).map_err(|e| UsageError(e.to_string()))?)
        };
        Ok(())
    }

    pub fn set_ablation(&mut self, temporal_only: bool, spectral_only: bool) -> anyhow::Result<()> {
        if !(temporal_only || spectral_only) {
            return Ok(());
        }
        match &mut self.frontend {
            FrontendConfig::Spectttra(c) if !(temporal_only && spectral_only) => {
                *c = if temporal_only { c.temporal_only() } else { c.spectral_only() };
                Ok(())
            }
            FrontendConfig::Spectttra(_) => bail!(UsageError("pick one of --temporal-only / --spectral-only".into())),
            FrontendConfig::Vit(_) => bail!(UsageError("ablations apply to spectttra tokenizers only".into())),
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            n_mels: self.spectrogram.n_mels,
            n_frames: self.spectrogram.target_frames,
            frontend: self.frontend,
            encoder: self.encoder,
        }
    }

    pub fn setup(&self) -> TrainSetup {
        TrainSetup {
            spectrogram: self.spectrogram.clone(),
            model: self.model(),
            augment: self.augment,
            train: self.train.clone(),
            out_dir: self.paths.out_dir.clone(),
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.setup().validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(())
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}
