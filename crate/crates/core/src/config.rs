//! Model configuration files.
//!
//! A model config is a TOML document with a `schema_version` key and
//! `[encoder]`, `[predictor]` and `[joint]` tables. Named presets cover the
//! desk-scale model and the small models used for tests and the toy task.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{Dims, EncoderConfig, TransformerLayerSpec};
use crate::error::{Error, Result};
use crate::predictor::{JointConfig, PredictorConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Names accepted by [`ModelConfig::preset`].
pub const MODEL_PRESETS: &[&str] = &["desk", "toy", "tiny"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub schema_version: u32,
    /// Log-mel bins per input frame.
    pub feat_dim: usize,
    /// Output symbols including blank.
    pub vocab_size: usize,
    pub encoder: EncoderConfig,
    pub predictor: PredictorConfig,
    pub joint: JointConfig,
}

impl ModelConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let cfg = match name {
            "desk" => Self::build(Dims::DESK, [2, 2, 8], 128, 30, 2, 512),
            "toy" => Self::build(
                Dims {
                    channels: [4, 16, 16],
                    heads: 2,
                    head_dim: 8,
                    ffn_dim: 32,
                    freq_kernel: 3,
                },
                [1, 1, 1],
                16,
                5,
                1,
                32,
            ),
            "tiny" => Self::build(
                Dims {
                    channels: [2, 3, 3],
                    heads: 1,
                    head_dim: 4,
                    ffn_dim: 4,
                    freq_kernel: 3,
                },
                [1, 1, 1],
                4,
                4,
                1,
                6,
            ),
            other => {
                return Err(Error::Config(format!(
                    "unknown model preset `{other}` (known: {})",
                    MODEL_PRESETS.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    fn build(
        dims: Dims,
        layers: [usize; 3],
        feat_dim: usize,
        vocab_size: usize,
        pred_layers: usize,
        hidden: usize,
    ) -> Self {
        let mut encoder = EncoderConfig::interleaved(dims, layers, 2, 1);
        encoder.left_attention_window = None;
        let dm = dims.heads * dims.head_dim;
        Self {
            schema_version: SCHEMA_VERSION,
            feat_dim,
            vocab_size,
            encoder,
            predictor: PredictorConfig {
                embed_dim: dm,
                layers: pred_layers,
                layer: TransformerLayerSpec::new(dims.heads, dims.head_dim, dims.ffn_dim, 0.1),
                left_attention_window: None,
            },
            joint: JointConfig { hidden },
        }
    }

    /// Replaces the encoder with a named layout using this model's widths.
    pub fn with_encoder_preset(mut self, name: &str) -> Result<Self> {
        let b0 = &self.encoder.blocks[0];
        let dims = Dims {
            channels: [
                self.encoder.blocks[0].convs[0].channels,
                self.encoder.blocks[1].convs[0].channels,
                self.encoder.blocks[2].convs[0].channels,
            ],
            heads: b0.layer.heads,
            head_dim: b0.layer.head_dim,
            ffn_dim: b0.layer.ffn_dim,
            freq_kernel: b0.convs[0].freq_kernel(),
        };
        let window = self.encoder.left_attention_window;
        let dropout = b0.layer.dropout;
        self.encoder = EncoderConfig::preset_with_dims(name, dims)?
            .with_window(window)
            .with_dropout(dropout);
        Ok(self)
    }

    pub fn with_dropout(mut self, dropout: f64) -> Self {
        self.encoder = self.encoder.with_dropout(dropout);
        self.predictor.layer.dropout = dropout;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.feat_dim == 0 {
            return Err(Error::Config("feat_dim must be positive".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config(
                "vocab_size must include blank and at least one label".into(),
            ));
        }
        if self.joint.hidden == 0 {
            return Err(Error::Config("joint hidden width must be positive".into()));
        }
        self.encoder.validate()?;
        self.predictor.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}
