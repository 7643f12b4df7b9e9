use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvKind {
    /// Over (time, frequency); only valid before any 1-D layer.
    Conv2d,
    /// Over time, with all features as input channels.
    Conv1d,
}

/// One `Conv-BN-ReLU` layer. The time kernel always spans
/// `left_context + 1 + right_context` input frames.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub kind: ConvKind,
    /// `[time]` for 1-D, `[time, freq]` for 2-D.
    pub kernel: Vec<usize>,
    /// Same arity as `kernel`.
    pub stride: Vec<usize>,
    pub channels: usize,
    pub left_context: usize,
    pub right_context: usize,
}

impl ConvLayerSpec {
    pub fn conv1d(channels: usize, stride: usize, left: usize, right: usize) -> Self {
        Self {
            kind: ConvKind::Conv1d,
            kernel: vec![left + right + 1],
            stride: vec![stride],
            channels,
            left_context: left,
            right_context: right,
        }
    }

    pub fn conv2d(
        channels: usize,
        stride: (usize, usize),
        left: usize,
        right: usize,
        freq_kernel: usize,
    ) -> Self {
        Self {
            kind: ConvKind::Conv2d,
            kernel: vec![left + right + 1, freq_kernel],
            stride: vec![stride.0, stride.1],
            channels,
            left_context: left,
            right_context: right,
        }
    }

    pub fn time_kernel(&self) -> usize {
        self.kernel[0]
    }

    pub fn time_stride(&self) -> usize {
        self.stride[0]
    }

    pub fn freq_kernel(&self) -> usize {
        self.kernel.get(1).copied().unwrap_or(1)
    }

    pub fn freq_stride(&self) -> usize {
        self.stride.get(1).copied().unwrap_or(1)
    }

    /// Symmetric frequency padding ("same" for stride 1).
    pub fn freq_pad(&self) -> usize {
        (self.freq_kernel() - 1) / 2
    }

    pub fn validate(&self) -> Result<()> {
        let arity = match self.kind {
            ConvKind::Conv1d => 1,
            ConvKind::Conv2d => 2,
        };
        if self.kernel.len() != arity || self.stride.len() != arity {
            return Err(Error::Config(format!(
                "{:?} needs {arity}-element kernel and stride",
                self.kind
            )));
        }
        if self.left_context + self.right_context + 1 != self.time_kernel() {
            return Err(Error::Config(format!(
                "time kernel {} != left {} + right {} + 1",
                self.time_kernel(),
                self.left_context,
                self.right_context
            )));
        }
        if !matches!(self.time_stride(), 1 | 2) {
            return Err(Error::Config(format!(
                "time stride {} not in {{1, 2}}",
                self.time_stride()
            )));
        }
        if self.kind == ConvKind::Conv2d {
            if self.freq_kernel() % 2 == 0 {
                return Err(Error::Config("frequency kernel must be odd".into()));
            }
            if self.freq_stride() == 0 {
                return Err(Error::Config("frequency stride must be positive".into()));
            }
        }
        if self.channels == 0 {
            return Err(Error::Config("conv channels must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerLayerSpec {
    pub heads: usize,
    pub head_dim: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    #[serde(default)]
    pub dropout: f64,
}

impl TransformerLayerSpec {
    pub fn new(heads: usize, head_dim: usize, ffn_dim: usize, dropout: f64) -> Self {
        Self {
            heads,
            head_dim,
            model_dim: heads * head_dim,
            ffn_dim,
            dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("transformer dims must be positive".into()));
        }
        if self.heads * self.head_dim != self.model_dim {
            return Err(Error::Config(format!(
                "heads {} × head_dim {} != model_dim {}",
                self.heads, self.head_dim, self.model_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub convs: Vec<ConvLayerSpec>,
    /// Transformer layers after the convolutions (may be zero).
    pub layers: usize,
    pub layer: TransformerLayerSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_hop_ms: u32,
    pub blocks: Vec<BlockSpec>,
    /// Attention left context in frames (including the current one);
    /// `None` attends to the whole history.
    #[serde(default)]
    pub left_attention_window: Option<usize>,
}

/// Names accepted by [`EncoderConfig::preset`].
pub const PRESETS: &[&str] = &[
    "default-2-2-8",
    "hfr",
    "dist-2-4-6",
    "dist-2-6-4",
    "dist-2-0-10",
    "dist-0-0-11",
    "causal",
];

/// Dimensions shared by the presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub channels: [usize; 3],
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub freq_kernel: usize,
}

impl Dims {
    /// Desk-scale defaults.
    pub const DESK: Dims = Dims {
        channels: [32, 64, 128],
        heads: 4,
        head_dim: 36,
        ffn_dim: 576,
        freq_kernel: 3,
    };
}

impl EncoderConfig {
    /// Three blocks of `Conv-BN-ReLU ×3` with the stride-2 conv second and
    /// right context 1 on the third conv, followed by `layers[b]`
    /// Transformer layers.
    pub fn interleaved(
        dims: Dims,
        layers: [usize; 3],
        block3_stride: usize,
        right_context: usize,
    ) -> Self {
        let layer = TransformerLayerSpec::new(dims.heads, dims.head_dim, dims.ffn_dim, 0.1);
        let left = 2;
        let blocks = (0..3)
            .map(|b| {
                let c = dims.channels[b];
                let stride = if b == 2 { block3_stride } else { 2 };
                let convs = if b == 0 {
                    vec![
                        ConvLayerSpec::conv2d(c, (1, 1), left, 0, dims.freq_kernel),
                        ConvLayerSpec::conv2d(c, (stride, 2), left, 0, dims.freq_kernel),
                        ConvLayerSpec::conv2d(c, (1, 1), left, right_context, dims.freq_kernel),
                    ]
                } else {
                    vec![
                        ConvLayerSpec::conv1d(c, 1, left, 0),
                        ConvLayerSpec::conv1d(c, stride, left, 0),
                        ConvLayerSpec::conv1d(c, 1, left, right_context),
                    ]
                };
                BlockSpec {
                    convs,
                    layers: layers[b],
                    layer: layer.clone(),
                }
            })
            .collect();
        Self {
            input_hop_ms: 10,
            blocks,
            left_attention_window: None,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        Self::preset_with_dims(name, Dims::DESK)
    }

    pub fn preset_with_dims(name: &str, dims: Dims) -> Result<Self> {
        let cfg = match name {
            "default-2-2-8" | "default" => Self::interleaved(dims, [2, 2, 8], 2, 1),
            "hfr" => Self::interleaved(dims, [2, 2, 8], 1, 1),
            "dist-2-4-6" => Self::interleaved(dims, [2, 4, 6], 2, 1),
            "dist-2-6-4" => Self::interleaved(dims, [2, 6, 4], 2, 1),
            "dist-2-0-10" => Self::interleaved(dims, [2, 0, 10], 2, 1),
            "dist-0-0-11" => Self::interleaved(dims, [0, 0, 11], 2, 1),
            "causal" => Self::interleaved(dims, [2, 2, 8], 2, 0),
            other => {
                return Err(Error::Config(format!(
                    "unknown encoder preset `{other}` (known: {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    pub fn with_window(mut self, window: Option<usize>) -> Self {
        self.left_attention_window = window;
        self
    }

    pub fn with_dropout(mut self, dropout: f64) -> Self {
        for b in &mut self.blocks {
            b.layer.dropout = dropout;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_hop_ms == 0 {
            return Err(Error::Config("input_hop_ms must be positive".into()));
        }
        if self.blocks.len() != 3 {
            return Err(Error::Config(format!(
                "expected 3 blocks, got {}",
                self.blocks.len()
            )));
        }
        if self.left_attention_window == Some(0) {
            return Err(Error::Config("left_attention_window must be ≥ 1".into()));
        }
        let mut seen_1d = false;
        for (b, block) in self.blocks.iter().enumerate() {
            if block.convs.len() != 3 {
                return Err(Error::Config(format!(
                    "block {b} has {} convs, expected 3",
                    block.convs.len()
                )));
            }
            if block.convs.iter().filter(|c| c.time_stride() == 2).count() > 1 {
                return Err(Error::Config(format!(
                    "block {b} downsamples more than once"
                )));
            }
            for conv in &block.convs {
                conv.validate()?;
                match conv.kind {
                    ConvKind::Conv1d => seen_1d = true,
                    ConvKind::Conv2d if seen_1d => {
                        return Err(Error::Config("2-D conv after a 1-D conv".into()))
                    }
                    ConvKind::Conv2d => {}
                }
            }
            block.layer.validate()?;
        }
        Ok(())
    }

    /// Cumulative time downsampling at the output of each block.
    pub fn block_factors(&self) -> Vec<usize> {
        let mut f = 1;
        self.blocks
            .iter()
            .map(|b| {
                f *= b
                    .convs
                    .iter()
                    .map(ConvLayerSpec::time_stride)
                    .product::<usize>();
                f
            })
            .collect()
    }

    pub fn frame_rates_ms(&self) -> Vec<u32> {
        self.block_factors()
            .into_iter()
            .map(|f| f as u32 * self.input_hop_ms)
            .collect()
    }

    pub fn output_dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.layer.model_dim)
    }
}
