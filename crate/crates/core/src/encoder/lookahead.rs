//! Receptive-field and frame-rate arithmetic.
//!
//! Only convolution right context adds future input; unidirectional
//! attention never looks ahead. A layer whose input runs at `f` times the
//! input hop contributes `right_context × f` input frames of look-ahead.

use serde::Serialize;

use super::config::{ConvKind, EncoderConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Lookahead {
    pub input_frames: usize,
    pub ms: u32,
}

pub fn lookahead(cfg: &EncoderConfig) -> Lookahead {
    let input_frames = layer_fields(cfg)
        .iter()
        .map(|l| l.right_frames)
        .sum::<usize>();
    Lookahead {
        input_frames,
        ms: input_frames as u32 * cfg.input_hop_ms,
    }
}

/// Encoder frames produced for `input_frames` feature frames: each strided
/// conv maps `T` to `ceil(T / stride)`.
pub fn output_length(input_frames: usize, cfg: &EncoderConfig) -> usize {
    cfg.blocks
        .iter()
        .flat_map(|b| &b.convs)
        .fold(input_frames, |t, c| t.div_ceil(c.time_stride()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv1d,
    Conv2d,
    Transformer,
}

/// Per-layer context, in 10 ms input frames unless noted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerField {
    pub block: usize,
    pub index: usize,
    pub kind: LayerKind,
    pub input_rate_ms: u32,
    pub output_rate_ms: u32,
    /// History needed by this layer; `None` for unlimited attention.
    pub left_frames: Option<usize>,
    pub right_frames: usize,
    /// Look-ahead accumulated up to and including this layer.
    pub cumulative_right_frames: usize,
    /// Scalars carried between streaming steps.
    pub cached_values: Option<usize>,
}

pub fn layer_fields(cfg: &EncoderConfig) -> Vec<LayerField> {
    let hop = cfg.input_hop_ms;
    let mut factor = 1usize;
    let mut cumulative = 0usize;
    let mut out = Vec::new();
    for (b, block) in cfg.blocks.iter().enumerate() {
        for (i, conv) in block.convs.iter().enumerate() {
            let right = conv.right_context * factor;
            cumulative += right;
            let in_rate = factor as u32 * hop;
            let left = conv.left_context * factor;
            factor *= conv.time_stride();
            out.push(LayerField {
                block: b,
                index: i,
                kind: match conv.kind {
                    ConvKind::Conv1d => LayerKind::Conv1d,
                    ConvKind::Conv2d => LayerKind::Conv2d,
                },
                input_rate_ms: in_rate,
                output_rate_ms: factor as u32 * hop,
                left_frames: Some(left),
                right_frames: right,
                cumulative_right_frames: cumulative,
                // history rows held by the ring buffer; width known only at runtime
                cached_values: None,
            });
        }
        for l in 0..block.layers {
            let rate = factor as u32 * hop;
            let window = cfg.left_attention_window;
            out.push(LayerField {
                block: b,
                index: block.convs.len() + l,
                kind: LayerKind::Transformer,
                input_rate_ms: rate,
                output_rate_ms: rate,
                left_frames: window.map(|w| (w - 1) * factor),
                right_frames: 0,
                cumulative_right_frames: cumulative,
                cached_values: window.map(|w| 2 * w * block.layer.model_dim),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::config::{BlockSpec, ConvLayerSpec, TransformerLayerSpec};

    #[test]
    fn default_is_fourteen_frames() {
        let cfg = EncoderConfig::preset("default-2-2-8").unwrap();
        let la = lookahead(&cfg);
        assert_eq!(la.input_frames, 2 + 4 + 8);
        assert_eq!(la.ms, 140);
    }

    #[test]
    fn causal_preset_has_no_lookahead() {
        let cfg = EncoderConfig::preset("causal").unwrap();
        assert_eq!(lookahead(&cfg).ms, 0);
    }

    #[test]
    fn single_conv_at_input_rate() {
        let cfg = EncoderConfig {
            input_hop_ms: 10,
            blocks: vec![BlockSpec {
                convs: vec![ConvLayerSpec::conv1d(4, 1, 0, 2)],
                layers: 0,
                layer: TransformerLayerSpec::new(1, 4, 4, 0.0),
            }],
            left_attention_window: None,
        };
        assert_eq!(lookahead(&cfg).ms, 20);
    }

    #[test]
    fn output_lengths() {
        let cfg = EncoderConfig::preset("default").unwrap();
        assert_eq!(output_length(160, &cfg), 20);
        assert_eq!(output_length(1, &cfg), 1);
        let hfr = EncoderConfig::preset("hfr").unwrap();
        assert_eq!(output_length(160, &hfr), 40);
    }

    #[test]
    fn transformer_rows_add_no_lookahead() {
        let cfg = EncoderConfig::preset("dist-0-0-11")
            .unwrap()
            .with_window(Some(16));
        let fields = layer_fields(&cfg);
        let tf: Vec<_> = fields
            .iter()
            .filter(|f| f.kind == LayerKind::Transformer)
            .collect();
        assert_eq!(tf.len(), 11);
        assert!(tf
            .iter()
            .all(|f| f.right_frames == 0 && f.input_rate_ms == 80));
        assert_eq!(tf[0].left_frames, Some(15 * 8));
    }
}
