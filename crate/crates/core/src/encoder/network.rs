//! Parameters and the offline forward pass of the audio encoder.

use rand::RngCore;

use super::attention::{
    glorot, init_layer, reborrow_rng, transformer_layer, LayerVars, LAYER_NORM_EPS,
};
use super::config::{ConvKind, ConvLayerSpec, EncoderConfig};
use crate::engine::{Array, Graph, ParamStore, Var};
use crate::error::{Error, Result};

pub const BATCH_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub w: Var,
    pub b: Var,
    pub mean: Var,
    pub var: Var,
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Clone, Debug)]
pub struct BlockVars {
    pub convs: Vec<ConvVars>,
    pub proj_w: Var,
    pub proj_b: Var,
    pub layers: Vec<LayerVars>,
    pub ln_out: Option<(Var, Var)>,
}

pub fn conv_prefix(block: usize, conv: usize) -> String {
    format!("enc.b{block}.conv{conv}")
}

pub fn layer_prefix(block: usize, layer: usize) -> String {
    format!("enc.b{block}.layer{layer}")
}

/// Feature width entering each conv (channels × remaining frequency bins)
/// and the flattened width leaving each block's convs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvShapes {
    /// `(freq, channels)` at the input of every conv, per block.
    pub inputs: Vec<Vec<(usize, usize)>>,
    /// Flattened width after the last conv of each block.
    pub block_widths: Vec<usize>,
}

pub fn conv_shapes(cfg: &EncoderConfig, feat_dim: usize) -> ConvShapes {
    // (freq, channels); a 1-D representation is (1, width)
    let mut cur = (feat_dim, 1usize);
    let mut is_2d = true;
    let mut inputs = Vec::new();
    let mut widths = Vec::new();
    for block in &cfg.blocks {
        let mut ins = Vec::new();
        for conv in &block.convs {
            if conv.kind == ConvKind::Conv1d && is_2d {
                cur = (1, cur.0 * cur.1);
                is_2d = false;
            }
            ins.push(cur);
            cur = match conv.kind {
                ConvKind::Conv2d => (cur.0.div_ceil(conv.freq_stride()), conv.channels),
                ConvKind::Conv1d => (1, conv.channels),
            };
        }
        inputs.push(ins);
        widths.push(cur.0 * cur.1);
        // the projection makes everything after it one-dimensional
        cur = (1, block.layer.model_dim);
        is_2d = false;
    }
    ConvShapes {
        inputs,
        block_widths: widths,
    }
}

pub fn init_encoder(
    store: &mut ParamStore,
    cfg: &EncoderConfig,
    feat_dim: usize,
    rng: &mut dyn RngCore,
) -> Result<()> {
    cfg.validate()?;
    let shapes = conv_shapes(cfg, feat_dim);
    for (b, block) in cfg.blocks.iter().enumerate() {
        for (j, conv) in block.convs.iter().enumerate() {
            let (_, cin) = shapes.inputs[b][j];
            let p = conv_prefix(b, j);
            let (w_shape, fan_in) = match conv.kind {
                ConvKind::Conv2d => (
                    vec![conv.time_kernel(), conv.freq_kernel(), cin, conv.channels],
                    conv.time_kernel() * conv.freq_kernel() * cin,
                ),
                ConvKind::Conv1d => (
                    vec![conv.time_kernel(), cin, conv.channels],
                    conv.time_kernel() * cin,
                ),
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            store.insert(format!("{p}.w"), Array::uniform(w_shape, bound, rng));
            store.insert(format!("{p}.b"), Array::zeros([conv.channels]));
            store.insert(format!("{p}.bn.mean"), Array::zeros([conv.channels]));
            store.insert(format!("{p}.bn.var"), Array::full([conv.channels], 1.0));
            store.insert(format!("{p}.bn.gamma"), Array::full([conv.channels], 1.0));
            store.insert(format!("{p}.bn.beta"), Array::zeros([conv.channels]));
        }
        let (width, dm) = (shapes.block_widths[b], block.layer.model_dim);
        store.insert(
            format!("enc.b{b}.proj.w"),
            Array::uniform([width, dm], glorot(width, dm), rng),
        );
        store.insert(format!("enc.b{b}.proj.b"), Array::zeros([dm]));
        for l in 0..block.layers {
            init_layer(store, &layer_prefix(b, l), &block.layer, rng);
        }
        if block.layers > 0 {
            store.insert(format!("enc.b{b}.ln_out.gamma"), Array::full([dm], 1.0));
            store.insert(format!("enc.b{b}.ln_out.beta"), Array::zeros([dm]));
        }
    }
    Ok(())
}

/// Binds the encoder parameters on `g`. Batch-norm running statistics are
/// frozen.
pub fn bind_encoder(
    g: &mut Graph,
    params: &ParamStore,
    cfg: &EncoderConfig,
) -> Result<Vec<BlockVars>> {
    let p = |g: &mut Graph, key: String, trainable: bool| -> Result<Var> {
        Ok(g.param(&key, params.get(&key)?, trainable))
    };
    let mut blocks = Vec::with_capacity(cfg.blocks.len());
    for (b, block) in cfg.blocks.iter().enumerate() {
        let mut convs = Vec::with_capacity(block.convs.len());
        for j in 0..block.convs.len() {
            let pre = conv_prefix(b, j);
            convs.push(ConvVars {
                w: p(g, format!("{pre}.w"), true)?,
                b: p(g, format!("{pre}.b"), true)?,
                mean: p(g, format!("{pre}.bn.mean"), false)?,
                var: p(g, format!("{pre}.bn.var"), false)?,
                gamma: p(g, format!("{pre}.bn.gamma"), true)?,
                beta: p(g, format!("{pre}.bn.beta"), true)?,
            });
        }
        let proj_w = p(g, format!("enc.b{b}.proj.w"), true)?;
        let proj_b = p(g, format!("enc.b{b}.proj.b"), true)?;
        let layers = (0..block.layers)
            .map(|l| LayerVars::bind(g, params, &layer_prefix(b, l)))
            .collect::<Result<Vec<_>>>()?;
        let ln_out = if block.layers > 0 {
            Some((
                p(g, format!("enc.b{b}.ln_out.gamma"), true)?,
                p(g, format!("enc.b{b}.ln_out.beta"), true)?,
            ))
        } else {
            None
        };
        blocks.push(BlockVars {
            convs,
            proj_w,
            proj_b,
            layers,
            ln_out,
        });
    }
    Ok(blocks)
}

/// Conv → batch norm → ReLU with explicit time padding.
pub fn conv_bn_relu(
    g: &mut Graph,
    cv: &ConvVars,
    spec: &ConvLayerSpec,
    x: Var,
    pads: (usize, usize),
) -> Result<Var> {
    let y = match spec.kind {
        ConvKind::Conv2d => g.conv2d(
            x,
            cv.w,
            cv.b,
            (spec.time_stride(), spec.freq_stride()),
            pads,
            spec.freq_pad(),
        )?,
        ConvKind::Conv1d => g.conv1d(x, cv.w, cv.b, spec.time_stride(), pads.0, pads.1)?,
    };
    let y = g.batch_norm_inference(y, cv.mean, cv.var, cv.gamma, cv.beta, BATCH_NORM_EPS)?;
    g.relu(y)
}

/// Collapses `[T, F, C]` to `[T, F·C]`; 2-D input passes through.
pub fn flatten_time(g: &mut Graph, x: Var) -> Result<Var> {
    match *g.shape(x) {
        [t, f, c] => g.reshape(x, &[t, f * c]),
        [_, _] => Ok(x),
        ref s => Err(Error::shape("flatten_time", format!("{s:?}"))),
    }
}

/// Projection and Transformer stack of one block over rows starting at
/// absolute position `start` (offline: no caches).
pub fn block_transformer(
    g: &mut Graph,
    bv: &BlockVars,
    cfg: &EncoderConfig,
    block: usize,
    x: Var,
    start: usize,
    caches: Option<&[super::attention::KvCache]>,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<(Var, Vec<(Var, Var)>)> {
    let spec = &cfg.blocks[block].layer;
    let x = flatten_time(g, x)?;
    let x = g.matmul(x, bv.proj_w)?;
    let mut x = g.add_row(x, bv.proj_b)?;
    let mut kv = Vec::with_capacity(bv.layers.len());
    for (l, lv) in bv.layers.iter().enumerate() {
        let cache = caches.map(|c| &c[l]);
        let out = transformer_layer(
            g,
            lv,
            spec,
            x,
            start,
            cache,
            cfg.left_attention_window,
            reborrow_rng(&mut rng),
        )?;
        kv.push((out.keys, out.values));
        x = out.out;
    }
    if let Some((gamma, beta)) = bv.ln_out {
        x = g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)?;
    }
    Ok((x, kv))
}

/// Whole-utterance forward pass recorded on `g`. `frames`: `[T, feat_dim]`.
/// Dropout is active only when `rng` is given.
pub fn encode_graph(
    g: &mut Graph,
    cfg: &EncoderConfig,
    vars: &[BlockVars],
    frames: Var,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let (t, f) = match *g.shape(frames) {
        [t, f] => (t, f),
        ref s => return Err(Error::shape("encoder", format!("frames {s:?}"))),
    };
    if t == 0 {
        return Err(Error::Input("encoder needs at least one frame".into()));
    }
    let mut x = if cfg.blocks[0].convs[0].kind == ConvKind::Conv2d {
        g.reshape(frames, &[t, f, 1])?
    } else {
        frames
    };
    for (b, block) in cfg.blocks.iter().enumerate() {
        for (j, conv) in block.convs.iter().enumerate() {
            if conv.kind == ConvKind::Conv1d {
                x = flatten_time(g, x)?;
            }
            x = conv_bn_relu(
                g,
                &vars[b].convs[j],
                conv,
                x,
                (conv.left_context, conv.right_context),
            )?;
        }
        x = block_transformer(g, &vars[b], cfg, b, x, 0, None, reborrow_rng(&mut rng))?.0;
    }
    Ok(x)
}

/// Deterministic whole-utterance encoding: `[T, feat_dim]` → `[T′, DM]`.
pub fn encode_offline(cfg: &EncoderConfig, params: &ParamStore, frames: &Array) -> Result<Array> {
    let mut g = Graph::new();
    let vars = bind_encoder(&mut g, params, cfg)?;
    let x = g.constant(frames.clone());
    let out = encode_graph(&mut g, cfg, &vars, x, None)?;
    Ok(g.value(out).clone())
}
