//! Chunked encoding with bounded state.
//!
//! Each conv keeps the input rows it still needs; each Transformer layer
//! keeps a key/value cache. Outputs are bitwise identical to
//! [`encode_offline`](super::encode_offline) because every conv output is
//! computed from the same rows with the same skipped padding positions.

use std::collections::VecDeque;

use super::attention::KvCache;
use super::config::{ConvKind, EncoderConfig};
use super::network::{bind_encoder, block_transformer, conv_bn_relu, conv_shapes, BlockVars};
use crate::engine::{Array, Graph, ParamStore};
use crate::error::{Error, Result};

/// Rows received by one conv that may still be read.
#[derive(Clone, Debug)]
struct ConvBuffer {
    rows: VecDeque<Vec<f64>>,
    /// Absolute index of `rows[0]`.
    first: usize,
    received: usize,
    next_out: usize,
    row_shape: Vec<usize>,
}

impl ConvBuffer {
    fn new(row_shape: Vec<usize>) -> Self {
        Self {
            rows: VecDeque::new(),
            first: 0,
            received: 0,
            next_out: 0,
            row_shape,
        }
    }

    fn push(&mut self, row: Vec<f64>) {
        self.rows.push_back(row);
        self.received += 1;
    }

    /// Input window `(lo, hi, pad_l, pad_r)` for the next output, if it can
    /// be computed. `done` marks the input as complete.
    fn next_window(
        &self,
        left: usize,
        right: usize,
        stride: usize,
        done: bool,
    ) -> Option<(usize, usize, usize, usize)> {
        let center = self.next_out * stride;
        if center >= self.received {
            return None;
        }
        let need_hi = center + right;
        if !done && need_hi >= self.received {
            return None;
        }
        let lo = center.saturating_sub(left);
        let pad_l = left - (center - lo);
        let hi = need_hi.min(self.received - 1);
        Some((lo, hi, pad_l, need_hi - hi))
    }

    fn window(&self, lo: usize, hi: usize) -> Result<Array> {
        let mut shape = vec![hi + 1 - lo];
        shape.extend_from_slice(&self.row_shape);
        let mut data = Vec::with_capacity(shape.iter().product());
        for i in lo..=hi {
            data.extend_from_slice(&self.rows[i - self.first]);
        }
        Array::new(shape, data)
    }

    fn discard_before(&mut self, index: usize) {
        while self.first < index && !self.rows.is_empty() {
            self.rows.pop_front();
            self.first += 1;
        }
    }
}

/// Everything carried between chunks.
#[derive(Clone, Debug)]
pub struct StreamState {
    convs: Vec<Vec<ConvBuffer>>,
    caches: Vec<Vec<KvCache>>,
    /// Frames that have entered each block's Transformer stack.
    block_frames: Vec<usize>,
    input_frames: usize,
    emitted: usize,
    finished: bool,
    feat_dim: usize,
}

impl StreamState {
    pub fn new(cfg: &EncoderConfig, feat_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let shapes = conv_shapes(cfg, feat_dim);
        let convs = cfg
            .blocks
            .iter()
            .enumerate()
            .map(|(b, block)| {
                block
                    .convs
                    .iter()
                    .enumerate()
                    .map(|(j, conv)| {
                        let (f, c) = shapes.inputs[b][j];
                        ConvBuffer::new(match conv.kind {
                            ConvKind::Conv2d => vec![f, c],
                            ConvKind::Conv1d => vec![f * c],
                        })
                    })
                    .collect()
            })
            .collect();
        let caches = cfg
            .blocks
            .iter()
            .map(|b| {
                (0..b.layers)
                    .map(|_| KvCache::empty(b.layer.model_dim))
                    .collect()
            })
            .collect();
        Ok(Self {
            convs,
            caches,
            block_frames: vec![0; cfg.blocks.len()],
            input_frames: 0,
            emitted: 0,
            finished: false,
            feat_dim,
        })
    }

    /// Feature frames consumed so far.
    pub fn input_frames(&self) -> usize {
        self.input_frames
    }

    /// Encoder frames produced so far.
    pub fn emitted(&self) -> usize {
        self.emitted
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// Rows held by each conv buffer, per block.
    pub fn conv_rows(&self) -> Vec<Vec<usize>> {
        self.convs
            .iter()
            .map(|b| b.iter().map(|c| c.rows.len()).collect())
            .collect()
    }

    /// Cached key rows of each Transformer layer, per block.
    pub fn cache_lens(&self) -> Vec<Vec<usize>> {
        self.caches
            .iter()
            .map(|b| b.iter().map(KvCache::len).collect())
            .collect()
    }

    /// Total scalars held by the state.
    pub fn cached_values(&self) -> usize {
        let conv: usize = self
            .convs
            .iter()
            .flatten()
            .flat_map(|c| c.rows.iter().map(Vec::len))
            .sum();
        let kv: usize = self
            .caches
            .iter()
            .flatten()
            .map(|c| c.keys.len() + c.values.len())
            .sum();
        conv + kv
    }
}

/// A run of consecutive feature frames.
#[derive(Clone, Copy, Debug)]
pub struct StreamChunk<'a> {
    /// Index of the first frame in the utterance.
    pub start_frame: usize,
    /// `[n, feat_dim]`; may be empty.
    pub frames: &'a Array,
    /// No frames follow; pending outputs are flushed.
    pub end_of_stream: bool,
}

/// Feeds one chunk and returns the encoder frames that became computable,
/// `[m, DM]`.
pub fn encode_stream(
    cfg: &EncoderConfig,
    params: &ParamStore,
    state: &mut StreamState,
    chunk: StreamChunk<'_>,
) -> Result<Array> {
    if state.finished {
        return Err(Error::Stream("chunk after end of stream".into()));
    }
    if chunk.start_frame != state.input_frames {
        return Err(Error::Stream(format!(
            "chunk starts at frame {} but {} frames were consumed",
            chunk.start_frame, state.input_frames
        )));
    }
    let n = match *chunk.frames.shape() {
        [n, f] if f == state.feat_dim => n,
        [0] => 0,
        ref s => {
            return Err(Error::shape(
                "encode_stream",
                format!("chunk {s:?}, expected [n, {}]", state.feat_dim),
            ))
        }
    };
    if chunk.end_of_stream && state.input_frames + n == 0 {
        return Err(Error::Input("stream ended without any frames".into()));
    }
    let mut g = Graph::new();
    let vars = bind_encoder(&mut g, params, cfg)?;
    for t in 0..n {
        state.convs[0][0].push(chunk.frames.row(t).to_vec());
    }
    state.input_frames += n;
    let done = chunk.end_of_stream;

    let dm = cfg.output_dim();
    let mut out = Vec::new();
    for b in 0..cfg.blocks.len() {
        let rows = run_block_convs(&mut g, cfg, &vars[b], state, b, done)?;
        if rows.is_empty() {
            continue;
        }
        let count = rows.len();
        let width = rows[0].len();
        let x = g.constant(Array::new([count, width], rows.concat())?);
        let start = state.block_frames[b];
        let (y, kv) = block_transformer(
            &mut g,
            &vars[b],
            cfg,
            b,
            x,
            start,
            Some(state.caches[b].as_slice()),
            None,
        )?;
        for (cache, (k, v)) in state.caches[b].iter_mut().zip(kv) {
            cache.append(g.value(k), g.value(v), cfg.left_attention_window);
        }
        state.block_frames[b] += count;
        let y = g.value(y);
        if b + 1 < cfg.blocks.len() {
            for r in 0..count {
                state.convs[b + 1][0].push(y.row(r).to_vec());
            }
        } else {
            out.extend_from_slice(y.data());
        }
    }
    state.finished = done;
    let m = out.len() / dm;
    state.emitted += m;
    Array::new([m, dm], out)
}

/// Runs the three convs of block `b` over whatever became available and
/// returns the flattened output rows of the last one.
fn run_block_convs(
    g: &mut Graph,
    cfg: &EncoderConfig,
    bv: &BlockVars,
    state: &mut StreamState,
    b: usize,
    done: bool,
) -> Result<Vec<Vec<f64>>> {
    let convs = &cfg.blocks[b].convs;
    let mut produced = Vec::new();
    for (j, spec) in convs.iter().enumerate() {
        let (l, r, s) = (spec.left_context, spec.right_context, spec.time_stride());
        produced.clear();
        let buf = &mut state.convs[b][j];
        while let Some((lo, hi, pad_l, pad_r)) = buf.next_window(l, r, s, done) {
            let x = g.constant(buf.window(lo, hi)?);
            let y = conv_bn_relu(g, &bv.convs[j], spec, x, (pad_l, pad_r))?;
            produced.push(g.value(y).data().to_vec());
            buf.next_out += 1;
            buf.discard_before((buf.next_out * s).saturating_sub(l));
        }
        if j + 1 < convs.len() {
            for row in produced.drain(..) {
                state.convs[b][j + 1].push(row);
            }
        }
    }
    Ok(produced)
}
