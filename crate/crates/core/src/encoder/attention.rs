//! Unidirectional self-attention with relative position encoding and a
//! bounded left window, plus the pre-norm Transformer layer built on it.
//!
//! The logit between query position `i` and key position `j ≤ i` is
//!
//! ```text
//! ((q_i + u) · k_j + (q_i + v) · (W_r r_{i−j})) / sqrt(head_dim)
//! ```
//!
//! with `r_d` a sinusoidal embedding of the distance and `u`, `v` per-head
//! global biases. Nothing depends on absolute positions, so cached keys and
//! values stay valid as the stream advances.

use rand::{Rng, RngCore};

use super::config::TransformerLayerSpec;
use crate::engine::{Array, Graph, ParamStore, Var};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Sinusoidal embeddings for distances `0..count`, shape `[count, dim]`.
pub fn sinusoid(count: usize, dim: usize) -> Array {
    let mut data = Vec::with_capacity(count * dim);
    for d in 0..count {
        for c in 0..dim {
            let freq = 10000f64.powf(-((c / 2 * 2) as f64) / dim as f64);
            let angle = d as f64 * freq;
            data.push(if c % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Array::new([count, dim], data).expect("sinusoid shape")
}

/// Position parameters of one attention layer.
#[derive(Clone, Copy, Debug)]
pub struct PositionVars {
    /// `[model_dim, model_dim]` projection of the sinusoid.
    pub w_r: Var,
    /// `[heads, head_dim]` content bias.
    pub u: Var,
    /// `[heads, head_dim]` position bias.
    pub v: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Positions {
    pub query_start: usize,
    pub key_start: usize,
}

/// Attention mask and relative-distance index. Returns the per-pair
/// distance (or `None` when masked) and the number of distinct distances.
pub fn relative_index(
    queries: usize,
    keys: usize,
    pos: Positions,
    window: Option<usize>,
) -> Result<(Vec<Option<usize>>, usize)> {
    if window == Some(0) {
        return Err(Error::Config("attention window must be ≥ 1".into()));
    }
    let mut index = Vec::with_capacity(queries * keys);
    let mut max_d = None;
    for qi in 0..queries {
        let i = pos.query_start + qi;
        let mut any = false;
        for kj in 0..keys {
            let j = pos.key_start + kj;
            let allowed = j <= i && window.map_or(true, |w| i - j < w);
            if allowed {
                let d = i - j;
                max_d = Some(max_d.map_or(d, |m: usize| m.max(d)));
                any = true;
                index.push(Some(d));
            } else {
                index.push(None);
            }
        }
        if !any {
            return Err(Error::Input(format!(
                "query at position {i} has no visible key"
            )));
        }
    }
    Ok((index, max_d.map_or(0, |m| m + 1)))
}

/// Multi-head relative attention.
///
/// `q`: `[Tq, heads·head_dim]` at positions `query_start..`, `k`/`v`:
/// `[Tk, heads·head_dim]` at positions `key_start..`.
#[allow(clippy::too_many_arguments)]
pub fn rel_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    pos: Positions,
    window: Option<usize>,
    pv: &PositionVars,
    heads: usize,
) -> Result<Var> {
    let (tq, dm) = match g.shape(q) {
        [a, b] => (*a, *b),
        s => return Err(Error::shape("rel_attention", format!("queries {s:?}"))),
    };
    let tk = g.shape(k)[0];
    if g.shape(k) != g.shape(v) || g.shape(k).get(1) != Some(&dm) || dm % heads != 0 {
        return Err(Error::shape(
            "rel_attention",
            format!(
                "q {:?}, k {:?}, v {:?}, heads {heads}",
                g.shape(q),
                g.shape(k),
                g.shape(v)
            ),
        ));
    }
    let dh = dm / heads;
    let (index, distances) = relative_index(tq, tk, pos, window)?;
    let r = g.constant(sinusoid(distances, dm));
    let r = g.matmul(r, pv.w_r)?;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut contexts = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let rh = g.slice_cols(r, h * dh, dh)?;
        let uh = g.slice_rows(pv.u, h, h + 1, 1)?;
        let vbh = g.slice_rows(pv.v, h, h + 1, 1)?;

        let qu = g.add_row(qh, uh)?;
        let content = g.matmul_t(qu, kh)?;
        let qv = g.add_row(qh, vbh)?;
        let by_distance = g.matmul_t(qv, rh)?;
        let position = g.gather(by_distance, index.clone(), tk)?;
        let logits = g.add(content, position)?;
        let logits = g.scale(logits, scale)?;
        let probs = g.softmax(logits)?;
        contexts.push(g.matmul(probs, vh)?);
    }
    if contexts.len() == 1 {
        Ok(contexts[0])
    } else {
        g.concat_cols(&contexts)
    }
}

/// Keys and values of already-processed positions.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    pub keys: Array,
    pub values: Array,
    /// Absolute position of the first cached row.
    pub start: usize,
}

impl KvCache {
    pub fn empty(dim: usize) -> Self {
        Self {
            keys: Array::zeros([0, dim]),
            values: Array::zeros([0, dim]),
            start: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Position one past the last cached row.
    pub fn end(&self) -> usize {
        self.start + self.len()
    }

    /// Appends rows and keeps only the last `window` positions.
    pub fn append(&mut self, keys: &Array, values: &Array, window: Option<usize>) {
        let dim = self.keys.cols();
        let mut kd = std::mem::replace(&mut self.keys, Array::zeros([0, dim])).into_data();
        let mut vd = std::mem::replace(&mut self.values, Array::zeros([0, dim])).into_data();
        kd.extend_from_slice(keys.data());
        vd.extend_from_slice(values.data());
        let mut rows = kd.len() / dim.max(1);
        if let Some(w) = window {
            if rows > w {
                let drop = rows - w;
                kd.drain(..drop * dim);
                vd.drain(..drop * dim);
                self.start += drop;
                rows = w;
            }
        }
        self.keys = Array::new([rows, dim], kd).expect("cache keys");
        self.values = Array::new([rows, dim], vd).expect("cache values");
    }
}

/// Graph handles for one Transformer layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bo: Var,
    pub pos: PositionVars,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub ff1_w: Var,
    pub ff1_b: Var,
    pub ff2_w: Var,
    pub ff2_b: Var,
}

impl LayerVars {
    pub fn bind(g: &mut Graph, params: &ParamStore, prefix: &str) -> Result<Self> {
        let mut p = |name: &str| -> Result<Var> {
            let key = format!("{prefix}.{name}");
            Ok(g.param(&key, params.get(&key)?, true))
        };
        Ok(Self {
            ln1_g: p("ln1.gamma")?,
            ln1_b: p("ln1.beta")?,
            wq: p("attn.wq")?,
            wk: p("attn.wk")?,
            wv: p("attn.wv")?,
            wo: p("attn.wo")?,
            bo: p("attn.bo")?,
            pos: PositionVars {
                w_r: p("attn.wr")?,
                u: p("attn.u")?,
                v: p("attn.v")?,
            },
            ln2_g: p("ln2.gamma")?,
            ln2_b: p("ln2.beta")?,
            ff1_w: p("ffn.w1")?,
            ff1_b: p("ffn.b1")?,
            ff2_w: p("ffn.w2")?,
            ff2_b: p("ffn.b2")?,
        })
    }
}

/// Glorot-uniform bound for a `[fan_in, fan_out]` matrix.
pub fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn init_layer(
    store: &mut ParamStore,
    prefix: &str,
    spec: &TransformerLayerSpec,
    rng: &mut dyn RngCore,
) {
    let (dm, df, h, dh) = (spec.model_dim, spec.ffn_dim, spec.heads, spec.head_dim);
    let mut put = |name: &str, a: Array| store.insert(format!("{prefix}.{name}"), a);
    put("ln1.gamma", Array::full([dm], 1.0));
    put("ln1.beta", Array::zeros([dm]));
    for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo", "attn.wr"] {
        put(w, Array::uniform([dm, dm], glorot(dm, dm), rng));
    }
    put("attn.bo", Array::zeros([dm]));
    put("attn.u", Array::uniform([h, dh], 0.02, rng));
    put("attn.v", Array::uniform([h, dh], 0.02, rng));
    put("ln2.gamma", Array::full([dm], 1.0));
    put("ln2.beta", Array::zeros([dm]));
    put("ffn.w1", Array::uniform([dm, df], glorot(dm, df), rng));
    put("ffn.b1", Array::zeros([df]));
    put("ffn.w2", Array::uniform([df, dm], glorot(df, dm), rng));
    put("ffn.b2", Array::zeros([dm]));
}

/// Shortens the borrow inside an optional RNG so it can be passed on
/// repeatedly.
pub fn reborrow_rng<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

/// Inverted dropout; identity when `rng` is `None` or `p == 0`.
pub fn dropout(g: &mut Graph, x: Var, p: f64, rng: Option<&mut dyn RngCore>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let mask = Array::new(
        g.shape(x).to_vec(),
        (0..g.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect(),
    )?;
    let m = g.constant(mask);
    g.mul(x, m)
}

pub struct LayerOutput {
    pub out: Var,
    /// Key/value rows for the new positions, to be appended to the cache.
    pub keys: Var,
    pub values: Var,
}

/// Pre-norm layer: `x + Attn(LN(x))`, then `+ FFN(LN(·))`. `x` holds the
/// rows for positions `start..`; `cache` holds earlier positions.
#[allow(clippy::too_many_arguments)]
pub fn transformer_layer(
    g: &mut Graph,
    lv: &LayerVars,
    spec: &TransformerLayerSpec,
    x: Var,
    start: usize,
    cache: Option<&KvCache>,
    window: Option<usize>,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<LayerOutput> {
    let h = g.layer_norm(x, lv.ln1_g, lv.ln1_b, LAYER_NORM_EPS)?;
    let q = g.matmul(h, lv.wq)?;
    let k_new = g.matmul(h, lv.wk)?;
    let v_new = g.matmul(h, lv.wv)?;
    let (k_all, v_all, key_start) = match cache {
        Some(c) if !c.is_empty() => {
            if c.end() != start {
                return Err(Error::Stream(format!(
                    "cache ends at {} but queries start at {start}",
                    c.end()
                )));
            }
            let ck = g.constant(c.keys.clone());
            let cv = g.constant(c.values.clone());
            (
                g.concat_rows(&[ck, k_new])?,
                g.concat_rows(&[cv, v_new])?,
                c.start,
            )
        }
        _ => (k_new, v_new, start),
    };
    let pos = Positions {
        query_start: start,
        key_start,
    };
    let ctx = rel_attention(g, q, k_all, v_all, pos, window, &lv.pos, spec.heads)?;
    let attn = g.matmul(ctx, lv.wo)?;
    let attn = g.add_row(attn, lv.bo)?;
    let attn = dropout(g, attn, spec.dropout, reborrow_rng(&mut rng))?;
    let x = g.add(x, attn)?;

    let h = g.layer_norm(x, lv.ln2_g, lv.ln2_b, LAYER_NORM_EPS)?;
    let f = g.matmul(h, lv.ff1_w)?;
    let f = g.add_row(f, lv.ff1_b)?;
    let f = g.relu(f)?;
    let f = g.matmul(f, lv.ff2_w)?;
    let f = g.add_row(f, lv.ff2_b)?;
    let f = dropout(g, f, spec.dropout, rng)?;
    let out = g.add(x, f)?;
    Ok(LayerOutput {
        out,
        keys: k_new,
        values: v_new,
    })
}
