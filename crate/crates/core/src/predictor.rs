//! Prediction network and joint network.
//!
//! The prediction network embeds the previously emitted labels (row 0 of the
//! embedding table is a learned start symbol, since blank is never an
//! input), projects them to the model width and runs unidirectional
//! Transformer layers. The joint network concatenates one encoder frame with
//! one prediction vector and maps it through a single ReLU hidden layer to
//! logits over blank and labels.

use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::encoder::attention::reborrow_rng;
use crate::encoder::attention::{
    glorot, init_layer, transformer_layer, KvCache, LayerVars, LAYER_NORM_EPS,
};
use crate::encoder::TransformerLayerSpec;
use crate::engine::{Array, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::loss::BLANK;

/// Embedding row used as the input at `u = 0`.
pub const SOS: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub layer: TransformerLayerSpec,
    /// Attention left context in labels, including the current one.
    #[serde(default)]
    pub left_attention_window: Option<usize>,
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Config("predictor embed_dim must be positive".into()));
        }
        if self.left_attention_window == Some(0) {
            return Err(Error::Config("predictor window must be ≥ 1".into()));
        }
        self.layer.validate()
    }

    pub fn with_window(mut self, window: Option<usize>) -> Self {
        self.left_attention_window = window;
        self
    }

    pub fn output_dim(&self) -> usize {
        self.layer.model_dim
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointConfig {
    pub hidden: usize,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self { hidden: 512 }
    }
}

/// Output symbols; index 0 is blank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
}

impl Vocab {
    pub const BLANK_SYMBOL: &'static str = "<blank>";

    /// Blank followed by one label per character.
    pub fn from_chars(chars: &str) -> Result<Self> {
        let mut symbols = vec![Self::BLANK_SYMBOL.to_string()];
        for c in chars.chars() {
            let s = c.to_string();
            if symbols.contains(&s) {
                return Err(Error::Config(format!("duplicate vocabulary symbol {s:?}")));
            }
            symbols.push(s);
        }
        Ok(Self { symbols })
    }

    /// One label per line; the first line must be `<blank>`.
    pub fn parse(text: &str) -> Result<Self> {
        let symbols: Vec<String> = text.lines().map(str::to_string).collect();
        if symbols.first().map(String::as_str) != Some(Self::BLANK_SYMBOL) {
            return Err(Error::Config("vocabulary must start with <blank>".into()));
        }
        if symbols.len() < 2 {
            return Err(Error::Config("vocabulary has no labels".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = symbols.iter().find(|s| !seen.insert(s.as_str())) {
            return Err(Error::Config(format!(
                "duplicate vocabulary symbol {dup:?}"
            )));
        }
        Ok(Self { symbols })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.symbols.join("\n");
        s.push('\n');
        s
    }

    /// Symbols including blank.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    /// Maps characters to label ids.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                let s = c.to_string();
                self.symbols[1..]
                    .iter()
                    .position(|x| *x == s)
                    .map(|i| i + 1)
                    .ok_or_else(|| Error::Input(format!("{c:?} is not in the vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, labels: &[usize]) -> String {
        labels
            .iter()
            .filter(|&&l| l != BLANK)
            .map(|&l| self.symbol(l).unwrap_or("?"))
            .collect()
    }
}

fn layer_prefix(l: usize) -> String {
    format!("pred.layer{l}")
}

pub fn init_predictor(
    store: &mut ParamStore,
    cfg: &PredictorConfig,
    vocab: usize,
    rng: &mut dyn RngCore,
) -> Result<()> {
    cfg.validate()?;
    let (e, dm) = (cfg.embed_dim, cfg.layer.model_dim);
    store.insert(
        "pred.embed",
        Array::uniform([vocab, e], 1.0 / (e as f64).sqrt(), rng),
    );
    store.insert("pred.proj.w", Array::uniform([e, dm], glorot(e, dm), rng));
    store.insert("pred.proj.b", Array::zeros([dm]));
    for l in 0..cfg.layers {
        init_layer(store, &layer_prefix(l), &cfg.layer, rng);
    }
    if cfg.layers > 0 {
        store.insert("pred.ln_out.gamma", Array::full([dm], 1.0));
        store.insert("pred.ln_out.beta", Array::zeros([dm]));
    }
    Ok(())
}

pub fn init_joint(
    store: &mut ParamStore,
    cfg: &JointConfig,
    enc_dim: usize,
    pred_dim: usize,
    vocab: usize,
    rng: &mut dyn RngCore,
) {
    let d = enc_dim + pred_dim;
    store.insert(
        "joint.w1",
        Array::uniform([d, cfg.hidden], glorot(d, cfg.hidden), rng),
    );
    store.insert("joint.b1", Array::zeros([cfg.hidden]));
    store.insert(
        "joint.w2",
        Array::uniform([cfg.hidden, vocab], glorot(cfg.hidden, vocab), rng),
    );
    store.insert("joint.b2", Array::zeros([vocab]));
}

#[derive(Clone, Debug)]
pub struct PredictorVars {
    pub embed: Var,
    pub proj_w: Var,
    pub proj_b: Var,
    pub layers: Vec<LayerVars>,
    pub ln_out: Option<(Var, Var)>,
}

pub fn bind_predictor(
    g: &mut Graph,
    params: &ParamStore,
    cfg: &PredictorConfig,
) -> Result<PredictorVars> {
    let p = |g: &mut Graph, key: &str| -> Result<Var> { Ok(g.param(key, params.get(key)?, true)) };
    let embed = p(g, "pred.embed")?;
    let proj_w = p(g, "pred.proj.w")?;
    let proj_b = p(g, "pred.proj.b")?;
    let layers = (0..cfg.layers)
        .map(|l| LayerVars::bind(g, params, &layer_prefix(l)))
        .collect::<Result<Vec<_>>>()?;
    let ln_out = if cfg.layers > 0 {
        Some((p(g, "pred.ln_out.gamma")?, p(g, "pred.ln_out.beta")?))
    } else {
        None
    };
    Ok(PredictorVars {
        embed,
        proj_w,
        proj_b,
        layers,
        ln_out,
    })
}

/// Prediction vectors for input ids at positions `start..`, given the
/// caches of earlier positions. Returns the output and new key/value rows.
#[allow(clippy::too_many_arguments)]
pub fn predictor_graph(
    g: &mut Graph,
    pv: &PredictorVars,
    cfg: &PredictorConfig,
    ids: &[usize],
    start: usize,
    caches: Option<&[KvCache]>,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<(Var, Vec<(Var, Var)>)> {
    let e = g.embedding(pv.embed, ids)?;
    let x = g.matmul(e, pv.proj_w)?;
    let mut x = g.add_row(x, pv.proj_b)?;
    let mut kv = Vec::with_capacity(pv.layers.len());
    for (l, lv) in pv.layers.iter().enumerate() {
        let out = transformer_layer(
            g,
            lv,
            &cfg.layer,
            x,
            start,
            caches.map(|c| &c[l]),
            cfg.left_attention_window,
            reborrow_rng(&mut rng),
        )?;
        kv.push((out.keys, out.values));
        x = out.out;
    }
    if let Some((gamma, beta)) = pv.ln_out {
        x = g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)?;
    }
    Ok((x, kv))
}

/// Prediction vectors `g_0..g_U` for a whole label sequence, `[U+1, DM]`.
pub fn predict_sequence(
    cfg: &PredictorConfig,
    params: &ParamStore,
    labels: &[usize],
) -> Result<Array> {
    let ids = input_ids(labels)?;
    let mut g = Graph::new();
    let pv = bind_predictor(&mut g, params, cfg)?;
    let (out, _) = predictor_graph(&mut g, &pv, cfg, &ids, 0, None, None)?;
    Ok(g.value(out).clone())
}

/// `[SOS, y_1, …, y_U]`; rejects blank.
pub fn input_ids(labels: &[usize]) -> Result<Vec<usize>> {
    if labels.contains(&BLANK) {
        return Err(Error::Input(
            "blank cannot be a prediction-net input".into(),
        ));
    }
    let mut ids = Vec::with_capacity(labels.len() + 1);
    ids.push(SOS);
    ids.extend_from_slice(labels);
    Ok(ids)
}

/// Incremental prediction-network state for one hypothesis.
#[derive(Clone, Debug)]
pub struct PredictorState {
    caches: Vec<KvCache>,
    /// Inputs consumed, including the start symbol.
    position: usize,
    output: Vec<f64>,
}

impl PredictorState {
    /// Output for the most recent input.
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn position(&self) -> usize {
        self.position
    }

    pub fn cache_lens(&self) -> Vec<usize> {
        self.caches.iter().map(KvCache::len).collect()
    }
}

fn step(
    cfg: &PredictorConfig,
    params: &ParamStore,
    state: Option<&PredictorState>,
    id: usize,
) -> Result<PredictorState> {
    let vocab = params.get("pred.embed")?.rows();
    if id >= vocab {
        return Err(Error::Input(format!(
            "label {id} outside vocabulary of {vocab}"
        )));
    }
    let mut g = Graph::new();
    let pv = bind_predictor(&mut g, params, cfg)?;
    let (caches, position) = match state {
        Some(s) => (s.caches.clone(), s.position),
        None => (
            (0..cfg.layers)
                .map(|_| KvCache::empty(cfg.layer.model_dim))
                .collect(),
            0,
        ),
    };
    let (out, kv) = predictor_graph(&mut g, &pv, cfg, &[id], position, Some(&caches), None)?;
    let mut caches = caches;
    for (c, (k, v)) in caches.iter_mut().zip(kv) {
        c.append(g.value(k), g.value(v), cfg.left_attention_window);
    }
    Ok(PredictorState {
        caches,
        position: position + 1,
        output: g.value(out).data().to_vec(),
    })
}

/// State after consuming the start symbol.
pub fn predictor_start(cfg: &PredictorConfig, params: &ParamStore) -> Result<PredictorState> {
    step(cfg, params, None, SOS)
}

/// Advances by one emitted label.
pub fn predict_step(
    cfg: &PredictorConfig,
    params: &ParamStore,
    state: &PredictorState,
    label: usize,
) -> Result<PredictorState> {
    if label == BLANK {
        return Err(Error::Input(
            "blank cannot be a prediction-net input".into(),
        ));
    }
    step(cfg, params, Some(state), label)
}

#[derive(Clone, Copy, Debug)]
pub struct JointVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub fn bind_joint(g: &mut Graph, params: &ParamStore) -> Result<JointVars> {
    let mut p = |key: &str| -> Result<Var> { Ok(g.param(key, params.get(key)?, true)) };
    Ok(JointVars {
        w1: p("joint.w1")?,
        b1: p("joint.b1")?,
        w2: p("joint.w2")?,
        b2: p("joint.b2")?,
    })
}

/// Logits for already-concatenated rows `[n, DE + DP]`.
pub fn joint_rows(g: &mut Graph, jv: &JointVars, x: Var) -> Result<Var> {
    let h = g.matmul(x, jv.w1)?;
    let h = g.add_row(h, jv.b1)?;
    let h = g.relu(h)?;
    let o = g.matmul(h, jv.w2)?;
    g.add_row(o, jv.b2)
}

/// Log-probabilities for every `(t, u)` pair, `[T′·(U+1), V+1]` with row
/// `t·(U+1) + u`.
pub fn joint_lattice(g: &mut Graph, jv: &JointVars, enc: Var, pred: Var) -> Result<Var> {
    let x = g.pair_concat(enc, pred)?;
    let logits = joint_rows(g, jv, x)?;
    g.log_softmax(logits)
}

/// Logits for one encoder frame and one prediction vector.
pub fn joint(params: &ParamStore, h: &[f64], p: &[f64]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let jv = bind_joint(&mut g, params)?;
    let mut row = Vec::with_capacity(h.len() + p.len());
    row.extend_from_slice(h);
    row.extend_from_slice(p);
    let width = row.len();
    let x = g.constant(Array::new([1, width], row)?);
    let out = joint_rows(&mut g, &jv, x)?;
    Ok(g.value(out).data().to_vec())
}

/// `log_softmax(joint(h, p))`.
pub fn joint_log_probs(params: &ParamStore, h: &[f64], p: &[f64]) -> Result<Vec<f64>> {
    let logits = joint(params, h, p)?;
    Ok(crate::engine::kernels::log_softmax_rows(
        &logits,
        logits.len(),
    ))
}
