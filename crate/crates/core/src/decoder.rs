//! Greedy and beam-search decoding, offline or frame by frame.
//!
//! Within one encoder frame a hypothesis may emit up to
//! `max_symbols_per_frame` labels before a blank moves it to the next
//! frame. When the budget is spent the blank is forced, so every finished
//! hypothesis score is the log-probability of one lattice path (or, after
//! merging, of a set of paths with the same labels).

use serde::Serialize;

use crate::encoder::{StreamChunk, StreamState};
use crate::engine::kernels::log_add_exp;
use crate::engine::Array;
use crate::error::{Error, Result};
use crate::loss::BLANK;
use crate::model::Transducer;
use crate::predictor::PredictorState;

/// Anything that maps (encoder frame, label history) to output
/// log-probabilities.
pub trait JointScorer {
    type State: Clone;

    fn initial_state(&self) -> Result<Self::State>;

    fn extend(&self, state: &Self::State, label: usize) -> Result<Self::State>;

    /// Log-probabilities over blank and labels.
    fn log_probs(&self, frame: &[f64], state: &Self::State) -> Result<Vec<f64>>;
}

impl JointScorer for Transducer {
    type State = PredictorState;

    fn initial_state(&self) -> Result<PredictorState> {
        self.predictor_start()
    }

    fn extend(&self, state: &PredictorState, label: usize) -> Result<PredictorState> {
        self.predict_step(state, label)
    }

    fn log_probs(&self, frame: &[f64], state: &PredictorState) -> Result<Vec<f64>> {
        Transducer::log_probs(self, frame, state)
    }
}

#[derive(Clone, Debug)]
pub struct Hypothesis<S> {
    pub labels: Vec<usize>,
    pub score: f64,
    pub state: S,
}

impl<S> Hypothesis<S> {
    pub fn start<J: JointScorer<State = S>>(scorer: &J) -> Result<Self> {
        Ok(Self {
            labels: Vec::new(),
            score: 0.0,
            state: scorer.initial_state()?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub max_symbols_per_frame: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_width: 1,
            max_symbols_per_frame: 8,
        }
    }
}

impl DecodeConfig {
    pub fn greedy() -> Self {
        Self::default()
    }

    pub fn beam(width: usize) -> Self {
        Self {
            beam_width: width,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::Config("beam width must be ≥ 1".into()));
        }
        if self.max_symbols_per_frame == 0 {
            return Err(Error::Config("max_symbols_per_frame must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check_lp(lp: &[f64]) -> Result<()> {
    if lp.len() < 2 {
        return Err(Error::Input(
            "scorer returned fewer than two outputs".into(),
        ));
    }
    if lp.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite("joint log-probabilities".into()));
    }
    Ok(())
}

/// Consumes one encoder frame greedily.
pub fn greedy_step<J: JointScorer>(
    scorer: &J,
    frame: &[f64],
    mut hyp: Hypothesis<J::State>,
    max_symbols: usize,
) -> Result<Hypothesis<J::State>> {
    if max_symbols == 0 {
        return Err(Error::Config("max_symbols must be ≥ 1".into()));
    }
    let mut emitted = 0;
    loop {
        let lp = scorer.log_probs(frame, &hyp.state)?;
        check_lp(&lp)?;
        let k = if emitted == max_symbols {
            BLANK
        } else {
            argmax(&lp)
        };
        hyp.score += lp[k];
        if k == BLANK {
            return Ok(hyp);
        }
        hyp.labels.push(k);
        hyp.state = scorer.extend(&hyp.state, k)?;
        emitted += 1;
    }
}

pub fn greedy_decode<J: JointScorer>(
    scorer: &J,
    encoded: &Array,
    max_symbols: usize,
) -> Result<Hypothesis<J::State>> {
    let mut hyp = Hypothesis::start(scorer)?;
    for t in 0..encoded.rows() {
        hyp = greedy_step(scorer, encoded.row(t), hyp, max_symbols)?;
    }
    Ok(hyp)
}

/// Indices of the `k` best labels (blank excluded), best first; the lower
/// index wins ties.
fn top_labels(lp: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (1..lp.len()).collect();
    idx.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]));
    idx.truncate(k);
    idx
}

enum Candidate {
    Finished(usize),
    Extend {
        parent: usize,
        label: usize,
        score: f64,
    },
}

/// Consumes one encoder frame with beam search. `beam` must be sorted best
/// first; the result is too.
pub fn beam_step<J: JointScorer>(
    scorer: &J,
    frame: &[f64],
    beam: Vec<Hypothesis<J::State>>,
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis<J::State>>> {
    cfg.validate()?;
    let w = cfg.beam_width;
    let mut finished: Vec<Hypothesis<J::State>> = Vec::new();
    let mut active = beam;
    for step in 0..=cfg.max_symbols_per_frame {
        if active.is_empty() {
            break;
        }
        let mut extensions = Vec::new();
        for (i, hyp) in active.iter().enumerate() {
            let lp = scorer.log_probs(frame, &hyp.state)?;
            check_lp(&lp)?;
            let done = Hypothesis {
                labels: hyp.labels.clone(),
                score: hyp.score + lp[BLANK],
                state: hyp.state.clone(),
            };
            match finished.iter_mut().find(|f| f.labels == done.labels) {
                Some(f) => f.score = log_add_exp(f.score, done.score),
                None => finished.push(done),
            }
            if step < cfg.max_symbols_per_frame {
                for label in top_labels(&lp, w) {
                    extensions.push(Candidate::Extend {
                        parent: i,
                        label,
                        score: hyp.score + lp[label],
                    });
                }
            }
        }
        let mut pool: Vec<Candidate> = (0..finished.len()).map(Candidate::Finished).collect();
        pool.extend(extensions);
        let score = |c: &Candidate| match c {
            Candidate::Finished(i) => finished[*i].score,
            Candidate::Extend { score, .. } => *score,
        };
        pool.sort_by(|a, b| score(b).total_cmp(&score(a)));
        pool.truncate(w);

        let mut kept = Vec::new();
        let mut next = Vec::new();
        for c in pool {
            match c {
                Candidate::Finished(i) => kept.push(i),
                Candidate::Extend {
                    parent,
                    label,
                    score,
                } => {
                    let p = &active[parent];
                    let mut labels = p.labels.clone();
                    labels.push(label);
                    next.push(Hypothesis {
                        labels,
                        score,
                        state: scorer.extend(&p.state, label)?,
                    });
                }
            }
        }
        let mut slots: Vec<Option<Hypothesis<J::State>>> = finished.into_iter().map(Some).collect();
        finished = kept.into_iter().filter_map(|i| slots[i].take()).collect();
        active = next;
    }
    finished.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(finished)
}

pub fn beam_decode<J: JointScorer>(
    scorer: &J,
    encoded: &Array,
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis<J::State>>> {
    let mut beam = vec![Hypothesis::start(scorer)?];
    for t in 0..encoded.rows() {
        beam = beam_step(scorer, encoded.row(t), beam, cfg)?;
    }
    Ok(beam)
}

/// Best label sequence seen after a chunk.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Partial {
    pub labels: Vec<usize>,
    pub score: f64,
    /// Encoder frames decoded so far.
    pub encoder_frames: usize,
    /// Input frames consumed so far.
    pub input_frames: usize,
    /// The best hypothesis is not an extension of the previous best.
    pub replaced: bool,
}

/// Streaming recognizer: encoder state plus decoder hypotheses.
pub struct DecodeSession<'m> {
    model: &'m Transducer,
    config: DecodeConfig,
    encoder: StreamState,
    beam: Vec<Hypothesis<PredictorState>>,
    encoder_frames: usize,
    last_best: Vec<usize>,
}

impl<'m> DecodeSession<'m> {
    pub fn new(model: &'m Transducer, config: DecodeConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            model,
            config,
            encoder: model.stream_state()?,
            beam: vec![Hypothesis::start(model)?],
            encoder_frames: 0,
            last_best: Vec::new(),
        })
    }

    pub fn config(&self) -> &DecodeConfig {
        &self.config
    }

    pub fn encoder_state(&self) -> &StreamState {
        &self.encoder
    }

    pub fn hypotheses(&self) -> &[Hypothesis<PredictorState>] {
        &self.beam
    }

    /// Feeds feature frames `[n, feat_dim]`; `end_of_stream` flushes.
    pub fn push(&mut self, frames: &Array, end_of_stream: bool) -> Result<Partial> {
        let chunk = StreamChunk {
            start_frame: self.encoder.input_frames(),
            frames,
            end_of_stream,
        };
        let encoded = self.model.encode_chunk(&mut self.encoder, chunk)?;
        for t in 0..encoded.rows() {
            let frame = encoded.row(t);
            self.beam = if self.config.beam_width == 1 {
                let hyp = self.beam.swap_remove(0);
                vec![greedy_step(
                    self.model,
                    frame,
                    hyp,
                    self.config.max_symbols_per_frame,
                )?]
            } else {
                beam_step(
                    self.model,
                    frame,
                    std::mem::take(&mut self.beam),
                    &self.config,
                )?
            };
        }
        self.encoder_frames += encoded.rows();
        let best = &self.beam[0];
        let replaced = !best.labels.starts_with(&self.last_best);
        self.last_best = best.labels.clone();
        Ok(Partial {
            labels: best.labels.clone(),
            score: best.score,
            encoder_frames: self.encoder_frames,
            input_frames: self.encoder.input_frames(),
            replaced,
        })
    }

    pub fn finish(&mut self) -> Result<Partial> {
        let empty = Array::zeros([0, self.model.config.feat_dim]);
        self.push(&empty, true)
    }
}

/// Decodes whole-utterance features (greedy when `beam_width == 1`).
pub fn decode_offline(
    model: &Transducer,
    frames: &Array,
    cfg: &DecodeConfig,
) -> Result<Hypothesis<PredictorState>> {
    cfg.validate()?;
    let encoded = model.encode(frames)?;
    if cfg.beam_width == 1 {
        greedy_decode(model, &encoded, cfg.max_symbols_per_frame)
    } else {
        let mut beam = beam_decode(model, &encoded, cfg)?;
        Ok(beam.swap_remove(0))
    }
}
