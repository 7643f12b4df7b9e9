//! The full transducer: encoder, prediction network and joint network
//! sharing one parameter store.

use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::encoder::attention::reborrow_rng;
use crate::encoder::network::{bind_encoder, encode_graph, init_encoder};
use crate::encoder::{encode_offline, encode_stream, StreamChunk, StreamState};
use crate::engine::{Array, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::loss::{transducer_loss, LossLattice};
use crate::predictor::{
    bind_joint, bind_predictor, init_joint, init_predictor, input_ids, joint_lattice,
    joint_log_probs, predict_step, predictor_graph, predictor_start, PredictorState,
};

pub const CONFIG_FILE: &str = "config.toml";
pub const PARAMS_FILE: &str = "params.ckpt";

#[derive(Clone, Debug)]
pub struct Transducer {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Transducer {
    /// Random initialization from a seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_encoder(&mut params, &config.encoder, config.feat_dim, &mut rng)?;
        init_predictor(&mut params, &config.predictor, config.vocab_size, &mut rng)?;
        init_joint(
            &mut params,
            &config.joint,
            config.encoder.output_dim(),
            config.predictor.output_dim(),
            config.vocab_size,
            &mut rng,
        );
        Ok(Self { config, params })
    }

    /// Pairs a config with loaded parameters, checking every expected
    /// parameter is present with the expected shape.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::init(config.clone(), 0)?;
        for (name, value) in reference.params.iter() {
            let got = params
                .get(name)
                .map_err(|_| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if got.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, config expects {:?}",
                    got.shape(),
                    value.shape()
                )));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, config expects {}",
                params.len(),
                reference.params.len()
            )));
        }
        Ok(Self { config, params })
    }

    /// Writes `config.toml` and `params.ckpt` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.config.save(dir.join(CONFIG_FILE))?;
        self.params.save(dir.join(PARAMS_FILE))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config = ModelConfig::load(dir.join(CONFIG_FILE))?;
        let params = ParamStore::load(dir.join(PARAMS_FILE))?;
        Self::from_parts(config, params)
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn check_frames(&self, frames: &Array) -> Result<()> {
        match *frames.shape() {
            [t, f] if t > 0 && f == self.config.feat_dim => Ok(()),
            ref s => Err(Error::shape(
                "transducer",
                format!("frames {s:?}, expected [T ≥ 1, {}]", self.config.feat_dim),
            )),
        }
    }

    /// Offline encoder output `[T′, DM]`.
    pub fn encode(&self, frames: &Array) -> Result<Array> {
        self.check_frames(frames)?;
        encode_offline(&self.config.encoder, &self.params, frames)
    }

    pub fn stream_state(&self) -> Result<StreamState> {
        StreamState::new(&self.config.encoder, self.config.feat_dim)
    }

    pub fn encode_chunk(&self, state: &mut StreamState, chunk: StreamChunk<'_>) -> Result<Array> {
        encode_stream(&self.config.encoder, &self.params, state, chunk)
    }

    /// Records `[T′·(U+1), V+1]` joint log-probabilities on `g`.
    pub fn lattice_graph(
        &self,
        g: &mut Graph,
        frames: &Array,
        labels: &[usize],
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<(Var, usize)> {
        self.check_frames(frames)?;
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "label {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let ids = input_ids(labels)?;
        let ev = bind_encoder(g, &self.params, &self.config.encoder)?;
        let x = g.constant(frames.clone());
        let enc = encode_graph(g, &self.config.encoder, &ev, x, reborrow_rng(&mut rng))?;
        let pv = bind_predictor(g, &self.params, &self.config.predictor)?;
        let (pred, _) = predictor_graph(g, &pv, &self.config.predictor, &ids, 0, None, rng)?;
        let jv = bind_joint(g, &self.params)?;
        let lp = joint_lattice(g, &jv, enc, pred)?;
        let t_out = g.shape(enc)[0];
        Ok((lp, t_out))
    }

    /// Negative log-likelihood of `labels` given `frames`, recorded on `g`.
    /// Dropout is applied only when `rng` is given.
    pub fn utterance_loss(
        &self,
        g: &mut Graph,
        frames: &Array,
        labels: &[usize],
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let (lp, t_out) = self.lattice_graph(g, frames, labels, rng)?;
        transducer_loss(g, lp, t_out, labels)
    }

    /// Deterministic loss lattice for inspection.
    pub fn lattice(&self, frames: &Array, labels: &[usize]) -> Result<LossLattice> {
        let mut g = Graph::new();
        let (lp, t_out) = self.lattice_graph(&mut g, frames, labels, None)?;
        LossLattice::new(
            t_out,
            labels.to_vec(),
            self.config.vocab_size,
            g.value(lp).data().to_vec(),
        )
    }

    pub fn predictor_start(&self) -> Result<PredictorState> {
        predictor_start(&self.config.predictor, &self.params)
    }

    pub fn predict_step(&self, state: &PredictorState, label: usize) -> Result<PredictorState> {
        predict_step(&self.config.predictor, &self.params, state, label)
    }

    /// `log_softmax(joint(h, g))` for one encoder frame.
    pub fn log_probs(&self, frame: &[f64], state: &PredictorState) -> Result<Vec<f64>> {
        joint_log_probs(&self.params, frame, state.output())
    }
}
