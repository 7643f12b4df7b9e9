//! Training: NovoGrad, the learning-rate schedule, the toy tone task and
//! the training loop.

pub mod novograd;
pub mod schedule;
pub mod toy;

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, SCHEMA_VERSION};
use crate::engine::{Array, Graph};
use crate::error::{Error, Result};
use crate::frontend::{augment, AugmentPolicy};
use crate::loss::Utterance;
use crate::model::Transducer;

pub use novograd::{novograd_step, NovoGradConfig, OptimState, StepOutcome};
pub use schedule::Schedule;
pub use toy::{ToyDataset, ToyTask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schema_version: u32,
    /// Initialization, dropout and augmentation seed.
    pub seed: u64,
    pub steps: u64,
    /// Utterances per step; 0 uses the whole set.
    pub batch_size: usize,
    pub num_utterances: usize,
    pub data_seed: u64,
    pub model: ModelConfig,
    pub task: ToyTask,
    pub schedule: Schedule,
    pub optimizer: NovoGradConfig,
    #[serde(default)]
    pub augment: Option<AugmentPolicy>,
}

impl TrainConfig {
    /// Settings that overfit the 20-utterance toy set in under a minute.
    pub fn toy() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 1,
            steps: 1500,
            batch_size: 0,
            num_utterances: 20,
            data_seed: 11,
            model: ModelConfig::preset("toy")
                .expect("toy preset")
                .with_dropout(0.0),
            task: ToyTask::default(),
            schedule: Schedule {
                warmup_steps: 150,
                peak_lr: 0.03,
                decay_steps: 1350,
                final_lr: 6e-4,
                power: 2.0,
            },
            optimizer: NovoGradConfig {
                beta1: 0.9,
                weight_decay: 0.0,
                ..NovoGradConfig::default()
            },
            augment: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate()?;
        self.task.validate()?;
        if self.model.feat_dim != self.task.n_mels {
            return Err(Error::Config(format!(
                "model feat_dim {} differs from task n_mels {}",
                self.model.feat_dim, self.task.n_mels
            )));
        }
        let labels = self.task.alphabet.chars().count();
        if self.model.vocab_size != labels + 1 {
            return Err(Error::Config(format!(
                "model vocab_size {} but the alphabet has {labels} characters plus blank",
                self.model.vocab_size
            )));
        }
        if self.num_utterances == 0 {
            return Err(Error::Config("num_utterances must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    /// Mean nll of the batch before the update.
    pub loss: f64,
    pub skipped: bool,
}

pub struct BatchGrads {
    pub mean_loss: f64,
    pub losses: Vec<f64>,
    pub grads: BTreeMap<String, Array>,
}

fn utterance_seed(seed: u64, step: u64, index: usize) -> u64 {
    seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (index as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Mean loss and gradients over `batch`. Utterances are processed in
/// parallel and reduced in batch order, so results do not depend on thread
/// scheduling. `dropout_seed` turns dropout on.
pub fn batch_gradients(
    model: &Transducer,
    batch: &[Utterance],
    dropout_seed: Option<(u64, u64)>,
) -> Result<BatchGrads> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let per: Vec<Result<(f64, BTreeMap<String, Array>)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, utt)| {
            let mut g = Graph::new();
            let mut rng =
                dropout_seed.map(|(s, step)| ChaCha8Rng::seed_from_u64(utterance_seed(s, step, i)));
            let rng = rng.as_mut().map(|r| r as &mut dyn rand::RngCore);
            let nll = model.utterance_loss(&mut g, &utt.frames, &utt.labels, rng)?;
            let grads = g.backward(nll)?;
            Ok((g.value(nll).item(), g.param_grads(&grads)))
        })
        .collect();
    let n = batch.len() as f64;
    let mut losses = Vec::with_capacity(batch.len());
    let mut total: BTreeMap<String, Array> = BTreeMap::new();
    for r in per {
        let (loss, grads) = r?;
        losses.push(loss);
        for (name, g) in grads {
            match total.get_mut(&name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    total.insert(name, g);
                }
            }
        }
    }
    for g in total.values_mut() {
        for x in g.data_mut() {
            *x /= n;
        }
    }
    Ok(BatchGrads {
        mean_loss: losses.iter().sum::<f64>() / n,
        losses,
        grads: total,
    })
}

pub struct TrainOutcome {
    pub model: Transducer,
    pub curve: Vec<StepLog>,
    pub dataset: ToyDataset,
}

impl TrainOutcome {
    /// Mean nll over the whole set with dropout off.
    pub fn final_loss(&self) -> Result<f64> {
        Ok(batch_gradients(&self.model, &self.dataset.utterances, None)?.mean_loss)
    }
}

/// Length-sorted mini-batches, as index lists.
pub fn length_sorted_batches(utts: &[Utterance], batch_size: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..utts.len()).collect();
    idx.sort_by_key(|&i| (utts[i].frames.rows(), i));
    let size = if batch_size == 0 {
        utts.len().max(1)
    } else {
        batch_size
    };
    idx.chunks(size).map(<[usize]>::to_vec).collect()
}

/// Trains on the toy tone task. `on_step` sees every step's log.
pub fn train_toy(cfg: &TrainConfig, mut on_step: impl FnMut(&StepLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dataset = ToyDataset::generate(&cfg.task, cfg.num_utterances, cfg.data_seed)?;
    let mut model = Transducer::init(cfg.model.clone(), cfg.seed)?;
    let batches = length_sorted_batches(&dataset.utterances, cfg.batch_size);
    let dropout = cfg.model.predictor.layer.dropout > 0.0
        || cfg
            .model
            .encoder
            .blocks
            .iter()
            .any(|b| b.layer.dropout > 0.0);
    let mut state = OptimState::new();
    let mut curve = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let ids = &batches[step as usize % batches.len()];
        let batch = ids
            .iter()
            .map(|&i| {
                let u = &dataset.utterances[i];
                let frames = match &cfg.augment {
                    Some(p) => augment(
                        &u.frames,
                        &p.clone().with_seed(utterance_seed(p.seed, step, i)),
                    )?,
                    None => u.frames.clone(),
                };
                Ok(Utterance {
                    frames,
                    labels: u.labels.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let bg = batch_gradients(&model, &batch, dropout.then_some((cfg.seed, step)))?;
        if !bg.mean_loss.is_finite() {
            return Err(Error::Diverged {
                step: step as usize,
                reason: format!("mean nll is {}", bg.mean_loss),
            });
        }
        let lr = cfg.schedule.lr(step);
        let outcome = novograd_step(&mut model.params, &bg.grads, &mut state, &cfg.optimizer, lr)?;
        let log = StepLog {
            step,
            lr,
            loss: bg.mean_loss,
            skipped: outcome != StepOutcome::Applied,
        };
        on_step(&log);
        curve.push(log);
    }
    Ok(TrainOutcome {
        model,
        curve,
        dataset,
    })
}
