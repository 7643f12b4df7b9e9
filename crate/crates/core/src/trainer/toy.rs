//! Synthetic tone-coded speech: every character is a fixed sine tone, so
//! its identity is recoverable from a single spectral frame.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::Array;
use crate::error::{Error, Result};
use crate::frontend::{logmel, Featurizer, FrontendConfig};
use crate::loss::Utterance;
use crate::predictor::Vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyTask {
    pub alphabet: String,
    /// One frequency per character.
    pub tones_hz: Vec<f64>,
    pub tone_ms: u32,
    pub gap_ms: u32,
    /// Silence before the first character.
    pub lead_ms: u32,
    pub amplitude: f64,
    pub min_chars: usize,
    pub max_chars: usize,
    pub n_mels: usize,
}

impl Default for ToyTask {
    fn default() -> Self {
        Self {
            alphabet: "abcd".into(),
            tones_hz: vec![400.0, 900.0, 1700.0, 3000.0],
            tone_ms: 160,
            gap_ms: 40,
            lead_ms: 40,
            amplitude: 0.5,
            min_chars: 2,
            max_chars: 4,
            n_mels: 16,
        }
    }
}

impl ToyTask {
    pub fn validate(&self) -> Result<()> {
        if self.alphabet.chars().count() != self.tones_hz.len() {
            return Err(Error::Config(
                "one tone per alphabet character is required".into(),
            ));
        }
        if self.min_chars == 0 || self.min_chars > self.max_chars {
            return Err(Error::Config("need 1 ≤ min_chars ≤ max_chars".into()));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::from_chars(&self.alphabet)
    }

    pub fn frontend(&self) -> FrontendConfig {
        FrontendConfig::default().with_mels(self.n_mels)
    }

    /// 16 kHz waveform for `text`.
    pub fn synthesize(&self, text: &str) -> Result<Vec<f64>> {
        let sr = self.frontend().sample_rate as f64;
        let samples = |ms: u32| (sr * ms as f64 / 1000.0) as usize;
        let mut out = vec![0.0; samples(self.lead_ms)];
        for c in text.chars() {
            let i = self
                .alphabet
                .chars()
                .position(|a| a == c)
                .ok_or_else(|| Error::Input(format!("{c:?} is not in the toy alphabet")))?;
            let f = self.tones_hz[i];
            let n = samples(self.tone_ms);
            out.extend(
                (0..n).map(|k| {
                    self.amplitude * (2.0 * std::f64::consts::PI * f * k as f64 / sr).sin()
                }),
            );
            out.extend(std::iter::repeat(0.0).take(samples(self.gap_ms)));
        }
        Ok(out)
    }

    /// `count` random transcripts.
    pub fn transcripts(&self, count: usize, seed: u64) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chars: Vec<char> = self.alphabet.chars().collect();
        (0..count)
            .map(|_| {
                let n = rng.gen_range(self.min_chars..=self.max_chars);
                (0..n)
                    .map(|_| chars[rng.gen_range(0..chars.len())])
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct ToyDataset {
    pub texts: Vec<String>,
    pub utterances: Vec<Utterance>,
    pub featurizer: Featurizer,
    pub vocab: Vocab,
}

impl ToyDataset {
    /// Synthesizes audio, extracts log-mels and fits the normalization on
    /// the whole set.
    pub fn generate(task: &ToyTask, count: usize, seed: u64) -> Result<Self> {
        task.validate()?;
        let vocab = task.vocab()?;
        let texts = task.transcripts(count, seed);
        let raw = texts
            .iter()
            .map(|t| logmel(&task.synthesize(t)?, &task.frontend()))
            .collect::<Result<Vec<Array>>>()?;
        let featurizer = Featurizer::fit(task.frontend(), &raw)?;
        let utterances = texts
            .iter()
            .zip(&raw)
            .map(|(t, x)| {
                Ok(Utterance {
                    frames: featurizer.normalize(x),
                    labels: vocab.encode(t)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            texts,
            utterances,
            featurizer,
            vocab,
        })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}
