//! Log-mel features and training-time augmentation.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::engine::{Array, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub window_ms: u32,
    pub hop_ms: u32,
    pub n_mels: usize,
    pub fft_size: usize,
    pub log_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window_ms: 20,
            hop_ms: 10,
            n_mels: 128,
            fft_size: 512,
            log_floor: 1e-10,
        }
    }
}

impl FrontendConfig {
    pub fn with_mels(mut self, n_mels: usize) -> Self {
        self.n_mels = n_mels;
        self
    }

    pub fn window_samples(&self) -> usize {
        (self.sample_rate * self.window_ms / 1000) as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.sample_rate * self.hop_ms / 1000) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop_ms == 0 || self.window_ms < self.hop_ms {
            return Err(Error::Config("need window ≥ hop > 0".into()));
        }
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be ≥ 1".into()));
        }
        if self.fft_size < self.window_samples() {
            return Err(Error::Config(format!(
                "fft_size {} is shorter than the {}-sample window",
                self.fft_size,
                self.window_samples()
            )));
        }
        if self.log_floor <= 0.0 {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        Ok(())
    }

    /// Frames produced for `len` samples, or `None` if shorter than a window.
    pub fn num_frames(&self, len: usize) -> Option<usize> {
        let w = self.window_samples();
        (len >= w).then(|| 1 + (len - w) / self.hop_samples())
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters over `[0, sample_rate / 2]`.
#[derive(Clone, Debug)]
pub struct MelBank {
    /// `n_mels + 2` edge frequencies in Hz; filter `m` peaks at `edges[m + 1]`.
    pub edges: Vec<f64>,
    /// `[n_mels, fft_size / 2 + 1]`.
    pub weights: Array,
}

impl MelBank {
    pub fn new(cfg: &FrontendConfig) -> Self {
        let nyquist = cfg.sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bins = cfg.fft_size / 2 + 1;
        let mut w = vec![0.0; cfg.n_mels * bins];
        for m in 0..cfg.n_mels {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..bins {
                let f = k as f64 * cfg.sample_rate as f64 / cfg.fft_size as f64;
                let v = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                w[m * bins + k] = v;
            }
        }
        Self {
            edges,
            weights: Array::new([cfg.n_mels, bins], w).expect("mel weights"),
        }
    }

    pub fn center_hz(&self, m: usize) -> f64 {
        self.edges[m + 1]
    }

    /// Mel energies from a one-sided power spectrum.
    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        (0..self.weights.rows())
            .map(|m| {
                self.weights
                    .row(m)
                    .iter()
                    .zip(power)
                    .map(|(w, p)| w * p)
                    .sum()
            })
            .collect()
    }
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// Reusable FFT plan, window and filterbank.
pub struct Frontend {
    cfg: FrontendConfig,
    window: Vec<f64>,
    bank: MelBank,
    fft: Arc<dyn rustfft::Fft<f64>>,
}

impl Frontend {
    pub fn new(cfg: FrontendConfig) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(Self {
            window: hann(cfg.window_samples()),
            bank: MelBank::new(&cfg),
            fft,
            cfg,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn mel_bank(&self) -> &MelBank {
        &self.bank
    }

    /// One-sided power spectrum of the windowed frame starting at `start`.
    pub fn power_spectrum(&self, samples: &[f64], start: usize) -> Vec<f64> {
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.fft_size];
        for (i, w) in self.window.iter().enumerate() {
            buf[i].re = samples[start + i] * w;
        }
        self.fft.process(&mut buf);
        buf[..self.cfg.fft_size / 2 + 1]
            .iter()
            .map(|c| c.norm_sqr())
            .collect()
    }

    /// `[T, n_mels]` log-mel features.
    pub fn logmel(&self, samples: &[f64]) -> Result<Array> {
        let t = self.cfg.num_frames(samples.len()).ok_or_else(|| {
            Error::Input(format!(
                "{} samples is shorter than one {}-sample window",
                samples.len(),
                self.cfg.window_samples()
            ))
        })?;
        let hop = self.cfg.hop_samples();
        let mut data = Vec::with_capacity(t * self.cfg.n_mels);
        for i in 0..t {
            let power = self.power_spectrum(samples, i * hop);
            data.extend(
                self.bank
                    .apply(&power)
                    .into_iter()
                    .map(|e| e.max(self.cfg.log_floor).ln()),
            );
        }
        Array::new([t, self.cfg.n_mels], data)
    }
}

/// One-shot log-mel extraction.
pub fn logmel(samples: &[f64], cfg: &FrontendConfig) -> Result<Array> {
    Frontend::new(cfg.clone())?.logmel(samples)
}

/// Mono samples scaled to [-1, 1]. Only `expected_rate` is accepted.
pub fn read_wav(path: impl AsRef<Path>, expected_rate: u32) -> Result<Vec<f64>> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.sample_rate != expected_rate {
        return Err(Error::Input(format!(
            "sample rate {} Hz, expected {expected_rate} Hz (no resampling)",
            spec.sample_rate
        )));
    }
    if spec.channels != 1 {
        return Err(Error::Input(format!(
            "{} channels, expected mono",
            spec.channels
        )));
    }
    match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| Ok(s? as f64 / scale))
                .collect()
        }
        hound::SampleFormat::Float => reader.samples::<f32>().map(|s| Ok(s? as f64)).collect(),
    }
}

/// Writes 16-bit mono PCM.
pub fn write_wav(path: impl AsRef<Path>, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        w.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}

const FRAMES_KEY: &str = "frames";

/// Stores a feature matrix in the checkpoint container.
pub fn save_frames(path: impl AsRef<Path>, frames: &Array) -> Result<()> {
    let mut store = ParamStore::new();
    store.insert(FRAMES_KEY, frames.clone());
    store.save(path)
}

pub fn load_frames(path: impl AsRef<Path>) -> Result<Array> {
    let store = ParamStore::load(path)?;
    Ok((**store.get(FRAMES_KEY)?).clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub noise_std: f64,
    pub n_freq_masks: usize,
    pub max_freq_width: usize,
    pub n_time_masks: usize,
    pub max_time_width: usize,
    pub seed: u64,
}

impl AugmentPolicy {
    pub fn none() -> Self {
        Self {
            noise_std: 0.0,
            n_freq_masks: 0,
            max_freq_width: 0,
            n_time_masks: 0,
            max_time_width: 0,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Gaussian noise, then frequency and time masks filled with the
/// utterance mean. Mask widths are drawn from `1..=max` (clipped to the
/// axis length); a zero maximum disables that mask type.
pub fn augment(frames: &Array, policy: &AugmentPolicy) -> Result<Array> {
    let (t, f) = match *frames.shape() {
        [t, f] => (t, f),
        ref s => return Err(Error::shape("augment", format!("{s:?}"))),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let mut out = frames.clone();
    if policy.noise_std > 0.0 {
        let normal = Normal::new(0.0, policy.noise_std)
            .map_err(|e| Error::Config(format!("noise_std: {e}")))?;
        for x in out.data_mut() {
            *x += normal.sample(&mut rng);
        }
    }
    if out.is_empty() {
        return Ok(out);
    }
    let mean = out.sum() / out.len() as f64;
    let span = |rng: &mut ChaCha8Rng, len: usize, max: usize| {
        let width = rng.gen_range(1..=max.min(len));
        let start = rng.gen_range(0..=len - width);
        start..start + width
    };
    if policy.max_freq_width > 0 && f > 0 {
        for _ in 0..policy.n_freq_masks {
            let bins = span(&mut rng, f, policy.max_freq_width);
            for r in 0..t {
                out.row_mut(r)[bins.clone()].fill(mean);
            }
        }
    }
    if policy.max_time_width > 0 && t > 0 {
        for _ in 0..policy.n_time_masks {
            for r in span(&mut rng, t, policy.max_time_width) {
                out.row_mut(r).fill(mean);
            }
        }
    }
    Ok(out)
}

/// Log-mel extraction followed by a fixed per-bin affine normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Featurizer {
    pub frontend: FrontendConfig,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Featurizer {
    pub fn identity(frontend: FrontendConfig) -> Self {
        let n = frontend.n_mels;
        Self {
            frontend,
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }

    /// Per-bin statistics over every frame of `corpus`.
    pub fn fit(frontend: FrontendConfig, corpus: &[Array]) -> Result<Self> {
        let n = frontend.n_mels;
        let mut count = 0usize;
        let mut sum = vec![0.0; n];
        let mut sq = vec![0.0; n];
        for x in corpus {
            for r in 0..x.rows() {
                for (j, &v) in x.row(r).iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Input("cannot fit normalization on no frames".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / count as f64 - m * m).max(0.0).sqrt().max(1e-3))
            .collect();
        Ok(Self {
            frontend,
            mean,
            std,
        })
    }

    pub fn normalize(&self, raw: &Array) -> Array {
        let mut out = raw.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    pub fn features(&self, samples: &[f64]) -> Result<Array> {
        Ok(self.normalize(&logmel(samples, &self.frontend)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(toml::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, toml::to_string_pretty(self)?)?;
        Ok(())
    }
}
