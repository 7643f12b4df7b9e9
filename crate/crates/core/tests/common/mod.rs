#![allow(dead_code)]

use std::collections::HashMap;

use convtt::config::ModelConfig;
use convtt::decoder::JointScorer;
use convtt::encoder::StreamChunk;
use convtt::engine::kernels::{log_add_exp, log_softmax_rows};
use convtt::engine::{Array, Graph};
use convtt::loss::Utterance;
use convtt::model::Transducer;
use convtt::trainer::batch_gradients;
use convtt::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Array {
    Array::randn(shape.to_vec(), 1.0, &mut rng(seed))
}

pub fn toy_model(seed: u64) -> Transducer {
    Transducer::init(ModelConfig::preset("toy").unwrap(), seed).unwrap()
}

/// Streams `x` in chunks of `chunk` rows and concatenates every emitted row.
pub fn stream_encode(m: &Transducer, x: &Array, chunk: usize) -> Array {
    let mut st = m.stream_state().unwrap();
    let dm = m.config.encoder.output_dim();
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + chunk).min(x.rows());
        let last = end == x.rows();
        let y = m
            .encode_chunk(
                &mut st,
                StreamChunk {
                    start_frame: start,
                    frames: &x.slice_rows(start, end),
                    end_of_stream: last,
                },
            )
            .unwrap();
        out.extend_from_slice(y.data());
        if last {
            break;
        }
        start = end;
    }
    Array::new([out.len() / dm, dm], out).unwrap()
}

/// Scores drawn from a hash of (frame, label history).
pub struct Rigged {
    pub seed: u64,
    pub vocab: usize,
    pub sharpness: f64,
}

impl JointScorer for Rigged {
    type State = Vec<usize>;

    fn initial_state(&self) -> Result<Vec<usize>> {
        Ok(Vec::new())
    }

    fn extend(&self, s: &Vec<usize>, label: usize) -> Result<Vec<usize>> {
        let mut s = s.clone();
        s.push(label);
        Ok(s)
    }

    fn log_probs(&self, frame: &[f64], s: &Vec<usize>) -> Result<Vec<f64>> {
        let mut key = self.seed ^ (frame[0] as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        for &l in s {
            key = key.wrapping_mul(31).wrapping_add(l as u64 + 1);
        }
        let mut r = ChaCha8Rng::seed_from_u64(key);
        let logits: Vec<f64> = (0..self.vocab)
            .map(|_| self.sharpness * r.gen_range(-1.0..1.0))
            .collect();
        Ok(log_softmax_rows(&logits, self.vocab))
    }
}

pub fn frames(t: usize) -> Array {
    Array::new([t, 1], (0..t).map(|i| i as f64).collect()).unwrap()
}

/// Total probability of every label sequence, by enumerating every
/// alignment with at most `cap` labels per frame.
pub fn exhaustive(s: &Rigged, t: usize, cap: usize) -> HashMap<Vec<usize>, f64> {
    let mut out = HashMap::new();
    fn walk(
        s: &Rigged,
        t: usize,
        cap: usize,
        frame: usize,
        emitted: usize,
        labels: &mut Vec<usize>,
        lp: f64,
        out: &mut HashMap<Vec<usize>, f64>,
    ) {
        if frame == t {
            let e = out.entry(labels.clone()).or_insert(f64::NEG_INFINITY);
            *e = log_add_exp(*e, lp);
            return;
        }
        let dist = s.log_probs(&[frame as f64], labels).unwrap();
        walk(s, t, cap, frame + 1, 0, labels, lp + dist[0], out);
        if emitted < cap {
            for k in 1..s.vocab {
                labels.push(k);
                walk(s, t, cap, frame, emitted + 1, labels, lp + dist[k], out);
                labels.pop();
            }
        }
    }
    walk(s, t, cap, 0, 0, &mut Vec::new(), 0.0, &mut out);
    out
}

/// Tiny model with randomized parameters plus a two-utterance batch.
pub fn tiny() -> (Transducer, Vec<Utterance>) {
    let cfg = ModelConfig::preset("tiny").unwrap().with_dropout(0.0);
    let mut m = Transducer::init(cfg, 3).unwrap();
    // Move off the zero-bias initialization, where ReLUs fed by dead
    // inputs sit exactly on their kink.
    let names: Vec<String> = m.params.iter().map(|(n, _)| n.to_string()).collect();
    for (i, name) in names.iter().enumerate() {
        let p = m.params.get_mut(name).unwrap();
        let noise = randn(p.shape(), 100 + i as u64);
        for (x, d) in p.data_mut().iter_mut().zip(noise.data()) {
            *x = if name.ends_with(".var") {
                0.5 + 0.25 * d.abs()
            } else {
                *x + 0.2 * d
            };
        }
    }
    let batch = vec![
        Utterance {
            frames: randn(&[19, 4], 1),
            labels: vec![1, 3],
        },
        Utterance {
            frames: randn(&[11, 4], 2),
            labels: vec![2],
        },
    ];
    (m, batch)
}

pub fn mean_loss(m: &Transducer, batch: &[Utterance]) -> f64 {
    batch
        .iter()
        .map(|u| {
            let mut g = Graph::new();
            let l = m
                .utterance_loss(&mut g, &u.frames, &u.labels, None)
                .unwrap();
            g.value(l).item()
        })
        .sum::<f64>()
        / batch.len() as f64
}

/// Worst relative error between analytic parameter gradients and central
/// differences, and where it occurred.
pub fn model_grad_check(m: &Transducer, batch: &[Utterance], eps: f64) -> (f64, String) {
    let analytic = batch_gradients(m, batch, None).unwrap().grads;
    let mut worst = (0.0f64, String::new());
    for (name, grad) in &analytic {
        for i in 0..grad.len() {
            let mut probe = m.clone();
            let base = probe.params.get(name).unwrap().data()[i];
            probe.params.get_mut(name).unwrap().data_mut()[i] = base + eps;
            let plus = mean_loss(&probe, batch);
            probe.params.get_mut(name).unwrap().data_mut()[i] = base - eps;
            let minus = mean_loss(&probe, batch);
            let fd = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i}]: analytic {a:e}, numeric {fd:e}"));
            }
        }
    }
    worst
}
