//! The twelve acceptance criteria, run in one pass with one result line
//! each. Run with `cargo test --release --test acceptance -- --nocapture`
//! to see the report.

mod common;

use std::time::{Duration, Instant};

use common::{exhaustive, frames, model_grad_check, randn, rng, stream_encode, tiny, Rigged};
use convtt::config::ModelConfig;
use convtt::decoder::{beam_decode, decode_offline, greedy_decode, DecodeConfig, DecodeSession};
use convtt::encoder::attention::{transformer_layer, KvCache, LayerVars};
use convtt::encoder::{lookahead, output_length, EncoderConfig};
use convtt::engine::Graph;
use convtt::loss::{binomial, brute_force_nll, forward_backward, LossLattice};
use convtt::model::Transducer;
use convtt::predictor::predict_sequence;
use convtt::report::latency_report;
use convtt::trainer::{train_toy, Schedule, TrainConfig, TrainOutcome};
use rand::Rng;

struct Verdict {
    pass: bool,
    detail: String,
    notes: Vec<String>,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
            notes: Vec::new(),
        }
    }

    fn note(mut self, note: impl Into<String>) -> Self {
        self.notes.push(note.into());
        self
    }
}

fn within(elapsed: Duration, limit: Duration) -> bool {
    elapsed < limit
}

fn loss_oracle() -> Verdict {
    let t0 = Instant::now();
    let mut r = rng(2024);
    let mut worst = 0.0f64;
    let trials = 250;
    for _ in 0..trials {
        let t = r.gen_range(1..=5);
        let u = r.gen_range(0..=4);
        let v = r.gen_range(2..=7);
        let lat = LossLattice::random(&mut r, t, u, v, 4.0).unwrap();
        let fb = forward_backward(&lat).unwrap().nll;
        worst = worst.max((fb - brute_force_nll(&lat).unwrap()).abs());
    }
    let dt = t0.elapsed();
    Verdict::new(
        worst < 1e-9 && within(dt, Duration::from_secs(30)),
        format!("{trials} lattices, max |Δnll| {worst:.2e}, {dt:.2?}"),
    )
}

fn gradient_check() -> Verdict {
    let t0 = Instant::now();
    let (m, batch) = tiny();
    let (worst, at) = model_grad_check(&m, &batch, 1e-5);
    let dt = t0.elapsed();
    Verdict::new(
        m.num_params() <= 2000 && worst < 1e-3 && within(dt, Duration::from_secs(120)),
        format!(
            "{} parameters, max rel error {worst:.2e}, {dt:.2?}",
            m.num_params()
        ),
    )
    .note(format!("worst entry {at}"))
}

fn uniform_closed_form() -> Verdict {
    let v = 5u64;
    let (mut literal, mut corrected) = (0.0f64, 0.0f64);
    for t in 1..=5u64 {
        for u in 0..=4u64 {
            let labels = (0..u as usize).map(|i| 1 + i % 4).collect();
            let lat = LossLattice::uniform(t as usize, labels, v as usize).unwrap();
            let nll = forward_backward(&lat).unwrap().nll;
            let base = (t + u) as f64 * (v as f64).ln();
            literal = literal.max((nll - (base - (binomial(t + u, u) as f64).ln())).abs());
            corrected = corrected.max((nll - (base - (binomial(t + u - 1, u) as f64).ln())).abs());
        }
    }
    Verdict::new(
        literal < 1e-9,
        format!("max error against C(T′+U, U) paths: {literal:.3e}"),
    )
    .note(format!(
        "against C(T′+U−1, U) paths (terminal blank): max error {corrected:.2e}"
    ))
    .note("every path ends with the blank at the last frame, so T′=2, U=1 has 2 paths, not 3")
}

fn lookahead_constant() -> Verdict {
    let desk = ModelConfig::preset("desk").unwrap();
    let default = latency_report("default", &desk.encoder, desk.feat_dim).unwrap();
    let causal = lookahead(&EncoderConfig::preset("causal").unwrap());
    let ends = default.table().ends_with("total look-ahead: 140 ms");
    Verdict::new(
        default.lookahead.ms == 140 && ends && causal.ms == 0,
        format!(
            "default {} ms, causal {} ms",
            default.lookahead.ms, causal.ms
        ),
    )
}

fn frame_rates() -> Verdict {
    let d = EncoderConfig::preset("default").unwrap();
    let h = EncoderConfig::preset("hfr").unwrap();
    let arithmetic = (1..=1000)
        .all(|t| output_length(t, &d) == t.div_ceil(8) && output_length(t, &h) == t.div_ceil(4));
    // The network itself agrees with the formula.
    let toy = Transducer::init(ModelConfig::preset("toy").unwrap(), 1).unwrap();
    let hfr = Transducer::init(
        ModelConfig::preset("toy")
            .unwrap()
            .with_encoder_preset("hfr")
            .unwrap(),
        1,
    )
    .unwrap();
    let network = (1..=40).chain([99, 250]).all(|t| {
        let x = randn(&[t, 16], t as u64);
        toy.encode(&x).unwrap().rows() == t.div_ceil(8)
            && hfr.encode(&x).unwrap().rows() == t.div_ceil(4)
    });
    Verdict::new(
        arithmetic && network,
        "T ∈ [1, 1000]: ceil(T/8) default, ceil(T/4) high frame rate",
    )
}

fn streaming_equals_offline() -> Verdict {
    let t0 = Instant::now();
    let m = Transducer::init(ModelConfig::preset("toy").unwrap(), 21).unwrap();
    let mut r = rng(6);
    let mut worst = 0.0f64;
    let mut transcripts_equal = true;
    for i in 0..10 {
        let t = r.gen_range(20..120);
        let x = randn(&[t, 16], 600 + i);
        let offline = m.encode(&x).unwrap();
        let text = decode_offline(&m, &x, &DecodeConfig::greedy())
            .unwrap()
            .labels;
        for chunk in [1, 2, 7, 16, t] {
            worst = worst.max(stream_encode(&m, &x, chunk).max_abs_diff(&offline));
            let mut s = DecodeSession::new(&m, DecodeConfig::greedy()).unwrap();
            let mut a = 0;
            while a < t {
                let b = (a + chunk).min(t);
                s.push(&x.slice_rows(a, b), false).unwrap();
                a = b;
            }
            transcripts_equal &= s.finish().unwrap().labels == text;
        }
    }
    let dt = t0.elapsed();
    Verdict::new(
        worst <= 1e-5 && transcripts_equal && within(dt, Duration::from_secs(60)),
        format!("10 utterances × 5 chunkings, max |Δ| {worst:.1e}, transcripts equal: {transcripts_equal}, {dt:.2?}"),
    )
}

fn causality() -> Verdict {
    let m = Transducer::init(ModelConfig::preset("toy").unwrap(), 7).unwrap();
    let mut r = rng(7);
    let mut ok = true;
    let mut compared = 0;
    for trial in 0..20 {
        let t = r.gen_range(30..90);
        let x = randn(&[t, 16], 700 + trial);
        let n = r.gen_range(14..t);
        let mut y = x.clone();
        for v in y.row_mut(n) {
            *v += r.gen_range(-3.0..3.0);
        }
        let (a, b) = (m.encode(&x).unwrap(), m.encode(&y).unwrap());
        for j in (0..a.rows()).filter(|j| 8 * j + 14 < n) {
            ok &= a.row(j) == b.row(j);
            compared += 1;
        }
    }
    Verdict::new(
        ok,
        format!("20 trials, {compared} earlier outputs bitwise identical: {ok}"),
    )
}

fn limited_context() -> Verdict {
    let base = Transducer::init(ModelConfig::preset("toy").unwrap(), 8).unwrap();
    let with = |enc: Option<usize>, pred: Option<usize>| {
        let mut cfg = base.config.clone();
        cfg.encoder.left_attention_window = enc;
        cfg.predictor = cfg.predictor.with_window(pred);
        Transducer::from_parts(cfg, base.params.clone()).unwrap()
    };
    let x = randn(&[48, 16], 80);
    let labels: Vec<usize> = (0..12).map(|i| 1 + i % 4).collect();
    let unlimited = base.encode(&x).unwrap();
    let p_unlimited = predict_sequence(&base.config.predictor, &base.params, &labels).unwrap();
    // Block 1 runs at 20 ms, so 24 frames is the longest attention span.
    let wide = with(Some(24), Some(13));
    let mut ok = wide.encode(&x).unwrap().data() == unlimited.data();
    ok &= predict_sequence(&wide.config.predictor, &wide.params, &labels)
        .unwrap()
        .data()
        == p_unlimited.data();

    let long = randn(&[400, 16], 81);
    let mut peak = 0;
    for (ew, pw) in [(8, 2), (16, 8), (32, 16)] {
        let m = with(Some(ew), Some(pw));
        let offline = m.encode(&long).unwrap();
        let mut st = m.stream_state().unwrap();
        let mut out = Vec::new();
        for a in (0..400).step_by(13) {
            let b = (a + 13).min(400);
            let chunk = convtt::encoder::StreamChunk {
                start_frame: a,
                frames: &long.slice_rows(a, b),
                end_of_stream: b == 400,
            };
            out.extend_from_slice(m.encode_chunk(&mut st, chunk).unwrap().data());
            for lens in st.cache_lens() {
                peak = peak.max(*lens.iter().max().unwrap_or(&0));
                ok &= lens.iter().all(|&l| l <= ew);
            }
        }
        ok &= out == offline.data();
        let mut ps = m.predictor_start().unwrap();
        for &l in &labels {
            ps = m.predict_step(&ps, l).unwrap();
            ok &= ps.cache_lens().iter().all(|&n| n <= pw);
        }
    }
    Verdict::new(
        ok,
        format!("wide window exact; encoder {{8,16,32}} and predictor {{2,8,16}} run with caches within window: {ok}"),
    )
}

fn shift_invariance() -> Verdict {
    let m = Transducer::init(ModelConfig::preset("toy").unwrap(), 9).unwrap();
    let spec = m.config.encoder.blocks[0].layer.clone();
    let hist = randn(&[6, 16], 90);
    let x = randn(&[4, 16], 91);
    let run = |offset: usize| {
        let mut g = Graph::new();
        let lv = LayerVars::bind(&mut g, &m.params, "enc.b0.layer0").unwrap();
        let hv = g.constant(hist.clone());
        let first = transformer_layer(&mut g, &lv, &spec, hv, offset, None, None, None).unwrap();
        let mut cache = KvCache::empty(16);
        cache.start = offset;
        cache.append(g.value(first.keys), g.value(first.values), None);
        let xv = g.constant(x.clone());
        let out = transformer_layer(&mut g, &lv, &spec, xv, offset + 6, Some(&cache), None, None)
            .unwrap();
        g.value(out.out).clone()
    };
    let diff = run(0).max_abs_diff(&run(100));
    Verdict::new(
        diff <= 1e-10,
        format!("offsets 0 vs 100, max |Δ| {diff:.1e}"),
    )
}

fn beam_search(trained: &TrainOutcome) -> Verdict {
    let m = &trained.model;
    let mut same = 0;
    for u in &trained.dataset.utterances {
        let enc = m.encode(&u.frames).unwrap();
        let g = greedy_decode(m, &enc, 8).unwrap();
        let b = beam_decode(m, &enc, &DecodeConfig::beam(1)).unwrap();
        same += usize::from(b[0].labels == g.labels && b[0].score == g.score);
    }
    let mut exact = 0;
    let rigged = 30usize;
    for seed in 0..rigged as u64 {
        let s = Rigged {
            seed,
            vocab: 3,
            sharpness: 2.5,
        };
        let all = exhaustive(&s, 3, 2);
        let best = all
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0
            .clone();
        let cfg = DecodeConfig {
            beam_width: 10_000,
            max_symbols_per_frame: 2,
        };
        let beam = beam_decode(&s, &frames(3), &cfg).unwrap();
        exact += usize::from(beam[0].labels == best && (beam[0].score - all[&best]).abs() < 1e-12);
    }
    let n = trained.dataset.len();
    Verdict::new(
        same == n && exact == rigged,
        format!("beam-1 = greedy on {same}/{n}; exhaustive best found on {exact}/{rigged} rigged 3-frame lattices"),
    )
}

fn overfit() -> (Verdict, TrainOutcome) {
    let t0 = Instant::now();
    let cfg = TrainConfig::toy();
    let out = train_toy(&cfg, |_| {}).unwrap();
    let nll = out.final_loss().unwrap();
    let exact = out
        .dataset
        .texts
        .iter()
        .zip(&out.dataset.utterances)
        .filter(|(text, u)| {
            let h = decode_offline(&out.model, &u.frames, &DecodeConfig::greedy()).unwrap();
            out.dataset.vocab.decode(&h.labels) == **text
        })
        .count();
    let dt = t0.elapsed();
    let threads = rayon::current_num_threads();
    let v = Verdict::new(
        nll < 0.1 && exact == out.dataset.len() && within(dt, Duration::from_secs(1800)),
        format!(
            "{} utterances, {} steps: mean nll {nll:.2e}, exact {exact}/{}, {dt:.1?} on {threads} thread(s)",
            out.dataset.len(),
            cfg.steps,
            out.dataset.len()
        ),
    );
    (v, out)
}

fn schedule_anchors() -> Verdict {
    let s = Schedule::default();
    let (a, b, c) = (s.lr(0), s.lr(10_000), s.lr(210_000));
    Verdict::new(
        a == 0.0 && b == 0.01 && c == 5e-6,
        format!("lr(0) = {a}, lr(10000) = {b}, lr(210000) = {c}"),
    )
}

/// Criteria whose literal statement cannot hold for any correct loss. They
/// are reported as failures; the run only insists that they keep failing.
const UNATTAINABLE: &[usize] = &[3];

#[test]
fn acceptance_criteria() {
    let (v11, trained) = overfit();
    let results = vec![
        (1, "loss oracle equivalence", loss_oracle()),
        (2, "full-model gradient check", gradient_check()),
        (3, "uniform-lattice closed form", uniform_closed_form()),
        (4, "look-ahead constant", lookahead_constant()),
        (5, "frame-rate arithmetic", frame_rates()),
        (6, "streaming equals offline", streaming_equals_offline()),
        (7, "causality", causality()),
        (8, "limited-context degeneracy", limited_context()),
        (9, "relative-position shift invariance", shift_invariance()),
        (10, "beam search", beam_search(&trained)),
        (11, "end-to-end overfit", v11),
        (12, "schedule anchors", schedule_anchors()),
    ];
    println!();
    for (id, name, v) in &results {
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {id:>2} {name}: {}", v.detail);
        for n in &v.notes {
            println!("          {n}");
        }
    }
    for id in UNATTAINABLE {
        assert!(
            !results[id - 1].2.pass,
            "criterion {id} is listed as unattainable but passed"
        );
    }
    let failed: Vec<String> = results
        .iter()
        .filter(|(id, _, v)| !v.pass && !UNATTAINABLE.contains(id))
        .map(|(id, name, _)| format!("{id} ({name})"))
        .collect();
    let passed = results.iter().filter(|(_, _, v)| v.pass).count();
    println!("{passed}/{} criteria passed", results.len());
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
