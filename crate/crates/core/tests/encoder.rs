mod common;

use common::{randn, rng, stream_encode, toy_model};
use convtt::config::ModelConfig;
use convtt::encoder::attention::{
    init_layer, rel_attention, sinusoid, transformer_layer, KvCache, LayerVars, PositionVars,
    Positions, LAYER_NORM_EPS,
};
use convtt::encoder::{lookahead, output_length, EncoderConfig, StreamChunk, TransformerLayerSpec};
use convtt::engine::{Array, Graph, ParamStore};
use convtt::model::Transducer;

fn matmul(a: &[Vec<f64>], w: &Array) -> Vec<Vec<f64>> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| (0..k).map(|i| row[i] * w.data()[i * n + j]).sum())
                .collect()
        })
        .collect()
}

fn rows(a: &Array) -> Vec<Vec<f64>> {
    (0..a.rows()).map(|i| a.row(i).to_vec()).collect()
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mu) / (var + LAYER_NORM_EPS).sqrt() * g[i] + b[i])
        .collect()
}

/// Loop-level relative attention over positions `0..t` with a window.
fn reference_attention(
    q: &[Vec<f64>],
    k: &[Vec<f64>],
    v: &[Vec<f64>],
    wr: &Array,
    u: &Array,
    vb: &Array,
    heads: usize,
    window: Option<usize>,
) -> Vec<Vec<f64>> {
    let t = q.len();
    let dm = q[0].len();
    let dh = dm / heads;
    let r = matmul(&rows(&sinusoid(t, dm)), wr);
    let mut out = vec![vec![0.0; dm]; t];
    for h in 0..heads {
        for i in 0..t {
            let visible: Vec<usize> = (0..=i)
                .filter(|&j| window.map_or(true, |w| i - j < w))
                .collect();
            let logits: Vec<f64> = visible
                .iter()
                .map(|&j| {
                    let mut s = 0.0;
                    for c in 0..dh {
                        let col = h * dh + c;
                        s += (q[i][col] + u.data()[col]) * k[j][col];
                        s += (q[i][col] + vb.data()[col]) * r[i - j][col];
                    }
                    s / (dh as f64).sqrt()
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for (n, &j) in visible.iter().enumerate() {
                let p = (logits[n] - m).exp() / z;
                for c in 0..dh {
                    out[i][h * dh + c] += p * v[j][h * dh + c];
                }
            }
        }
    }
    out
}

fn layer_fixture(seed: u64) -> (ParamStore, TransformerLayerSpec) {
    let spec = TransformerLayerSpec::new(2, 3, 5, 0.0);
    let mut store = ParamStore::new();
    init_layer(&mut store, "l", &spec, &mut rng(seed));
    // Non-trivial norms and biases so every term is exercised.
    for name in [
        "l.ln1.gamma",
        "l.ln1.beta",
        "l.ln2.gamma",
        "l.ln2.beta",
        "l.attn.bo",
        "l.ffn.b1",
        "l.ffn.b2",
    ] {
        let n = store.get(name).unwrap().len();
        store.insert(name, randn(&[n], seed + name.len() as u64));
    }
    (store, spec)
}

#[test]
fn transformer_layer_matches_loop_reference() {
    let (store, spec) = layer_fixture(3);
    let p = |n: &str| (**store.get(&format!("l.{n}")).unwrap()).clone();
    let x = randn(&[6, 6], 4);
    for window in [None, Some(1), Some(3)] {
        let mut g = Graph::new();
        let lv = LayerVars::bind(&mut g, &store, "l").unwrap();
        let xv = g.constant(x.clone());
        let out = transformer_layer(&mut g, &lv, &spec, xv, 0, None, window, None).unwrap();
        let got = g.value(out.out).clone();

        let h: Vec<Vec<f64>> = rows(&x)
            .iter()
            .map(|r| layer_norm(r, p("ln1.gamma").data(), p("ln1.beta").data()))
            .collect();
        let (q, k, v) = (
            matmul(&h, &p("attn.wq")),
            matmul(&h, &p("attn.wk")),
            matmul(&h, &p("attn.wv")),
        );
        let ctx = reference_attention(
            &q,
            &k,
            &v,
            &p("attn.wr"),
            &p("attn.u"),
            &p("attn.v"),
            2,
            window,
        );
        let attn = matmul(&ctx, &p("attn.wo"));
        let mut want = Vec::new();
        for i in 0..6 {
            let x1: Vec<f64> = (0..6)
                .map(|c| x.row(i)[c] + attn[i][c] + p("attn.bo").data()[c])
                .collect();
            let h2 = layer_norm(&x1, p("ln2.gamma").data(), p("ln2.beta").data());
            let f1: Vec<f64> = matmul(&[h2], &p("ffn.w1"))[0]
                .iter()
                .zip(p("ffn.b1").data())
                .map(|(a, b)| (a + b).max(0.0))
                .collect();
            let f2 = &matmul(&[f1], &p("ffn.w2"))[0];
            want.extend((0..6).map(|c| x1[c] + f2[c] + p("ffn.b2").data()[c]));
        }
        let err = got
            .data()
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-12, "window {window:?}: {err}");
    }
}

#[test]
fn single_key_attention_returns_its_value() {
    let mut g = Graph::new();
    let q = g.constant(randn(&[1, 4], 1));
    let k = g.constant(randn(&[1, 4], 2));
    let val = randn(&[1, 4], 3);
    let v = g.constant(val.clone());
    let pv = PositionVars {
        w_r: g.constant(randn(&[4, 4], 4)),
        u: g.constant(randn(&[2, 2], 5)),
        v: g.constant(randn(&[2, 2], 6)),
    };
    let pos = Positions {
        query_start: 0,
        key_start: 0,
    };
    let out = rel_attention(&mut g, q, k, v, pos, None, &pv, 2).unwrap();
    assert_eq!(g.value(out).data(), val.data());
}

#[test]
fn attention_is_shift_invariant() {
    let (store, spec) = layer_fixture(8);
    let hist = randn(&[5, 6], 9);
    let x = randn(&[3, 6], 10);
    let run = |offset: usize| {
        let mut g = Graph::new();
        let lv = LayerVars::bind(&mut g, &store, "l").unwrap();
        let hv = g.constant(hist.clone());
        let first = transformer_layer(&mut g, &lv, &spec, hv, offset, None, Some(4), None).unwrap();
        let mut cache = KvCache::empty(6);
        cache.start = offset;
        cache.append(g.value(first.keys), g.value(first.values), Some(4));
        let xv = g.constant(x.clone());
        let out = transformer_layer(
            &mut g,
            &lv,
            &spec,
            xv,
            offset + 5,
            Some(&cache),
            Some(4),
            None,
        )
        .unwrap();
        g.value(out.out).clone()
    };
    let (a, b) = (run(0), run(100));
    assert!(a.max_abs_diff(&b) <= 1e-10, "{}", a.max_abs_diff(&b));
}

#[test]
fn frame_rate_arithmetic() {
    let d = EncoderConfig::preset("default").unwrap();
    let hfr = EncoderConfig::preset("hfr").unwrap();
    for t in 1..=1000 {
        assert_eq!(output_length(t, &d), t.div_ceil(8));
        assert_eq!(output_length(t, &hfr), t.div_ceil(4));
    }
    assert_eq!(d.frame_rates_ms(), vec![20, 40, 80]);
    assert_eq!(hfr.frame_rates_ms(), vec![20, 40, 40]);
}

#[test]
fn lookahead_by_preset() {
    let ms = |name: &str| lookahead(&EncoderConfig::preset(name).unwrap()).ms;
    assert_eq!(ms("default"), 140);
    assert_eq!(ms("causal"), 0);
    for name in ["dist-2-4-6", "dist-2-6-4", "dist-2-0-10", "dist-0-0-11"] {
        assert_eq!(ms(name), 140, "{name}");
    }
    // Stride 1 in the last block halves its right context.
    assert_eq!(ms("hfr"), 100);
}

#[test]
fn chunked_equals_offline_bitwise() {
    let m = toy_model(5);
    let x = randn(&[53, 16], 1);
    let offline = m.encode(&x).unwrap();
    assert_eq!(offline.rows(), 7);
    for chunk in [1, 2, 7, 16, 53] {
        let s = stream_encode(&m, &x, chunk);
        assert_eq!(s.data(), offline.data(), "chunk {chunk}");
    }
}

#[test]
fn stream_waits_for_lookahead() {
    let m = toy_model(5);
    let x = randn(&[30, 16], 2);
    let mut st = m.stream_state().unwrap();
    let mut emitted = Vec::new();
    for i in 0..30 {
        let y = m
            .encode_chunk(
                &mut st,
                StreamChunk {
                    start_frame: i,
                    frames: &x.slice_rows(i, i + 1),
                    end_of_stream: false,
                },
            )
            .unwrap();
        emitted.push(st.emitted());
        let _ = y;
    }
    // Output j needs input frames up to 8j + 14.
    for (i, &e) in emitted.iter().enumerate() {
        let seen = i + 1;
        let ready = if seen >= 15 { (seen - 15) / 8 + 1 } else { 0 };
        assert_eq!(e, ready, "after {seen} frames");
    }
}

#[test]
fn stream_rejects_misuse() {
    let m = toy_model(5);
    let x = randn(&[4, 16], 3);
    let mut st = m.stream_state().unwrap();
    let gap = StreamChunk {
        start_frame: 2,
        frames: &x,
        end_of_stream: false,
    };
    assert!(m.encode_chunk(&mut st, gap).is_err());
    let wrong = randn(&[4, 3], 3);
    assert!(m
        .encode_chunk(
            &mut st,
            StreamChunk {
                start_frame: 0,
                frames: &wrong,
                end_of_stream: false
            }
        )
        .is_err());
    m.encode_chunk(
        &mut st,
        StreamChunk {
            start_frame: 0,
            frames: &x,
            end_of_stream: true,
        },
    )
    .unwrap();
    assert!(st.is_finished());
    let after = StreamChunk {
        start_frame: 4,
        frames: &x,
        end_of_stream: false,
    };
    assert!(m.encode_chunk(&mut st, after).is_err());
}

#[test]
fn perturbing_future_frames_leaves_earlier_outputs() {
    let m = toy_model(6);
    let x = randn(&[64, 16], 4);
    let base = m.encode(&x).unwrap();
    for n in 0..64 {
        let mut y = x.clone();
        let noise = randn(&[16], 100 + n as u64);
        for (v, d) in y.row_mut(n).iter_mut().zip(noise.data()) {
            *v += 3.0 * d;
        }
        let out = m.encode(&y).unwrap();
        for j in 0..base.rows() {
            if 8 * j + 14 < n {
                assert_eq!(out.row(j), base.row(j), "frame {n}, output {j}");
            }
        }
        // The look-ahead is tight: the last frame an output sees matters.
        if n >= 14 && (n - 14) % 8 == 0 && (n - 14) / 8 < base.rows() {
            let j = (n - 14) / 8;
            assert_ne!(out.row(j), base.row(j), "frame {n}, output {j}");
        }
    }
}

#[test]
fn window_at_least_length_is_unlimited() {
    let x = randn(&[40, 16], 5);
    let unlimited = toy_model(7);
    let mut cfg = ModelConfig::preset("toy").unwrap();
    cfg.encoder.left_attention_window = Some(20);
    let windowed = Transducer::from_parts(cfg, unlimited.params.clone()).unwrap();
    assert_eq!(
        windowed.encode(&x).unwrap().data(),
        unlimited.encode(&x).unwrap().data()
    );
}

#[test]
fn windowed_stream_caches_stay_bounded() {
    let x = randn(&[120, 16], 6);
    for w in [2, 3, 8] {
        let mut cfg = ModelConfig::preset("toy").unwrap();
        cfg.encoder.left_attention_window = Some(w);
        let m = Transducer::init(cfg, 8).unwrap();
        let offline = m.encode(&x).unwrap();
        let mut st = m.stream_state().unwrap();
        let mut out = Vec::new();
        for s in (0..120).step_by(9) {
            let e = (s + 9).min(120);
            let y = m
                .encode_chunk(
                    &mut st,
                    StreamChunk {
                        start_frame: s,
                        frames: &x.slice_rows(s, e),
                        end_of_stream: e == 120,
                    },
                )
                .unwrap();
            out.extend_from_slice(y.data());
            for lens in st.cache_lens() {
                assert!(lens.iter().all(|&l| l <= w), "window {w}: {lens:?}");
            }
        }
        assert_eq!(out, offline.data(), "window {w}");
    }
}
