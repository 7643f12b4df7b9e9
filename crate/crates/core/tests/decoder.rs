mod common;

use common::{exhaustive, frames, randn, toy_model, Rigged};
use convtt::decoder::{beam_decode, decode_offline, greedy_decode, DecodeConfig, DecodeSession};
use convtt::engine::kernels::log_add_exp;

#[test]
fn unpruned_beam_is_exact_on_rigged_lattices() {
    for seed in 0..25 {
        let s = Rigged {
            seed,
            vocab: 3,
            sharpness: 2.5,
        };
        let cap = 2;
        let all = exhaustive(&s, 3, cap);
        let total = all
            .values()
            .fold(f64::NEG_INFINITY, |a, &b| log_add_exp(a, b));
        // The forced blank at the cap still pays its own probability.
        assert!(total < 0.0);
        let cfg = DecodeConfig {
            beam_width: 10_000,
            max_symbols_per_frame: cap,
        };
        let beam = beam_decode(&s, &frames(3), &cfg).unwrap();
        assert_eq!(beam.len(), all.len());
        for h in &beam {
            assert!((h.score - all[&h.labels]).abs() < 1e-12);
        }
        let (best, score) = all
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(l, s)| (l.clone(), *s))
            .unwrap();
        assert_eq!(beam[0].labels, best, "seed {seed}");
        assert!((beam[0].score - score).abs() < 1e-12);
    }
}

#[test]
fn narrow_beam_finds_the_best_on_peaked_lattices() {
    let mut hits = 0;
    for seed in 0..25 {
        let s = Rigged {
            seed: 1000 + seed,
            vocab: 4,
            sharpness: 6.0,
        };
        let all = exhaustive(&s, 3, 2);
        let best = all
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0
            .clone();
        let cfg = DecodeConfig {
            beam_width: 4,
            max_symbols_per_frame: 2,
        };
        let beam = beam_decode(&s, &frames(3), &cfg).unwrap();
        hits += usize::from(beam[0].labels == best);
        assert!(beam[0].score <= all[&beam[0].labels] + 1e-12);
    }
    assert!(hits >= 20, "{hits}/25");
}

#[test]
fn width_one_beam_equals_greedy() {
    for seed in 0..30 {
        let s = Rigged {
            seed: 77 + seed,
            vocab: 4,
            sharpness: 3.0,
        };
        let f = frames(6);
        let g = greedy_decode(&s, &f, 3).unwrap();
        let b = beam_decode(
            &s,
            &f,
            &DecodeConfig {
                beam_width: 1,
                max_symbols_per_frame: 3,
            },
        )
        .unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].labels, g.labels);
        assert_eq!(b[0].score, g.score);
    }
}

#[test]
fn greedy_score_is_its_path_probability() {
    let s = Rigged {
        seed: 5,
        vocab: 3,
        sharpness: 4.0,
    };
    let g = greedy_decode(&s, &frames(3), 2).unwrap();
    let all = exhaustive(&s, 3, 2);
    assert!(g.score <= all[&g.labels] + 1e-12);
}

#[test]
fn wider_beams_never_score_worse_on_random_models() {
    let m = toy_model(3);
    for seed in 0..5 {
        let x = randn(&[40, 16], seed);
        let enc = m.encode(&x).unwrap();
        let greedy = greedy_decode(&m, &enc, 8).unwrap();
        let one = beam_decode(&m, &enc, &DecodeConfig::beam(1)).unwrap();
        assert_eq!(one[0].labels, greedy.labels);
        assert_eq!(one[0].score, greedy.score);
        let four = beam_decode(&m, &enc, &DecodeConfig::beam(4)).unwrap();
        assert!(four[0].score >= greedy.score - 1e-12);
    }
}

#[test]
fn streaming_session_matches_offline() {
    let m = toy_model(4);
    for seed in 0..3 {
        let x = randn(&[45, 16], 10 + seed);
        for width in [1, 3] {
            let offline = decode_offline(&m, &x, &DecodeConfig::beam(width)).unwrap();
            for chunk in [1, 7, 45] {
                let mut session = DecodeSession::new(&m, DecodeConfig::beam(width)).unwrap();
                let mut s = 0;
                let mut last = Vec::new();
                while s < 45 {
                    let e = (s + chunk).min(45);
                    let p = session.push(&x.slice_rows(s, e), false).unwrap();
                    if width == 1 {
                        assert!(!p.replaced && p.labels.starts_with(&last));
                    }
                    last = p.labels;
                    s = e;
                }
                let p = session.finish().unwrap();
                assert_eq!(p.labels, offline.labels, "width {width}, chunk {chunk}");
                assert_eq!(p.score, offline.score);
                assert_eq!(p.encoder_frames, 6);
            }
        }
    }
}

#[test]
fn zero_width_is_a_config_error() {
    assert!(DecodeConfig::beam(0).validate().is_err());
    let m = toy_model(1);
    assert!(DecodeSession::new(
        &m,
        DecodeConfig {
            beam_width: 2,
            max_symbols_per_frame: 0
        }
    )
    .is_err());
}
