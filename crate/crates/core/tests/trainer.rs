mod common;

use std::collections::BTreeMap;

use common::randn;
use convtt::config::ModelConfig;
use convtt::engine::{Array, ParamStore};
use convtt::loss::Utterance;
use convtt::model::Transducer;
use convtt::trainer::{
    batch_gradients, length_sorted_batches, novograd_step, train_toy, NovoGradConfig, OptimState,
    Schedule, StepOutcome, ToyDataset, ToyTask, TrainConfig,
};

fn store(values: &[(&str, Vec<f64>)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, v) in values {
        s.insert(*n, Array::from_vec(v.clone()));
    }
    s
}

fn grads(values: &[(&str, Vec<f64>)]) -> BTreeMap<String, Array> {
    values
        .iter()
        .map(|(n, v)| (n.to_string(), Array::from_vec(v.clone())))
        .collect()
}

#[test]
fn novograd_hand_trace() {
    let cfg = NovoGradConfig {
        beta1: 0.9,
        beta2: 0.5,
        weight_decay: 0.1,
        eps: 0.0,
    };
    let mut p = store(&[("w", vec![1.0, -2.0])]);
    let mut st = OptimState::new();
    // Step 1: v = |g|² = 25, m = g/5 + 0.1·p.
    novograd_step(&mut p, &grads(&[("w", vec![3.0, 4.0])]), &mut st, &cfg, 0.5).unwrap();
    let m1 = [3.0 / 5.0 + 0.1, 4.0 / 5.0 - 0.2];
    let p1 = [1.0 - 0.5 * m1[0], -2.0 - 0.5 * m1[1]];
    assert_eq!(st.second_moment("w"), Some(25.0));
    assert!((p.get("w").unwrap().data()[0] - p1[0]).abs() < 1e-15);
    assert!((p.get("w").unwrap().data()[1] - p1[1]).abs() < 1e-15);
    // Step 2: v = 0.5·25 + 0.5·4 = 14.5.
    novograd_step(&mut p, &grads(&[("w", vec![0.0, 2.0])]), &mut st, &cfg, 0.5).unwrap();
    let v2: f64 = 14.5;
    let m2 = [
        0.9 * m1[0] + 0.1 * p1[0],
        0.9 * m1[1] + 2.0 / v2.sqrt() + 0.1 * p1[1],
    ];
    let p2 = [p1[0] - 0.5 * m2[0], p1[1] - 0.5 * m2[1]];
    assert_eq!(st.second_moment("w"), Some(v2));
    assert!((p.get("w").unwrap().data()[0] - p2[0]).abs() < 1e-15);
    assert!((p.get("w").unwrap().data()[1] - p2[1]).abs() < 1e-15);
    assert_eq!(st.step(), 2);
}

#[test]
fn novograd_is_invariant_to_gradient_scale() {
    let cfg = NovoGradConfig {
        weight_decay: 0.0,
        ..NovoGradConfig::default()
    };
    let run = |scale: f64| {
        let mut p = store(&[("a", vec![0.3, 0.1, -0.4])]);
        let mut st = OptimState::new();
        for k in 0..4 {
            let g = vec![scale * (1.0 + k as f64), -scale, 0.5 * scale];
            novograd_step(&mut p, &grads(&[("a", g)]), &mut st, &cfg, 0.01).unwrap();
        }
        p.get("a").unwrap().data().to_vec()
    };
    let (a, b) = (run(1.0), run(1000.0));
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-9));
}

#[test]
fn identical_layers_get_identical_updates() {
    let cfg = NovoGradConfig::default();
    let mut p = store(&[("l0", vec![0.5, -0.5]), ("l1", vec![0.5, -0.5])]);
    let mut st = OptimState::new();
    for k in 0..3 {
        let g = vec![0.1 * k as f64 + 0.2, -0.3];
        novograd_step(
            &mut p,
            &grads(&[("l0", g.clone()), ("l1", g)]),
            &mut st,
            &cfg,
            0.1,
        )
        .unwrap();
    }
    assert_eq!(p.get("l0").unwrap().data(), p.get("l1").unwrap().data());
}

#[test]
fn non_finite_gradients_skip_the_whole_step() {
    let mut p = store(&[("a", vec![1.0]), ("b", vec![2.0])]);
    let before = p.clone();
    let mut st = OptimState::new();
    let out = novograd_step(
        &mut p,
        &grads(&[("a", vec![1.0]), ("b", vec![f64::INFINITY])]),
        &mut st,
        &NovoGradConfig::default(),
        0.1,
    )
    .unwrap();
    assert!(matches!(out, StepOutcome::Skipped { .. }));
    assert_eq!(p.get("a").unwrap().data(), before.get("a").unwrap().data());
    assert_eq!(st.second_moment("a"), None);
}

#[test]
fn schedule_anchors_are_exact() {
    let s = Schedule::default();
    assert_eq!(s.lr(0), 0.0);
    assert_eq!(s.lr(10_000), 0.01);
    assert_eq!(s.lr(210_000), 5e-6);
    assert!(s.lr(110_000) < 0.01 && s.lr(110_000) > 5e-6);
    // Quadratic decay: a quarter of the way from the floor at the midpoint.
    assert!((s.lr(110_000) - (5e-6 + 0.25 * (0.01 - 5e-6))).abs() < 1e-15);
}

#[test]
fn toy_synthesis_is_deterministic_and_sized() {
    let task = ToyTask::default();
    let a = ToyDataset::generate(&task, 6, 3).unwrap();
    let b = ToyDataset::generate(&task, 6, 3).unwrap();
    assert_eq!(a.texts, b.texts);
    for (x, y) in a.utterances.iter().zip(&b.utterances) {
        assert_eq!(x.frames, y.frames);
    }
    for (text, utt) in a.texts.iter().zip(&a.utterances) {
        assert!((task.min_chars..=task.max_chars).contains(&text.chars().count()));
        assert_eq!(utt.labels, a.vocab.encode(text).unwrap());
        assert_eq!(utt.frames.cols(), task.n_mels);
    }
}

#[test]
fn batches_are_sorted_by_length() {
    let utts: Vec<Utterance> = [5, 2, 9, 2, 7]
        .iter()
        .map(|&t| Utterance {
            frames: Array::zeros([t, 1]),
            labels: vec![],
        })
        .collect();
    assert_eq!(
        length_sorted_batches(&utts, 2),
        vec![vec![1, 3], vec![0, 4], vec![2]]
    );
    assert_eq!(length_sorted_batches(&utts, 0), vec![vec![1, 3, 0, 4, 2]]);
}

#[test]
fn batch_gradients_do_not_depend_on_thread_count() {
    let m = Transducer::init(ModelConfig::preset("tiny").unwrap(), 2).unwrap();
    let batch: Vec<Utterance> = (0..6)
        .map(|i| Utterance {
            frames: randn(&[10 + i, 4], i as u64),
            labels: vec![1 + i % 3],
        })
        .collect();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| batch_gradients(&m, &batch, Some((4, 1))).unwrap())
    };
    let (a, b) = (run(1), run(4));
    assert_eq!(a.losses, b.losses);
    for (name, g) in &a.grads {
        assert_eq!(g.data(), b.grads[name].data(), "{name}");
    }
}

fn short_config() -> TrainConfig {
    let mut cfg = TrainConfig::toy();
    cfg.steps = 6;
    cfg.num_utterances = 4;
    cfg
}

#[test]
fn zero_steps_returns_the_initial_model() {
    let mut cfg = short_config();
    cfg.steps = 0;
    let out = train_toy(&cfg, |_| {}).unwrap();
    let init = Transducer::init(cfg.model.clone(), cfg.seed).unwrap();
    for (name, v) in init.params.iter() {
        assert_eq!(out.model.params.get(name).unwrap().data(), v.data());
    }
    assert!(out.curve.is_empty());
}

#[test]
fn training_is_reproducible() {
    let mut cfg = short_config();
    cfg.model = cfg.model.with_dropout(0.1);
    cfg.augment = Some(convtt::frontend::AugmentPolicy {
        noise_std: 0.05,
        n_freq_masks: 1,
        max_freq_width: 2,
        n_time_masks: 1,
        max_time_width: 3,
        seed: 7,
    });
    let a = train_toy(&cfg, |_| {}).unwrap();
    let b = train_toy(&cfg, |_| {}).unwrap();
    assert_eq!(a.curve, b.curve);
    for (name, v) in a.model.params.iter() {
        assert_eq!(b.model.params.get(name).unwrap().data(), v.data());
    }
    assert!(a.curve.last().unwrap().loss < a.curve[0].loss);
}

#[test]
fn config_file_roundtrip_and_validation() {
    let cfg = TrainConfig::toy();
    assert_eq!(
        TrainConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(),
        cfg
    );
    let mut bad = cfg.clone();
    bad.model.vocab_size = 9;
    assert!(bad.validate().is_err());
    let mut bad = cfg;
    bad.schema_version = 0;
    assert!(TrainConfig::from_toml(&bad.to_toml().unwrap()).is_err());
}
