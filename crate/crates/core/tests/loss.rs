mod common;

use common::{randn, rng, toy_model};
use convtt::engine::{Array, Graph};
use convtt::loss::{
    batch_loss, binomial, brute_force, forward_backward, transducer_loss, LossLattice, Utterance,
};
use proptest::prelude::*;
use rand::Rng;

fn ln_binomial(n: u64, k: u64) -> f64 {
    (binomial(n, k) as f64).ln()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_backward_equals_enumeration(
        t in 1usize..=5, u in 0usize..=4, v in 2usize..=7, seed in 0u64..10_000,
    ) {
        let lat = LossLattice::random(&mut rng(seed), t, u, v, 4.0).unwrap();
        let fb = forward_backward(&lat).unwrap();
        let bf = brute_force(&lat).unwrap();
        prop_assert!((fb.nll - bf.nll).abs() < 1e-9);
        prop_assert_eq!(bf.paths as u128, binomial((t + u - 1) as u64, u as u64));
        prop_assert!(fb.total_mismatch(&lat) < 1e-9);
    }

    #[test]
    fn gradients_are_edge_occupancies(
        t in 1usize..=4, u in 0usize..=3, v in 2usize..=5, seed in 0u64..10_000,
    ) {
        let lat = LossLattice::random(&mut rng(seed), t, u, v, 2.0).unwrap();
        let r = forward_backward(&lat).unwrap();
        let g = r.grad_logprobs.data();
        // Occupancies are probabilities, and every path takes exactly
        // T′ blank edges and U label edges.
        prop_assert!(g.iter().all(|&x| (-1.0 - 1e-12..=1e-12).contains(&x)));
        let total: f64 = -g.iter().sum::<f64>();
        prop_assert!((total - (t + u) as f64).abs() < 1e-9);
    }
}

#[test]
fn uniform_lattice_closed_form() {
    for t in 1..=5u64 {
        for u in 0..=4u64 {
            let v = 5usize;
            let labels: Vec<usize> = (0..u as usize).map(|i| 1 + i % 4).collect();
            let lat = LossLattice::uniform(t as usize, labels, v).unwrap();
            let nll = forward_backward(&lat).unwrap().nll;
            let want = (t + u) as f64 * (v as f64).ln() - ln_binomial(t + u - 1, u);
            assert!((nll - want).abs() < 1e-9, "T′={t} U={u}: {nll} vs {want}");
        }
    }
}

#[test]
fn small_path_counts() {
    let count = |t, u| {
        brute_force(&LossLattice::uniform(t, vec![1; u], 2).unwrap())
            .unwrap()
            .paths
    };
    assert_eq!(count(1, 0), 1);
    assert_eq!(count(1, 3), 1);
    assert_eq!(count(2, 1), 2);
    assert_eq!(count(3, 2), 6);
    assert_eq!(count(5, 4), 70);
}

#[test]
fn symbol_relabeling_leaves_loss_unchanged() {
    let mut r = rng(3);
    for _ in 0..20 {
        let (t, u, v) = (r.gen_range(1..5), r.gen_range(0..4), 5);
        let lat = LossLattice::random(&mut r, t, u, v, 3.0).unwrap();
        // Swap label ids 1 and 3 in both the transcript and the scores.
        let perm = [0, 3, 2, 1, 4];
        let labels = lat.labels().iter().map(|&l| perm[l]).collect();
        let mut lp = vec![0.0; lat.logprobs().len()];
        for (n, row) in lat.logprobs().chunks(v).enumerate() {
            for k in 0..v {
                lp[n * v + perm[k]] = row[k];
            }
        }
        let other = LossLattice::new(t, labels, v, lp).unwrap();
        let (a, b) = (
            forward_backward(&lat).unwrap().nll,
            forward_backward(&other).unwrap().nll,
        );
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn loss_falls_as_the_path_gets_likelier() {
    let mut logits: Vec<f64> = (0..3 * 3 * 4).map(|i| ((i * 7) % 5) as f64 * 0.3).collect();
    let mut last = f64::INFINITY;
    for _ in 0..5 {
        let nll = forward_backward(&LossLattice::from_logits(3, vec![2, 1], 4, &logits).unwrap())
            .unwrap()
            .nll;
        assert!(nll < last);
        last = nll;
        // Raise the terminal blank, which every path uses.
        logits[(2 * 3 + 2) * 4] += 0.5;
    }
}

#[test]
fn invalid_lattices_are_rejected() {
    assert!(LossLattice::uniform(0, vec![], 3).is_err());
    assert!(LossLattice::uniform(2, vec![0], 3).is_err());
    assert!(LossLattice::uniform(2, vec![3], 3).is_err());
    assert!(LossLattice::new(1, vec![], 2, vec![0.0, 0.0]).is_err());
}

#[test]
fn graph_loss_gradient_matches_finite_differences() {
    let (t, labels, v) = (3, vec![1, 3], 4);
    let logits = randn(&[t * 3, v], 7);
    let loss_at = |x: &Array| {
        let mut g = Graph::new();
        let xv = g.variable(x.clone());
        let lp = g.log_softmax(xv).unwrap();
        let l = transducer_loss(&mut g, lp, t, &labels).unwrap();
        let grads = g.backward(l).unwrap();
        (g.value(l).item(), grads.get(xv).cloned())
    };
    let (_, grad) = loss_at(&logits);
    let grad = grad.unwrap();
    for i in 0..logits.len() {
        let mut p = logits.clone();
        p.data_mut()[i] += 1e-6;
        let mut m = logits.clone();
        m.data_mut()[i] -= 1e-6;
        let fd = (loss_at(&p).0 - loss_at(&m).0) / 2e-6;
        assert!(
            (fd - grad.data()[i]).abs() < 1e-7,
            "entry {i}: {fd} vs {}",
            grad.data()[i]
        );
    }
}

#[test]
fn duplicated_batch_has_the_same_mean() {
    let m = toy_model(4);
    let utt = Utterance {
        frames: randn(&[20, 16], 8),
        labels: vec![1, 2],
    };
    let other = Utterance {
        frames: randn(&[12, 16], 9),
        labels: vec![3],
    };
    let mut g = Graph::new();
    let (single, _) = batch_loss(&mut g, &m, std::slice::from_ref(&utt), None).unwrap();
    let mut g2 = Graph::new();
    let (double, values) = batch_loss(&mut g2, &m, &[utt.clone(), utt.clone()], None).unwrap();
    assert_eq!(values[0], values[1]);
    assert!((g.value(single).item() - g2.value(double).item()).abs() < 1e-12);
    let mut g3 = Graph::new();
    let (mixed, values) = batch_loss(&mut g3, &m, &[utt, other], None).unwrap();
    assert!((g3.value(mixed).item() - (values[0] + values[1]) / 2.0).abs() < 1e-12);
}
