//! Transducer loss: log-domain forward-backward over the T′×(U+1) alignment
//! lattice, occupancy gradients, and a brute-force path enumeration used as
//! an independent oracle.
//!
//! Node `(t, u)` means "at encoder frame `t` with `u` labels emitted". From
//! it, a blank moves to `(t+1, u)` and label `y[u]` moves to `(t, u+1)`.
//! Every path ends with the blank emitted at `(T′−1, U)`.

use rand::Rng;

use crate::encoder::attention::reborrow_rng;
use crate::engine::kernels::log_add_exp;
use crate::engine::{Array, Graph, Var};
use crate::error::{Error, Result};
use crate::model::Transducer;

pub const BLANK: usize = 0;

/// Upper bound on enumerated paths for [`brute_force_nll`].
pub const MAX_ENUMERATED_PATHS: u128 = 1_000_000;

#[derive(Clone, Debug)]
pub struct LossLattice {
    frames: usize,
    labels: Vec<usize>,
    vocab: usize,
    /// [frames, U+1, vocab] row-major.
    logprobs: Vec<f64>,
}

impl LossLattice {
    /// `vocab` counts blank. Every node's distribution must log-sum to zero.
    pub fn new(
        frames: usize,
        labels: Vec<usize>,
        vocab: usize,
        logprobs: Vec<f64>,
    ) -> Result<Self> {
        if frames == 0 {
            return Err(Error::Input("lattice needs at least one frame".into()));
        }
        if vocab < 2 {
            return Err(Error::Input(
                "vocabulary must contain blank and one label".into(),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y == BLANK || y >= vocab) {
            return Err(Error::Input(format!(
                "label {bad} is blank or out of range"
            )));
        }
        let nodes = frames * (labels.len() + 1);
        if logprobs.len() != nodes * vocab {
            return Err(Error::shape(
                "lattice",
                format!("{} log-probs for {nodes} nodes × {vocab}", logprobs.len()),
            ));
        }
        if logprobs.iter().any(|x| x.is_nan()) {
            return Err(Error::NonFinite("lattice log-probs".into()));
        }
        for (n, row) in logprobs.chunks(vocab).enumerate() {
            let lse = row
                .iter()
                .fold(f64::NEG_INFINITY, |a, &b| log_add_exp(a, b));
            if lse.abs() > 1e-9 {
                return Err(Error::Input(format!(
                    "node {n} is not normalized (log-sum {lse:.3e})"
                )));
            }
        }
        Ok(Self {
            frames,
            labels,
            vocab,
            logprobs,
        })
    }

    /// Normalizes arbitrary scores per node.
    pub fn from_logits(
        frames: usize,
        labels: Vec<usize>,
        vocab: usize,
        logits: &[f64],
    ) -> Result<Self> {
        if vocab == 0 || logits.len() % vocab != 0 {
            return Err(Error::shape("lattice", "logits not divisible by vocab"));
        }
        let lp = crate::engine::kernels::log_softmax_rows(logits, vocab);
        Self::new(frames, labels, vocab, lp)
    }

    /// Every entry equal to `−log(vocab)`.
    pub fn uniform(frames: usize, labels: Vec<usize>, vocab: usize) -> Result<Self> {
        let n = frames * (labels.len() + 1) * vocab;
        Self::new(frames, labels, vocab, vec![-(vocab as f64).ln(); n])
    }

    /// Random logits in `[-scale, scale]` and random labels.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        frames: usize,
        num_labels: usize,
        vocab: usize,
        scale: f64,
    ) -> Result<Self> {
        let labels = (0..num_labels).map(|_| rng.gen_range(1..vocab)).collect();
        let logits: Vec<f64> = (0..frames * (num_labels + 1) * vocab)
            .map(|_| rng.gen_range(-scale..=scale))
            .collect();
        Self::from_logits(frames, labels, vocab, &logits)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn logprobs(&self) -> &[f64] {
        &self.logprobs
    }

    #[inline]
    fn index(&self, t: usize, u: usize, k: usize) -> usize {
        (t * (self.labels.len() + 1) + u) * self.vocab + k
    }

    pub fn logprob(&self, t: usize, u: usize, k: usize) -> f64 {
        self.logprobs[self.index(t, u, k)]
    }

    pub fn blank_lp(&self, t: usize, u: usize) -> f64 {
        self.logprob(t, u, BLANK)
    }

    /// Log-probability of emitting the next reference label `y[u]` at `(t, u)`.
    pub fn label_lp(&self, t: usize, u: usize) -> f64 {
        self.logprob(t, u, self.labels[u])
    }

    pub fn set_logprob(&mut self, t: usize, u: usize, k: usize, value: f64) {
        let i = self.index(t, u, k);
        self.logprobs[i] = value;
    }
}

#[derive(Clone, Debug)]
pub struct LossResult {
    /// −log P(y | x)
    pub nll: f64,
    /// d nll / d logprobs, shape [T′, U+1, V+1].
    pub grad_logprobs: Array,
    /// Forward log table, shape [T′, U+1].
    pub alpha: Array,
    /// Backward log table, shape [T′, U+1]; `beta[0,0] = log P(y | x)`.
    pub beta: Array,
}

impl LossResult {
    /// Forward total `alpha[T′−1,U] + blank(T′−1,U)` minus backward total `beta[0,0]`.
    pub fn total_mismatch(&self, lattice: &LossLattice) -> f64 {
        let (t, u) = (lattice.frames - 1, lattice.num_labels());
        let fwd = self.alpha.data()[t * (u + 1) + u] + lattice.blank_lp(t, u);
        (fwd - self.beta.data()[0]).abs()
    }
}

/// Deliberate corruptions used to prove the verification sweeps can fail.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// Subtracts instead of adds the label term in the backward recursion.
    BetaSign,
}

pub fn forward_backward(lattice: &LossLattice) -> Result<LossResult> {
    forward_backward_with(lattice, Fault::None)
}

#[doc(hidden)]
pub fn forward_backward_with(lattice: &LossLattice, fault: Fault) -> Result<LossResult> {
    let tn = lattice.frames;
    let un = lattice.num_labels();
    let cols = un + 1;
    let at = |t: usize, u: usize| t * cols + u;

    let mut alpha = vec![f64::NEG_INFINITY; tn * cols];
    alpha[0] = 0.0;
    for t in 0..tn {
        for u in 0..cols {
            if t == 0 && u == 0 {
                continue;
            }
            let from_blank = if t > 0 {
                alpha[at(t - 1, u)] + lattice.blank_lp(t - 1, u)
            } else {
                f64::NEG_INFINITY
            };
            let from_label = if u > 0 {
                alpha[at(t, u - 1)] + lattice.label_lp(t, u - 1)
            } else {
                f64::NEG_INFINITY
            };
            alpha[at(t, u)] = log_add_exp(from_blank, from_label);
        }
    }

    let label_sign = if fault == Fault::BetaSign { -1.0 } else { 1.0 };
    let mut beta = vec![f64::NEG_INFINITY; tn * cols];
    beta[at(tn - 1, un)] = lattice.blank_lp(tn - 1, un);
    for t in (0..tn).rev() {
        for u in (0..cols).rev() {
            if t == tn - 1 && u == un {
                continue;
            }
            let via_blank = if t + 1 < tn {
                beta[at(t + 1, u)] + lattice.blank_lp(t, u)
            } else {
                f64::NEG_INFINITY
            };
            let via_label = if u < un {
                beta[at(t, u + 1)] + label_sign * lattice.label_lp(t, u)
            } else {
                f64::NEG_INFINITY
            };
            beta[at(t, u)] = log_add_exp(via_blank, via_label);
        }
    }

    let log_p = alpha[at(tn - 1, un)] + lattice.blank_lp(tn - 1, un);
    if !log_p.is_finite() {
        return Err(Error::NonFinite("transducer log-likelihood".into()));
    }

    // Edge occupancy: d log P / d lp(edge) = exp(alpha(src) + lp + beta(dst) − log P),
    // with the terminal blank leading to a zero-cost boundary.
    let mut grad = vec![0.0; lattice.logprobs.len()];
    for t in 0..tn {
        for u in 0..cols {
            let a = alpha[at(t, u)];
            if a == f64::NEG_INFINITY {
                continue;
            }
            let next_blank = if t + 1 < tn {
                beta[at(t + 1, u)]
            } else if u == un {
                0.0
            } else {
                f64::NEG_INFINITY
            };
            let lp = lattice.blank_lp(t, u);
            grad[lattice.index(t, u, BLANK)] = -(a + lp + next_blank - log_p).exp();
            if u < un {
                let lp = lattice.label_lp(t, u);
                let occ = (a + lp + beta[at(t, u + 1)] - log_p).exp();
                grad[lattice.index(t, u, lattice.labels[u])] = -occ;
            }
        }
    }

    Ok(LossResult {
        nll: -log_p,
        grad_logprobs: Array::new([tn, cols, lattice.vocab], grad)?,
        alpha: Array::new([tn, cols], alpha)?,
        beta: Array::new([tn, cols], beta)?,
    })
}

pub fn binomial(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BruteForce {
    pub nll: f64,
    pub paths: usize,
}

/// Enumerates every alignment path explicitly and log-sums their
/// probabilities.
pub fn brute_force(lattice: &LossLattice) -> Result<BruteForce> {
    let (tn, un) = (lattice.frames as u64, lattice.num_labels() as u64);
    if binomial(tn + un, un) > MAX_ENUMERATED_PATHS {
        return Err(Error::Input(format!(
            "C({}, {un}) paths exceed the enumeration bound",
            tn + un
        )));
    }
    // Each path is a choice of which of the first T′+U−1 steps are labels;
    // the final step is always the terminal blank.
    let steps = lattice.frames + lattice.num_labels() - 1;
    let mut total = f64::NEG_INFINITY;
    let mut paths = 0;
    let mut stack = vec![(0usize, 0usize, 0usize, 0.0f64)];
    while let Some((step, t, u, lp)) = stack.pop() {
        if step == steps {
            debug_assert_eq!((t, u), (lattice.frames - 1, lattice.num_labels()));
            total = log_add_exp(total, lp + lattice.blank_lp(t, u));
            paths += 1;
            continue;
        }
        if t + 1 < lattice.frames {
            stack.push((step + 1, t + 1, u, lp + lattice.blank_lp(t, u)));
        }
        if u < lattice.num_labels() {
            stack.push((step + 1, t, u + 1, lp + lattice.label_lp(t, u)));
        }
    }
    Ok(BruteForce { nll: -total, paths })
}

pub fn brute_force_nll(lattice: &LossLattice) -> Result<f64> {
    brute_force(lattice).map(|b| b.nll)
}

/// Records the transducer loss of one utterance on the graph.
///
/// `logprobs` has shape `[T′·(U+1), V+1]` (row `t·(U+1)+u`), typically the
/// output of `log_softmax`.
pub fn transducer_loss(
    g: &mut Graph,
    logprobs: Var,
    frames: usize,
    labels: &[usize],
) -> Result<Var> {
    let shape = g.shape(logprobs).to_vec();
    let [rows, vocab] = shape[..] else {
        return Err(Error::shape("transducer_loss", format!("{shape:?}")));
    };
    if rows != frames * (labels.len() + 1) {
        return Err(Error::shape(
            "transducer_loss",
            format!(
                "{rows} rows for {frames} frames × {} label states",
                labels.len() + 1
            ),
        ));
    }
    let lattice = LossLattice::new(
        frames,
        labels.to_vec(),
        vocab,
        g.value(logprobs).data().to_vec(),
    )?;
    let result = forward_backward(&lattice)?;
    let grad = result.grad_logprobs.reshape([rows, vocab])?;
    g.custom(
        &[logprobs],
        Array::scalar(result.nll),
        Box::new(move |gout, _| vec![Some(grad.map(|x| x * gout.item()))]),
    )
}

/// One training example as seen by [`batch_loss`].
#[derive(Clone, Debug)]
pub struct Utterance {
    pub frames: Array,
    pub labels: Vec<usize>,
}

/// Mean transducer loss over a batch, recorded on `g`. Returns the scalar
/// loss node and the per-utterance nll values.
pub fn batch_loss(
    g: &mut Graph,
    model: &Transducer,
    batch: &[Utterance],
    train: Option<&mut dyn rand::RngCore>,
) -> Result<(Var, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut rng = train;
    let mut losses = Vec::with_capacity(batch.len());
    let mut values = Vec::with_capacity(batch.len());
    for utt in batch {
        let nll = model.utterance_loss(g, &utt.frames, &utt.labels, reborrow_rng(&mut rng))?;
        values.push(g.value(nll).item());
        losses.push(g.reshape(nll, &[1])?);
    }
    let all = g.concat_rows(&losses)?;
    let mean = g.mean(all)?;
    Ok((mean, values))
}
