//! Latency tables and transducer-loss verification sweeps.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoder::network::conv_shapes;
use crate::encoder::{layer_fields, lookahead, EncoderConfig, LayerKind, Lookahead};
use crate::engine::rel_error;
use crate::error::{Error, Result};
use crate::loss::{brute_force_nll, forward_backward_with, Fault, LossLattice, LossResult, BLANK};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyRow {
    pub block: usize,
    pub layer: String,
    pub kind: LayerKind,
    pub input_rate_ms: u32,
    pub output_rate_ms: u32,
    /// `None` for unlimited attention history.
    pub left_frames: Option<usize>,
    pub left_ms: Option<u32>,
    pub right_frames: usize,
    pub right_ms: u32,
    pub cumulative_right_ms: u32,
    /// Scalars carried between streaming steps; `None` when unbounded.
    pub cached_values: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyReport {
    pub name: String,
    pub frame_rates_ms: Vec<u32>,
    pub left_attention_window: Option<usize>,
    pub rows: Vec<LatencyRow>,
    pub lookahead: Lookahead,
    /// Sum over layers; `None` if any layer is unbounded.
    pub cached_values_per_step: Option<usize>,
}

pub fn latency_report(name: &str, cfg: &EncoderConfig, feat_dim: usize) -> Result<LatencyReport> {
    cfg.validate()?;
    let shapes = conv_shapes(cfg, feat_dim);
    let hop = cfg.input_hop_ms;
    let rows: Vec<LatencyRow> = layer_fields(cfg)
        .into_iter()
        .map(|f| {
            let (layer, cached) = match f.kind {
                LayerKind::Transformer => {
                    let l = f.index - cfg.blocks[f.block].convs.len();
                    (format!("attn{l}"), f.cached_values)
                }
                _ => {
                    let (fr, ch) = shapes.inputs[f.block][f.index];
                    let k = cfg.blocks[f.block].convs[f.index].time_kernel();
                    (format!("conv{}", f.index), Some((k - 1) * fr * ch))
                }
            };
            LatencyRow {
                block: f.block,
                layer,
                kind: f.kind,
                input_rate_ms: f.input_rate_ms,
                output_rate_ms: f.output_rate_ms,
                left_frames: f.left_frames,
                left_ms: f.left_frames.map(|l| l as u32 * hop),
                right_frames: f.right_frames,
                right_ms: f.right_frames as u32 * hop,
                cumulative_right_ms: f.cumulative_right_frames as u32 * hop,
                cached_values: cached,
            }
        })
        .collect();
    let cached = rows.iter().map(|r| r.cached_values).sum::<Option<usize>>();
    Ok(LatencyReport {
        name: name.to_string(),
        frame_rates_ms: cfg.frame_rates_ms(),
        left_attention_window: cfg.left_attention_window,
        rows,
        lookahead: lookahead(cfg),
        cached_values_per_step: cached,
    })
}

impl LatencyReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<u32>| v.map_or("inf".to_string(), |x| x.to_string());
        let _ = writeln!(s, "encoder: {}", self.name);
        let _ = writeln!(
            s,
            "block frame rates: {} ms",
            self.frame_rates_ms
                .iter()
                .map(u32::to_string)
                .collect::<Vec<_>>()
                .join("/")
        );
        let _ = writeln!(
            s,
            "{:>5} {:<7} {:>7} {:>7} {:>8} {:>8} {:>9} {:>10}",
            "block", "layer", "in ms", "out ms", "left ms", "right ms", "cum ms", "cached"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>5} {:<7} {:>7} {:>7} {:>8} {:>8} {:>9} {:>10}",
                r.block,
                r.layer,
                r.input_rate_ms,
                r.output_rate_ms,
                opt(r.left_ms),
                r.right_ms,
                r.cumulative_right_ms,
                r.cached_values
                    .map_or("unbounded".to_string(), |c| c.to_string()),
            );
        }
        let _ = writeln!(
            s,
            "cached values per step: {}",
            self.cached_values_per_step
                .map_or("unbounded".to_string(), |c| c.to_string())
        );
        let _ = write!(s, "total look-ahead: {} ms", self.lookahead.ms);
        s
    }
}

#[derive(Clone, Debug)]
pub struct LossCheckConfig {
    pub trials: usize,
    pub seed: u64,
    pub max_frames: usize,
    pub max_labels: usize,
    /// Largest vocabulary including blank.
    pub max_vocab: usize,
    /// Lattices checked entry by entry against finite differences.
    pub gradient_trials: usize,
    pub fault: Fault,
}

impl Default for LossCheckConfig {
    fn default() -> Self {
        Self {
            trials: 200,
            seed: 0,
            max_frames: 5,
            max_labels: 4,
            max_vocab: 7,
            gradient_trials: 20,
            fault: Fault::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepResult {
    pub name: String,
    pub cases: usize,
    pub tolerance: f64,
    pub max_error: f64,
    pub failures: Vec<String>,
}

impl SweepResult {
    fn new(name: &str, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            cases: 0,
            tolerance,
            max_error: 0.0,
            failures: Vec::new(),
        }
    }

    fn record(&mut self, case: &str, err: f64) {
        self.cases += 1;
        if err.is_nan() || err > self.max_error {
            self.max_error = err;
        }
        if !(err <= self.tolerance) {
            self.failures.push(format!("{case}: error {err:.3e}"));
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossCheckReport {
    pub trials: usize,
    pub sweeps: Vec<SweepResult>,
}

impl LossCheckReport {
    pub fn passed(&self) -> bool {
        self.sweeps.iter().all(SweepResult::passed)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "random lattices: {}", self.trials);
        for sw in &self.sweeps {
            let _ = writeln!(
                s,
                "{:<12} {:>5} cases  max error {:>9.3e}  (tol {:.0e})  {}",
                sw.name,
                sw.cases,
                sw.max_error,
                sw.tolerance,
                if sw.passed() { "PASS" } else { "FAIL" }
            );
            for f in sw.failures.iter().take(5) {
                let _ = writeln!(s, "    {f}");
            }
            if sw.failures.len() > 5 {
                let _ = writeln!(s, "    … {} more", sw.failures.len() - 5);
            }
        }
        let _ = write!(
            s,
            "{}",
            if self.passed() {
                "all sweeps passed"
            } else {
                "FAILED"
            }
        );
        s
    }
}

/// Central-difference derivative of the nll w.r.t. one raw lattice entry.
fn numeric_grad(
    lattice: &LossLattice,
    t: usize,
    u: usize,
    k: usize,
    eps: f64,
    fault: Fault,
) -> Result<f64> {
    let base = lattice.logprob(t, u, k);
    let mut l = lattice.clone();
    l.set_logprob(t, u, k, base + eps);
    let plus = forward_backward_with(&l, fault)?.nll;
    l.set_logprob(t, u, k, base - eps);
    let minus = forward_backward_with(&l, fault)?.nll;
    Ok((plus - minus) / (2.0 * eps))
}

/// Posterior mass crossing each anti-diagonal `t + u = d`; every path
/// crosses each one exactly once.
pub fn diagonal_mass(lattice: &LossLattice, r: &LossResult) -> Vec<f64> {
    let (tn, un) = (lattice.frames(), lattice.num_labels());
    let g = r.grad_logprobs.data();
    let v = lattice.vocab();
    let mut mass = vec![0.0; tn + un];
    for t in 0..tn {
        for u in 0..=un {
            let node = (t * (un + 1) + u) * v;
            mass[t + u] -= g[node + BLANK];
            if u < un {
                mass[t + u] -= g[node + lattice.labels()[u]];
            }
        }
    }
    mass
}

pub fn loss_check(cfg: &LossCheckConfig) -> Result<LossCheckReport> {
    if cfg.max_frames == 0 || cfg.max_vocab < 2 {
        return Err(Error::Config(
            "need max_frames ≥ 1 and max_vocab ≥ 2".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut enumeration = SweepResult::new("enumeration", 1e-9);
    let mut totals = SweepResult::new("totals", 1e-8);
    let mut occupancy = SweepResult::new("occupancy", 1e-8);
    let mut gradient = SweepResult::new("gradient", 1e-5);
    for trial in 0..cfg.trials {
        let t = rng.gen_range(1..=cfg.max_frames);
        let u = rng.gen_range(0..=cfg.max_labels);
        let v = rng.gen_range(2..=cfg.max_vocab);
        let lattice = LossLattice::random(&mut rng, t, u, v, 3.0)?;
        let case = format!("trial {trial} (T′={t}, U={u}, V+1={v})");
        let r = forward_backward_with(&lattice, cfg.fault)?;
        enumeration.record(&case, (r.nll - brute_force_nll(&lattice)?).abs());
        totals.record(&case, r.total_mismatch(&lattice));
        let worst = diagonal_mass(&lattice, &r)
            .iter()
            .map(|m| (m - 1.0).abs())
            .fold(0.0, f64::max);
        occupancy.record(&case, worst);
        if trial < cfg.gradient_trials {
            let mut worst = 0.0f64;
            for ti in 0..t {
                for ui in 0..=u {
                    for k in 0..v {
                        let n = numeric_grad(&lattice, ti, ui, k, 1e-6, cfg.fault)?;
                        let a = r.grad_logprobs.data()[(ti * (u + 1) + ui) * v + k];
                        worst = worst.max(if (a - n).abs() < 1e-9 {
                            0.0
                        } else {
                            rel_error(a, n)
                        });
                    }
                }
            }
            gradient.record(&case, worst);
        }
    }
    Ok(LossCheckReport {
        trials: cfg.trials,
        sweeps: vec![enumeration, totals, occupancy, gradient],
    })
}
