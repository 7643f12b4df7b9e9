//! Verifies the transducer loss on random lattices against brute-force
//! path enumeration and finite differences, then shows the closed form on
//! a uniform lattice.
//!
//! `cargo run --release --example loss_check -- [trials]`

use convtt::loss::{binomial, forward_backward, LossLattice};
use convtt::report::{loss_check, LossCheckConfig};

fn main() -> convtt::Result<()> {
    let trials = std::env::args()
        .nth(1)
        .map_or(200, |s| s.parse().expect("trials must be an integer"));
    let report = loss_check(&LossCheckConfig {
        trials,
        ..Default::default()
    })?;
    println!("{}\n", report.table());

    // Every alignment ends with a blank on the last frame, so a uniform
    // lattice has C(T′+U−1, U) paths of T′+U symbols each.
    let (t, u, v) = (4usize, 3usize, 6usize);
    let lat = LossLattice::uniform(t, vec![1, 2, 3], v)?;
    let nll = forward_backward(&lat)?.nll;
    let paths = binomial((t + u - 1) as u64, u as u64) as f64;
    let closed = (t + u) as f64 * (v as f64).ln() - paths.ln();
    println!("uniform T′={t} U={u}: nll {nll:.12}, closed form {closed:.12}, {paths} paths");
    Ok(())
}
