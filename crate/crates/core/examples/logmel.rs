//! Log-mel features of a pure tone: the strongest filter should sit at
//! the tone frequency.
//!
//! `cargo run --example logmel -- [hz]`

use convtt::frontend::{Frontend, FrontendConfig};

fn main() -> convtt::Result<()> {
    let hz: f64 = std::env::args()
        .nth(1)
        .map_or(1000.0, |s| s.parse().expect("frequency must be a number"));
    let cfg = FrontendConfig::default().with_mels(40);
    let fe = Frontend::new(cfg.clone())?;
    let sr = f64::from(cfg.sample_rate);
    let samples: Vec<f64> = (0..cfg.sample_rate as usize / 2)
        .map(|n| 0.5 * (2.0 * std::f64::consts::PI * hz * n as f64 / sr).sin())
        .collect();
    let x = fe.logmel(&samples)?;
    println!(
        "{} samples -> {} frames × {} mels",
        samples.len(),
        x.rows(),
        cfg.n_mels
    );
    let mid = x.row(x.rows() / 2);
    let peak = (0..mid.len())
        .max_by(|&a, &b| mid[a].total_cmp(&mid[b]))
        .unwrap();
    println!(
        "peak filter {peak} centred at {:.0} Hz for a {hz} Hz tone",
        fe.mel_bank().center_hz(peak)
    );
    for (m, v) in mid.iter().enumerate().step_by(4) {
        println!(
            "  mel {m:>2} {:>7.0} Hz  {v:>8.2}",
            fe.mel_bank().center_hz(m)
        );
    }
    Ok(())
}
