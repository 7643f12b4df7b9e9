//! Per-layer frame rates, attention windows and accumulated look-ahead
//! for the encoder presets.
//!
//! `cargo run --example latency_report`

use convtt::encoder::EncoderConfig;
use convtt::report::latency_report;

fn main() -> convtt::Result<()> {
    for name in ["default", "causal", "hfr"] {
        let cfg = EncoderConfig::preset(name)?;
        println!("{}\n", latency_report(name, &cfg, 128)?.table());
    }
    let limited = EncoderConfig::preset("default")?.with_window(Some(16));
    println!(
        "{}",
        latency_report("default, 16-frame window", &limited, 128)?.table()
    );
    Ok(())
}
