//! Greedy and beam search on one input. Width 1 reproduces greedy
//! decoding; wider beams return an n-best list sorted by log-probability.
//!
//! `cargo run --release --example beam_search -- [width]`

use convtt::config::ModelConfig;
use convtt::decoder::{beam_decode, greedy_decode, DecodeConfig};
use convtt::engine::Array;
use convtt::model::Transducer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> convtt::Result<()> {
    let width: usize = std::env::args()
        .nth(1)
        .map_or(4, |s| s.parse().expect("width must be an integer"));
    let m = Transducer::init(ModelConfig::preset("toy")?, 5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data: Vec<f64> = (0..60 * 16)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let enc = m.encode(&Array::new([60, 16], data)?)?;

    let cap = DecodeConfig::beam(1).max_symbols_per_frame;
    let g = greedy_decode(&m, &enc, cap)?;
    println!("greedy      {:>9.4}  {:?}", g.score, g.labels);
    let one = &beam_decode(&m, &enc, &DecodeConfig::beam(1))?[0];
    println!("beam 1      {:>9.4}  {:?}", one.score, one.labels);
    for (i, h) in beam_decode(&m, &enc, &DecodeConfig::beam(width))?
        .iter()
        .enumerate()
    {
        println!("beam {width} #{i:<2}  {:>9.4}  {:?}", h.score, h.labels);
    }
    Ok(())
}
