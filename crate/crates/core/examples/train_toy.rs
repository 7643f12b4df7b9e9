//! Overfits the toy tone task and checks greedy recovery of every
//! training transcript.
//!
//! `cargo run --release --example train_toy -- [steps]`

use convtt::decoder::{decode_offline, DecodeConfig};
use convtt::trainer::{train_toy, TrainConfig};

fn main() -> convtt::Result<()> {
    let mut cfg = TrainConfig::toy();
    if let Some(steps) = std::env::args().nth(1) {
        cfg.steps = steps.parse().expect("steps must be an integer");
    }
    let t0 = std::time::Instant::now();
    let out = train_toy(&cfg, |log| {
        if log.step % 20 == 0 {
            println!(
                "step {:>4}  lr {:.5}  nll {:.4}",
                log.step, log.lr, log.loss
            );
        }
    })?;
    println!(
        "trained in {:.1?}, {} parameters",
        t0.elapsed(),
        out.model.num_params()
    );
    println!("final mean nll {:.4}", out.final_loss()?);
    let mut exact = 0;
    for (text, utt) in out.dataset.texts.iter().zip(&out.dataset.utterances) {
        let hyp = decode_offline(&out.model, &utt.frames, &DecodeConfig::greedy())?;
        let got = out.dataset.vocab.decode(&hyp.labels);
        if &got == text {
            exact += 1;
        } else {
            println!("  {text} -> {got}");
        }
    }
    println!("exact greedy recovery: {exact}/{}", out.dataset.len());
    Ok(())
}
