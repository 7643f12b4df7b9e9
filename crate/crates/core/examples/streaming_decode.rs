//! Trains the toy model, then feeds one utterance to a streaming decoder
//! in fixed-size chunks and prints each partial transcript next to the
//! offline result.
//!
//! `cargo run --release --example streaming_decode -- [chunk_frames] [steps]`

use convtt::decoder::{decode_offline, DecodeConfig, DecodeSession};
use convtt::trainer::{train_toy, TrainConfig};

fn main() -> convtt::Result<()> {
    let mut args = std::env::args().skip(1);
    let chunk: usize = args
        .next()
        .map_or(8, |s| s.parse().expect("chunk must be an integer"));
    let mut cfg = TrainConfig::toy();
    if let Some(steps) = args.next() {
        cfg.steps = steps.parse().expect("steps must be an integer");
    }
    let out = train_toy(&cfg, |_| {})?;
    let (m, data) = (&out.model, &out.dataset);
    let utt = &data.utterances[0];
    let hop = m.config.encoder.input_hop_ms as usize;

    println!("reference: {}", data.texts[0]);
    let mut session = DecodeSession::new(m, DecodeConfig::greedy())?;
    let t = utt.frames.rows();
    let mut start = 0;
    while start < t {
        let end = (start + chunk).min(t);
        let p = session.push(&utt.frames.slice_rows(start, end), end == t)?;
        println!(
            "{:>6} ms  {:>3} encoder frames  {}",
            end * hop,
            p.encoder_frames,
            data.vocab.decode(&p.labels)
        );
        start = end;
    }
    let offline = decode_offline(m, &utt.frames, &DecodeConfig::greedy())?;
    println!("offline:   {}", data.vocab.decode(&offline.labels));
    Ok(())
}
