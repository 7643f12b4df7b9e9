//! Command-line front end: toy training, offline and streaming decoding,
//! latency tables and loss verification.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or config error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use convtt::config::ModelConfig;
use convtt::decoder::{decode_offline, DecodeConfig, DecodeSession};
use convtt::engine::Array;
use convtt::frontend::{load_frames, read_wav, write_wav, Featurizer};
use convtt::loss::Fault;
use convtt::manifest::RunManifest;
use convtt::model::Transducer;
use convtt::predictor::Vocab;
use convtt::report::{latency_report, loss_check, LossCheckConfig};
use convtt::trainer::{train_toy, TrainConfig};
use convtt::Error;

const FEATURES_FILE: &str = "features.toml";
const VOCAB_FILE: &str = "vocab.txt";
const CURVE_FILE: &str = "loss_curve.json";
const MANIFEST_FILE: &str = "manifest.json";
const TRAIN_CONFIG_FILE: &str = "train.toml";

#[derive(Parser)]
#[command(
    name = "convtt",
    version,
    about = "Streaming Conv-Transformer Transducer"
)]
struct Cli {
    /// Write a reproducibility manifest to this path.
    #[arg(long, global = true, value_name = "PATH")]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the synthetic tone task and verify the model overfits it.
    TrainToy(TrainToyArgs),
    /// Decode a whole utterance.
    Decode(DecodeArgs),
    /// Decode chunk by chunk, printing partial transcripts.
    Stream(StreamArgs),
    /// Per-layer frame rates, receptive fields and look-ahead.
    LatencyReport(LatencyArgs),
    /// Check the transducer loss against path enumeration and finite differences.
    LossCheck(LossCheckArgs),
}

#[derive(Args)]
struct TrainToyArgs {
    /// Training config (TOML); defaults to the built-in toy settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the checkpoint and logs.
    #[arg(long, default_value = "toy-run")]
    out: PathBuf,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Skip the nll < 0.1 and exact-recovery checks.
    #[arg(long)]
    no_verify: bool,
    /// Number of training utterances to also write as WAV files.
    #[arg(long, default_value_t = 3)]
    samples: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct InputArgs {
    /// Checkpoint directory written by `train-toy`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// 16-bit mono WAV at the checkpoint's sample rate.
    #[arg(long, conflicts_with = "frames", required_unless_present = "frames")]
    wav: Option<PathBuf>,
    /// Normalized feature matrix saved with `save_frames`.
    #[arg(long)]
    frames: Option<PathBuf>,
    /// Beam width; 1 is greedy.
    #[arg(long, default_value_t = 1)]
    beam: usize,
    #[arg(long, default_value_t = 8)]
    max_symbols: usize,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Exit 1 unless the transcript equals this text.
    #[arg(long)]
    expect: Option<String>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct StreamArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Feature frames per chunk.
    #[arg(long, default_value_t = 8)]
    chunk: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct LatencyArgs {
    /// Encoder layout preset, applied to the desk model.
    #[arg(long, default_value = "default", conflicts_with = "config")]
    preset: String,
    /// Model config (TOML) instead of a preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Left attention window in frames of each block.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    BetaSign,
}

#[derive(Args)]
struct LossCheckArgs {
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Lattices also checked against finite differences.
    #[arg(long, default_value_t = 20)]
    gradient_trials: usize,
    #[arg(long, hide = true)]
    inject_fault: Option<FaultArg>,
    #[arg(long)]
    json: bool,
}

enum Failure {
    Verify(String),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Diverged { .. } | Error::NonFinite(_) => Failure::Verify(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn print_json(value: &impl Serialize) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    println!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let result = match &cli.command {
        Command::TrainToy(a) => train(a, &args),
        Command::Decode(a) => decode(a),
        Command::Stream(a) => stream(a),
        Command::LatencyReport(a) => latency(a),
        Command::LossCheck(a) => check_loss(a),
    };
    let written = cli
        .manifest
        .as_ref()
        .map(|path| manifest_for(&cli.command, args).save(path))
        .transpose();
    match (result, written) {
        (Ok(()), Ok(_)) => ExitCode::SUCCESS,
        (Err(Failure::Verify(msg)), _) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(1)
        }
        (Err(Failure::Usage(msg)), _) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        (Ok(()), Err(e)) => {
            eprintln!("error: writing manifest: {e}");
            ExitCode::from(2)
        }
    }
}

fn manifest_for(command: &Command, args: Vec<String>) -> RunManifest {
    match command {
        Command::TrainToy(a) => {
            let m = RunManifest::new("train-toy", args).with_config(a.config.as_deref());
            match a.seed {
                Some(s) => m.with_seed(s),
                None => m,
            }
        }
        Command::Decode(a) => {
            RunManifest::new("decode", args).with_checkpoint(Some(&a.input.checkpoint))
        }
        Command::Stream(a) => {
            RunManifest::new("stream", args).with_checkpoint(Some(&a.input.checkpoint))
        }
        Command::LatencyReport(a) => {
            RunManifest::new("latency-report", args).with_config(a.config.as_deref())
        }
        Command::LossCheck(a) => RunManifest::new("loss-check", args).with_seed(a.seed),
    }
}

#[derive(Serialize)]
struct TrainSummary {
    steps: u64,
    seed: u64,
    num_params: usize,
    first_loss: Option<f64>,
    final_loss: f64,
    exact: usize,
    utterances: usize,
    mismatches: Vec<(String, String)>,
    checkpoint: String,
    verified: bool,
}

fn train(a: &TrainToyArgs, args: &[String]) -> Outcome {
    let mut cfg = match &a.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::toy(),
    };
    if let Some(steps) = a.steps {
        cfg.steps = steps;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let quiet = a.json;
    let every = (cfg.steps / 20).max(1);
    let out = train_toy(&cfg, |log| {
        if !quiet && (log.step % every == 0 || log.step + 1 == cfg.steps) {
            println!(
                "step {:>6}  lr {:.6}  nll {:.5}{}",
                log.step,
                log.lr,
                log.loss,
                if log.skipped { "  (skipped)" } else { "" }
            );
        }
    })?;

    let dir = &a.out;
    out.model.save(dir).map_err(Failure::from)?;
    out.dataset.featurizer.save(dir.join(FEATURES_FILE))?;
    std::fs::write(dir.join(VOCAB_FILE), out.dataset.vocab.to_text()).map_err(Error::from)?;
    std::fs::write(dir.join(TRAIN_CONFIG_FILE), cfg.to_toml()?).map_err(Error::from)?;
    std::fs::write(
        dir.join(CURVE_FILE),
        serde_json::to_string(&out.curve).map_err(Error::from)?,
    )
    .map_err(Error::from)?;
    let sample_dir = dir.join("samples");
    std::fs::create_dir_all(&sample_dir).map_err(Error::from)?;
    for (i, text) in out.dataset.texts.iter().take(a.samples).enumerate() {
        let audio = cfg.task.synthesize(text)?;
        write_wav(
            sample_dir.join(format!("{i:02}-{text}.wav")),
            &audio,
            cfg.task.frontend().sample_rate,
        )?;
    }
    RunManifest::new("train-toy", args.to_vec())
        .with_config(a.config.as_deref())
        .with_checkpoint(Some(dir))
        .with_seed(cfg.seed)
        .save(dir.join(MANIFEST_FILE))?;

    let final_loss = out.final_loss()?;
    let mut mismatches = Vec::new();
    for (text, utt) in out.dataset.texts.iter().zip(&out.dataset.utterances) {
        let hyp = decode_offline(&out.model, &utt.frames, &DecodeConfig::greedy())?;
        let got = out.dataset.vocab.decode(&hyp.labels);
        if &got != text {
            mismatches.push((text.clone(), got));
        }
    }
    let n = out.dataset.len();
    let verified = final_loss < 0.1 && mismatches.is_empty();
    let summary = TrainSummary {
        steps: cfg.steps,
        seed: cfg.seed,
        num_params: out.model.num_params(),
        first_loss: out.curve.first().map(|l| l.loss),
        final_loss,
        exact: n - mismatches.len(),
        utterances: n,
        mismatches,
        checkpoint: dir.display().to_string(),
        verified,
    };
    if a.json {
        print_json(&summary)?;
    } else {
        println!("parameters        {}", summary.num_params);
        println!("final mean nll    {:.6}", summary.final_loss);
        println!("exact recovery    {}/{}", summary.exact, n);
        for (want, got) in &summary.mismatches {
            println!("    {want:?} -> {got:?}");
        }
        println!("checkpoint        {}", summary.checkpoint);
    }
    if a.no_verify || verified {
        Ok(())
    } else {
        Err(Failure::Verify(format!(
            "final nll {final_loss:.4}, {} of {n} transcripts recovered",
            summary.exact
        )))
    }
}

struct Loaded {
    model: Transducer,
    vocab: Vocab,
    frames: Array,
}

fn load_input(input: &InputArgs) -> std::result::Result<Loaded, Failure> {
    let dir: &Path = &input.checkpoint;
    let model = Transducer::load(dir)?;
    let vocab = Vocab::load(dir.join(VOCAB_FILE))?;
    if vocab.len() != model.vocab_size() {
        return Err(Failure::Usage(format!(
            "vocab.txt has {} symbols, model expects {}",
            vocab.len(),
            model.vocab_size()
        )));
    }
    let frames = match (&input.wav, &input.frames) {
        (Some(wav), _) => {
            let feats = Featurizer::load(dir.join(FEATURES_FILE))?;
            let audio = read_wav(wav, feats.frontend.sample_rate)?;
            feats.features(&audio)?
        }
        (None, Some(path)) => load_frames(path)?,
        (None, None) => return Err(Failure::Usage("need --wav or --frames".into())),
    };
    if frames.cols() != model.config.feat_dim {
        return Err(Failure::Usage(format!(
            "input has {} features per frame, model expects {}",
            frames.cols(),
            model.config.feat_dim
        )));
    }
    Ok(Loaded {
        model,
        vocab,
        frames,
    })
}

fn decode_config(input: &InputArgs) -> DecodeConfig {
    DecodeConfig {
        beam_width: input.beam,
        max_symbols_per_frame: input.max_symbols,
    }
}

#[derive(Serialize)]
struct DecodeResult {
    text: String,
    labels: Vec<usize>,
    score: f64,
    input_frames: usize,
    beam_width: usize,
}

fn decode(a: &DecodeArgs) -> Outcome {
    let l = load_input(&a.input)?;
    let cfg = decode_config(&a.input);
    let hyp = decode_offline(&l.model, &l.frames, &cfg)?;
    let result = DecodeResult {
        text: l.vocab.decode(&hyp.labels),
        labels: hyp.labels,
        score: hyp.score,
        input_frames: l.frames.rows(),
        beam_width: cfg.beam_width,
    };
    if a.json {
        print_json(&result)?;
    } else {
        println!("{}", result.text);
        println!(
            "log-prob {:.4}  ({} frames)",
            result.score, result.input_frames
        );
    }
    match &a.expect {
        Some(want) if *want != result.text => Err(Failure::Verify(format!(
            "expected {want:?}, decoded {:?}",
            result.text
        ))),
        _ => Ok(()),
    }
}

#[derive(Serialize)]
struct StreamEvent {
    time_ms: u64,
    input_frames: usize,
    encoder_frames: usize,
    text: String,
    score: f64,
    replaced: bool,
    is_final: bool,
}

fn stream(a: &StreamArgs) -> Outcome {
    if a.chunk == 0 {
        return Err(Failure::Usage("--chunk must be positive".into()));
    }
    let l = load_input(&a.input)?;
    let hop_ms = u64::from(l.model.config.encoder.input_hop_ms);
    let mut session = DecodeSession::new(&l.model, decode_config(&a.input))?;
    let mut events = Vec::new();
    let total = l.frames.rows();
    let mut start = 0;
    while start <= total {
        let end = (start + a.chunk).min(total);
        let chunk = l.frames.slice_rows(start, end);
        let is_final = end == total;
        let p = session.push(&chunk, is_final)?;
        let ev = StreamEvent {
            time_ms: p.input_frames as u64 * hop_ms,
            input_frames: p.input_frames,
            encoder_frames: p.encoder_frames,
            text: l.vocab.decode(&p.labels),
            score: p.score,
            replaced: p.replaced,
            is_final,
        };
        if !a.json {
            println!(
                "{:>7} ms  {:>4} enc  {}{}{}",
                ev.time_ms,
                ev.encoder_frames,
                ev.text,
                if ev.replaced { "  [replaced]" } else { "" },
                if ev.is_final { "  [final]" } else { "" }
            );
        }
        events.push(ev);
        if is_final {
            break;
        }
        start = end;
    }
    if a.json {
        print_json(&events)?;
    }
    Ok(())
}

fn latency(a: &LatencyArgs) -> Outcome {
    let (name, mut cfg) = match &a.config {
        Some(path) => (path.display().to_string(), ModelConfig::load(path)?),
        None => (
            a.preset.clone(),
            ModelConfig::preset("desk")?.with_encoder_preset(&a.preset)?,
        ),
    };
    if a.window.is_some() {
        cfg.encoder = cfg.encoder.with_window(a.window);
    }
    let report = latency_report(&name, &cfg.encoder, cfg.feat_dim)?;
    if a.json {
        print_json(&report)
    } else {
        println!("{}", report.table());
        Ok(())
    }
}

fn check_loss(a: &LossCheckArgs) -> Outcome {
    let cfg = LossCheckConfig {
        trials: a.trials,
        seed: a.seed,
        gradient_trials: a.gradient_trials.min(a.trials),
        fault: match a.inject_fault {
            Some(FaultArg::BetaSign) => Fault::BetaSign,
            None => Fault::None,
        },
        ..LossCheckConfig::default()
    };
    let report = loss_check(&cfg)?;
    if a.json {
        print_json(&report)?;
    } else {
        println!("{}", report.table());
    }
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report
            .sweeps
            .iter()
            .filter(|s| !s.passed())
            .map(|s| s.name.as_str())
            .collect();
        Err(Failure::Verify(format!(
            "failed sweeps: {}",
            failed.join(", ")
        )))
    }
}
