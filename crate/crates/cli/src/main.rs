//! Command-line interface: dataset generation, training, evaluation,
//! streaming inference, latency analysis, and throughput benchmarks.
//!
//! Every error path exits nonzero with a single diagnostic line of the form
//! `fsmn: error[<kind>]: <message>` on standard error. Topology parse
//! failures exit with the usage code 2; runtime failures exit 1.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use fsmn_core::checkpoint::{load_model, save_model, AnyModel};
use fsmn_core::data::{generate, load_dataset, parse_dataset, FrameDataset, TaskKind, TaskSpec};
use fsmn_core::error::Error;
use fsmn_core::grad::{argmax_row, cross_entropy, train, EpochStats, TrainConfig};
use fsmn_core::layers::{forward, Model};
use fsmn_core::lfr::prepare_dataset;
use fsmn_core::stream::StreamState;
use fsmn_core::tensor::{rand_init, InitScheme, Matrix, Precision, Scalar, SeedRng};
use fsmn_core::topology::{format_topology, latency_frames, mac_counts, parse_topology, param_count, size_mb};

#[derive(Parser)]
#[command(name = "fsmn", version, about = "FSMN-family sequence models: train, evaluate, stream")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic long-range-dependency dataset.
    Generate(GenerateArgs),
    /// Train a model with frame-level cross entropy and SGD momentum.
    Train(TrainArgs),
    /// Report cross-entropy loss and frame accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Run frame-by-frame streaming inference over a dataset.
    Stream(StreamArgs),
    /// Analyze the emission delay of a topology.
    Latency(LatencyArgs),
    /// Measure forward throughput and multiply-accumulate counts.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskName {
    DelayedEcho,
    FutureCue,
    SparseParity,
}

#[derive(clap::Args)]
struct GenerateArgs {
    /// Task family.
    #[arg(long, value_enum)]
    task: TaskName,
    /// Task horizon: echo delay, cue lead, or parity window, in frames.
    #[arg(long)]
    offset: usize,
    #[arg(long, default_value_t = 8)]
    sequences: usize,
    #[arg(long, default_value_t = 200)]
    frames: usize,
    #[arg(long, default_value_t = 8)]
    feature_dim: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 0.05)]
    noise_std: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Architecture string, e.g. "dfsmn:3*72-4x[2048-512(20;20;2;2)]-3x2048-512-9004".
    #[arg(long)]
    topology: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-5)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 4096)]
    minibatch_frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Frame-rate reduction factor applied to features and targets.
    #[arg(long, default_value_t = 1)]
    lfr: usize,
    /// Metrics file; defaults to "<out>.metrics.jsonl".
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long, default_value_t = false)]
    halve_lr_on_plateau: bool,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1)]
    lfr: usize,
}

#[derive(clap::Args)]
struct StreamArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset path, or "-" for standard input (same binary format).
    #[arg(long, default_value = "-")]
    data: String,
    /// Also print the full posterior row per frame.
    #[arg(long, default_value_t = false)]
    posteriors: bool,
}

#[derive(clap::Args)]
struct LatencyArgs {
    #[arg(long)]
    topology: String,
    #[arg(long, default_value_t = 10.0)]
    frame_period_ms: f64,
}

#[derive(clap::Args)]
struct BenchArgs {
    #[arg(long)]
    topology: String,
    /// Sequence length per forward pass.
    #[arg(long, default_value_t = 256)]
    frames: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Stream(args) => cmd_stream(args),
        Command::Latency(args) => cmd_latency(args),
        Command::Bench(args) => cmd_bench(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("fsmn: error[{}]: {}", err.kind(), err);
            match err {
                // Unusable arguments (malformed topology) exit like clap usage errors.
                Error::Parse { .. } => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

/// Numeric precision for newly built models, from FSMN_PRECISION (f32|f64).
fn env_precision() -> Result<Precision, Error> {
    match std::env::var("FSMN_PRECISION") {
        Err(_) => Ok(Precision::F32),
        Ok(v) => match v.as_str() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!(
                "FSMN_PRECISION must be f32 or f64, got {other:?}"
            ))),
        },
    }
}

fn cmd_generate(args: GenerateArgs) -> Result<(), Error> {
    let kind = match args.task {
        TaskName::DelayedEcho => TaskKind::DelayedEcho { delay: args.offset },
        TaskName::FutureCue => TaskKind::FutureCue { lead: args.offset },
        TaskName::SparseParity => TaskKind::SparseParity { window: args.offset },
    };
    let task = TaskSpec {
        kind,
        num_sequences: args.sequences,
        frames_per_sequence: args.frames,
        feature_dim: args.feature_dim,
        num_classes: args.classes,
        noise_std: args.noise_std,
        seed: args.seed,
    };
    let dataset: FrameDataset<f32> = generate(&task)?;
    fsmn_core::data::save_dataset(&dataset, &args.out)?;
    println!(
        "wrote {} sequences x {} frames ({} classes, dim {}) to {}",
        args.sequences,
        args.frames,
        args.classes,
        args.feature_dim,
        args.out.display()
    );
    Ok(())
}

fn epoch_record(stats: &EpochStats) -> String {
    serde_json::json!({
        "epoch": stats.epoch,
        "loss": stats.loss,
        "accuracy": stats.accuracy,
    })
    .to_string()
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let spec = parse_topology(&args.topology)?;
    match env_precision()? {
        Precision::F32 => run_train::<f32>(spec, &args),
        Precision::F64 => run_train::<f64>(spec, &args),
    }
}

fn run_train<S: Scalar>(spec: fsmn_core::TopologySpec, args: &TrainArgs) -> Result<(), Error> {
    let raw: FrameDataset<S> = load_dataset(&args.data)?;
    check_input_width(&raw, spec.input_dim)?;
    let prepared = prepare_dataset(&raw, spec.context_left, spec.context_right, args.lfr)?;
    let cfg = TrainConfig {
        learning_rate: args.lr,
        momentum: args.momentum,
        minibatch_frames: args.minibatch_frames,
        epochs: args.epochs,
        seed: args.seed,
        halve_lr_on_plateau: args.halve_lr_on_plateau,
    };
    let model: Model<S> = Model::init(spec, args.seed)?;
    let mut records = Vec::with_capacity(args.epochs);
    let (model, _) = train(model, &prepared, &cfg, |stats| {
        let line = epoch_record(stats);
        println!("{line}");
        records.push(line);
    })?;
    save_model(&model, &args.out)?;
    let metrics_path = args
        .metrics
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.metrics.jsonl", args.out.display())));
    let mut body = records.join("\n");
    body.push('\n');
    std::fs::write(&metrics_path, body)?;
    println!("checkpoint: {}", args.out.display());
    println!("metrics: {}", metrics_path.display());
    Ok(())
}

fn check_input_width<S: Scalar>(data: &FrameDataset<S>, want: usize) -> Result<(), Error> {
    if data.sequences.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let got = data.feature_dim();
    if got != want {
        return Err(Error::Data(format!(
            "dataset feature width {got} does not match model input width {want}"
        )));
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    match load_model(&args.ckpt)? {
        AnyModel::F32(model) => run_eval(&model, &args),
        AnyModel::F64(model) => run_eval(&model, &args),
    }
}

fn run_eval<S: Scalar>(model: &Model<S>, args: &EvalArgs) -> Result<(), Error> {
    let raw: FrameDataset<S> = load_dataset(&args.data)?;
    check_input_width(&raw, model.spec.input_dim)?;
    let prepared = prepare_dataset(&raw, model.spec.context_left, model.spec.context_right, args.lfr)?;
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut frames = 0usize;
    for seq in &prepared.sequences {
        let fwd = forward(model, &seq.features)?;
        let (loss, _) = cross_entropy(&fwd.posteriors, &seq.targets)?;
        let t_len = seq.features.rows();
        loss_sum += loss * t_len as f64;
        frames += t_len;
        for t in 0..t_len {
            if argmax_row(fwd.posteriors.row(t)) == argmax_row(seq.targets.row(t)) {
                correct += 1;
            }
        }
    }
    println!(
        "{}",
        serde_json::json!({
            "frames": frames,
            "loss": loss_sum / frames as f64,
            "accuracy": correct as f64 / frames as f64,
        })
    );
    Ok(())
}

fn cmd_stream(args: StreamArgs) -> Result<(), Error> {
    let bytes = if args.data == "-" {
        let mut buf = Vec::new();
        std::io::stdin().read_to_end(&mut buf)?;
        buf
    } else {
        std::fs::read(Path::new(&args.data))?
    };
    match load_model(&args.ckpt)? {
        AnyModel::F32(model) => run_stream(&model, &bytes, args.posteriors),
        AnyModel::F64(model) => run_stream(&model, &bytes, args.posteriors),
    }
}

/// Writes one line; reports `false` when the reader hung up (broken pipe),
/// which ends streaming quietly.
fn emit_line(out: &mut impl std::io::Write, line: std::fmt::Arguments) -> Result<bool, Error> {
    match out.write_fmt(format_args!("{line}\n")) {
        Ok(()) => Ok(true),
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(false),
        Err(e) => Err(e.into()),
    }
}

fn run_stream<S: Scalar>(model: &Model<S>, dataset_bytes: &[u8], with_posteriors: bool) -> Result<(), Error> {
    let data: FrameDataset<S> = parse_dataset(dataset_bytes)?;
    check_input_width(&data, model.spec.input_dim)?;
    let stdout = std::io::stdout();
    let mut out = std::io::BufWriter::new(stdout.lock());
    let lat = latency_frames(&model.spec);
    if !emit_line(
        &mut out,
        format_args!(
            "latency: {} block frames + {} stacking = {} frames",
            lat.block_frames,
            lat.input_context,
            lat.total()
        ),
    )? {
        return Ok(());
    }
    for (si, seq) in data.sequences.iter().enumerate() {
        let mut stream = StreamState::open(model);
        for t in 0..=seq.features.rows() {
            let emissions = if t < seq.features.rows() {
                stream.push(seq.features.row(t))?
            } else {
                stream.flush()?
            };
            for e in emissions {
                let argmax = argmax_row(&e.posteriors);
                let alive = if with_posteriors {
                    let row = e
                        .posteriors
                        .iter()
                        .map(|v| format!("{:.6}", v.to_f64()))
                        .collect::<Vec<_>>()
                        .join(",");
                    emit_line(&mut out, format_args!("{si}\t{}\t{argmax}\t{row}", e.frame))?
                } else {
                    emit_line(&mut out, format_args!("{si}\t{}\t{argmax}", e.frame))?
                };
                if !alive {
                    return Ok(());
                }
            }
        }
    }
    out.flush().or_else(|e| {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            Ok(())
        } else {
            Err(e)
        }
    })?;
    Ok(())
}

fn cmd_latency(args: LatencyArgs) -> Result<(), Error> {
    if !(args.frame_period_ms > 0.0) {
        return Err(Error::Config(format!(
            "frame period must be positive, got {}",
            args.frame_period_ms
        )));
    }
    let spec = parse_topology(&args.topology)?;
    let lat = latency_frames(&spec);
    let ms = |frames: usize| frames as f64 * args.frame_period_ms;
    println!(
        "memory blocks: {} frames / {} ms",
        lat.block_frames,
        ms(lat.block_frames)
    );
    println!(
        "input stacking: +{} frames / {} ms",
        lat.input_context,
        ms(lat.input_context)
    );
    println!("total: {} frames / {} ms", lat.total(), ms(lat.total()));
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<(), Error> {
    let spec = parse_topology(&args.topology)?;
    if args.frames == 0 || args.repeats == 0 {
        return Err(Error::Config("frames and repeats must be nonzero".into()));
    }
    match env_precision()? {
        Precision::F32 => run_bench::<f32>(spec, &args),
        Precision::F64 => run_bench::<f64>(spec, &args),
    }
}

fn run_bench<S: Scalar>(spec: fsmn_core::TopologySpec, args: &BenchArgs) -> Result<(), Error> {
    println!("topology: {}", format_topology(&spec));
    println!(
        "parameters: {} ({:.1} MB at 4 bytes)",
        param_count(&spec),
        size_mb(&spec)
    );
    let macs = mac_counts(&spec);
    let total: u64 = macs.iter().map(|(_, m)| m).sum();
    for (name, m) in &macs {
        println!("macs/frame {name}: {m}");
    }
    println!("macs/frame total: {total}");

    let model: Model<S> = Model::init(spec.clone(), args.seed)?;
    let mut rng = SeedRng::new(args.seed);
    let x: Matrix<S> = rand_init(
        &mut rng,
        args.frames,
        spec.stacked_input(),
        InitScheme::Gaussian { mean: 0.0, std: 1.0 },
    )?;
    forward(&model, &x)?; // warm-up
    let start = Instant::now();
    for _ in 0..args.repeats {
        forward(&model, &x)?;
    }
    let elapsed = start.elapsed().as_secs_f64();
    let fps = (args.frames * args.repeats) as f64 / elapsed;
    println!(
        "forward: {:.0} frames/second ({} frames x {} repeats)",
        fps, args.frames, args.repeats
    );
    Ok(())
}
