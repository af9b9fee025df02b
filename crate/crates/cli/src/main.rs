//! `facestream` command-line driver.
//!
//! ```text
//! facestream [--config run.toml] [--seed N] [-v] <command>
//!
//!   synth         --out DIR
//!   train         --stage 1|2 --data DIR --out DIR [--codec FILE]
//!   generate      --checkpoint FILE --audio FILE --style K --out FILE
//!   stream-bench  --checkpoint FILE --audio FILE --style K --chunk-frames N
//!                 --lengths 100,500,1000,2000 --report FILE
//!   eval          --pred FILE --gt FILE --report FILE
//!   eval          --checkpoint FILE --data DIR [--split test] --report FILE
//! ```
//!
//! CSV outputs:
//!
//! | file                | header                                                   |
//! |---------------------|----------------------------------------------------------|
//! | `stage1_loss.csv`   | `epoch,lr,total,rec,quant`                               |
//! | `stage2_loss.csv`   | `epoch,total,latent,vert,vel`                            |
//! | stream-bench report | `length,first_frame_latency_s,mean_frame_s,slope_check`  |
//! | eval report         | `sequence_id,LVE,FDD,MOD`                                |
//!
//! Exit codes: 0 success, 1 other failure, 2 usage or config error, 3 data
//! error, 4 numeric divergence.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{ArgAction, Parser, Subcommand, ValueEnum};
use facestream::audio::AudioFeatureSequence;
use facestream::checkpoint::Checkpoint;
use facestream::config::{Profile, RunConfig};
use facestream::evaluate::{evaluate_samples, mean_scores, SequenceScore};
use facestream::metrics::{evaluate, MetricRow};
use facestream::model::FaceModel;
use facestream::motion::MotionSequence;
use facestream::runtime::{generate_chunked, generate_offline};
use facestream::synth::{load_split, make_splits, write_dataset, Split, SynthTopology};
use facestream::tensor::Tensor;
use facestream::training::{stage1_csv, stage2_csv, train_stage1, train_stage2, write_csv};
use facestream::Error;

pub const CODEC_CHECKPOINT: &str = "codec.ckpt";
pub const MODEL_CHECKPOINT: &str = "model.ckpt";
pub const STAGE1_CSV: &str = "stage1_loss.csv";
pub const STAGE2_CSV: &str = "stage2_loss.csv";

#[derive(Debug, Parser)]
#[command(name = "facestream", version, about = "Streaming speech-to-face motion generation")]
struct Cli {
    /// Run config (TOML); keys not given come from its profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Repeat for more log output.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Writes the synthetic dataset and its manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs one training stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Stage-1 checkpoint; defaults to `<out>/codec.ckpt`.
        #[arg(long)]
        codec: Option<PathBuf>,
    },
    /// Generates a motion file from an audio feature file.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        style: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Streams audio of several lengths and reports latency.
    StreamBench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        #[arg(long, default_value_t = 0)]
        style: usize,
        /// Feature rows per push; defaults to one latent unit.
        #[arg(long)]
        chunk_frames: Option<usize>,
        #[arg(long, value_delimiter = ',', default_value = "100,500,1000,2000")]
        lengths: Vec<usize>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Scores motion against ground truth.
    Eval {
        #[arg(long, requires = "gt", conflicts_with_all = ["checkpoint", "data"])]
        pred: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, requires = "data")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        report: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Format(_)
        | Error::Io(_)
        | Error::Shape(_)
        | Error::AudioUnderrun { .. }
        | Error::Incompatible(_)
        | Error::UnknownParam(_)
        | Error::EmptyCodebook => 3,
        Error::Divergence { .. } | Error::NonFinite(_) => 4,
        Error::DegenerateAttention { .. } => 1,
    }
}

fn load_config(cli: &Cli) -> facestream::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("cannot read {}: {io}", p.display())),
            other => other,
        })?,
        None => RunConfig::for_profile(Profile::SyntheticSmall),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn with_path<T>(path: &Path, r: facestream::Result<T>) -> facestream::Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> facestream::Result<()> {
    let manifest = make_splits(&cfg.data, cfg.seed)?;
    with_path(out, write_dataset(out, &cfg.data, &manifest))?;
    log::info!("wrote {} sequences to {}", manifest.all().count(), out.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, stage: u8, data: &Path, out: &Path, codec: Option<&Path>) -> facestream::Result<()> {
    let train = with_path(data, load_split(data, Split::Train))?;
    std::fs::create_dir_all(out)?;
    let mut model = FaceModel::init(&cfg.model(), cfg.seed)?;
    if stage == 1 {
        let report = train_stage1(&mut model, &train, &cfg.train)?;
        model.codec_checkpoint().save(out.join(CODEC_CHECKPOINT))?;
        write_csv(out.join(STAGE1_CSV), &stage1_csv(&report))?;
        return Ok(());
    }
    let codec_path = codec.map(Path::to_path_buf).unwrap_or_else(|| out.join(CODEC_CHECKPOINT));
    if !codec_path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("stage 2 needs a stage-1 checkpoint; {} does not exist", codec_path.display()),
        )));
    }
    model.load_codec(&with_path(&codec_path, Checkpoint::load(&codec_path))?)?;
    let report = train_stage2(&mut model, &train, &cfg.train)?;
    model.save(out.join(MODEL_CHECKPOINT))?;
    write_csv(out.join(STAGE2_CSV), &stage2_csv(&report))
}

fn load_model(path: &Path) -> facestream::Result<Arc<FaceModel>> {
    Ok(Arc::new(with_path(path, FaceModel::load(path))?))
}

fn cmd_generate(cfg: &RunConfig, checkpoint: &Path, audio: &Path, style: usize, out: &Path) -> facestream::Result<()> {
    let model = load_model(checkpoint)?;
    let audio = with_path(audio, AudioFeatureSequence::load(audio))?;
    let (motion, report) = generate_offline(model, &audio, style, cfg.seed, &cfg.runtime)?;
    log::info!("{} frames, {} denoise calls, mean frame time {:.3e}s", motion.frames(), report.denoise_calls, report.mean_frame_time());
    motion.save(out)
}

/// Audio rows repeated cyclically until `frames` motion frames are covered.
fn tile_audio(audio: &AudioFeatureSequence, frames: usize, fps: f64) -> facestream::Result<AudioFeatureSequence> {
    if audio.frames() == 0 {
        return Err(Error::InvalidArgument("audio is empty".into()));
    }
    let rows = ((frames.max(1) - 1) as f64 * audio.rate / fps).ceil() as usize + 1;
    let data: Vec<f64> = (0..rows).flat_map(|i| audio.row(i % audio.frames()).to_vec()).collect();
    AudioFeatureSequence::new(Tensor::new(&[rows, audio.width()], data)?, audio.rate)
}

/// Least-squares slope of `y` against `x`.
fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_stream_bench(
    cfg: &RunConfig,
    checkpoint: &Path,
    audio: &Path,
    style: usize,
    chunk: Option<usize>,
    lengths: &[usize],
    report: &Path,
) -> facestream::Result<()> {
    if lengths.is_empty() || lengths.contains(&0) {
        return Err(Error::InvalidArgument("lengths must be positive".into()));
    }
    let model = load_model(checkpoint)?;
    let audio = with_path(audio, AudioFeatureSequence::load(audio))?;
    let chunk = chunk.unwrap_or(model.config.codec.components);
    let h_units = model.config.history_units();
    let mut rows = Vec::with_capacity(lengths.len());
    for &len in lengths {
        let tiled = tile_audio(&audio, len, model.config.fps)?;
        let (motion, lat) = generate_chunked(Arc::clone(&model), &tiled, chunk, style, cfg.seed, &cfg.runtime)?;
        if lat.peak_history > h_units {
            return Err(Error::Shape(format!("history grew to {} units (limit {h_units})", lat.peak_history)));
        }
        log::info!(
            "length {len}: {} frames, first frame {:.3e}s, mean {:.3e}s",
            motion.frames(),
            lat.first_frame_latency,
            lat.mean_frame_time()
        );
        rows.push((len, lat.first_frame_latency, lat.mean_frame_time()));
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.0 as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let b = slope(&xs, &ys);
    let verdict = if b.abs() < 0.01 * mean { "pass" } else { "fail" };
    log::info!("slope {b:.3e} s/frame per frame vs mean {mean:.3e}s: {verdict}");
    let mut csv = String::from("length,first_frame_latency_s,mean_frame_s,slope_check\n");
    for (len, first, mean_frame) in rows {
        writeln!(csv, "{len},{first:e},{mean_frame:e},{verdict}").expect("string write");
    }
    write_csv(report, &csv)
}

fn scores_csv(scores: &[SequenceScore], mean: Option<MetricRow>) -> String {
    let mut csv = String::from("sequence_id,LVE,FDD,MOD\n");
    let rows = scores.iter().map(|s| (s.id.as_str(), s.metrics)).chain(mean.map(|m| ("mean", m)));
    for (id, m) in rows {
        writeln!(csv, "{id},{:e},{:e},{:e}", m.lve, m.fdd, m.mod_).expect("string write");
    }
    csv
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    cfg: &RunConfig,
    pred: Option<&Path>,
    gt: Option<&Path>,
    checkpoint: Option<&Path>,
    data: Option<&Path>,
    split: Split,
    report: &Path,
) -> facestream::Result<()> {
    let region = SynthTopology::from_config(&cfg.data)?.region;
    let csv = match (pred, gt, checkpoint, data) {
        (Some(p), Some(g), _, _) => {
            let pm = with_path(p, MotionSequence::load(p))?;
            let gm = with_path(g, MotionSequence::load(g))?;
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            scores_csv(&[SequenceScore { id, metrics: evaluate(&pm, &gm, &region)? }], None)
        }
        (_, _, Some(c), Some(d)) => {
            let model = load_model(c)?;
            let samples = with_path(d, load_split(d, split))?;
            let scores = evaluate_samples(&model, &samples, &region, cfg.seed, &cfg.runtime)?;
            scores_csv(&scores, Some(mean_scores(&scores)))
        }
        _ => return Err(Error::InvalidArgument("eval needs --pred/--gt or --checkpoint/--data".into())),
    };
    write_csv(report, &csv)
}

fn run(cli: &Cli) -> facestream::Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Synth { out } => cmd_synth(&cfg, out),
        Command::Train { stage, data, out, codec } => cmd_train(&cfg, *stage, data, out, codec.as_deref()),
        Command::Generate { checkpoint, audio, style, out } => cmd_generate(&cfg, checkpoint, audio, *style, out),
        Command::StreamBench { checkpoint, audio, style, chunk_frames, lengths, report } => {
            cmd_stream_bench(&cfg, checkpoint, audio, *style, *chunk_frames, lengths, report)
        }
        Command::Eval { pred, gt, checkpoint, data, split, report } => {
            cmd_eval(&cfg, pred.as_deref(), gt.as_deref(), checkpoint.as_deref(), data.as_deref(), (*split).into(), report)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
