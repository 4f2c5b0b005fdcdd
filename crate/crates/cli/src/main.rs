//! `ea-interp`: train, evaluate and run edge-aware frame interpolation.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
//! runtime failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ea_interp::data::{load_dataset, synthetic_triplets, write_triplets, SyntheticConfig, TaskMode};
use ea_interp::flow::{flow_to_color, write_flo, FlowMap, TimePoint};
use ea_interp::imaging::{canny_edges, load_image, save_edge_map, save_image, soft_edges, CannyParams};
use ea_interp::models::Interpolation;
use ea_interp::trainer::{self, load_checkpoint, TrainConfig};
use ea_interp::Error;
use rand::SeedableRng;

const SEED_ENV: &str = "EA_INTERP_SEED";

#[derive(Parser, Debug)]
#[command(name = "ea-interp", version, about = "Edge-aware video frame interpolation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a `key = value` config file.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset and write a CSV report.
    Eval(EvalArgs),
    /// Synthesize intermediate frames between two images.
    Interp(InterpArgs),
    /// Extract an edge map from an image.
    Edges(EdgesArgs),
    /// Estimate and export the bidirectional flow between two images.
    Flow(FlowArgs),
    /// Write a synthetic moving-rectangle triplet dataset.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Config file with `key = value` lines.
    #[arg(long)]
    config: PathBuf,
    /// Extra `key=value` overrides; may repeat.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    train_root: Option<PathBuf>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Accept a checkpoint whose configuration hash differs.
    #[arg(long)]
    force: bool,
}

fn parse_mode(s: &str) -> Result<TaskMode, String> {
    s.replace('-', "_").parse().map_err(|e: Error| e.to_string())
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    dataset_root: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_parser = parse_mode, default_value = "single_frame")]
    mode: TaskMode,
    /// CSV report path.
    #[arg(long)]
    report: PathBuf,
    /// Split file listing the sequences to use.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, default_value_t = ea_interp::data::DEFAULT_CLIP_GROUP)]
    clip_group: usize,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("when").required(true).args(["t", "factor"])))]
struct InterpArgs {
    #[arg(long)]
    frame0: PathBuf,
    #[arg(long)]
    frame1: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Time of the single output frame, strictly between 0 and 1.
    #[arg(long)]
    t: Option<f32>,
    /// Write `factor − 1` evenly spaced frames `out_1.png …` into `--out`.
    #[arg(long)]
    factor: Option<usize>,
    /// Output file for `--t`, output directory for `--factor`.
    #[arg(long)]
    out: PathBuf,
    /// Also write color-coded intermediate flows.
    #[arg(long)]
    dump_flow: bool,
    /// Also write the first attention map as grayscale.
    #[arg(long)]
    dump_attention: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EdgeMethod {
    Canny,
    Sobel,
}

#[derive(Args, Debug)]
struct EdgesArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "canny")]
    method: EdgeMethod,
    #[arg(long, default_value_t = CannyParams::default().low)]
    low: f64,
    #[arg(long, default_value_t = CannyParams::default().high)]
    high: f64,
    #[arg(long, default_value_t = CannyParams::default().sigma)]
    sigma: f64,
}

#[derive(Args, Debug)]
struct FlowArgs {
    #[arg(long)]
    frame0: PathBuf,
    #[arg(long)]
    frame1: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Path stem for `<stem>_fwd.flo` and `<stem>_bwd.flo`.
    #[arg(long)]
    out_flo: PathBuf,
    /// Path stem for `<stem>_fwd.png` and `<stem>_bwd.png`.
    #[arg(long)]
    out_viz: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

/// Configuration and argument errors are usage errors; everything else is a
/// runtime failure.
fn classify(e: Error) -> Failure {
    let code = match e {
        Error::Config(_) | Error::InvalidArgument(_) => 1,
        _ => 2,
    };
    Failure {
        code,
        message: e.to_string(),
    }
}

fn runtime(e: Error) -> Failure {
    Failure {
        code: 2,
        message: e.to_string(),
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Interp(a) => cmd_interp(a),
        Command::Edges(a) => cmd_edges(a),
        Command::Flow(a) => cmd_flow(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("{SEED_ENV}: `{v}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Config file, then the seed environment variable, then flags.
fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut cfg = TrainConfig::from_file(&a.config).map_err(|e| usage(e.to_string()))?;
    if let Some(seed) = env_seed()? {
        cfg.seed = seed;
    }
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{o}`")))?;
        cfg.set(k.trim(), v.trim()).map_err(|e| usage(e.to_string()))?;
    }
    let set = |cfg: &mut TrainConfig, k: &str, v: Option<String>| -> CmdResult {
        match v {
            Some(v) => cfg.set(k, &v).map_err(|e| usage(e.to_string())),
            None => Ok(()),
        }
    };
    set(&mut cfg, "epochs", a.epochs.map(|v| v.to_string()))?;
    set(&mut cfg, "seed", a.seed.map(|v| v.to_string()))?;
    set(&mut cfg, "batch_size", a.batch_size.map(|v| v.to_string()))?;
    set(&mut cfg, "learning_rate", a.lr.map(|v| v.to_string()))?;
    set(&mut cfg, "run_dir", a.run_dir.as_ref().map(|v| v.display().to_string()))?;
    set(&mut cfg, "train_root", a.train_root.as_ref().map(|v| v.display().to_string()))?;
    set(&mut cfg, "max_steps", a.max_steps.map(|v| v.to_string()))?;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let cfg = resolve_train_config(&a)?;
    print!("{}", cfg.to_text());
    let outcome = match &a.resume {
        Some(ckpt) => trainer::resume(&cfg, ckpt, a.force),
        None => trainer::train(&cfg),
    }
    .map_err(classify)?;
    if let Some(last) = outcome.epochs.last() {
        println!("{}", trainer::METRICS_HEADER);
        println!("{}", last.csv_row());
    }
    for c in &outcome.checkpoints {
        println!("checkpoint {}", c.display());
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let mode = a.mode;
    let samples = load_dataset(mode, &a.dataset_root, a.split.as_deref(), a.clip_group).map_err(classify)?;
    let report = trainer::evaluate_checkpoint(&a.checkpoint, &samples, mode).map_err(classify)?;
    report.write_csv(&a.report).map_err(runtime)?;
    println!("PSNR={:.4} SSIM={:.4}", report.mean_psnr, report.mean_ssim);
    Ok(())
}

fn with_suffix(stem: &Path, suffix: &str, ext: &str) -> PathBuf {
    let name = stem.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    stem.with_file_name(format!("{name}{suffix}.{ext}"))
}

fn dump_extras(a: &InterpArgs, stem: &Path, out: &Interpolation) -> CmdResult {
    if a.dump_flow {
        save_image(&flow_to_color(&out.ft0, None), with_suffix(stem, "_flow_t0", "png")).map_err(runtime)?;
        save_image(&flow_to_color(&out.ft1, None), with_suffix(stem, "_flow_t1", "png")).map_err(runtime)?;
    }
    if a.dump_attention {
        save_edge_map(&out.attention.first_as_edge_map(), with_suffix(stem, "_attention", "png")).map_err(runtime)?;
    }
    Ok(())
}

fn cmd_interp(a: InterpArgs) -> CmdResult {
    let times: Vec<f32> = match (a.t, a.factor) {
        (Some(t), None) => {
            if !(t > 0.0 && t < 1.0) {
                return Err(usage(format!("--t must lie strictly between 0 and 1, got {t}")));
            }
            vec![t]
        }
        (None, Some(n)) => {
            if n < 2 {
                return Err(usage(format!("--factor must be at least 2, got {n}")));
            }
            (1..n).map(|i| i as f32 / n as f32).collect()
        }
        _ => return Err(usage("give exactly one of --t and --factor")),
    };
    let i0 = load_image(&a.frame0).map_err(runtime)?;
    let i1 = load_image(&a.frame1).map_err(runtime)?;
    if i0.dims() != i1.dims() {
        return Err(usage(format!("frames differ in size: {:?} vs {:?}", i0.dims(), i1.dims())));
    }
    let state = load_checkpoint(&a.checkpoint, None, false).map_err(runtime)?;
    if a.factor.is_some() {
        std::fs::create_dir_all(&a.out).map_err(|e| runtime(Error::Write(a.out.clone(), e.to_string())))?;
    }
    for (i, &t) in times.iter().enumerate() {
        let out = state
            .model
            .interpolate(&i0, &i1, TimePoint::new(t).map_err(classify)?)
            .map_err(classify)?;
        let path = match a.factor {
            Some(_) => a.out.join(format!("out_{}.png", i + 1)),
            None => a.out.clone(),
        };
        save_image(&out.frame, &path).map_err(runtime)?;
        dump_extras(&a, &path.with_extension(""), &out)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_edges(a: EdgesArgs) -> CmdResult {
    let params = CannyParams {
        low: a.low,
        high: a.high,
        sigma: a.sigma,
    };
    params.validate().map_err(|e| usage(e.to_string()))?;
    let frame = load_image(&a.input).map_err(runtime)?;
    let edges = match a.method {
        EdgeMethod::Canny => canny_edges(&frame, params).map_err(classify)?,
        EdgeMethod::Sobel => soft_edges(&frame),
    };
    save_edge_map(&edges, &a.out).map_err(runtime)
}

fn max_magnitude(flow: &FlowMap) -> f32 {
    flow.u().iter().zip(flow.v()).map(|(u, v)| u.hypot(*v)).fold(0.0, f32::max)
}

fn write_flow_pair(stem: &Path, f01: &FlowMap, f10: &FlowMap, viz: Option<&Path>) -> CmdResult {
    write_flo(f01, with_suffix(stem, "_fwd", "flo")).map_err(runtime)?;
    write_flo(f10, with_suffix(stem, "_bwd", "flo")).map_err(runtime)?;
    if let Some(v) = viz {
        let bound = max_magnitude(f01).max(max_magnitude(f10));
        save_image(&flow_to_color(f01, Some(bound)), with_suffix(v, "_fwd", "png")).map_err(runtime)?;
        save_image(&flow_to_color(f10, Some(bound)), with_suffix(v, "_bwd", "png")).map_err(runtime)?;
    }
    Ok(())
}

fn cmd_flow(a: FlowArgs) -> CmdResult {
    let i0 = load_image(&a.frame0).map_err(runtime)?;
    let i1 = load_image(&a.frame1).map_err(runtime)?;
    if i0.dims() != i1.dims() {
        return Err(usage(format!("frames differ in size: {:?} vs {:?}", i0.dims(), i1.dims())));
    }
    let state = load_checkpoint(&a.checkpoint, None, false).map_err(runtime)?;
    let out = state
        .model
        .interpolate(&i0, &i1, TimePoint::MIDDLE)
        .map_err(classify)?;
    write_flow_pair(&a.out_flo, &out.f01, &out.f10, a.out_viz.as_deref())?;
    println!(
        "mean |F01| = {:.4} px, mean |F10| = {:.4} px",
        out.f01.mean_magnitude(),
        out.f10.mean_magnitude()
    );
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let seed = env_seed()?.unwrap_or(a.seed);
    let config = SyntheticConfig {
        size: a.size,
        ..SyntheticConfig::default()
    };
    if a.size < 48 {
        return Err(usage("--size must be at least 48"));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let samples = synthetic_triplets(a.count, config, &mut rng);
    write_triplets(&a.out, &samples).map_err(runtime)?;
    println!("wrote {} triplets to {}", samples.len(), a.out.display());
    Ok(())
}
