use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use strider_core::complexity::ComplexityReport;
use strider_core::model::{
    load_checkpoint, save_checkpoint, ModelConfig, ModelParameters,
};
use strider_core::synth::dataset::{read_dataset, write_dataset};
use strider_core::synth::{generate_dataset, CameraSpec, GenConfig, PoseSequenceSample, SkeletonSpec};
use strider_core::train::{evaluate, export_attention, train, TrainConfig};

/// 2D-to-3D pose lifting with a strided transformer: synthetic data,
/// training, evaluation, attention export, and complexity reports.
#[derive(Parser)]
#[command(name = "strider", version, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file
    GenData(GenDataArgs),
    /// Train a model from a JSON config
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset
    Eval(EvalArgs),
    /// Print the complexity report for an architecture point
    Flops(FlopsArgs),
    /// Export attention maps for one sample
    Attn(AttnArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of independent motion sequences
    #[arg(long, default_value_t = 4)]
    sequences: usize,
    /// Frames per sequence
    #[arg(long, default_value_t = 200)]
    frames: usize,
    /// 2D noise standard deviation in pixels
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    /// Multiplier on the motion amplitude of every action profile
    #[arg(long, default_value_t = 1.0)]
    amplitude_scale: f64,
    /// Window length (receptive field) of the emitted samples
    #[arg(long, default_value_t = 27)]
    window: usize,
    /// Skeleton: 17 (default) or 7 (toy stick figure)
    #[arg(long, default_value_t = 17)]
    joints: usize,
    /// Output dataset path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Train config JSON (TrainConfig fields; partial files use defaults)
    #[arg(long)]
    config: PathBuf,
    /// Training dataset
    #[arg(long)]
    data: PathBuf,
    /// Held-out dataset; when absent, late sequences are split off `--data`
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Output directory (checkpoint + run log)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Flip averaging at evaluation
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    flip: bool,
    /// Write the per-action metric report CSV here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FlopsArgs {
    /// Sequence length T
    #[arg(long, default_value_t = 27)]
    frames: u64,
    /// Width D (= d_m; hidden width is 2D)
    #[arg(long, default_value_t = 256)]
    dim: u64,
    /// Layers N in each stack
    #[arg(long, default_value_t = 3)]
    layers: u64,
    /// Strided factor S
    #[arg(long, default_value_t = 3)]
    stride: u64,
    /// Kernel size K
    #[arg(long, default_value_t = 3)]
    kernel: u64,
    /// Also count parameters and run an instrumented forward pass
    /// (requires a standard receptive field: 27, 81, 243, 351)
    #[arg(long, default_value_t = false)]
    measure: bool,
    /// Write the report as CSV here
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct AttnArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Sample index within the dataset
    #[arg(long, default_value_t = 0)]
    sample: usize,
    /// Output directory for CSV/PNG maps
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{e}");
                    ExitCode::from(1)
                }
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Flops(args) => run_flops(args),
        Command::Attn(args) => run_attn(args),
    }
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let skel = match args.joints {
        17 => SkeletonSpec::default_17(),
        7 => SkeletonSpec::toy_7(),
        other => bail!("no built-in skeleton with {other} joints (use 17 or 7)"),
    };
    let camera = CameraSpec::default_front();
    let gen = GenConfig {
        seed: args.seed,
        sequences: args.sequences,
        frames_per_sequence: args.frames,
        window: args.window,
        sigma_px: args.sigma,
        hz: 50.0,
        amplitude_scale: args.amplitude_scale,
    };
    let samples = generate_dataset(&skel, &camera, &gen)?;
    write_dataset(&samples, &args.out)?;
    println!(
        "wrote {} samples ({} sequences x {} frames, window {}) to {}",
        samples.len(),
        args.sequences,
        args.frames,
        args.window,
        args.out.display()
    );
    Ok(())
}

/// Hold out the last fifth of the sequence ids (or of each sequence's frames
/// when there is a single sequence).
fn split_holdout(
    samples: Vec<PoseSequenceSample>,
) -> (Vec<PoseSequenceSample>, Vec<PoseSequenceSample>) {
    let mut ids: Vec<u32> = samples.iter().map(|s| s.meta.sequence_id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() >= 2 {
        let holdout = ids.len().div_ceil(5).max(1);
        let eval_ids: Vec<u32> = ids[ids.len() - holdout..].to_vec();
        samples.into_iter().partition(|s| !eval_ids.contains(&s.meta.sequence_id))
    } else {
        let max_frame = samples.iter().map(|s| s.meta.frame_index).max().unwrap_or(0);
        let cut = max_frame - max_frame / 5;
        samples.into_iter().partition(|s| s.meta.frame_index < cut)
    }
}

fn run_train(args: TrainArgs) -> Result<()> {
    let config_text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("cannot read config {}", args.config.display()))?;
    let cfg = TrainConfig::from_json(&config_text)?;
    let data = read_dataset(&args.data)
        .with_context(|| format!("cannot read dataset {}", args.data.display()))?;
    let (train_set, eval_set) = match &args.eval_data {
        Some(path) => {
            let eval = read_dataset(path)
                .with_context(|| format!("cannot read dataset {}", path.display()))?;
            (data, eval)
        }
        None => {
            let (train_set, eval_set) = split_holdout(data);
            println!(
                "no --eval-data given: held out {} of {} windows by sequence",
                eval_set.len(),
                train_set.len() + eval_set.len()
            );
            (train_set, eval_set)
        }
    };
    let skel = skeleton_for_joints(cfg.model.joints)?;
    std::fs::create_dir_all(&args.out)?;
    let outcome = train(&cfg, &train_set, &eval_set, &skel)?;

    let checkpoint_path = args.out.join("model.stc");
    save_checkpoint(&cfg.model, &outcome.params, &checkpoint_path)?;
    let log_path = args.out.join("runlog.csv");
    std::fs::write(&log_path, outcome.log.to_csv(&cfg.model))?;

    if let Some(diagnostic) = outcome.aborted {
        bail!(
            "{diagnostic}; last-good checkpoint saved to {}",
            checkpoint_path.display()
        );
    }
    let best = &outcome.log.epochs[outcome.best_epoch];
    println!(
        "trained {} epochs; best epoch {} (eval mpjpe {:.3} mm, p-mpjpe {:.3} mm, mpjve {:.3} mm)",
        outcome.log.epochs.len(),
        outcome.best_epoch,
        best.eval_mpjpe,
        best.eval_p_mpjpe,
        best.eval_mpjve
    );
    println!("checkpoint: {}", checkpoint_path.display());
    println!("run log:    {}", log_path.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<(ModelConfig, ModelParameters)> {
    load_checkpoint(path)
        .with_context(|| format!("cannot load checkpoint {}", path.display()))
        .map_err(Into::into)
}

fn skeleton_for_joints(joints: usize) -> Result<SkeletonSpec> {
    match joints {
        17 => Ok(SkeletonSpec::default_17()),
        7 => Ok(SkeletonSpec::toy_7()),
        other => bail!("no built-in skeleton with {other} joints (use 17 or 7)"),
    }
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let (cfg, params) = load_model(&args.checkpoint)?;
    let data = read_dataset(&args.data)
        .with_context(|| format!("cannot read dataset {}", args.data.display()))?;
    let skel = skeleton_for_joints(cfg.joints)?;
    let report = evaluate(&cfg, &params, &data, &skel, args.flip)?;
    println!(
        "mpjpe {:.4} mm | p-mpjpe {:.4} mm | mpjve {:.4} mm (flip averaging {})",
        report.mpjpe,
        report.p_mpjpe,
        report.mpjve,
        if args.flip { "on" } else { "off" }
    );
    for (action, m) in &report.per_action {
        println!(
            "  {action:<10} mpjpe {:.4}  p-mpjpe {:.4}  mpjve {:.4}  ({} windows)",
            m.mpjpe, m.p_mpjpe, m.mpjve, m.samples
        );
    }
    if let Some(out) = args.out {
        std::fs::write(&out, report.to_csv())?;
        println!("report CSV: {}", out.display());
    }
    Ok(())
}

fn run_flops(args: FlopsArgs) -> Result<()> {
    let mut report =
        ComplexityReport::analytic(args.layers, args.frames, args.dim, args.stride, args.kernel);
    if args.measure {
        let mut cfg = ModelConfig::for_frames(args.frames as usize)?;
        cfg.d_model = args.dim as usize;
        cfg.d_hidden = 2 * cfg.d_model;
        cfg.vte_layers = args.layers as usize;
        report = report.with_model(&cfg, 0)?;
    }
    print!("{}", report.to_text());
    if let Some(path) = args.csv {
        std::fs::write(&path, report.to_csv())?;
        println!("report CSV: {}", path.display());
    }
    Ok(())
}

fn run_attn(args: AttnArgs) -> Result<()> {
    let (cfg, params) = load_model(&args.checkpoint)?;
    let data = read_dataset(&args.data)
        .with_context(|| format!("cannot read dataset {}", args.data.display()))?;
    let sample = data
        .get(args.sample)
        .with_context(|| format!("sample {} out of range (dataset has {})", args.sample, data.len()))?;
    let files = export_attention(&cfg, &params, sample, &args.out)?;
    println!("wrote {} attention files to {}", files.len(), args.out.display());
    Ok(())
}
