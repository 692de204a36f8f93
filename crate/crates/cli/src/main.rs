//! `roadcast` — generate synthetic driving logs, train next-frame predictors
//! on them, and inspect what the models learned.
//!
//! Outputs are offline artifacts: ADVL data logs, ADVT checkpoints, CSV
//! curves/reports, and PGM images. Exit codes: 0 success, 2 usage/validation
//! errors (including IO), 3 numeric divergence during training.

mod cfgfile;
mod pgm;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use roadcast_core::data::{compute_stats, load_log, save_log};
use roadcast_core::roadworld::generate;
use roadcast_core::{
    evaluate, load_checkpoint, train, CopyConfig, DrivingLog, Error, HistoryWindow, ModelConfig,
    ModelKind, NormalizationStats, PredictiveModel, Result, RoadworldConfig, SdfTilingConfig,
    SdfVectorConfig, SsimParams, Tensor, TrainConfig,
};

use cfgfile::{pick, ConfigFile};
use pgm::{normalize_for_export, write_pgm};

#[derive(Parser)]
#[command(name = "roadcast", version, about = "Action-conditioned next-frame prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic driving log (ADVL)
    GenData(GenDataArgs),
    /// Train a model and write checkpoints plus the loss curve
    Train(TrainArgs),
    /// Evaluate a model on a log: MSE and SSIM
    Eval(EvalArgs),
    /// One-step predictions over consecutive windows, as PGM pairs
    Predict(PredictArgs),
    /// Autoregressive rollout from one start window, as PGM pairs
    Rollout(RolloutArgs),
    /// Export an sdf-tiling checkpoint's basis images and weights
    InspectBasis(InspectBasisArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Divergence { .. }) {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => run_gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Predict(a) => run_predict(a),
        Command::Rollout(a) => run_rollout(a),
        Command::InspectBasis(a) => run_inspect_basis(a),
    }
}

/// `sdf` is accepted as shorthand for the fully connected baseline.
fn parse_model_name(s: &str) -> Result<ModelKind> {
    if s == "sdf" {
        Ok(ModelKind::SdfVector)
    } else {
        ModelKind::parse(s)
    }
}

fn load_config_file(path: &Option<PathBuf>) -> Result<ConfigFile> {
    match path {
        Some(p) => ConfigFile::load(p),
        None => Ok(ConfigFile::default()),
    }
}

// ---------------------------------------------------------------- gen-data

#[derive(Args)]
struct GenDataArgs {
    /// Output log file
    #[arg(long, default_value = "roadworld.advl")]
    out: PathBuf,
    /// `key = value` file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of frames to render
    #[arg(long)]
    frames: Option<usize>,
    /// Per-pixel Gaussian noise sigma
    #[arg(long)]
    noise: Option<f64>,
    /// Frame height; road geometry scales with it unless set via config keys
    #[arg(long)]
    height: Option<usize>,
    /// Frame width; road geometry scales with it unless set via config keys
    #[arg(long)]
    width: Option<usize>,
    /// Lateral pixels per unit of steering
    #[arg(long)]
    gain_steer: Option<f64>,
    /// Lead-scale change per unit of acceleration
    #[arg(long)]
    gain_accel: Option<f64>,
    /// Brightness drop at full brake
    #[arg(long)]
    gain_brake: Option<f64>,
}

const GEN_KEYS: &[&str] = &[
    "seed",
    "frames",
    "noise",
    "height",
    "width",
    "gain_steer",
    "gain_accel",
    "gain_brake",
    "horizon",
    "lane_half_width",
    "line_width",
    "lead_width",
    "lead_height",
    "lead_distance",
    "lateral_max",
];

fn run_gen_data(a: GenDataArgs) -> Result<()> {
    let file = load_config_file(&a.config)?;
    file.reject_unknown(GEN_KEYS)?;
    let d = RoadworldConfig::default();
    let height = pick(a.height, file.get("height")?, d.height);
    let width = pick(a.width, file.get("width")?, d.width);
    // The default road geometry is stated in pixels of the default frame, so
    // scale it with the requested frame unless a config key pins it. Line
    // thickness keeps a one-pixel floor to stay visible on small frames.
    let hs = height as f64 / d.height as f64;
    let ws = width as f64 / d.width as f64;
    let config = RoadworldConfig {
        seed: pick(a.seed, file.get("seed")?, d.seed),
        n_frames: pick(a.frames, file.get("frames")?, d.n_frames),
        height,
        width,
        noise_sigma: pick(a.noise, file.get("noise")?, d.noise_sigma),
        gain_steer: pick(a.gain_steer, file.get("gain_steer")?, d.gain_steer),
        gain_accel: pick(a.gain_accel, file.get("gain_accel")?, d.gain_accel),
        gain_brake: pick(a.gain_brake, file.get("gain_brake")?, d.gain_brake),
        horizon: file.get("horizon")?.unwrap_or(d.horizon * hs),
        lane_half_width: file.get("lane_half_width")?.unwrap_or(d.lane_half_width * ws),
        line_width: file.get("line_width")?.unwrap_or((d.line_width * ws).max(1.0)),
        lead_width: file.get("lead_width")?.unwrap_or(d.lead_width * ws),
        lead_height: file.get("lead_height")?.unwrap_or(d.lead_height * hs),
        lead_distance: file.get("lead_distance")?.unwrap_or(d.lead_distance * hs),
        lateral_max: file.get("lateral_max")?.unwrap_or(d.lateral_max * ws),
        ..d
    };
    let log = generate(&config)?;
    save_log(&log, &a.out)?;
    println!("frames={} actions={}", log.frames.len(), log.actions.len());
    Ok(())
}

// ------------------------------------------------------------------- train

#[derive(Args)]
struct TrainArgs {
    /// Model: sdf-tiling, sdf-vector (alias: sdf), or copy
    #[arg(long)]
    model: Option<String>,
    /// History window size W
    #[arg(long)]
    window: Option<usize>,
    /// Basis image count, which is also the decoder stage width (sdf-tiling)
    #[arg(long)]
    basis: Option<usize>,
    /// Hidden width of the fully connected stack (sdf-vector)
    #[arg(long)]
    hidden: Option<usize>,
    /// Training log (ADVL)
    #[arg(long)]
    data: PathBuf,
    /// Directory for best.advt, final.advt, and loss.csv
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// Adam learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Mini-batch size
    #[arg(long)]
    batch: Option<usize>,
    /// Seed for model init and epoch shuffling
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of windows held out for best-checkpoint selection
    #[arg(long)]
    val_fraction: Option<f64>,
    /// `key = value` file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
}

const TRAIN_KEYS: &[&str] = &[
    "model",
    "window",
    "basis",
    "hidden",
    "epochs",
    "lr",
    "batch",
    "seed",
    "val_fraction",
];

fn run_train(a: TrainArgs) -> Result<()> {
    let file = load_config_file(&a.config)?;
    file.reject_unknown(TRAIN_KEYS)?;
    let defaults = TrainConfig::default();
    let model_name = pick(a.model.clone(), file.get("model")?, "sdf-tiling".into());
    let kind = parse_model_name(&model_name)?;
    if kind == ModelKind::CopyLastFrame {
        return Err(Error::InvalidConfig(
            "the copy baseline has no trainable parameters; use `eval --model copy`".into(),
        ));
    }
    let window = pick(a.window, file.get("window")?, 4);
    let seed = pick(a.seed, file.get("seed")?, 0);
    let basis = a.basis.or(file.get("basis")?);
    let hidden = a.hidden.or(file.get("hidden")?);

    let log = load_log(&a.data)?;
    let stats = compute_stats(std::slice::from_ref(&log))?;
    let model_config = match kind {
        ModelKind::SdfTiling => {
            if hidden.is_some() {
                return Err(Error::InvalidConfig(
                    "--hidden applies only to sdf-vector".into(),
                ));
            }
            let mut c = SdfTilingConfig {
                window,
                input_height: log.height(),
                input_width: log.width(),
                ..SdfTilingConfig::default()
            };
            if let Some(n) = basis {
                c.decoder_channels = [n, n, n];
            }
            ModelConfig::SdfTiling(c)
        }
        ModelKind::SdfVector => {
            if basis.is_some() {
                return Err(Error::InvalidConfig(
                    "--basis applies only to sdf-tiling".into(),
                ));
            }
            let mut c = SdfVectorConfig {
                window,
                input_height: log.height(),
                input_width: log.width(),
                ..SdfVectorConfig::default()
            };
            if let Some(h) = hidden {
                c.hidden_width = h;
            }
            ModelConfig::SdfVector(c)
        }
        ModelKind::CopyLastFrame => unreachable!("rejected above"),
    };
    let mut model = PredictiveModel::new(model_config, seed)?;
    println!("params={}", model.count_params());

    let config = TrainConfig {
        learning_rate: pick(a.lr, file.get("lr")?, defaults.learning_rate),
        epochs: pick(a.epochs, file.get("epochs")?, defaults.epochs),
        batch_size: pick(a.batch, file.get("batch")?, defaults.batch_size),
        seed,
        validation_fraction: pick(
            a.val_fraction,
            file.get("val_fraction")?,
            defaults.validation_fraction,
        ),
        out_dir: Some(a.out.clone()),
        ..defaults
    };
    let report = train(&mut model, std::slice::from_ref(&log), &stats, &config)?;
    for (i, mse) in report.loss_curve.iter().enumerate() {
        println!("epoch={} mean_mse={mse}", i + 1);
    }
    println!(
        "best_epoch={} best_val_mse={}",
        report.best_epoch, report.best_val_mse
    );
    Ok(())
}

// -------------------------------------------------------------------- eval

#[derive(Args)]
struct EvalArgs {
    /// Trained checkpoint (ADVT)
    #[arg(long, required_unless_present = "model", conflicts_with = "model")]
    checkpoint: Option<PathBuf>,
    /// Parameterless baseline to run without a checkpoint (only `copy`)
    #[arg(long)]
    model: Option<String>,
    /// Evaluation log (ADVL)
    #[arg(long)]
    data: PathBuf,
    /// History window size; cross-checked against a checkpoint's config
    #[arg(long)]
    window: Option<usize>,
    /// Write the per-log breakdown CSV here
    #[arg(long)]
    csv: Option<PathBuf>,
}

/// Loads the model either from a checkpoint (with its training-time action
/// normalization) or as the parameterless copy baseline, and cross-checks
/// window size and geometry against the request and the data.
fn resolve_model(
    checkpoint: &Option<PathBuf>,
    model: &Option<String>,
    window: Option<usize>,
    log: &DrivingLog,
) -> Result<(PredictiveModel<f32>, NormalizationStats)> {
    let (model, stats) = match (checkpoint, model) {
        (Some(path), None) => {
            let (m, stats) = load_checkpoint(path)?;
            if let Some(w) = window {
                if m.config().window() != w {
                    return Err(Error::InvalidConfig(format!(
                        "window mismatch: checkpoint was trained with W={}, requested W={w}",
                        m.config().window()
                    )));
                }
            }
            (m, stats)
        }
        (None, Some(name)) => {
            let kind = parse_model_name(name)?;
            if kind != ModelKind::CopyLastFrame {
                return Err(Error::InvalidConfig(format!(
                    "model '{name}' needs --checkpoint; only `copy` runs without one"
                )));
            }
            let m = PredictiveModel::copy_last_frame(CopyConfig {
                window: window.unwrap_or(4),
                input_height: log.height(),
                input_width: log.width(),
            });
            (m, NormalizationStats::identity())
        }
        _ => unreachable!("clap enforces exactly one of --checkpoint/--model"),
    };
    let (h, w) = (model.config().input_height(), model.config().input_width());
    if (h, w) != (log.height(), log.width()) {
        return Err(Error::InvalidConfig(format!(
            "geometry mismatch: model expects {h}x{w} frames, log holds {}x{}",
            log.height(),
            log.width()
        )));
    }
    Ok((model, stats))
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let log = load_log(&a.data)?;
    let (model, stats) = resolve_model(&a.checkpoint, &a.model, a.window, &log)?;
    let report = evaluate(
        &model,
        std::slice::from_ref(&log),
        &stats,
        &SsimParams::default(),
    )?;
    println!("{}", report.summary_line());
    if let Some(path) = &a.csv {
        std::fs::write(path, report.per_log_csv())?;
    }
    Ok(())
}

// --------------------------------------------------------- predict/rollout

#[derive(Args)]
struct PredictArgs {
    /// Trained checkpoint (ADVT)
    #[arg(long, required_unless_present = "model", conflicts_with = "model")]
    checkpoint: Option<PathBuf>,
    /// Parameterless baseline to run without a checkpoint (only `copy`)
    #[arg(long)]
    model: Option<String>,
    /// Log supplying history frames, actions, and ground truth (ADVL)
    #[arg(long)]
    data: PathBuf,
    /// Index of the first frame of the first history window
    #[arg(long, default_value_t = 0)]
    start: usize,
    /// Number of predictions
    #[arg(long, default_value_t = 1)]
    steps: usize,
    /// Output directory for pred_*.pgm / true_*.pgm pairs
    #[arg(long)]
    out: PathBuf,
    /// History window size when running without a checkpoint
    #[arg(long)]
    window: Option<usize>,
}

/// Validates that windows starting at `start` support `steps` predictions.
fn check_range(log: &DrivingLog, w: usize, start: usize, steps: usize) -> Result<()> {
    let len = log.frames.len();
    if steps == 0 {
        return Err(Error::InvalidConfig("steps must be at least 1".into()));
    }
    if start + w > len {
        return Err(Error::InvalidConfig(format!(
            "start {start} leaves no full {w}-frame window in a {len}-frame log"
        )));
    }
    let last_action = start + steps - 1 + w - 1;
    if last_action >= log.actions.len() {
        return Err(Error::InvalidConfig(format!(
            "{steps} step(s) from start {start} need action index {last_action}; \
             the log holds {}",
            log.actions.len()
        )));
    }
    Ok(())
}

fn run_predict(a: PredictArgs) -> Result<()> {
    let log = load_log(&a.data)?;
    let (model, stats) = resolve_model(&a.checkpoint, &a.model, a.window, &log)?;
    let w = model.config().window();
    check_range(&log, w, a.start, a.steps)?;
    std::fs::create_dir_all(&a.out)?;
    for i in 0..a.steps {
        let t0 = a.start + i;
        let frames: Vec<&Tensor<f32>> = log.frames[t0..t0 + w].iter().collect();
        let hist = HistoryWindow::from_frames(&frames)?;
        let action = log.actions[t0 + w - 1].normalize(&stats);
        let pred = model.predict(&hist, &action)?.frame.clamp(0.0, 1.0);
        let idx = t0 + w;
        write_pgm(&a.out.join(format!("pred_{idx:06}.pgm")), &pred)?;
        if idx < log.frames.len() {
            write_pgm(&a.out.join(format!("true_{idx:06}.pgm")), &log.frames[idx])?;
        }
    }
    println!("wrote {} prediction(s) to {}", a.steps, a.out.display());
    Ok(())
}

#[derive(Args)]
struct RolloutArgs {
    /// Trained checkpoint (ADVT)
    #[arg(long, required_unless_present = "model", conflicts_with = "model")]
    checkpoint: Option<PathBuf>,
    /// Parameterless baseline to run without a checkpoint (only `copy`)
    #[arg(long)]
    model: Option<String>,
    /// Log supplying the start window, actions, and ground truth (ADVL)
    #[arg(long)]
    data: PathBuf,
    /// Index of the first frame of the start window
    #[arg(long, default_value_t = 0)]
    start: usize,
    /// Number of autoregressive steps
    #[arg(long, default_value_t = 1)]
    steps: usize,
    /// Output directory for pred_*.pgm / true_*.pgm pairs
    #[arg(long)]
    out: PathBuf,
    /// History window size when running without a checkpoint
    #[arg(long)]
    window: Option<usize>,
}

fn run_rollout(a: RolloutArgs) -> Result<()> {
    let log = load_log(&a.data)?;
    let (model, stats) = resolve_model(&a.checkpoint, &a.model, a.window, &log)?;
    let w = model.config().window();
    check_range(&log, w, a.start, a.steps)?;
    let frames: Vec<&Tensor<f32>> = log.frames[a.start..a.start + w].iter().collect();
    let hist = HistoryWindow::from_frames(&frames)?;
    let first_action = a.start + w - 1;
    let actions: Vec<_> = log.actions[first_action..first_action + a.steps]
        .iter()
        .map(|act| act.normalize(&stats))
        .collect();
    let preds = model.rollout(&hist, &actions)?;
    std::fs::create_dir_all(&a.out)?;
    for (i, frame) in preds.iter().enumerate() {
        let idx = a.start + w + i;
        write_pgm(&a.out.join(format!("pred_{idx:06}.pgm")), frame)?;
        if idx < log.frames.len() {
            write_pgm(&a.out.join(format!("true_{idx:06}.pgm")), &log.frames[idx])?;
        }
    }
    println!("wrote {} rollout frame(s) to {}", preds.len(), a.out.display());
    Ok(())
}

// ----------------------------------------------------------- inspect-basis

#[derive(Args)]
struct InspectBasisArgs {
    /// Trained sdf-tiling checkpoint (ADVT)
    #[arg(long)]
    checkpoint: PathBuf,
    /// Log supplying the inspected history window (ADVL)
    #[arg(long)]
    data: PathBuf,
    /// Index of the first frame of the inspected window
    #[arg(long, default_value_t = 0)]
    t: usize,
    /// Output directory for basis_*.pgm, prediction.pgm, and weights.csv
    #[arg(long)]
    out: PathBuf,
}

fn run_inspect_basis(a: InspectBasisArgs) -> Result<()> {
    let log = load_log(&a.data)?;
    let (model, stats) = resolve_model(&Some(a.checkpoint.clone()), &None, None, &log)?;
    if model.kind() != ModelKind::SdfTiling {
        return Err(Error::InvalidConfig(format!(
            "basis inspection needs an sdf-tiling checkpoint, got {}",
            model.kind().name()
        )));
    }
    let w = model.config().window();
    check_range(&log, w, a.t, 1)?;
    let frames: Vec<&Tensor<f32>> = log.frames[a.t..a.t + w].iter().collect();
    let hist = HistoryWindow::from_frames(&frames)?;
    let action = log.actions[a.t + w - 1].normalize(&stats);
    let pred = model.predict(&hist, &action)?;
    let basis = pred.basis.expect("sdf-tiling predictions carry basis images");
    let weights = pred
        .basis_weights
        .expect("sdf-tiling predictions carry basis weights");
    let (h, wd) = (basis.shape()[0], basis.shape()[1]);
    let nb = weights.len();

    // the prediction must be exactly the weighted sum of the basis images
    let mut max_err = 0.0f32;
    for y in 0..h {
        for x in 0..wd {
            let sum: f32 = (0..nb).map(|i| basis.at3(y, x, i) * weights[i]).sum();
            max_err = max_err.max((sum - pred.frame.at3(y, x, 0)).abs());
        }
    }

    let mut order: Vec<usize> = (0..nb).collect();
    order.sort_by(|&i, &j| weights[j].total_cmp(&weights[i]).then(i.cmp(&j)));

    std::fs::create_dir_all(&a.out)?;
    let mut csv = String::from("rank,basis,weight,raw_min,raw_max\n");
    for (rank, &bi) in order.iter().enumerate() {
        let img = Tensor::from_fn(&[h, wd, 1], |p| basis.at3(p / wd, p % wd, bi));
        let (scaled, lo, hi) = normalize_for_export(&img);
        write_pgm(&a.out.join(format!("basis_{rank:02}.pgm")), &scaled)?;
        csv.push_str(&format!("{rank},{bi},{},{lo},{hi}\n", weights[bi]));
    }
    std::fs::write(a.out.join("weights.csv"), csv)?;
    write_pgm(&a.out.join("prediction.pgm"), &pred.frame.clamp(0.0, 1.0))?;
    println!("basis_images={nb} identity_max_err={max_err:e}");
    Ok(())
}
