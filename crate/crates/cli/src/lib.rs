//! The `bevloc` command line.
//!
//! Exit codes: 0 on success, 1 on usage errors (bad flags, bad config
//! file, missing inputs), 2 when the work itself fails.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

pub mod config;
pub mod plot;

use config::{
    required, resolve, EvalSettings, FigureFormat, GenDataSettings, GenWorldSettings, MakeBevSettings, PlotSettings,
    Preset, SelftestSettings, TrainSettings, SEED_ENV,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] bevloc::Error),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "bevloc",
    version,
    about = "LiDAR BEV localization with diffusion pose regression"
)]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic street world and write it as JSON.
    GenWorld(GenWorldArgs),
    /// Simulate a trajectory and LiDAR scans into a dataset directory.
    GenData(GenDataArgs),
    /// Rasterize every frame of a dataset into BEV images.
    MakeBev(MakeBevArgs),
    /// Train a localization model on a dataset.
    Train(TrainArgs),
    /// Localize every tuple of a dataset and write report.json and per_frame.csv.
    Eval(EvalArgs),
    /// Draw the trajectory success figure and the yaw-error heatmap.
    Plot(PlotArgs),
    /// Run the invariant checks.
    Selftest(SelftestArgs),
}

/// Flags common to every subcommand.
#[derive(Debug, Args, Serialize)]
struct Common {
    /// Flat JSON file of settings named like the long flags.
    #[arg(long, global = true)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct GenWorldArgs {
    #[command(flatten)]
    #[serde(skip)]
    common: Common,
    /// World seed [default: $BEVLOC_SEED or 0]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    /// Side of the square world, meters [default: 100]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    extent: Option<f64>,
    /// Fraction of block cells that hold a building [default: 0.85]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    block_density: Option<f64>,
    /// Poles per square meter of free space [default: 0.003]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pole_density: Option<f64>,
    /// Output file [default: world.json]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct GenDataArgs {
    #[command(flatten)]
    #[serde(skip)]
    common: Common,
    /// World file from gen-world; a fresh world is generated when omitted
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    world: Option<PathBuf>,
    /// Seed for the generated world [default: 0]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    world_seed: Option<u64>,
    /// Side of the generated world, meters [default: 100]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    extent: Option<f64>,
    /// Output directory [default: dataset]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    /// Number of frames [default: 1500]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    frames: Option<usize>,
    /// Meters traveled per frame [default: 0.5]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    speed: Option<f64>,
    /// Drive the loop clockwise [default: false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    reverse: Option<bool>,
    /// Peak lateral weave as a fraction of the corridor half width [default: 0.3]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    weave: Option<f64>,
    /// Beams per ring [default: 360]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    beams: Option<usize>,
    /// Maximum range, meters [default: 60]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    max_range: Option<f64>,
    /// Range noise standard deviation, meters [default: 0.02]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    range_noise_std: Option<f64>,
    /// Probability that a beam returns nothing [default: 0.01]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    dropout_prob: Option<f64>,
    /// Trajectory and scan seed [default: $BEVLOC_SEED or 0]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct MakeBevArgs {
    #[command(flatten)]
    #[serde(skip)]
    common: Common,
    /// Dataset directory
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    /// Output directory [default: bev]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    /// Half side of the BEV window, meters [default: 25]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    half_window: Option<f64>,
    /// Cell size, meters [default: 0.4]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    grid_resolution: Option<f64>,
    /// Per-cell count clamp [default: 10]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    density_clamp: Option<u32>,
    /// Side of the padded image [default: 128]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    output_side: Option<usize>,
    /// Also write an 8-bit PNG per frame [default: false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    png: Option<bool>,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct TrainArgs {
    #[command(flatten)]
    #[serde(skip)]
    common: Common,
    /// Dataset directory
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    /// Checkpoint path, rewritten after every epoch [default: model.bvdl]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    /// Base architecture and schedule [default: full]
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    preset: Option<Preset>,
    /// JSON model description replacing the preset architecture
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    model_config: Option<PathBuf>,
    /// Training epochs [default: from preset]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    epochs: Option<usize>,
    /// Tuples per optimizer step [default: from preset]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    batch_size: Option<usize>,
    /// Linear warmup epochs [default: from preset]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    warmup_epochs: Option<usize>,
    /// Peak learning rate [default: from preset]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    peak_lr: Option<f64>,
    /// Decoupled weight decay [default: from preset]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    weight_decay: Option<f64>,
    /// Frames between tuple members [default: from preset]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    tuple_spacing: Option<usize>,
    /// Train on every n-th tuple [default: from preset]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    anchor_stride: Option<usize>,
    /// Probability of replacing a frame by a virtual view [default: from preset]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    augment_prob: Option<f64>,
    /// Standard deviation of virtual viewpoint offsets, meters [default: from preset]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    offset_std: Option<f64>,
    /// Initialization and sampling seed [default: $BEVLOC_SEED or 0]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    /// Where to dump the model if the loss diverges [default: <out>.diag.bvdl]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    diagnostic: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct EvalArgs {
    #[command(flatten)]
    #[serde(skip)]
    common: Common,
    /// Checkpoint from train
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint: Option<PathBuf>,
    /// Dataset directory
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    /// DDIM sampling steps [default: 10]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    steps: Option<usize>,
    /// Success threshold on position error, meters [default: 2.0]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    sr_trans: Option<f64>,
    /// Success threshold on yaw error, degrees [default: 5.0]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    sr_yaw: Option<f64>,
    /// Sampling seed [default: $BEVLOC_SEED or 0]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    /// Frames between tuple members [default: from checkpoint]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    tuple_spacing: Option<usize>,
    /// Output directory [default: eval]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct PlotArgs {
    #[command(flatten)]
    #[serde(skip)]
    common: Common,
    /// per_frame.csv written by eval
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    per_frame: Option<PathBuf>,
    /// Output directory [default: plots]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    /// Yaw error at which the heatmap saturates, degrees [default: 5]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    yaw_cap: Option<f64>,
    /// Figure format [default: both]
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    format: Option<FigureFormat>,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct SelftestArgs {
    #[command(flatten)]
    #[serde(skip)]
    common: Common,
    /// Seed for the randomized checks [default: $BEVLOC_SEED or 0]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    /// Run at acceptance size (minutes) instead of the quick variant [default: false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    full: Option<bool>,
}

/// Runs the command line with `BEVLOC_SEED` read from the environment.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let env_seed = std::env::var(SEED_ENV).ok();
    run_with_env(argv, env_seed.as_deref())
}

pub fn run_with_env<I, T>(argv: I, env_seed: Option<&str>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let name = cli.command.name();
    match cli.command.execute(env_seed) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Usage(_) = e {
                eprintln!("run `bevloc {name} --help` for usage");
            }
            e.exit_code()
        }
    }
}

fn settings<S>(command: &str, flags: &impl Serialize, common: &Common, env_seed: Option<&str>) -> Result<S, CliError>
where
    S: Serialize + serde::de::DeserializeOwned + Default,
{
    let s: S = resolve(command, flags, common.config.as_deref(), env_seed)?;
    log::info!(
        "{command} settings: {}",
        serde_json::to_string(&s).expect("settings serialize")
    );
    Ok(s)
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenWorld(_) => "gen-world",
            Command::GenData(_) => "gen-data",
            Command::MakeBev(_) => "make-bev",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Plot(_) => "plot",
            Command::Selftest(_) => "selftest",
        }
    }

    fn execute(&self, env_seed: Option<&str>) -> Result<(), CliError> {
        let name = self.name();
        match self {
            Command::GenWorld(a) => gen_world(settings(name, a, &a.common, env_seed)?),
            Command::GenData(a) => gen_data(settings(name, a, &a.common, env_seed)?),
            Command::MakeBev(a) => make_bev(settings(name, a, &a.common, env_seed)?),
            Command::Train(a) => train(settings(name, a, &a.common, env_seed)?),
            Command::Eval(a) => eval(settings(name, a, &a.common, env_seed)?),
            Command::Plot(a) => plot_cmd(settings(name, a, &a.common, env_seed)?),
            Command::Selftest(a) => selftest(settings(name, a, &a.common, env_seed)?),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(bevloc::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

/// Input files given by the user must exist; reports a usage error otherwise.
fn existing<'a>(path: &'a Path, flag: &str) -> Result<&'a Path, CliError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::Usage(format!("--{flag} {} does not exist", path.display())))
    }
}

fn world_params(extent: f64) -> bevloc::synthworld::WorldParams {
    bevloc::synthworld::WorldParams {
        extent,
        ..Default::default()
    }
}

fn gen_world(s: GenWorldSettings) -> Result<(), CliError> {
    use bevloc::synthworld::{generate_world, WorldFile, WorldParams};
    let params = WorldParams {
        block_density: s.block_density,
        pole_density: s.pole_density,
        ..world_params(s.extent)
    };
    let world = generate_world(s.seed, &params)?;
    write_file(&s.out, WorldFile::to_json(&world).as_bytes())?;
    println!(
        "wrote {} ({} obstacles, seed {})",
        s.out.display(),
        world.obstacles.len(),
        s.seed
    );
    Ok(())
}

fn gen_data(s: GenDataSettings) -> Result<(), CliError> {
    use bevloc::synthworld::{generate_world, Dataset, ScanConfig, TrajectoryParams, WorldFile};
    let world = match &s.world {
        Some(p) => {
            let p = existing(p, "world")?;
            WorldFile::parse(&fs::read_to_string(p).map_err(|e| io_err(p, e))?)?
        }
        None => generate_world(s.world_seed, &world_params(s.extent))?,
    };
    let traj = TrajectoryParams {
        frames: s.frames,
        speed: s.speed,
        reverse: s.reverse,
        weave: s.weave,
    };
    let scan = ScanConfig {
        beams: s.beams,
        max_range: s.max_range,
        range_noise_std: s.range_noise_std,
        dropout_prob: s.dropout_prob,
        ..ScanConfig::default()
    };
    let ds = Dataset::generate(&world, &traj, &scan, s.seed, bevloc::seed::derive(s.seed, &[1]))?;
    ds.write(&s.out)?;
    println!(
        "wrote {} frames ({} points) to {}",
        ds.meta.frame_count,
        ds.meta.point_count,
        s.out.display()
    );
    Ok(())
}

fn load_dataset(path: &Option<PathBuf>) -> Result<bevloc::synthworld::Dataset, CliError> {
    let dir = existing(required(path, "data")?, "data")?;
    Ok(bevloc::synthworld::Dataset::load(dir)?)
}

fn make_bev(s: MakeBevSettings) -> Result<(), CliError> {
    use bevloc::bev::BevConfig;
    let ds = load_dataset(&s.data)?;
    let cfg = BevConfig {
        half_window: s.half_window,
        grid_resolution: s.grid_resolution,
        density_clamp: s.density_clamp,
        output_side: s.output_side,
        z_range: None,
    };
    cfg.validate()?;
    let images = bevloc::pipeline::render_frames(&ds.frames, &cfg)?;
    create_dir(&s.out)?;
    for (f, img) in ds.frames.iter().zip(&images) {
        img.write_f32(&s.out.join(format!("{:06}.f32", f.frame_id)))?;
        if s.png {
            img.write_png(&s.out.join(format!("{:06}.png", f.frame_id)))?;
        }
    }
    println!(
        "wrote {} BEV images of {}x{} to {}",
        images.len(),
        cfg.output_side,
        cfg.output_side,
        s.out.display()
    );
    Ok(())
}

fn train(s: TrainSettings) -> Result<(), CliError> {
    use bevloc::diffusion::PoseNormalizer;
    use bevloc::pipeline::{LocModel, ModelConfig, TrainConfig, TrainOptions};
    let ds = load_dataset(&s.data)?;
    let (mut model_cfg, mut tc) = match s.preset {
        Preset::Full => (ModelConfig::default(), TrainConfig::default()),
        Preset::Desk => (ModelConfig::desk(), TrainConfig::desk()),
    };
    if let Some(p) = &s.model_config {
        let p = existing(p, "model-config")?;
        let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
        model_cfg =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("model config {}: {e}", p.display())))?;
    }
    let set = |dst: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    set(&mut tc.epochs, s.epochs);
    set(&mut tc.batch_size, s.batch_size);
    set(&mut tc.warmup_epochs, s.warmup_epochs);
    set(&mut tc.tuple_spacing, s.tuple_spacing);
    set(&mut tc.anchor_stride, s.anchor_stride);
    tc.peak_lr = s.peak_lr.unwrap_or(tc.peak_lr);
    tc.weight_decay = s.weight_decay.unwrap_or(tc.weight_decay);
    tc.augment.apply_probability = s.augment_prob.unwrap_or(tc.augment.apply_probability);
    tc.augment.offset_std = s.offset_std.unwrap_or(tc.augment.offset_std);
    tc.seed = s.seed;
    tc.tuple_len = model_cfg.denoiser.sequence_len;
    model_cfg
        .validate()
        .and_then(|_| tc.validate())
        .map_err(|e| CliError::Usage(e.to_string()))?;
    log::info!(
        "model config: {}",
        serde_json::to_string(&model_cfg).expect("config serializes")
    );
    log::info!(
        "train config: {}",
        serde_json::to_string(&tc).expect("config serializes")
    );

    let mut model = LocModel::new(&model_cfg, PoseNormalizer::fit(&ds.poses())?, s.seed)?;
    let diagnostic = s
        .diagnostic
        .clone()
        .unwrap_or_else(|| s.out.with_extension("diag.bvdl"));
    if let Some(dir) = s.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let opts = TrainOptions {
        checkpoint: Some(s.out.clone()),
        diagnostic: Some(diagnostic),
    };
    let summary = bevloc::pipeline::train(&mut model, &ds, &tc, &opts)?;
    println!(
        "trained {} epochs ({} steps), final loss {:.5}; checkpoint {}",
        tc.epochs,
        summary.steps,
        summary.loss_history.last().copied().unwrap_or(f64::NAN),
        s.out.display()
    );
    Ok(())
}

fn eval(s: EvalSettings) -> Result<(), CliError> {
    use bevloc::pipeline::{evaluate, Checkpoint, EvalOptions, SuccessThresholds};
    let ckpt_path = existing(required(&s.checkpoint, "checkpoint")?, "checkpoint")?;
    let ck = Checkpoint::load(ckpt_path)?;
    let model = ck.to_model()?;
    let ds = load_dataset(&s.data)?;
    let spacing = s
        .tuple_spacing
        .or(ck.header.train.as_ref().map(|t| t.tuple_spacing))
        .unwrap_or(EvalOptions::default().tuple_spacing);
    let opts = EvalOptions {
        steps: s.steps,
        seed: s.seed,
        tuple_spacing: spacing,
        thresholds: SuccessThresholds {
            trans_m: s.sr_trans,
            yaw_deg: s.sr_yaw,
        },
    };
    let report = evaluate(&model, &ds, &opts)?;
    create_dir(&s.out)?;
    write_file(&s.out.join("report.json"), report.to_json().as_bytes())?;
    write_file(&s.out.join("per_frame.csv"), report.to_csv().as_bytes())?;
    println!(
        "{} frames: e_t {:.3} m, e_y {:.3} deg, SR {:.1}% (< {} m, < {} deg), median e_t {:.3} m, median e_y {:.3} deg, {:.1} Hz; wrote {}",
        report.frame_count,
        report.e_t,
        report.e_y,
        report.sr,
        s.sr_trans,
        s.sr_yaw,
        report.median_e_t,
        report.median_e_y,
        report.hz,
        s.out.display()
    );
    Ok(())
}

fn plot_cmd(s: PlotSettings) -> Result<(), CliError> {
    use bevloc::pipeline::EvalReport;
    let path = existing(required(&s.per_frame, "per-frame")?, "per-frame")?;
    if !(s.yaw_cap.is_finite() && s.yaw_cap > 0.0) {
        return Err(CliError::Usage(format!("--yaw-cap must be > 0, got {}", s.yaw_cap)));
    }
    let frames = EvalReport::parse_csv(&fs::read_to_string(path).map_err(|e| io_err(path, e))?)?;
    create_dir(&s.out)?;
    let figures = [
        ("trajectory", plot::trajectory_marks(&frames)),
        ("yaw_heatmap", plot::yaw_heatmap_marks(&frames, s.yaw_cap)),
    ];
    for (name, marks) in &figures {
        if matches!(s.format, FigureFormat::Svg | FigureFormat::Both) {
            let svg = plot::render_svg(marks, plot::WIDTH, plot::HEIGHT);
            write_file(&s.out.join(format!("{name}.svg")), svg.as_bytes())?;
        }
        if matches!(s.format, FigureFormat::Png | FigureFormat::Both) {
            let png = plot::render_png(marks, plot::WIDTH, plot::HEIGHT);
            write_file(&s.out.join(format!("{name}.png")), &png)?;
        }
    }
    println!("plotted {} frames to {}", frames.len(), s.out.display());
    Ok(())
}

fn selftest(s: SelftestSettings) -> Result<(), CliError> {
    use bevloc::invariants::{run_suite, SuiteScale};
    let scale = if s.full {
        SuiteScale::full()
    } else {
        SuiteScale::quick()
    };
    let checks = run_suite(&scale, s.seed);
    for c in &checks {
        println!("{}", c.line());
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} of {} checks failed", checks.len())));
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}
