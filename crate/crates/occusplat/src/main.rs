//! Command-line front end: generate synthetic datasets, convert occupancy
//! grids into an initial scene, train, render, and evaluate.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;

use occusplat::geom::RotationConvention;
use occusplat::harness::{self, SynthConfig};
use occusplat::io;
use occusplat::occupancy::{
    associate_tracks, classify_dynamic, extract_objects, semantic_argmax, threshold_occupancy,
    OccupancyConfig,
};
use occusplat::optim::{
    self, interpolate_holdout_deltas, is_holdout, train, FrameSample, TrainConfig, TrainEvent,
};
use occusplat::render::{render_assembled, RenderOptions};
use occusplat::scene::{assemble, scene_from_occupancy, InitConfig, SceneModel};
use occusplat::Result;

#[derive(Parser)]
#[command(name = "occusplat", version, about = "Occupancy-initialized Gaussian splatting for driving scenes")]
struct Cli {
    /// Size of the rayon thread pool (default: number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (images, grids, masks, manifest).
    Synth(SynthArgs),
    /// Build an initial scene checkpoint from a dataset's occupancy grids.
    Convert(ConvertArgs),
    /// Optimize a scene checkpoint against a dataset.
    Train(TrainArgs),
    /// Render every dataset view from a checkpoint.
    Render(RenderArgs),
    /// Evaluate a checkpoint: PSNR, masked vehicle PSNR, trajectory error.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    output: PathBuf,
    /// JSON config overriding the synthetic-scene defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// RNG seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Frame count (overrides the config file).
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Args)]
struct ConvertArgs {
    /// Input dataset directory (must contain manifest.json).
    #[arg(long)]
    input: PathBuf,
    /// Output checkpoint directory.
    #[arg(long)]
    output: PathBuf,
    /// JSON config overriding grid-pipeline and initialization defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Input dataset directory.
    #[arg(long)]
    input: PathBuf,
    /// Initial scene checkpoint directory (from `convert`).
    #[arg(long)]
    model: PathBuf,
    /// Output run directory (metrics.csv, checkpoints).
    #[arg(long)]
    output: PathBuf,
    /// JSON config overriding training defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Iteration count (overrides the config file).
    #[arg(long)]
    iterations: Option<usize>,
    /// RNG seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RenderArgs {
    /// Scene checkpoint directory.
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory providing the cameras.
    #[arg(long)]
    input: PathBuf,
    /// Output directory for rendered PNGs.
    #[arg(long)]
    output: PathBuf,
    /// Comma-separated frame indices (default: all).
    #[arg(long, value_delimiter = ',')]
    frames: Option<Vec<usize>>,
}

#[derive(Args)]
struct EvalArgs {
    /// Scene checkpoint directory.
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory with ground-truth images.
    #[arg(long)]
    input: PathBuf,
    /// Output JSON report path.
    #[arg(long)]
    output: PathBuf,
    /// Holdout stride used during training (frame % n == 0 is holdout).
    #[arg(long, default_value_t = 8)]
    holdout_every: usize,
}

/// Convert-stage config file: grid pipeline, initialization, and the
/// vehicle-pose rotation convention (`composed` or `literal`).
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(default)]
struct ConvertConfig {
    occupancy: OccupancyConfig,
    init: InitConfig,
    rotation_convention: String,
}

/// Train-stage config file: optimizer settings plus renderer options.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(default)]
struct TrainFileConfig {
    train: TrainConfig,
    render: RenderOptions,
}

fn load_config<T: serde::de::DeserializeOwned + Default>(path: Option<&PathBuf>) -> Result<T> {
    match path {
        Some(p) => io::read_json(p),
        None => Ok(T::default()),
    }
}

fn parse_convention(s: &str) -> Result<RotationConvention> {
    match s {
        "" | "composed" => Ok(RotationConvention::Composed),
        "literal" => Ok(RotationConvention::Literal),
        other => Err(occusplat::Error::InvalidArgument(format!(
            "unknown rotation convention {:?} (expected composed or literal)",
            other
        ))),
    }
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = load_config(args.config.as_ref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(frames) = args.frames {
        cfg.frames = frames;
    }
    let synth = harness::make_synthetic(&cfg)?;
    let manifest = io::save_synthetic_dataset(&args.output, &synth)?;
    println!(
        "wrote {} frames ({} gaussians ground truth) to {}",
        synth.cameras.len(),
        synth.model.total_gaussians(),
        manifest.display()
    );
    Ok(())
}

fn run_convert(args: &ConvertArgs) -> Result<()> {
    let cfg: ConvertConfig = load_config(args.config.as_ref())?;
    let convention = parse_convention(&cfg.rotation_convention)?;
    let manifest = io::load_dataset_manifest(&args.input)?;
    let frames = io::load_frames(&args.input, &manifest)?;
    let grids = io::load_grids(&args.input, &manifest)?;
    let cameras: Vec<_> = frames.iter().map(|f| f.camera.clone()).collect();
    let images: Vec<_> = frames.iter().map(|f| f.image.clone()).collect();
    let sfm = manifest
        .sfm_points
        .as_ref()
        .map(|p| io::read_ply_points(&args.input.join(p)))
        .transpose()?;
    let model = scene_from_occupancy(
        &grids,
        &cameras,
        &images,
        sfm.as_ref(),
        &cfg.occupancy,
        &cfg.init,
        manifest.num_classes,
        manifest.vehicle_class,
        convention,
    )?;
    io::save_checkpoint(&args.output, &model)?;
    // Re-derive the object tracks for inspection alongside the checkpoint.
    let vehicle_classes = [manifest.vehicle_class];
    let per_frame: Vec<_> = grids
        .iter()
        .map(|g| {
            let occupied = threshold_occupancy(g, cfg.occupancy.tau);
            let labels = semantic_argmax(g);
            (g.frame_index, extract_objects(g, &occupied, &labels, &vehicle_classes))
        })
        .collect();
    let mut tracks = associate_tracks(&per_frame, cfg.occupancy.match_radius);
    for t in tracks.iter_mut() {
        t.dynamic = classify_dynamic(t, cfg.occupancy.mu_th);
    }
    io::write_tracks_json(&args.output.join("tracks.json"), &tracks)?;
    println!(
        "initialized {} street gaussians, {} vehicles -> {}",
        model.street.len(),
        model.vehicles.len(),
        args.output.display()
    );
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let mut cfg: TrainFileConfig = load_config(args.config.as_ref())?;
    if let Some(iters) = args.iterations {
        cfg.train.iterations = iters;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let manifest = io::load_dataset_manifest(&args.input)?;
    let data = io::load_frames(&args.input, &manifest)?;
    let mut model = io::load_checkpoint(&args.model)?;
    if args.config.is_none() {
        cfg.render.background = manifest.background;
    }
    std::fs::create_dir_all(&args.output)
        .map_err(|e| occusplat::Error::io(&args.output, e))?;
    let ckpt_root = args.output.join("checkpoints");
    let rows = train(&mut model, &data, &cfg.train, &cfg.render, |event, m| {
        match event {
            TrainEvent::Metrics(row) => {
                println!("{}", io::format_metrics_row(row));
            }
            TrainEvent::Checkpoint { iteration } => {
                io::save_checkpoint(&ckpt_root.join(format!("iter_{:06}", iteration)), m)?;
            }
        }
        Ok(())
    })?;
    io::write_metrics_csv(&args.output.join("metrics.csv"), &rows)?;
    io::save_checkpoint(&args.output.join("final"), &model)?;
    println!(
        "trained {} iterations, {} gaussians -> {}",
        cfg.train.iterations,
        model.total_gaussians(),
        args.output.display()
    );
    Ok(())
}

fn render_opts_for(manifest: &io::DatasetManifest) -> RenderOptions {
    RenderOptions {
        background: manifest.background,
        ..Default::default()
    }
}

fn render_frame(
    model: &SceneModel,
    sample: &FrameSample,
    opts: &RenderOptions,
) -> Result<occusplat::image_buf::Image> {
    let scene = assemble(
        &model.street,
        &model.vehicles,
        sample.frame,
        model.frame_count,
        model.rotation_convention,
    );
    Ok(render_assembled(&scene, &sample.camera, opts)?.rgb)
}

fn run_render(args: &RenderArgs) -> Result<()> {
    let manifest = io::load_dataset_manifest(&args.input)?;
    let data = io::load_frames(&args.input, &manifest)?;
    let model = io::load_checkpoint(&args.model)?;
    let opts = render_opts_for(&manifest);
    std::fs::create_dir_all(&args.output)
        .map_err(|e| occusplat::Error::io(&args.output, e))?;
    let mut rendered = 0usize;
    for sample in &data {
        if let Some(wanted) = &args.frames {
            if !wanted.contains(&sample.frame) {
                continue;
            }
        }
        let img = render_frame(&model, sample, &opts)?;
        io::write_png(
            &args.output.join(format!("frame_{:04}.png", sample.frame)),
            &img,
        )?;
        rendered += 1;
    }
    println!("rendered {} frames -> {}", rendered, args.output.display());
    Ok(())
}

#[derive(serde::Serialize)]
struct EvalFrame {
    frame: usize,
    holdout: bool,
    psnr: f64,
    psnr_vehicle: Option<f64>,
}

#[derive(serde::Serialize)]
struct EvalReport {
    psnr_mean: f64,
    psnr_holdout_mean: f64,
    trajectory_error: Option<f64>,
    gaussian_count: usize,
    frames: Vec<EvalFrame>,
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let manifest = io::load_dataset_manifest(&args.input)?;
    let data = io::load_frames(&args.input, &manifest)?;
    let model = io::load_checkpoint(&args.model)?;
    let eval_model = interpolate_holdout_deltas(&model, args.holdout_every);
    let opts = render_opts_for(&manifest);
    let mut frames = Vec::new();
    let mut sum = 0.0;
    let mut holdout_sum = 0.0;
    let mut holdout_count = 0usize;
    for (entry, sample) in manifest.frames.iter().zip(data.iter()) {
        let img = render_frame(&eval_model, sample, &opts)?;
        let psnr = harness::psnr(&img, &sample.image)?;
        let psnr_vehicle = entry
            .vehicle_mask
            .as_ref()
            .map(|m| -> Result<f64> {
                let (mask, _, _) = io::read_mask_png(&args.input.join(m))?;
                harness::psnr_dym(&img, &sample.image, &mask)
            })
            .transpose()?;
        let holdout = is_holdout(sample.frame, args.holdout_every);
        sum += psnr;
        if holdout {
            holdout_sum += psnr;
            holdout_count += 1;
        }
        frames.push(EvalFrame {
            frame: sample.frame,
            holdout,
            psnr,
            psnr_vehicle,
        });
    }
    let trajectory_error = manifest.gt_trajectory.as_ref().and_then(|gt| {
        if eval_model.vehicles.is_empty() {
            return None;
        }
        let gt: Vec<(usize, Vector3<f64>)> = gt
            .iter()
            .map(|r| (r[0] as usize, Vector3::new(r[1], r[2], r[3])))
            .collect();
        let recon = optim::vehicle_trajectory(&eval_model, 0);
        Some(harness::trajectory_error(&recon, &gt))
    });
    let report = EvalReport {
        psnr_mean: sum / frames.len().max(1) as f64,
        psnr_holdout_mean: if holdout_count > 0 {
            holdout_sum / holdout_count as f64
        } else {
            f64::NAN
        },
        trajectory_error,
        gaussian_count: model.total_gaussians(),
        frames,
    };
    io::write_json(&args.output, &report)?;
    println!(
        "psnr mean {:.3} dB, holdout {:.3} dB{} -> {}",
        report.psnr_mean,
        report.psnr_holdout_mean,
        report
            .trajectory_error
            .map(|e| format!(", trajectory error {:.4} m", e))
            .unwrap_or_default(),
        args.output.display()
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| occusplat::Error::InvalidArgument(format!("thread pool: {}", e)))?;
    }
    match &cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Convert(a) => run_convert(a),
        Command::Train(a) => run_train(a),
        Command::Render(a) => run_render(a),
        Command::Eval(a) => run_eval(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}
