//! Command-line entry points: train, render, eval, inspect.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use latent_splat::checkpoint::Checkpoint;
use latent_splat::colmap::init_cloud;
use latent_splat::config::{CliConfig, PoseSpec};
use latent_splat::dataset::{load_dataset, save_image, Dataset};
use latent_splat::losses::{psnr, ssim_metric};
use latent_splat::pipeline::{render_image, Model, RenderMode};
use latent_splat::scene::SH3_BASELINE_PARAMS;
use latent_splat::tensor::Tensor;
use latent_splat::trainer::Trainer;

#[derive(Parser)]
#[command(
    name = "latent-splat",
    about = "Latent-feature Gaussian splatting: train, render and evaluate scenes",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a scene from a COLMAP reconstruction.
    Train(TrainArgs),
    /// Render a view from a checkpoint.
    Render(RenderArgs),
    /// PSNR/SSIM over a dataset split.
    Eval(EvalArgs),
    /// Print checkpoint and cloud statistics.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// COLMAP dataset directory (expects sparse/0 and images/).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for checkpoint, metrics and config echo.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON config file; command-line flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Total optimization iterations.
    #[arg(long)]
    iters: Option<u64>,
    /// RNG seed for the whole run.
    #[arg(long)]
    seed: Option<u64>,
    /// Integer image downscale factor.
    #[arg(long)]
    downscale: Option<usize>,
    /// Diffuse latent channels per Gaussian.
    #[arg(long)]
    diffuse_dims: Option<usize>,
    /// Specular latent channels per Gaussian.
    #[arg(long)]
    specular_dims: Option<usize>,
    /// Ablation: skip the view-mask, composing diffuse + specular.
    #[arg(long)]
    no_mask: bool,
    /// Ablation: diffuse branch only.
    #[arg(long)]
    no_specular: bool,
    /// Ablation: per-Gaussian SH color splat instead of the specular net.
    #[arg(long)]
    sh_color_baseline: bool,
    /// Evaluate train-view metrics every N iterations.
    #[arg(long)]
    eval_interval: Option<u64>,
    /// Write a checkpoint every N iterations.
    #[arg(long)]
    checkpoint_interval: Option<u64>,
}

#[derive(Args)]
struct RenderArgs {
    /// Checkpoint file.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory providing camera poses.
    #[arg(long)]
    data: Option<PathBuf>,
    /// View index within the chosen split.
    #[arg(long)]
    view: Option<usize>,
    /// Which split `--view` indexes into.
    #[arg(long, default_value = "test")]
    split: String,
    /// Explicit camera pose JSON instead of a dataset view.
    #[arg(long)]
    pose: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Also write diffuse, specular, mask and gated-specular images.
    #[arg(long)]
    components: bool,
    /// Compose without the view-mask.
    #[arg(long)]
    no_mask: bool,
    /// Diffuse branch only.
    #[arg(long)]
    no_specular: bool,
    /// Integer image downscale factor (match the training run).
    #[arg(long, default_value_t = 1)]
    downscale: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// `test` (held-out) or `train`.
    #[arg(long, default_value = "test")]
    split: String,
    /// Write the per-view report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    downscale: usize,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
}

/// Errors carrying their process exit code: 2 for unusable input, 1 for
/// runtime failures.
enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}

fn main() -> ExitCode {
    latent_splat::configure_threads_from_env();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Render(args) => cmd_render(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Inspect(args) => cmd_inspect(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn effective_config(args: &TrainArgs) -> Result<CliConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => CliConfig::from_file(path).map_err(|e| usage(e.to_string()))?,
        None => CliConfig::default(),
    };
    if let Some(v) = &args.data {
        cfg.data = Some(v.clone());
    }
    if let Some(v) = &args.out {
        cfg.out = Some(v.clone());
    }
    if let Some(v) = args.iters {
        cfg.iterations = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.downscale {
        cfg.downscale = v;
    }
    if let Some(v) = args.diffuse_dims {
        cfg.diffuse_dims = v;
    }
    if let Some(v) = args.specular_dims {
        cfg.specular_dims = v;
    }
    if let Some(v) = args.eval_interval {
        cfg.eval_interval = v;
    }
    if let Some(v) = args.checkpoint_interval {
        cfg.checkpoint_interval = v;
    }
    cfg.no_mask |= args.no_mask;
    cfg.no_specular |= args.no_specular;
    cfg.sh_color_baseline |= args.sh_color_baseline;
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let cfg = effective_config(&args)?;
    let data = cfg
        .data
        .clone()
        .ok_or_else(|| usage("--data (or \"data\" in the config) is required"))?;
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| usage("--out (or \"out\" in the config) is required"))?;
    if cfg.diffuse_dims == 0 || cfg.specular_dims == 0 {
        return Err(usage("channel widths must be positive"));
    }

    let (dataset, recon) =
        load_dataset(&data, cfg.downscale).map_err(|e| usage(e.to_string()))?;
    std::fs::create_dir_all(&out).map_err(|e| usage(format!("cannot create {out:?}: {e}")))?;
    std::fs::write(out.join("config.json"), cfg.to_json())
        .map_err(|e| runtime(format!("writing config echo: {e}")))?;

    let mode = cfg.mode();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cloud =
        init_cloud(&recon.points, cfg.dims(), &mut rng).map_err(|e| usage(e.to_string()))?;
    let model = Model::new(cloud, mode, &mut rng);
    println!(
        "training {} Gaussians ({} views train / {} test, {:?})",
        model.cloud.len(),
        dataset.train_indices.len(),
        dataset.test_indices.len(),
        mode,
    );

    let mut trainer = Trainer::new(model, mode, cfg.train_config());
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = std::fs::File::create(&metrics_path)
        .map_err(|e| runtime(format!("creating {metrics_path:?}: {e}")))?;
    trainer
        .train(&dataset, Some(&out), |line| {
            use std::io::Write;
            let json = serde_json::to_string(line).expect("metrics line serializes");
            println!("{json}");
            let _ = writeln!(metrics, "{json}");
        })
        .map_err(|e| runtime(e.to_string()))?;
    println!(
        "done: {} Gaussians, checkpoint at {:?}",
        trainer.model.cloud.len(),
        out.join("ckpt.slgs")
    );
    Ok(())
}

fn load_split_dataset(
    data: &Path,
    split: &str,
    downscale: usize,
) -> Result<(Dataset, Vec<usize>), CliError> {
    let (dataset, _) = load_dataset(data, downscale).map_err(|e| usage(e.to_string()))?;
    let indices = match split {
        "test" => dataset.test_indices.clone(),
        "train" => dataset.train_indices.clone(),
        other => return Err(usage(format!("unknown split {other:?} (use test|train)"))),
    };
    Ok((dataset, indices))
}

fn render_mode(base: RenderMode, no_mask: bool, no_specular: bool) -> RenderMode {
    if no_specular {
        RenderMode::NoSpecular
    } else if no_mask && base == RenderMode::Full {
        RenderMode::NoMask
    } else {
        base
    }
}

fn cmd_render(args: RenderArgs) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&args.ckpt).map_err(|e| usage(e.to_string()))?;
    let view = match (&args.pose, &args.data) {
        (Some(pose), _) => PoseSpec::from_file(pose)
            .map_err(|e| usage(e.to_string()))?
            .to_view(),
        (None, Some(data)) => {
            let idx = args
                .view
                .ok_or_else(|| usage("--view is required with --data"))?;
            let (dataset, indices) = load_split_dataset(data, &args.split, args.downscale)?;
            let &view_idx = indices.get(idx).ok_or_else(|| {
                usage(format!(
                    "view {idx} out of range ({} {} views)",
                    indices.len(),
                    args.split
                ))
            })?;
            dataset.views[view_idx].clone()
        }
        (None, None) => return Err(usage("provide --pose or --data with --view")),
    };
    view.validate().map_err(|e| usage(e.to_string()))?;

    let mode = render_mode(ckpt.mode, args.no_mask, args.no_specular);
    let img = render_image(&ckpt.model, &view, mode).map_err(|e| runtime(e.to_string()))?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| usage(format!("cannot create {:?}: {e}", args.out)))?;
    let write = |name: &str, t: &Tensor| -> Result<(), CliError> {
        save_image(&args.out.join(name), t).map_err(|e| runtime(e.to_string()))
    };
    write("composed.png", &img.rgb)?;
    if args.components {
        write("diffuse.png", &img.diffuse)?;
        if let Some(spec) = &img.specular {
            write("specular.png", &spec.map(|v| v.clamp(0.0, 1.0)))?;
            if let Some(mask) = &img.mask {
                let gated = gate(spec, mask);
                write("specular_masked.png", &gated.map(|v| v.clamp(0.0, 1.0)))?;
                write("mask.png", &replicate_gray(mask))?;
            }
        }
    }
    println!("wrote {:?}", args.out.join("composed.png"));
    Ok(())
}

fn gate(spec: &Tensor, mask: &Tensor) -> Tensor {
    let hw = mask.numel();
    Tensor::from_fn(spec.shape(), |i| spec.data()[i] * mask.data()[i % hw])
}

fn replicate_gray(mask: &Tensor) -> Tensor {
    let (h, w) = (mask.shape()[1], mask.shape()[2]);
    Tensor::from_fn(&[3, h, w], |i| mask.data()[i % (h * w)].clamp(0.0, 1.0))
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&args.ckpt).map_err(|e| usage(e.to_string()))?;
    let (dataset, indices) = load_split_dataset(&args.data, &args.split, args.downscale)?;
    if indices.is_empty() {
        return Err(usage(format!("split {:?} has no views", args.split)));
    }
    let mut rows = Vec::new();
    let mut sum_psnr = 0.0f32;
    let mut sum_ssim = 0.0f32;
    println!("view  name                          psnr     ssim");
    for (pos, &i) in indices.iter().enumerate() {
        let rendered = render_image(&ckpt.model, &dataset.views[i], ckpt.mode)
            .map_err(|e| runtime(e.to_string()))?;
        let p = psnr(&rendered.rgb, &dataset.images[i]);
        let s = ssim_metric(&rendered.rgb, &dataset.images[i]);
        sum_psnr += p;
        sum_ssim += s;
        let name = dataset.views[i]
            .image_path
            .as_ref()
            .and_then(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("view_{i}"));
        println!("{pos:>4}  {name:<28}  {p:>6.2}  {s:>7.4}");
        rows.push(serde_json::json!({
            "index": pos,
            "name": name,
            "psnr": p,
            "ssim": s,
        }));
    }
    let n = indices.len() as f32;
    let (mean_psnr, mean_ssim) = (sum_psnr / n, sum_ssim / n);
    println!("mean  {:<28}  {mean_psnr:>6.2}  {mean_ssim:>7.4}", "");
    if let Some(out) = &args.out {
        let report = serde_json::json!({
            "split": args.split,
            "views": rows,
            "mean_psnr": mean_psnr,
            "mean_ssim": mean_ssim,
        });
        std::fs::write(out, serde_json::to_string_pretty(&report).unwrap())
            .map_err(|e| runtime(format!("writing {out:?}: {e}")))?;
    }
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&args.ckpt).map_err(|e| usage(e.to_string()))?;
    let model = &ckpt.model;
    let dims = model.dims();
    let n = model.cloud.len();
    println!("checkpoint           {:?}", args.ckpt);
    println!("iteration            {}", ckpt.iteration);
    println!("render mode          {:?}", ckpt.mode);
    println!("gaussians            {n}");
    println!(
        "latent channels      {} diffuse + {} specular",
        dims.diffuse, dims.specular
    );
    println!(
        "params per gaussian  {} (classic SH-3 baseline: {})",
        dims.params_per_gaussian(),
        SH3_BASELINE_PARAMS
    );
    let mut net_params = 0usize;
    let mut m = model.clone();
    let mut count = |_n: String, t: &mut Tensor| net_params += t.numel();
    m.shading.visit_params_mut(&mut count);
    m.unet.visit_params_mut(&mut count);
    m.cnn.visit_params_mut(&mut count);
    println!("network parameters   {net_params}");
    if n > 0 {
        let mut opac: Vec<f32> = model
            .cloud
            .gaussians
            .iter()
            .map(|g| latent_splat::scene::sigmoid(g.opacity_logit))
            .collect();
        opac.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mean: f32 = opac.iter().sum::<f32>() / n as f32;
        println!(
            "opacity              min {:.4}  median {:.4}  mean {:.4}  max {:.4}",
            opac[0],
            opac[n / 2],
            mean,
            opac[n - 1]
        );
        let mut scale: Vec<f32> = model
            .cloud
            .gaussians
            .iter()
            .map(|g| g.log_scale.map(f32::exp).max())
            .collect();
        scale.sort_by(|a, b| a.partial_cmp(b).unwrap());
        println!(
            "max scale            min {:.5}  median {:.5}  max {:.5}",
            scale[0],
            scale[n / 2],
            scale[n - 1]
        );
    }
    Ok(())
}
