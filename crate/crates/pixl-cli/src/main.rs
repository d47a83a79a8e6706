//! `pixl` — command-line front end for the relighting pipeline.
//!
//! Subcommands cover the full loop: `gen-data` renders a paired
//! multi-illumination dataset with intrinsic ground truth, `train` fits a
//! relighting model from a run-configuration file, `eval` scores a
//! checkpoint over every ordered pair of a dataset, `relight` applies a
//! checkpoint to one image under authored lights, and `augment-preview` /
//! `compose` expose the intermediate artifacts for inspection.
//!
//! Exit codes: 0 on success, 1 for user errors (bad flags, malformed files,
//! invalid configuration), 2 when an internal invariant is violated.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use pixl_core::augment::{augment_conditioning, AugmentConfig, RngStream, AUG_NAMES};
use pixl_core::imgcore::{self, ColorSpace, FloatBuffer, ImageRgb};
use pixl_core::intrinsics::{
    build_conditioning, passes_to_intrinsics, percentile_rescale, ConditioningStack,
    IntrinsicTriplet, RenderPasses,
};
use pixl_core::metrics;
use pixl_core::model::ModelConfig;
use pixl_core::scenegen::{self, DatasetParams};
use pixl_core::train::{self, TrainConfig, Trainer, METRICS_CSV_HEADER};

#[derive(Parser)]
#[command(
    name = "pixl",
    version,
    about = "Desk-scale intrinsic-conditioned single-image relighting",
    after_help = "Set PIXL_THREADS to cap worker parallelism; every built-in \
pipeline currently runs single-threaded for exact reproducibility, so any \
cap of 1 or more is honored as-is."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a paired multi-illumination dataset with intrinsic ground truth.
    GenData(GenDataArgs),
    /// Train a relighting model from a run-configuration file.
    Train(TrainArgs),
    /// Score a checkpoint over every ordered condition pair of a dataset.
    Eval(EvalArgs),
    /// Relight one image under an authored scene and lighting rig.
    Relight(RelightArgs),
    /// Render a before/after grid of the corruption pipeline on one stack.
    AugmentPreview(AugmentPreviewArgs),
    /// Compose named render passes into a triplet and conditioning stack.
    Compose(ComposeArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of procedural scenes.
    #[arg(long)]
    scenes: usize,
    /// Lighting conditions rendered per scene (pairing needs at least 2).
    #[arg(long)]
    conditions: usize,
    /// Master seed; the dataset is byte-identical per seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Square render resolution in pixels.
    #[arg(long, default_value_t = 128)]
    resolution: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Run-configuration TOML: [model], [train], and an output directory.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `pixl train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory to evaluate on.
    #[arg(long)]
    data: PathBuf,
    /// Destination of the per-pair CSV report.
    #[arg(long, default_value = "eval.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct RelightArgs {
    /// Checkpoint written by `pixl train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Source image (PNG, sRGB), dimensions matching the scene resolution.
    #[arg(long)]
    source: PathBuf,
    /// Scene description TOML (procedural seed or authored objects).
    #[arg(long)]
    scene: PathBuf,
    /// Target lighting TOML (one of preset, lights, or seed).
    #[arg(long)]
    lights: PathBuf,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AugmentPreviewArgs {
    /// Corruption seed; the preview is deterministic per seed.
    #[arg(long)]
    seed: u64,
    /// Directory holding a stored triplet (albedo/shading/residual PFMs).
    #[arg(long, value_name = "STACK")]
    r#in: PathBuf,
    /// Lighting condition index when the directory stores several.
    #[arg(long, default_value_t = 0)]
    condition: usize,
    /// Output PNG: clean stack on the top row, corrupted stack below.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ComposeArgs {
    /// Directory of render passes, one `<pass>.pfm` per name.
    #[arg(long)]
    passes: PathBuf,
    /// Output directory for the triplet and conditioning PFMs.
    #[arg(long)]
    out: PathBuf,
}

/// One structured file describes a full run. Unknown keys are rejected so a
/// typo fails before any compute starts.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
    /// Directory receiving the resolved config, metrics log, and checkpoint.
    output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            output: PathBuf::from("run"),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // `--help` and `--version` surface here as non-error displays.
            let code = u8::from(err.use_stderr());
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match panic::catch_unwind(AssertUnwindSafe(|| run(cli))) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
        Err(_) => {
            // the panic hook has already printed the offending message
            eprintln!("internal error: invariant violated");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let _workers = worker_cap()?;
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Relight(args) => cmd_relight(args),
        Command::AugmentPreview(args) => cmd_augment_preview(args),
        Command::Compose(args) => cmd_compose(args),
    }
}

/// `PIXL_THREADS` caps worker parallelism. Every pipeline here runs
/// single-threaded (determinism first), so the cap only needs validating:
/// any value of 1 or more is honored as-is.
fn worker_cap() -> Result<usize> {
    let Ok(raw) = std::env::var("PIXL_THREADS") else {
        return Ok(1);
    };
    match raw.trim().parse::<usize>() {
        Ok(n) if n >= 1 => Ok(n),
        _ => bail!("PIXL_THREADS must be a positive integer, got {raw:?}"),
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let params = DatasetParams {
        scenes: args.scenes,
        conditions: args.conditions,
        seed: args.seed,
        resolution: args.resolution,
    };
    let dataset = scenegen::generate_dataset(&params, &args.out, args.force)?;
    println!(
        "wrote {} scenes x {} conditions at {}x{} (seed {}) to {}",
        dataset.scene_ids.len(),
        dataset.conditions,
        dataset.resolution,
        dataset.resolution,
        dataset.seed,
        dataset.root.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("reading config {}", args.config.display()))?;
    let config: RunConfig = toml::from_str(&text)
        .with_context(|| format!("parsing config {}", args.config.display()))?;
    let dataset = scenegen::load_dataset(&config.train.dataset)
        .with_context(|| format!("loading dataset {}", config.train.dataset.display()))?;

    fs::create_dir_all(&config.output)?;
    // keep the fully-resolved configuration next to the artifacts it produces
    fs::write(config.output.join("config.toml"), toml::to_string_pretty(&config)?)?;

    let mut trainer = Trainer::new(&config.model, &config.train, dataset)?;
    let total = trainer.config.iterations;
    let checkpoint_path = config.output.join("checkpoint.bin");
    let log_path = config.output.join("log.csv");
    let print_every = (total / 20).max(1);
    let mut log = String::from(METRICS_CSV_HEADER);
    log.push('\n');

    while trainer.step < total {
        let m = trainer.train_step()?;
        log.push_str(&m.csv_row());
        log.push('\n');
        let done = m.step + 1;
        if done % print_every == 0 || done == total {
            println!(
                "step {done:>6}/{total}  loss {:.5}  l1 {:.5}  |g| {:.3}  lr {:.3e}",
                m.loss, m.l1, m.grad_norm, m.lr
            );
        }
        let interval = trainer.config.eval_interval;
        if interval > 0 && done % interval == 0 && done < total {
            trainer.save(&checkpoint_path)?;
            fs::write(&log_path, &log)?;
        }
    }
    trainer.save(&checkpoint_path)?;
    fs::write(&log_path, &log)?;
    println!("checkpoint: {}", checkpoint_path.display());
    println!("metrics log: {}", log_path.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (mut graph, model, _, _) = train::load_model(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let dataset = scenegen::load_dataset(&args.data)
        .with_context(|| format!("loading dataset {}", args.data.display()))?;
    let report = metrics::evaluate(&mut graph, &model, &dataset)?;
    report.write_csv(&args.out)?;
    print!("{}", report.summary_table());
    println!(
        "forward wall-clock: {:.4} s per image (mean of 5 runs after 2 warm-ups)",
        report.forward_seconds
    );
    println!("per-pair report: {}", args.out.display());
    Ok(())
}

fn cmd_relight(args: RelightArgs) -> Result<()> {
    let (mut graph, model, model_config, _) = train::load_model(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let source = imgcore::load_png(&args.source)
        .with_context(|| format!("loading source {}", args.source.display()))?;
    let scene = scenegen::load_scene_file(&args.scene)
        .with_context(|| format!("loading scene {}", args.scene.display()))?;
    let lights = scenegen::load_lights_file(&args.lights)
        .with_context(|| format!("loading lights {}", args.lights.display()))?;

    // The model sees the source image and the pass-derived conditioning
    // only; the target's beauty render is never composed here.
    let passes = scenegen::render_passes(&scene, &lights)?;
    let triplet = passes_to_intrinsics(&passes)?;
    let conditioning = conditioning_from_raw(&triplet)?;

    let (h, w) = (source.height(), source.width());
    let (ch, cw) = (conditioning.buffer().height(), conditioning.buffer().width());
    if (ch, cw) != (h, w) {
        bail!("scene renders at {ch}x{cw} but the source image is {h}x{w}");
    }
    let p = model_config.patch_size;
    if h % p != 0 || w % p != 0 {
        bail!("source dimensions {h}x{w} must be divisible by the patch size {p}");
    }

    let s = graph.input(source.into_buffer().to_array());
    let c = graph.input(conditioning.into_buffer().to_array());
    let out = model.forward(&mut graph, s, c);
    let image = ImageRgb::from_buffer(FloatBuffer::from_array(graph.value(out)), ColorSpace::Srgb);
    imgcore::save_png(&image, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

/// Normalize a triplet exactly as the dataset generator does before storing
/// it (joint 98th-percentile rescale of shading and residual), then stack
/// the conditioning. Stored dataset triplets pass through unchanged.
fn conditioning_from_raw(triplet: &IntrinsicTriplet) -> Result<ConditioningStack> {
    let (shading, residual) = percentile_rescale(&triplet.shading, &triplet.residual, 0.98, 1e-4)?;
    let rescaled = IntrinsicTriplet { albedo: triplet.albedo.clone(), shading, residual };
    Ok(build_conditioning(&rescaled)?)
}

fn cmd_augment_preview(args: AugmentPreviewArgs) -> Result<()> {
    let triplet = load_stored_triplet(&args.r#in, args.condition)?;
    let stack = conditioning_from_raw(&triplet)?;
    let stream = RngStream::new(args.seed);
    let (corrupted, trace) = augment_conditioning(&stack, &AugmentConfig::default(), &stream, 0);

    let grid = preview_grid(stack.buffer(), corrupted.buffer());
    imgcore::save_png(&ImageRgb::from_buffer(grid, ColorSpace::Srgb), &args.out)?;

    if trace.gate_fired {
        let fired: Vec<&str> = AUG_NAMES
            .iter()
            .zip(trace.fired)
            .filter_map(|(name, hit)| hit.then_some(*name))
            .collect();
        if fired.is_empty() {
            println!("corruptions: gate fired, none drawn");
        } else {
            println!("corruptions: {}", fired.join(", "));
        }
    } else {
        println!("corruptions: none (clean sample)");
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

/// Load a stored triplet from either a dataset scene directory
/// (`cond_<k>.shading.pfm` next to a shared `albedo.pfm`) or a `compose`
/// output directory (plain `shading.pfm` / `residual.pfm`).
fn load_stored_triplet(dir: &Path, condition: usize) -> Result<IntrinsicTriplet> {
    let per_condition = dir.join(format!("cond_{condition}.shading.pfm"));
    let (shading, residual) = if per_condition.exists() {
        (per_condition, dir.join(format!("cond_{condition}.residual.pfm")))
    } else {
        (dir.join("shading.pfm"), dir.join("residual.pfm"))
    };
    let load = |path: &Path| {
        imgcore::load_pfm(path).with_context(|| format!("loading {}", path.display()))
    };
    Ok(IntrinsicTriplet {
        albedo: load(&dir.join("albedo.pfm"))?,
        shading: load(&shading)?,
        residual: load(&residual)?,
    })
}

/// 2x3 panel grid: clean stack on top, corrupted below; columns are the
/// albedo, shading, and residual groups of the 9-channel stack.
fn preview_grid(before: &FloatBuffer, after: &FloatBuffer) -> FloatBuffer {
    let (h, w) = (before.height(), before.width());
    let mut grid = FloatBuffer::zeros(3, 2 * h, 3 * w);
    for (row, stack) in [before, after].into_iter().enumerate() {
        for group in 0..3 {
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        grid.set(c, row * h + y, group * w + x, stack.get(group * 3 + c, y, x));
                    }
                }
            }
        }
    }
    grid
}

const PASS_NAMES: [&str; 12] = [
    "diffuse_color",
    "diffuse_direct",
    "diffuse_indirect",
    "glossy_color",
    "glossy_direct",
    "glossy_indirect",
    "transmission_color",
    "transmission_direct",
    "transmission_indirect",
    "volume_direct",
    "volume_indirect",
    "emission",
];

fn cmd_compose(args: ComposeArgs) -> Result<()> {
    let load = |name: &str| -> Result<FloatBuffer> {
        let path = args.passes.join(format!("{name}.pfm"));
        imgcore::load_pfm(&path).with_context(|| format!("loading pass {}", path.display()))
    };
    let passes = RenderPasses {
        diffuse_color: load(PASS_NAMES[0])?,
        diffuse_direct: load(PASS_NAMES[1])?,
        diffuse_indirect: load(PASS_NAMES[2])?,
        glossy_color: load(PASS_NAMES[3])?,
        glossy_direct: load(PASS_NAMES[4])?,
        glossy_indirect: load(PASS_NAMES[5])?,
        transmission_color: load(PASS_NAMES[6])?,
        transmission_direct: load(PASS_NAMES[7])?,
        transmission_indirect: load(PASS_NAMES[8])?,
        volume_direct: load(PASS_NAMES[9])?,
        volume_indirect: load(PASS_NAMES[10])?,
        emission: load(PASS_NAMES[11])?,
    };
    let triplet = passes_to_intrinsics(&passes)?;
    fs::create_dir_all(&args.out)?;
    imgcore::save_pfm(&triplet.albedo, &args.out.join("albedo.pfm"))?;
    imgcore::save_pfm(&triplet.shading, &args.out.join("shading.pfm"))?;
    imgcore::save_pfm(&triplet.residual, &args.out.join("residual.pfm"))?;

    let stack = conditioning_from_raw(&triplet)?;
    let groups = ["conditioning_albedo", "conditioning_shading", "conditioning_residual"];
    for (group, name) in groups.iter().enumerate() {
        let panel = stack_group(stack.buffer(), group);
        imgcore::save_pfm(&panel, &args.out.join(format!("{name}.pfm")))?;
    }
    println!("wrote triplet and conditioning to {}", args.out.display());
    Ok(())
}

/// Extract one 3-channel group of a 9-channel conditioning stack.
fn stack_group(stack: &FloatBuffer, group: usize) -> FloatBuffer {
    let plane = stack.height() * stack.width();
    let start = group * 3 * plane;
    FloatBuffer::new(
        3,
        stack.height(),
        stack.width(),
        stack.data()[start..start + 3 * plane].to_vec(),
    )
}
