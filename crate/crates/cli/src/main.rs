mod config;

use clap::{ArgGroup, Args, Parser, Subcommand};
use config::{format_windows, parse_shape, FileConfig};
use im2grid::gradsuite;
use im2grid_metrics::{evaluate_pair, format_report, joint_vocabulary, mean_dice};
use im2grid::model::Im2Grid;
use im2grid_synth::seeded_pair;
use im2grid_train::{self as train, PairSource, SynthBlobs, SynthShift, TrainConfig, VolumeDir};
use im2grid_volume_io::{self as volume_io, Overlay, SliceSpec};
use im2grid::{Error, Tensor32};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "im2grid", version, about = "Deformable registration with coarse-to-fine Coordinate Translators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write `loss.tsv` and `checkpoint.igck` to the output directory.
    Train(TrainArgs),
    /// Register a moving image to a fixed image with a trained checkpoint.
    Register(RegisterArgs),
    /// Report Dice, Jacobian statistics and HD95 for a sampling grid.
    Eval(EvalArgs),
    /// Write a synthetic image pair with labels and its ground-truth grid.
    Synth(SynthArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Export per-level warped images and deformed-grid overlays as PGM.
    Visualize(VisualizeArgs),
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("source").required(true).args(["synth_shift", "synth_blobs", "data"])))]
struct TrainArgs {
    /// Random blob scenes under random global shifts.
    #[arg(long)]
    synth_shift: bool,
    /// Random blob scenes under random smooth deformations.
    #[arg(long)]
    synth_blobs: bool,
    /// Directory of `.vol` images; pairs are drawn at random.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// TOML file with any of: seed, variant, levels, lambda, lr, iters,
    /// window, out_dir, weight_decay, final_lr_fraction, augment,
    /// checkpoint_every. Command-line flags take precedence.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// `full` or `lite`.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    levels: Option<usize>,
    /// Weight of the smoothness term.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    /// Per-level window half-widths, finest first, e.g. `1,1,0;1,1,1;1,1,1`.
    #[arg(long)]
    window: Option<String>,
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Learning rate at the last iteration as a fraction of `--lr`.
    #[arg(long)]
    final_lr_fraction: Option<f64>,
    /// Random axis flips of each training pair.
    #[arg(long)]
    augment: Option<bool>,
    /// Also keep `checkpoint_<iter>.igck` every this many iterations.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Image extents of synthetic data, e.g. `64x64` or `32x32x32`.
    #[arg(long, default_value = "64x64")]
    shape: String,
    /// Blobs per synthetic scene.
    #[arg(long, default_value_t = 6)]
    blobs: usize,
    /// Upper bound of the synthetic deformation amplitude in voxels.
    #[arg(long, default_value_t = 3.0)]
    amplitude: f64,
    /// Sinusoid frequency of the synthetic deformation.
    #[arg(long, default_value_t = 1.0)]
    frequency: f64,
    /// Largest per-axis shift for `--synth-shift`, in voxels.
    #[arg(long, default_value_t = 2.0)]
    max_shift: f64,
    /// Print a progress line every this many iterations (0 disables).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args, Debug)]
struct RegisterArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "FILE")]
    fixed: PathBuf,
    #[arg(long, value_name = "FILE")]
    moving: PathBuf,
    /// Destination of the warped moving image (`.vol`).
    #[arg(long, value_name = "FILE")]
    warped: PathBuf,
    /// Destination of the final sampling grid (`.grid`).
    #[arg(long, value_name = "FILE")]
    grid: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    grid: PathBuf,
    #[arg(long, value_name = "FILE")]
    fixed_labels: PathBuf,
    #[arg(long, value_name = "FILE")]
    moving_labels: PathBuf,
    /// Row name in the report.
    #[arg(long, default_value = "pair")]
    pair_id: String,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "64x64")]
    shape: String,
    #[arg(long, default_value_t = 4)]
    blobs: usize,
    /// Deformation amplitude in voxels.
    #[arg(long, default_value_t = 3.0)]
    amplitude: f64,
    #[arg(long, default_value_t = 1.0)]
    frequency: f64,
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run only the cases whose name contains this string.
    #[arg(long)]
    only: Option<String>,
}

#[derive(Args, Debug)]
struct VisualizeArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "FILE")]
    fixed: PathBuf,
    #[arg(long, value_name = "FILE")]
    moving: PathBuf,
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Export only this pyramid level (1 is the finest).
    #[arg(long)]
    level: Option<usize>,
    /// Overlay line spacing in voxels.
    #[arg(long, default_value_t = 4)]
    spacing: usize,
    /// Slice axis for 3-D images.
    #[arg(long, default_value_t = 2)]
    slice_axis: usize,
    /// Slice index for 3-D images; defaults to the middle slice.
    #[arg(long)]
    slice_index: Option<usize>,
}

/// Ways a command can fail, each with its own exit status.
#[derive(Debug)]
enum Failure {
    /// Bad flags, unreadable or incompatible files.
    Usage(String),
    /// Training produced non-finite values.
    Numerical(String),
    /// The gradient suite found a mismatch.
    Check(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Numerical(_) => Failure::Numerical(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

impl From<String> for Failure {
    fn from(s: String) -> Self {
        Failure::Usage(s)
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Register(a) => cmd_register(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Visualize(a) => cmd_visualize(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Numerical(m) => eprintln!("{m}"),
                Failure::Check(m) => eprintln!("gradcheck failed: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}

/// The one-line configuration every command prints before doing any work.
fn print_resolved(seed: Option<u64>, variant: Option<String>, lambda: Option<f64>, windows: Option<String>, extra: &str) {
    let show = |v: Option<String>| v.unwrap_or_else(|| "-".into());
    println!(
        "config: seed={} variant={} lambda={} windows={}{}{}",
        show(seed.map(|s| s.to_string())),
        show(variant),
        show(lambda.map(|l| l.to_string())),
        show(windows),
        if extra.is_empty() { "" } else { " " },
        extra
    );
}

fn print_train_config(cfg: &TrainConfig, ndim: usize, source: &str) {
    let model_cfg = cfg.model_config(ndim);
    print_resolved(
        Some(cfg.seed),
        Some(cfg.variant.to_string()),
        Some(cfg.lambda),
        Some(format_windows(&model_cfg.windows)),
        &format!(
            "levels={} lr={} iters={} weight_decay={} final_lr_fraction={} augment={} out_dir={} data={source}",
            cfg.levels,
            cfg.lr,
            cfg.iterations,
            cfg.weight_decay,
            cfg.final_lr_fraction,
            cfg.augment,
            cfg.out_dir.as_deref().unwrap_or(Path::new("-")).display()
        ),
    );
}

fn print_model_config(model: &Im2Grid<f32>) {
    print_resolved(
        None,
        Some(model.config.variant.to_string()),
        None,
        Some(format_windows(&model.config.windows)),
        &format!("levels={}", model.config.levels()),
    );
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let file = match &a.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let cli = FileConfig {
        seed: a.seed,
        variant: a.variant.clone(),
        levels: a.levels,
        lambda: a.lambda,
        lr: a.lr,
        iters: a.iters,
        window: a.window.clone(),
        out_dir: a.out_dir.clone(),
        weight_decay: a.weight_decay,
        final_lr_fraction: a.final_lr_fraction,
        augment: a.augment,
        checkpoint_every: a.checkpoint_every,
    };
    let cfg = cli.over(file).resolve()?;
    let mut source: Box<dyn PairSource<f32>> = if let Some(dir) = &a.data {
        Box::new(VolumeDir::<f32>::open(dir)?)
    } else {
        let shape = parse_shape(&a.shape)?;
        if a.synth_shift {
            Box::new(SynthShift { shape, n_blobs: a.blobs, max_shift: a.max_shift })
        } else {
            Box::new(SynthBlobs { shape, n_blobs: a.blobs, amplitude: a.amplitude, frequency: a.frequency })
        }
    };
    print_train_config(&cfg, source.spatial().len(), &source.describe());
    let log_every = a.log_every;
    let outcome = train::train_with_hook(source.as_mut(), &cfg, &mut |r, _| {
        if log_every > 0 && (r.iter + 1) % log_every == 0 {
            println!("iter {:>6}  sim {:.6}  smooth {:.6}  total {:.6}", r.iter + 1, r.similarity, r.smoothness, r.total);
        }
        Ok(())
    })?;
    let dir = cfg.out_dir.as_deref().expect("resolved config has an output directory");
    println!(
        "trained {} iterations; wrote {} and {}",
        outcome.losses.len(),
        dir.join("loss.tsv").display(),
        dir.join("checkpoint.igck").display()
    );
    Ok(())
}

/// Load a checkpoint and the image pair it will be applied to, checking that they fit.
fn load_model_and_pair(checkpoint: &Path, fixed: &Path, moving: &Path) -> Result<(Im2Grid<f32>, Tensor32, Tensor32), Failure> {
    let (model, _) = train::load_checkpoint(checkpoint)?;
    print_model_config(&model);
    let f = volume_io::read_image::<f32>(fixed)?;
    let m = volume_io::read_image::<f32>(moving)?;
    if f.shape() != m.shape() {
        return Err(Failure::Usage(format!("fixed image {:?} and moving image {:?} differ in shape", f.spatial(), m.spatial())));
    }
    model
        .config
        .encoder
        .check_extents(f.spatial())
        .map_err(|e| Failure::Usage(format!("checkpoint {} does not fit images of shape {:?}: {e}", checkpoint.display(), f.spatial())))?;
    Ok((model, f, m))
}

fn mse(a: &Tensor32, b: &Tensor32) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.numel() as f64
}

fn cmd_register(a: RegisterArgs) -> CliResult {
    let (model, fixed, moving) = load_model_and_pair(&a.checkpoint, &a.fixed, &a.moving)?;
    let reg = model.register(&fixed, &moving)?;
    volume_io::write_image(&a.warped, &reg.warped)?;
    volume_io::write_grid(&a.grid, &reg.final_grid)?;
    let (neg, frac) = reg.final_grid.neg_jacobian_stats()?;
    println!(
        "wrote {} and {}; max deviation from identity {:.4e}; negative Jacobians {neg} ({:.3}%)",
        a.warped.display(),
        a.grid.display(),
        reg.final_grid.max_identity_deviation(),
        100.0 * frac
    );
    println!("mse: unregistered {:.6e} registered {:.6e}", mse(&moving, &fixed), mse(&reg.warped, &fixed));
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    print_resolved(None, None, None, None, "");
    let grid = volume_io::read_grid::<f64>(&a.grid)?;
    let fixed = volume_io::read_labels(&a.fixed_labels)?;
    let moving = volume_io::read_labels(&a.moving_labels)?;
    let row = evaluate_pair(&a.pair_id, &grid, &fixed, &moving)?;
    print!("{}", format_report(&[row]));
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CliResult {
    let shape = parse_shape(&a.shape)?;
    print_resolved(
        Some(a.seed),
        None,
        None,
        None,
        &format!("shape={} blobs={} amplitude={} frequency={}", a.shape, a.blobs, a.amplitude, a.frequency),
    );
    let pair = seeded_pair::<f32>(a.seed, &shape, a.blobs, a.amplitude, a.frequency)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| format!("cannot create {}: {e}", a.out_dir.display()))?;
    let dir = &a.out_dir;
    volume_io::write_image(&dir.join("fixed.vol"), &pair.fixed)?;
    volume_io::write_image(&dir.join("moving.vol"), &pair.moving)?;
    volume_io::write_labels(&dir.join("fixed_labels.vol"), &pair.fixed_labels)?;
    volume_io::write_labels(&dir.join("moving_labels.vol"), &pair.moving_labels)?;
    volume_io::write_grid(&dir.join("ground_truth.grid"), &pair.ground_truth)?;
    let vocab = joint_vocabulary(&pair.fixed_labels, &pair.moving_labels);
    let baseline = mean_dice(&pair.fixed_labels, &pair.moving_labels, &vocab)?;
    let truth = evaluate_pair("ground_truth", &pair.ground_truth, &pair.fixed_labels, &pair.moving_labels)?;
    println!(
        "wrote pair to {}; identity mean Dice {:.4}, ground-truth mean Dice {:.4}",
        dir.display(),
        baseline.mean,
        truth.dice.mean
    );
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CliResult {
    print_resolved(Some(a.seed), None, None, None, &format!("only={}", a.only.as_deref().unwrap_or("-")));
    let results = gradsuite::run_suite(a.seed, a.only.as_deref())?;
    if results.is_empty() {
        return Err(Failure::Usage(format!(
            "no case matches `{}`; cases are: {}",
            a.only.unwrap_or_default(),
            gradsuite::CASES.join(", ")
        )));
    }
    println!("{:<20} {:>12} {:>10}  result", "case", "worst_error", "tolerance");
    let mut failed = Vec::new();
    for r in &results {
        let ok = r.passed();
        println!("{:<20} {:>12.3e} {:>10.0e}  {}", r.name, r.worst(), r.tolerance, if ok { "pass" } else { "FAIL" });
        if !ok {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        println!("all {} cases passed", results.len());
        Ok(())
    } else {
        Err(Failure::Check(failed.join(", ")))
    }
}

fn cmd_visualize(a: VisualizeArgs) -> CliResult {
    let (model, fixed, moving) = load_model_and_pair(&a.checkpoint, &a.fixed, &a.moving)?;
    let levels = model.config.levels();
    let finest = model.config.variant.finest_level();
    if let Some(l) = a.level {
        if l < finest || l > levels {
            return Err(Failure::Usage(format!("--level {l} is out of range; this model decodes levels {finest}..={levels}")));
        }
    }
    if a.spacing == 0 {
        return Err(Failure::Usage("--spacing must be positive".into()));
    }
    let spatial = moving.spatial().to_vec();
    let slice = if spatial.len() == 3 {
        if a.slice_axis > 2 {
            return Err(Failure::Usage(format!("--slice-axis {} is out of range for a 3-D image", a.slice_axis)));
        }
        let index = a.slice_index.unwrap_or(spatial[a.slice_axis] / 2);
        if index >= spatial[a.slice_axis] {
            return Err(Failure::Usage(format!("--slice-index {index} is out of range (extent {})", spatial[a.slice_axis])));
        }
        Some(SliceSpec { axis: a.slice_axis, index })
    } else {
        None
    };
    std::fs::create_dir_all(&a.out_dir).map_err(|e| format!("cannot create {}: {e}", a.out_dir.display()))?;
    let reg = model.register(&fixed, &moving)?;
    volume_io::export_slice(&a.out_dir.join("fixed.pgm"), &fixed, slice, None)?;
    volume_io::export_slice(&a.out_dir.join("moving.pgm"), &moving, slice, None)?;
    // Coarsest first: each image applies one more level of the composition.
    for l in (finest..=levels).rev() {
        if a.level.is_some_and(|want| want != l) {
            continue;
        }
        let Some(composed) = &reg.composed[l - 1] else { continue };
        let grid = composed.resize(&spatial)?;
        let warped = grid.warp(&moving)?;
        let warped_path = a.out_dir.join(format!("level{l}_warped.pgm"));
        let grid_path = a.out_dir.join(format!("level{l}_grid.pgm"));
        volume_io::export_slice(&warped_path, &warped, slice, None)?;
        volume_io::export_slice(&grid_path, &warped, slice, Some(Overlay { grid: &grid, spacing: a.spacing }))?;
        println!("level {l}: wrote {} and {}", warped_path.display(), grid_path.display());
    }
    Ok(())
}
