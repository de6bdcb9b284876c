use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gridattn::grid::{expand_manifest_with, read_gfm, write_gfm, DatasetManifest, GridMeta, Split, TaskKind};
use gridattn::metrics::wilcoxon_signed_rank;
use gridattn::model::{
    forward, predict, read_checkpoint, write_checkpoint, AttentionConfig, Target, DEFAULT_ATTENTION_CHANNELS,
    DEFAULT_KERNEL_SIZE, DEFAULT_POOL_WINDOW,
};
use gridattn::patch::{extract_grid, extract_lowres, import_features, read_ppm, ExtractConfig};
use gridattn::saliency::{export_attention, grad_cam, write_color_ppm, write_pgm, CamWeighting};
use gridattn::synth::{gen_dataset, SynthConfig};
use gridattn::tensor::{ActivationKind, PoolMode};
use gridattn::train::{
    cross_validate, evaluate, load_samples, parse_report_metrics, score_predictions, train, OptimizerKind,
    TrainConfig,
};
use gridattn::Error;

#[derive(Parser, Debug)]
#[command(name = "gridattn", version, about = "Grid-based feature maps and min/max attention classification")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Crop, tile and describe a PPM image as a grid feature map.
    Extract(ExtractArgs),
    /// Pack a per-patch feature table (CSV: i, j, f0..fK-1) into a grid feature map.
    Pack(PackArgs),
    /// Cross-validate on a manifest and train a final model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest split, or compare two reports.
    Eval(EvalArgs),
    /// Write an attention or Grad-CAM heat map.
    Viz(VizArgs),
    /// Generate a synthetic benchmark dataset.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct ExtractArgs {
    /// Input image (binary PPM).
    image: PathBuf,
    /// Output grid feature map.
    out: PathBuf,
    /// Patch edge length in pixels.
    #[arg(long, default_value_t = 224)]
    patch: usize,
    /// Features per patch.
    #[arg(long, default_value_t = 512)]
    k: usize,
    /// Seed of the feature projection.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pixels whose channels all average at or above this are background.
    #[arg(long, default_value_t = 220)]
    white_thresh: u8,
    /// Microns per pixel of the input (0 if unknown).
    #[arg(long, default_value_t = 0.0)]
    mpp: f32,
    /// Also write a 2x downscaled grid next to OUT as `<stem>.<lowres-tag>.gfm`.
    #[arg(long)]
    lowres: bool,
    /// Resolution tag of the downscaled grid.
    #[arg(long, default_value = "4um")]
    lowres_tag: String,
}

#[derive(Args, Debug)]
struct PackArgs {
    /// Feature table.
    table: PathBuf,
    /// Output grid feature map.
    out: PathBuf,
    #[arg(long)]
    rows: usize,
    #[arg(long)]
    cols: usize,
    /// Patch edge length in pixels recorded in the header.
    #[arg(long, default_value_t = 224)]
    patch: u32,
    /// Microns per pixel recorded in the header.
    #[arg(long, default_value_t = 0.0)]
    mpp: f32,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset manifest; grid paths are relative to its directory.
    manifest: PathBuf,
    /// Final checkpoint, trained on all training records.
    out: PathBuf,
    /// Cross-validation report (TSV).
    report: PathBuf,
    /// classification or regression (default: the manifest's task).
    #[arg(long)]
    task: Option<TaskKind>,
    /// Training epochs [default: 35].
    #[arg(long)]
    epochs: Option<usize>,
    /// Samples per optimiser step [default: 64].
    #[arg(long)]
    batch: Option<usize>,
    /// Initial learning rate [default: 0.001 with sgd for classification, 0.0001 with adam for regression].
    #[arg(long)]
    lr: Option<f64>,
    /// sgd or adam [default: sgd for classification, adam for regression].
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    /// Learning-rate multiplier applied every --decay-epoch epochs [default: 0.1 for classification, 1 for regression].
    #[arg(long)]
    decay_factor: Option<f64>,
    /// Epochs between learning-rate decays [default: 20].
    #[arg(long)]
    decay_epoch: Option<usize>,
    /// Comma-separated attention modes out of max, min, avg.
    #[arg(long, default_value = "max,min", value_delimiter = ',')]
    modes: Vec<PoolMode>,
    /// Attention channels H (must be below the feature depth).
    #[arg(long, default_value_t = DEFAULT_ATTENTION_CHANNELS)]
    h: usize,
    /// Convolution kernel size.
    #[arg(long, default_value_t = DEFAULT_KERNEL_SIZE)]
    n: usize,
    /// Pooling window.
    #[arg(long, default_value_t = DEFAULT_POOL_WINDOW)]
    pool_window: usize,
    /// relu or tanh.
    #[arg(long, default_value = "relu")]
    activation: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cross-validation folds.
    #[arg(long, default_value_t = 4)]
    folds: usize,
    /// Weight initialisations per fold.
    #[arg(long, default_value_t = 2)]
    inits: usize,
    /// Skip the 9 flip/rotation/shift augmentations of training grids.
    #[arg(long)]
    no_augment: bool,
    /// Drop low-resolution copies from training.
    #[arg(long)]
    no_lowres: bool,
    /// Do not augment low-resolution copies.
    #[arg(long)]
    no_augment_lowres: bool,
    /// Allow thread-count dependent gradient summation order.
    #[arg(long)]
    nondeterministic: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Dataset manifest.
    #[arg(required_unless_present = "compare")]
    manifest: Option<PathBuf>,
    /// Checkpoint to evaluate.
    #[arg(required_unless_present = "compare")]
    checkpoint: Option<PathBuf>,
    /// Per-sample prediction report (TSV).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Split to evaluate: train, val, test, or a fold number.
    #[arg(long, default_value = "test")]
    split: String,
    /// Wilcoxon signed-rank test between two cross-validation reports,
    /// pairing runs by (fold, init).
    #[arg(long, num_args = 2, value_names = ["A", "B"], conflicts_with_all = ["manifest", "checkpoint"])]
    compare: Option<Vec<PathBuf>>,
}

#[derive(Args, Debug)]
struct VizArgs {
    checkpoint: PathBuf,
    grid: PathBuf,
    /// Output PGM (or PPM with --color).
    out: PathBuf,
    /// Attention mode to export.
    #[arg(long, default_value = "max")]
    mode: PoolMode,
    /// Attention channel to export.
    #[arg(long, default_value_t = 0)]
    channel: usize,
    /// Write Grad-CAM saliency instead of an attention channel.
    #[arg(long)]
    gradcam: bool,
    /// Grad-CAM target class (classification models).
    #[arg(long, default_value_t = 1)]
    class: usize,
    /// Grad-CAM weighting: elementwise (per-cell gradients) or mean (per-channel spatial means).
    #[arg(long, default_value = "elementwise")]
    cam_weighting: CamWeighting,
    /// Pixels per grid cell (default: the grid's patch size, or 1 if unknown).
    #[arg(long)]
    scale: Option<usize>,
    /// Pseudo-colour PPM output.
    #[arg(long)]
    color: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 200)]
    n_train: usize,
    #[arg(long, default_value_t = 100)]
    n_test: usize,
    #[arg(long, default_value = "classification")]
    task: TaskKind,
    #[arg(long, default_value_t = 16)]
    k: usize,
    #[arg(long, default_value_t = 4)]
    min_size: usize,
    #[arg(long, default_value_t = 12)]
    max_size: usize,
    #[arg(long, default_value_t = 1)]
    min_signal: usize,
    #[arg(long, default_value_t = 3)]
    max_signal: usize,
    /// Shift added to the first 4 features of signal cells (0 gives a no-signal control).
    #[arg(long, default_value_t = 2.0)]
    mu: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

type CliResult = Result<(), Error>;

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn cmd_extract(a: ExtractArgs) -> CliResult {
    let img = read_ppm(&a.image)?;
    let cfg = ExtractConfig {
        patch_size: a.patch,
        k: a.k,
        seed: a.seed,
        white_threshold: a.white_thresh,
        microns_per_pixel: a.mpp,
        source_id: file_stem(&a.image),
    };
    let g = extract_grid(&img, &cfg)?;
    write_gfm(&g, &a.out)?;
    println!("{}: {}x{}x{}", a.out.display(), g.rows(), g.cols(), g.depth());
    if a.lowres {
        let low = extract_lowres(&img, &cfg)?;
        let path = a.out.with_file_name(format!("{}.{}.gfm", file_stem(&a.out), a.lowres_tag));
        write_gfm(&low, &path)?;
        println!("{}: {}x{}x{}", path.display(), low.rows(), low.cols(), low.depth());
    }
    Ok(())
}

fn cmd_pack(a: PackArgs) -> CliResult {
    let meta = GridMeta {
        patch_size_px: a.patch,
        microns_per_pixel: a.mpp,
        source_id: file_stem(&a.out),
    };
    let g = import_features(&a.table, a.rows, a.cols, meta)?;
    write_gfm(&g, &a.out)?;
    println!("{}: {}x{}x{}", a.out.display(), g.rows(), g.cols(), g.depth());
    Ok(())
}

fn parse_activation(s: &str) -> Result<ActivationKind, Error> {
    match s.to_ascii_lowercase().as_str() {
        "relu" => Ok(ActivationKind::Relu),
        "tanh" => Ok(ActivationKind::Tanh),
        other => Err(Error::InvalidConfig(format!("unknown activation '{other}'"))),
    }
}

fn first_depth(m: &DatasetManifest, base: &Path) -> Result<usize, Error> {
    let r = m
        .records
        .first()
        .ok_or_else(|| Error::Empty("manifest has no records".into()))?;
    Ok(read_gfm(base.join(&r.grid_path))?.depth())
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let manifest = DatasetManifest::read(&a.manifest)?;
    manifest.validate()?;
    let task = a.task.unwrap_or(manifest.task);
    if task != manifest.task {
        return Err(Error::InvalidConfig(format!(
            "--task {task} does not match the {} manifest",
            manifest.task
        )));
    }
    let mut cfg = TrainConfig::for_task(task);
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.optimizer {
        cfg.optimizer = v;
    }
    if let Some(v) = a.decay_factor {
        cfg.lr_decay_factor = v;
    }
    if let Some(v) = a.decay_epoch {
        cfg.lr_decay_epoch = v;
    }
    cfg.seed = a.seed;
    cfg.folds = a.folds;
    cfg.weight_inits = a.inits;
    cfg.include_lowres = !a.no_lowres;
    cfg.augment_lowres = !a.no_augment_lowres;
    cfg.deterministic = !a.nondeterministic;
    cfg.validate()?;
    if cfg.folds < 2 {
        return Err(Error::InvalidConfig(format!(
            "cross-validation needs at least 2 folds, got {}",
            cfg.folds
        )));
    }

    let base = base_dir(&a.manifest);
    let mut training = DatasetManifest::new(task);
    training.records = manifest
        .records
        .iter()
        .filter(|r| r.split.is_training() && (cfg.include_lowres || !r.is_derived_resolution()))
        .cloned()
        .collect();
    if training.is_empty() {
        return Err(Error::Empty("manifest has no training records".into()));
    }
    let mut attn = AttentionConfig::new(task, first_depth(&training, &base)?).with_modes(&a.modes);
    attn.h = a.h;
    attn.n = a.n;
    attn.pool_window = a.pool_window;
    attn.activation = parse_activation(&a.activation)?;
    attn.validate()?;

    let expanded = if a.no_augment {
        training.clone()
    } else {
        expand_manifest_with(&training, cfg.augment_lowres)
    };
    let report = cross_validate(&expanded, &base, &cfg, &attn)?;
    write_text(&a.report, &report.to_tsv())?;
    println!(
        "{} {}: mean {:.4} std {:.4} over {} runs",
        task,
        report.metric_name,
        report.mean(),
        report.std(),
        report.runs.len()
    );

    let samples = load_samples(&expanded.records, &base)?;
    let final_run = train(&samples, &cfg, &attn, cfg.seed)?;
    write_checkpoint(&attn, &final_run.params, &a.out)?;
    println!("{}: final loss {:.6}", a.out.display(), final_run.epoch_losses.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn parse_split(s: &str) -> Result<Option<Split>, Error> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(None);
    }
    s.parse::<Split>().map(Some)
}

fn cmd_compare(paths: &[PathBuf]) -> CliResult {
    type RunMetrics = Vec<((usize, usize), f64)>;
    let read = |p: &PathBuf| -> Result<RunMetrics, Error> {
        let text = fs::read_to_string(p).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?;
        parse_report_metrics(&text)
    };
    let a = read(&paths[0])?;
    let b = read(&paths[1])?;
    let keys_a: Vec<_> = a.iter().map(|(k, _)| *k).collect();
    let keys_b: Vec<_> = b.iter().map(|(k, _)| *k).collect();
    if keys_a != keys_b {
        return Err(Error::DimensionMismatch(
            "reports do not cover the same (fold, init) runs".into(),
        ));
    }
    let xa: Vec<f64> = a.iter().map(|(_, v)| *v).collect();
    let xb: Vec<f64> = b.iter().map(|(_, v)| *v).collect();
    let r = wilcoxon_signed_rank(&xa, &xb)?;
    println!(
        "wilcoxon\tn={}\tstatistic={}\tw_plus={}\tp_value={}\t{}",
        r.n,
        r.statistic,
        r.w_plus,
        r.p_value,
        if r.exact { "exact" } else { "normal" }
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    if let Some(paths) = &a.compare {
        return cmd_compare(paths);
    }
    let (Some(manifest_path), Some(ckpt)) = (a.manifest, a.checkpoint) else {
        return Err(Error::InvalidConfig("eval needs a manifest and a checkpoint".into()));
    };
    let manifest = DatasetManifest::read(&manifest_path)?;
    let (attn, params) = read_checkpoint(&ckpt)?;
    if attn.task != manifest.task {
        return Err(Error::InvalidConfig(format!(
            "checkpoint is a {} model but the manifest is {}",
            attn.task, manifest.task
        )));
    }
    let split = parse_split(&a.split)?;
    let records: Vec<_> = manifest
        .records
        .iter()
        .filter(|r| !r.is_augmented() && split.is_none_or(|s| r.split == s))
        .cloned()
        .collect();
    if records.is_empty() {
        return Err(Error::Empty(format!("no records in split '{}'", a.split)));
    }
    let samples = load_samples(&records, &base_dir(&manifest_path))?;
    let preds = evaluate(&samples, &params, &attn)?;
    let (name, value) = score_predictions(attn.task, &preds, &samples)?;
    println!("{name}\t{value}\tn={}", samples.len());
    if let Some(path) = a.report {
        let mut out = format!("# task={} {name}={value:?} n={}\ngrid_path\tlabel\tscore\n", attn.task, samples.len());
        for (r, p) in records.iter().zip(&preds) {
            out.push_str(&format!("{}\t{}\t{:?}\n", r.grid_path, r.label, p.score()));
        }
        write_text(&path, &out)?;
    }
    Ok(())
}

fn cmd_viz(a: VizArgs) -> CliResult {
    let (attn, params) = read_checkpoint(&a.checkpoint)?;
    let grid = read_gfm(&a.grid)?;
    let scale = a.scale.unwrap_or(if grid.patch_size_px > 0 {
        grid.patch_size_px as usize
    } else {
        1
    });
    let map = if a.gradcam {
        let target = match attn.task {
            TaskKind::Classification => Target::Class(a.class),
            TaskKind::Regression => Target::Score(0.0),
        };
        grad_cam(&params, &attn, &grid, target, a.cam_weighting, scale)?
    } else {
        if a.channel >= attn.h {
            return Err(Error::InvalidConfig(format!(
                "channel {} out of range, model has {} attention channels",
                a.channel, attn.h
            )));
        }
        let trace = forward(&grid, &params, &attn)?;
        let pred = predict(&trace, &attn);
        println!("prediction {:?}", pred);
        export_attention(&trace, a.mode, a.channel, scale)?
    };
    if a.color {
        write_color_ppm(&map, &a.out)?;
    } else {
        write_pgm(&map, &a.out)?;
    }
    println!("{}: {}x{}", a.out.display(), map.cols, map.rows);
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CliResult {
    let cfg = SynthConfig {
        k: a.k,
        grid_size: (a.min_size, a.max_size),
        signal_cells: (a.min_signal, a.max_signal),
        mu: a.mu,
        seed: a.seed,
        task: a.task,
    };
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::Io {
        path: a.out_dir.clone(),
        source: e,
    })?;
    let (train, test) = gen_dataset(&cfg, a.n_train, a.n_test, &a.out_dir)?;
    println!(
        "{}: {} train and {} test bags",
        a.out_dir.display(),
        train.len(),
        test.len()
    );
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("cannot start {n} threads: {e}")))?;
    }
    match cli.command {
        Command::Extract(a) => cmd_extract(a),
        Command::Pack(a) => cmd_pack(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Viz(a) => cmd_viz(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
