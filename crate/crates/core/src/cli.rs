//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{ConfigDoc, ConfigReader};
use crate::data::{generate_dataset, load_prepared, prepare_dataset, PrepareConfig, Regions, SynthConfig, SPLITS};
use crate::experiment::{
    evaluate, load_checkpoint, read_epoch_log, read_results_csv, results_markdown, run_grid, train, write_sample_errors,
    GridSpec, ScheduleKind, TrainConfig,
};
use crate::geometry::{
    normalization_transform, normalize_gaze, pitchyaw_to_vector, vector_to_pitchyaw, warp_image, CameraIntrinsics,
    HeadPose, Mat3, NormalizationSpec, Vec3,
};
use crate::nn::{ArchKind, MiniResConfig, Model, ModelConfig, MultiRegionConfig, PoolFormerConfig, TrunkLayer};
use crate::raster::Image;
use crate::rf::{compare_rf, oracle_input_size, trunk_profile, RfError};

#[derive(Debug, Parser)]
#[command(name = "gazelab", version, about = "Desk-scale gaze estimation experiments")]
struct Cli {
    /// Line-based `key = value` config file read by the subcommand.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic dataset (train/val/test splits).
    Generate(GenerateArgs),
    /// Normalize raw renders into face (and eye) model inputs.
    Prepare(PrepareArgs),
    /// Print the per-layer receptive field, jump and start of an architecture.
    AnalyzeRf(AnalyzeRfArgs),
    /// Train a model on a prepared dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a prepared split.
    Eval(EvalArgs),
    /// Run a stride x resolution x architecture grid.
    Grid(GridArgs),
    /// Render results.csv or an epoch log as a markdown table.
    Report(ReportArgs),
    /// Warp one raw image into the normalized camera.
    Normalize(NormalizeArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    raw_resolution: Option<usize>,
    #[arg(long, default_value_t = 200)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    val: usize,
    #[arg(long, default_value_t = 50)]
    test: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Render without noise, illumination change or pose jitter.
    #[arg(long)]
    clean: bool,
}

#[derive(Debug, Args)]
struct PrepareArgs {
    /// Raw dataset root: one split, or a directory holding train/val/test.
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    regions: Option<Regions>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    eye_resolution: Option<usize>,
    #[arg(long)]
    face_distance: Option<f64>,
    #[arg(long)]
    eye_distance: Option<f64>,
}

#[derive(Debug, Args)]
struct AnalyzeRfArgs {
    #[arg(long)]
    arch: Option<ArchKind>,
    #[arg(long)]
    first_stride: Option<usize>,
    #[arg(long)]
    resolution: Option<usize>,
    /// Also write the CSV profile here.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Check every layer against the gradient-impulse measurement.
    #[arg(long)]
    verify: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Prepared data root with train/ (and optionally val/).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
    #[arg(long)]
    arch: Option<ArchKind>,
    #[arg(long)]
    first_stride: Option<usize>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    schedule: Option<ScheduleKind>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prepared split root.
    #[arg(long)]
    data: PathBuf,
    /// Per-sample error CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GridArgs {
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value = "runs/grid")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long, conflicts_with = "log")]
    results: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
    /// Markdown output file; the table is always printed.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct NormalizeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Face center `x,y,z` in millimeters, camera coordinates.
    #[arg(long)]
    center: String,
    /// Head rotation as nine row-major values; identity if omitted.
    #[arg(long)]
    rotation: Option<String>,
    /// Raw focal length in pixels; defaults to 2.54 x image width.
    #[arg(long)]
    focal: Option<f64>,
    #[arg(long, default_value_t = 224)]
    resolution: usize,
    #[arg(long, default_value_t = 600.0)]
    distance: f64,
    /// Gaze label (radians) to rotate into the normalized frame.
    #[arg(long, requires = "yaw", allow_hyphen_values = true)]
    pitch: Option<f64>,
    #[arg(long, requires = "pitch", allow_hyphen_values = true)]
    yaw: Option<f64>,
}

type CliResult = Result<(), Box<dyn std::error::Error>>;

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cli: Cli) -> CliResult {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Generate(a) => generate(a, config),
        Command::Prepare(a) => prepare(a, config),
        Command::AnalyzeRf(a) => analyze_rf(a, config),
        Command::Train(a) => train_cmd(a, config),
        Command::Eval(a) => eval_cmd(a),
        Command::Grid(a) => grid_cmd(a, config),
        Command::Report(a) => report(a),
        Command::Normalize(a) => normalize(a),
    }
}

fn read_doc(path: &Path) -> Result<ConfigDoc, Box<dyn std::error::Error>> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(ConfigDoc::parse(&text).map_err(|e| format!("{}: {e}", path.display()))?)
}

fn with_config<T>(
    path: Option<&Path>,
    read: impl FnOnce(&mut ConfigReader<'_>) -> Result<T, crate::config::ConfigError>,
) -> Result<Option<T>, Box<dyn std::error::Error>> {
    let Some(path) = path else {
        return Ok(None);
    };
    let doc = read_doc(path)?;
    let mut r = doc.reader();
    let v = read(&mut r).map_err(|e| format!("{}: {e}", path.display()))?;
    r.finish(None).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(Some(v))
}

fn write_text(path: &Path, text: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    }
    fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(())
}

fn generate(a: GenerateArgs, config: Option<&Path>) -> CliResult {
    let mut cfg = with_config(config, |r| SynthConfig::read(r, "synth"))?.unwrap_or_default();
    if a.clean {
        cfg = SynthConfig {
            seed: cfg.seed,
            ..SynthConfig::clean(cfg.raw_resolution)
        };
    }
    if let Some(r) = a.raw_resolution {
        cfg.raw_resolution = r;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let sets = generate_dataset(&cfg, [a.train, a.val, a.test], &a.out)?;
    for s in sets {
        println!("{}: {} samples in {}", s.split, s.len(), s.root.display());
    }
    Ok(())
}

fn prepare(a: PrepareArgs, config: Option<&Path>) -> CliResult {
    let mut cfg = with_config(config, |r| PrepareConfig::read(r, "prepare"))?.unwrap_or_default();
    if let Some(v) = a.regions {
        cfg.regions = v;
    }
    if let Some(v) = a.resolution {
        cfg.resolution = v;
    }
    if let Some(v) = a.eye_resolution {
        cfg.eye_resolution = v;
    }
    if let Some(v) = a.face_distance {
        cfg.face_distance = v;
    }
    if let Some(v) = a.eye_distance {
        cfg.eye_distance = v;
    }
    let jobs: Vec<(PathBuf, PathBuf)> = if a.src.join("manifest.csv").is_file() {
        // A single split keeps its synth.cfg next to the manifest.
        vec![(a.src.clone(), a.out.clone())]
    } else {
        SPLITS
            .iter()
            .map(|s| (a.src.join(s), a.out.join(s)))
            .filter(|(src, _)| src.join("manifest.csv").is_file())
            .collect()
    };
    if jobs.is_empty() {
        return Err(format!("{}: no manifest.csv found in it or in its split directories", a.src.display()).into());
    }
    for (src, out) in jobs {
        let set = prepare_dataset(&src, &out, &cfg)?;
        println!(
            "{}: {} samples prepared ({} skipped) into {}",
            src.display(),
            set.len(),
            set.skipped,
            out.display()
        );
    }
    Ok(())
}

fn model_from_flags(base: Option<ModelConfig>, arch: Option<ArchKind>, stride: Option<usize>, resolution: Option<usize>) -> ModelConfig {
    let mut m = match (base, arch) {
        (Some(b), None) => b,
        (Some(b), Some(k)) if b.kind() == k => b,
        (_, kind) => match kind.unwrap_or(ArchKind::MiniRes) {
            ArchKind::MiniRes => ModelConfig::MiniRes(MiniResConfig::default()),
            ArchKind::PoolFormer => ModelConfig::PoolFormer(PoolFormerConfig::default()),
            ArchKind::MultiRegion => ModelConfig::MultiRegion(MultiRegionConfig::default()),
        },
    };
    if let Some(s) = stride {
        m = m.with_first_stride(s);
    }
    if let Some(r) = resolution {
        m = m.with_resolution(r);
    }
    m
}

fn layer_names(layers: &[TrunkLayer]) -> Vec<String> {
    layers.iter().map(|l| format!("{} k{} s{} p{}", l.kind.name(), l.kernel, l.stride, l.padding)).collect()
}

fn analyze_rf(a: AnalyzeRfArgs, config: Option<&Path>) -> CliResult {
    let base = with_config(config, ModelConfig::read_config)?;
    let model_cfg = model_from_flags(base, a.arch, a.first_stride, a.resolution);
    let model = Model::<f32>::build(&model_cfg, 0)?;
    let mut csv = String::new();
    let mut failed = Vec::new();
    let trunks = model.list_layers();
    for (trunk, layers) in &trunks {
        // Eye branches share one architecture; profile it once.
        if trunk == "right_eye" {
            continue;
        }
        let (layers, global) = match trunk_profile(layers) {
            Err(RfError::Global { layer, kind }) => (&layers[..layer - 1], Some((layer, kind))),
            _ => (&layers[..], None),
        };
        println!("# {} {trunk} (first stride {})", model_cfg.kind(), model_cfg.first_stride());
        if layers.is_empty() {
            println!("(no local layers)");
        } else {
            let profile = trunk_profile(layers)?;
            let names = layer_names(layers);
            print!("{}", profile.table(&names));
            let body = profile.csv(&names);
            let body = if csv.is_empty() { body } else { body.split_once('\n').map_or(String::new(), |(_, b)| b.to_string()) };
            csv += &body;
            if a.verify {
                let size = oracle_input_size(&profile, 3);
                let cmp = compare_rf(&profile, layers, (size, size))?;
                println!("oracle ({size}x{size} input): {}", cmp.summary());
                if !cmp.passed() {
                    failed.push(trunk.clone());
                }
            }
        }
        if let Some((layer, kind)) = global {
            println!("layer {layer} ({kind}) and later mix all positions: receptive field is the whole input");
        }
        println!();
    }
    println!("{csv}");
    if let Some(p) = &a.csv {
        write_text(p, &csv)?;
    }
    if !failed.is_empty() {
        return Err(format!("receptive-field oracle mismatch in {}", failed.join(", ")).into());
    }
    Ok(())
}

fn train_cmd(a: TrainArgs, config: Option<&Path>) -> CliResult {
    let loaded = with_config(config, TrainConfig::read_config)?;
    let mut cfg = match loaded {
        Some(c) if a.arch.is_none_or(|k| k == c.model.kind()) => {
            let model = model_from_flags(Some(c.model.clone()), None, a.first_stride, a.resolution);
            TrainConfig { model, ..c }
        }
        _ => TrainConfig::new(model_from_flags(None, a.arch, a.first_stride, a.resolution)),
    };
    if let Some(s) = a.schedule {
        if s != cfg.schedule {
            let keep = cfg.clone();
            cfg = TrainConfig {
                data: keep.data,
                batch_size: keep.batch_size,
                seed: keep.seed,
                ..TrainConfig::with_schedule(keep.model, s)
            };
        }
    }
    if let Some(d) = a.data {
        cfg.data = Some(d);
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.base_lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let run = train(&cfg, &a.out)?;
    let last = run.log.last().expect("at least one epoch");
    println!(
        "trained {} epochs: train error {:.3} deg{}; outputs in {}",
        run.log.len(),
        last.train_err_deg,
        last.val_err_deg.map(|v| format!(", val error {v:.3} deg")).unwrap_or_default(),
        a.out.display()
    );
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> CliResult {
    let (mut model, meta) = load_checkpoint(&a.checkpoint)?;
    let set = load_prepared(&a.data)?;
    let e = evaluate(&mut model, &set)?;
    println!(
        "{} samples, checkpoint epoch {}: mean {:.4} deg, median {:.4} deg",
        e.samples.len(),
        meta.epoch,
        e.mean_deg,
        e.median_deg
    );
    if let Some(out) = &a.out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        }
        write_sample_errors(out, &e)?;
    }
    Ok(())
}

fn grid_cmd(a: GridArgs, config: Option<&Path>) -> CliResult {
    let path = a.spec.as_deref().or(config).ok_or("grid needs --spec <path> (or --config <path>)")?;
    let spec = with_config(Some(path), GridSpec::read_config)?.expect("path given");
    let rows = run_grid(&spec, &a.out)?;
    print!("{}", results_markdown(&rows));
    println!("{} rows written to {}", rows.len(), a.out.join("results.csv").display());
    Ok(())
}

fn report(a: ReportArgs) -> CliResult {
    let md = match (&a.results, &a.log) {
        (Some(p), _) => results_markdown(&read_results_csv(p)?),
        (None, Some(p)) => {
            let mut s = String::from("| epoch | lr | train_loss | train_err_deg | val_err_deg |\n|---|---|---|---|---|\n");
            for r in read_epoch_log(p)? {
                s += &format!(
                    "| {} | {:e} | {:.5} | {:.3} | {} |\n",
                    r.epoch,
                    r.lr,
                    r.train_loss,
                    r.train_err_deg,
                    r.val_err_deg.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into())
                );
            }
            s
        }
        (None, None) => return Err("report needs --results <results.csv> or --log <epoch_log.csv>".into()),
    };
    print!("{md}");
    if let Some(out) = &a.out {
        write_text(out, &md)?;
    }
    Ok(())
}

fn parse_floats(s: &str, n: usize, what: &str) -> Result<Vec<f64>, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("{what}: `{x}`: {e}")))
        .collect::<Result<_, _>>()?;
    if v.len() != n {
        return Err(format!("{what}: expected {n} comma-separated numbers, got {}", v.len()));
    }
    Ok(v)
}

fn normalize(a: NormalizeArgs) -> CliResult {
    let raw = Image::read_pnm(&a.input)?;
    let c = parse_floats(&a.center, 3, "--center")?;
    let rotation = match &a.rotation {
        Some(r) => Mat3::from_row_slice(&parse_floats(r, 9, "--rotation")?),
        None => Mat3::identity(),
    };
    let pose = HeadPose::new(rotation, Vec3::new(c[0], c[1], c[2]))?;
    let focal = a.focal.unwrap_or(SynthConfig::default().focal_ratio * raw.width as f64);
    let camera = CameraIntrinsics::new(focal, focal, (raw.width as f64 - 1.0) / 2.0, (raw.height as f64 - 1.0) / 2.0)?;
    let spec = NormalizationSpec::scaled(a.resolution, a.distance);
    let spec = NormalizationSpec::new(spec.camera, spec.distance, spec.width, spec.height)?;
    let n = normalization_transform(&camera, &pose, &spec)?;
    let out = warp_image(&raw, &n.warp, spec.width, spec.height)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    }
    out.write_pnm(&a.out)?;
    println!("wrote {}x{} normalized image to {}", spec.width, spec.height, a.out.display());
    for row in n.warp.row_iter() {
        println!("W  {:>14.6} {:>14.6} {:>14.6}", row[0], row[1], row[2]);
    }
    if let (Some(p), Some(y)) = (a.pitch, a.yaw) {
        let g = normalize_gaze(&pitchyaw_to_vector(p, y)?, &n.rotation);
        let (pn, yn) = vector_to_pitchyaw(&g);
        println!("normalized gaze: pitch {pn:.6} rad, yaw {yn:.6} rad");
    }
    Ok(())
}
