use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use resdsn::c2f::{run_c2f, segment};
use resdsn::config::NUM_FOLDS;
use resdsn::metrics::{connected_components, eval_csv, filter_small_components, EvalRow, Overlap, Summary};
use resdsn::synth::generate_synthetic;
use resdsn::train::{train_stage, Case, LogRow};
use resdsn::volume::{load_intensity, load_mask, load_volume, preprocess, save_mask, save_volume, LoadedVolume};
use resdsn::{Checkpoint, Connectivity, FusionMode, ResDsn, RunConfig, SplitManifest, StageKind, Variant};

mod dataset;
mod overlay;

const THREADS_ENV: &str = "RESDSN_THREADS";

#[derive(Parser)]
#[command(name = "resdsn", version, about = "Coarse-to-fine 3D organ segmentation")]
struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Start from the desk-scale preset (16^3 input, channels 4-8-16-32, batch 4).
    #[arg(long, global = true, conflicts_with = "config")]
    tiny: bool,
    /// Top-level seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Truncate and normalise every intensity volume in a directory.
    Preprocess(PreprocessArgs),
    /// Assign case ids to cross-validation folds.
    Split(SplitArgs),
    /// Train a coarse or fine model.
    Train(TrainArgs),
    /// Segment volumes with one model or the two-stage pipeline.
    Predict(PredictArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Write synthetic ellipsoid cases.
    Synth(SynthArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    /// Dataset directory of `<id>_image` / `<id>_label` pairs.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = NUM_FOLDS)]
    folds: usize,
    /// Manifest path; printed to stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Coarse,
    Fine,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Resdsn,
    Fresdsn,
    Sresdsn,
    Dsn,
}

#[derive(Clone, Copy, ValueEnum)]
enum FusionArg {
    Average,
    Vote,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    stage: StageArg,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    margin: Option<usize>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long)]
    no_deep_supervision: bool,
    /// Split manifest; training uses every fold except `--fold`.
    #[arg(long, requires = "fold")]
    split: Option<PathBuf>,
    #[arg(long, requires = "split")]
    fold: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    /// Coarse (or single-stage) checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Run the two-stage pipeline.
    #[arg(long, requires = "fine_model")]
    c2f: bool,
    #[arg(long, requires = "c2f")]
    fine_model: Option<PathBuf>,
    /// A volume file or a dataset directory.
    #[arg(long)]
    input: PathBuf,
    /// Output directory.
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    coarse_overlap: Option<usize>,
    #[arg(long)]
    fine_overlap: Option<usize>,
    #[arg(long)]
    margin: Option<usize>,
    #[arg(long, value_enum)]
    fusion: Option<FusionArg>,
    #[arg(long)]
    filter_fraction: Option<f64>,
    #[arg(long, value_parser = ["6", "26"])]
    connectivity: Option<String>,
    /// Zero the fine-stage input outside the coarse mask.
    #[arg(long)]
    mask_input: bool,
    /// Also write a mid-slice overlay PNG per case.
    #[arg(long)]
    debug_png: bool,
    /// Ground-truth directory, used only for the overlays.
    #[arg(long, requires = "debug_png")]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of `<id>_pred` masks.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of `<id>_label` masks.
    #[arg(long)]
    truth: PathBuf,
    /// CSV report path.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, num_args = 3, value_names = ["X", "Y", "Z"], default_values_t = [64, 64, 64])]
    dims: Vec<usize>,
    #[arg(long)]
    output: PathBuf,
}

/// Bad flag combinations or configuration content.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<resdsn::Error>() {
            return match e {
                resdsn::Error::Io { .. }
                | resdsn::Error::Format { .. }
                | resdsn::Error::SizeMismatch { .. }
                | resdsn::Error::UnsupportedDatatype(_) => 3,
                resdsn::Error::Diverged { .. } => 4,
                _ => 1,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<image::ImageError>() {
            return 3;
        }
    }
    1
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    RunConfig::from_json(&text).map_err(|e| usage(format!("malformed config {}: {e}", path.display())))
}

fn base_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None if cli.tiny => RunConfig::tiny(),
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn finalize(cfg: RunConfig) -> Result<RunConfig> {
    cfg.validate().map_err(|e| usage(format!("invalid configuration: {e}")))?;
    Ok(cfg)
}

/// `<path>.<suffix>` next to `path`.
fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    path.with_file_name(name)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_checkpoint(path: &Path) -> Result<ResDsn<f32>> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(ResDsn::from_checkpoint(&ck)?)
}

fn preprocess_cmd(cfg: &RunConfig, args: &PreprocessArgs) -> Result<()> {
    create_dir(&args.output)?;
    let mut n = 0;
    for case in dataset::discover(&args.input)? {
        for path in [case.image, case.label].into_iter().flatten() {
            let out = args.output.join(path.file_name().expect("listed file has a name"));
            let v = match load_volume(&path)? {
                LoadedVolume::Intensity(v) => LoadedVolume::Intensity(preprocess(&v)),
                mask => mask,
            };
            save_volume(&v, &out)?;
            n += 1;
        }
    }
    cfg.save(&args.output.join("run_config.json"))?;
    log::info!("preprocessed {n} volumes into {}", args.output.display());
    Ok(())
}

fn split_cmd(cfg: &RunConfig, args: &SplitArgs) -> Result<()> {
    let ids: Vec<String> = dataset::labelled(&args.data)?.into_iter().map(|c| c.id).collect();
    let manifest = SplitManifest::new(&ids, cfg.seed, args.folds)?;
    match &args.output {
        Some(p) => {
            write_json(p, &manifest)?;
            cfg.save(&sidecar(p, "config.json"))?;
        }
        None => println!("{}", serde_json::to_string_pretty(&manifest)?),
    }
    Ok(())
}

fn load_cases(dir: &Path, keep: Option<&[String]>) -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    for c in dataset::labelled(dir)? {
        if keep.is_some_and(|k| !k.contains(&c.id)) {
            continue;
        }
        let image = load_intensity(c.image.as_ref().expect("labelled case"))?;
        let label = load_mask(c.label.as_ref().expect("labelled case"))?;
        cases.push(Case {
            id: c.id,
            image: preprocess(&image),
            label,
        });
    }
    if cases.is_empty() {
        bail!("no training cases selected from {}", dir.display());
    }
    Ok(cases)
}

fn train_cmd(mut cfg: RunConfig, args: &TrainArgs) -> Result<()> {
    if let Some(v) = args.iterations {
        cfg.optim.iterations = v;
    }
    if let Some(v) = args.batch_size {
        cfg.optim.batch_size = v;
    }
    if let Some(v) = args.base_lr {
        cfg.optim.base_lr = v;
    }
    if let Some(v) = args.margin {
        cfg.margin = v;
    }
    if let Some(v) = args.variant {
        let variant = match v {
            VariantArg::Resdsn => Variant::ResDsn,
            VariantArg::Fresdsn => Variant::FResDsn,
            VariantArg::Sresdsn => Variant::SResDsn,
            VariantArg::Dsn => Variant::Dsn,
        };
        cfg.network = cfg.network.with_variant(variant);
    }
    if args.no_deep_supervision {
        cfg.network.deep_supervision = false;
    }
    let cfg = finalize(cfg)?;
    let keep = match (&args.split, args.fold) {
        (Some(path), Some(k)) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading split {}", path.display()))?;
            let manifest: SplitManifest =
                serde_json::from_str(&text).map_err(|e| usage(format!("malformed split {}: {e}", path.display())))?;
            Some(manifest.fold(k).map_err(|e| usage(e.to_string()))?.0)
        }
        _ => None,
    };
    let data = load_cases(&args.data, keep.as_deref())?;
    let stage = match args.stage {
        StageArg::Coarse => StageKind::Coarse,
        StageArg::Fine => StageKind::Fine,
    };
    if let Some(dir) = args.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    cfg.save(&sidecar(&args.output, "config.json"))?;
    let log_path = sidecar(&args.output, "log.csv");
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    writeln!(log, "{}", LogRow::CSV_HEADER)?;
    let mut write_err = None;
    log::info!("training {stage} stage on {} cases for {} iterations", data.len(), cfg.optim.iterations);
    let ck = train_stage(&cfg.train_config(), &data, stage, cfg.seed, |row| {
        if let Err(e) = writeln!(log, "{}", row.to_csv()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).context("writing training log");
    }
    log.flush()?;
    ck.save(&args.output)?;
    log::info!("wrote {}", args.output.display());
    Ok(())
}

fn predict_cmd(mut cfg: RunConfig, args: &PredictArgs) -> Result<()> {
    if let Some(v) = args.coarse_overlap {
        cfg.coarse_overlap = v;
    }
    if let Some(v) = args.fine_overlap {
        cfg.fine_overlap = v;
    }
    if let Some(v) = args.margin {
        cfg.margin = v;
    }
    if let Some(v) = args.fusion {
        cfg.fusion = match v {
            FusionArg::Average => FusionMode::Average,
            FusionArg::Vote => FusionMode::Vote,
        };
    }
    if let Some(v) = args.filter_fraction {
        cfg.filter_fraction = v;
    }
    if let Some(v) = &args.connectivity {
        cfg.connectivity = Connectivity::try_from(v.parse::<u8>()?)?;
    }
    cfg.mask_input |= args.mask_input;
    let cfg = finalize(cfg)?;

    let coarse = load_checkpoint(&args.model)?;
    let fine = match &args.fine_model {
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    let inputs: Vec<(String, PathBuf)> = if args.input.is_dir() {
        dataset::files_with_suffix(&args.input, dataset::IMAGE_SUFFIX)?.into_iter().collect()
    } else {
        vec![(dataset::case_id_of(&args.input), args.input.clone())]
    };
    if inputs.is_empty() {
        bail!("no <id>_image volumes found in {}", args.input.display());
    }
    let truths = match &args.truth {
        Some(dir) => dataset::files_with_suffix(dir, dataset::LABEL_SUFFIX)?,
        None => Default::default(),
    };
    create_dir(&args.output)?;
    cfg.save(&args.output.join("run_config.json"))?;
    for (id, path) in inputs {
        let raw = load_intensity(&path)?;
        let vol = preprocess(&raw);
        let (mask, report) = match &fine {
            Some(fine) => {
                let (m, r) = run_c2f(&coarse, fine, &vol, &cfg.c2f_options())?;
                (m, serde_json::to_value(r)?)
            }
            None => {
                let (m, r) = segment(
                    &coarse,
                    &vol,
                    cfg.coarse_overlap,
                    cfg.fusion,
                    cfg.infer_batch,
                    cfg.filter_fraction,
                    cfg.connectivity,
                )?;
                (m, serde_json::to_value(r)?)
            }
        };
        save_mask(&mask, args.output.join(format!("{id}{}.nii", dataset::PRED_SUFFIX)))?;
        write_json(&args.output.join(format!("{id}_report.json")), &report)?;
        if args.debug_png {
            let truth = truths.get(&id).map(load_mask).transpose()?;
            overlay::write_mid_slice(&vol, &mask, truth.as_ref(), &args.output.join(format!("{id}_overlay.png")))?;
        }
        log::info!("{id}: {} foreground voxels", mask.count());
    }
    Ok(())
}

fn eval_cmd(cfg: &RunConfig, args: &EvalArgs) -> Result<()> {
    let preds = dataset::files_with_suffix(&args.pred, dataset::PRED_SUFFIX)?;
    let truths = dataset::files_with_suffix(&args.truth, dataset::LABEL_SUFFIX)?;
    let mut rows = Vec::new();
    for (id, path) in &preds {
        let Some(truth_path) = truths.get(id) else {
            bail!("no ground truth for case {id} in {}", args.truth.display());
        };
        let p = load_mask(path)?;
        let y = load_mask(truth_path)?;
        let o = Overlap::of(&p, &y)?;
        let filtered = filter_small_components(&p, cfg.filter_fraction, cfg.connectivity)?;
        rows.push(EvalRow {
            case_id: id.clone(),
            dsc: o.dsc(),
            predicted: o.predicted,
            truth: o.truth,
            intersection: o.intersection,
            components_before: connected_components(&p, cfg.connectivity).num_components(),
            components_after: connected_components(&filtered, cfg.connectivity).num_components(),
        });
    }
    if rows.is_empty() {
        bail!("no <id>_pred masks found in {}", args.pred.display());
    }
    if let Some(dir) = args.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    std::fs::write(&args.output, eval_csv(&rows)).with_context(|| format!("writing {}", args.output.display()))?;
    cfg.save(&sidecar(&args.output, "config.json"))?;
    let dscs: Vec<f64> = rows.iter().map(|r| r.dsc).collect();
    if let Some(s) = Summary::of(&dscs) {
        println!("DSC over {} cases: {s}", rows.len());
    }
    Ok(())
}

fn synth_cmd(cfg: &RunConfig, args: &SynthArgs) -> Result<()> {
    let dims = [args.dims[0], args.dims[1], args.dims[2]];
    if dims.iter().any(|&d| d < 32) {
        return Err(usage(format!("--dims must be at least 32 per axis, got {dims:?}")));
    }
    let cases = generate_synthetic(args.count, dims, cfg.seed, &args.output)?;
    cfg.save(&args.output.join("run_config.json"))?;
    log::info!("wrote {} cases to {}", cases.len(), args.output.display());
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let cfg = base_config(&cli)?;
    match &cli.command {
        Command::Preprocess(a) => preprocess_cmd(&finalize(cfg)?, a),
        Command::Split(a) => split_cmd(&finalize(cfg)?, a),
        Command::Train(a) => train_cmd(cfg, a),
        Command::Predict(a) => predict_cmd(cfg, a),
        Command::Eval(a) => eval_cmd(&finalize(cfg)?, a),
        Command::Synth(a) => synth_cmd(&finalize(cfg)?, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
