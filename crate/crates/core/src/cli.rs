//! Command-line front end.
//!
//! Exit status: 0 on success, 1 on runtime failure, 2 on usage errors.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::feature_store::{self, Role};
use crate::model::{FeatureAdapter, Model, TrainingMode};
use crate::proxy::{self, Band, BandGeometry, ProxyConfig, ProxyOp, RasterImage, SpectralMaskSpec};
use crate::scoring::{self, ThresholdCriterion};
use crate::trainer::{self, TrainConfig, TrainingData};

/// Environment variable naming the feature extractor executable.
pub const EXTRACTOR_ENV: &str = "CLIPFLOW_EXTRACTOR";
/// Embedding width of the default extractor.
pub const DEFAULT_FEATURE_DIM: usize = 768;

#[derive(Debug, Parser)]
#[command(name = "clipflow", version, about = "Generated-image detection with likelihood scoring")]
pub struct Cli {
    /// Print progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Commands,
}

#[derive(Debug, Subcommand)]
pub enum Commands {
    /// Build proxy images from a directory of natural images.
    ForgeProxies(ForgeArgs),
    /// Run the external extractor over a directory of images.
    ExtractFeatures(ExtractArgs),
    /// Train adapter and flow from a manifest.
    Train(TrainArgs),
    /// Choose a decision threshold on validation entries and store it in the model.
    PickThreshold(PickArgs),
    /// Score every row of a feature file.
    Score(ScoreArgs),
    /// Per-dataset AP / accuracy over test manifests.
    Eval(EvalArgs),
    /// Print model header metadata.
    InspectModel(InspectArgs),
}

#[derive(Debug, Args)]
pub struct ForgeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long = "out")]
    pub output: PathBuf,
    #[arg(long, default_value = "frequency_mask", value_parser = parse_from_str::<ProxyOp>)]
    pub op: ProxyOp,
    /// low | mid | high | ring:<inner>,<outer>
    #[arg(long, default_value = "low", value_parser = parse_from_str::<Band>)]
    pub band: Band,
    #[arg(long, default_value_t = 1.0)]
    pub ratio: f64,
    #[arg(long)]
    pub phase_only: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use the fully-zeroed [30, 100) ring instead of --band/--ratio.
    #[arg(long)]
    pub validation_ring: bool,
    #[arg(long, default_value_t = proxy::DEFAULT_NOISE_SIGMA)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 1.0)]
    pub blur_sigma: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sharpen_amount: f64,
    /// Low/mid boundary as a fraction of the shorter side.
    #[arg(long, default_value_t = 1.0 / 8.0)]
    pub low_mid: f64,
    /// Mid/high boundary as a fraction of the shorter side.
    #[arg(long, default_value_t = 1.0 / 4.0)]
    pub mid_high: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ExtractMode {
    Train,
    Test,
}

impl ExtractMode {
    fn as_str(self) -> &'static str {
        match self {
            ExtractMode::Train => "train",
            ExtractMode::Test => "test",
        }
    }
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Directory of input images.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long, value_enum)]
    pub mode: ExtractMode,
    #[arg(long)]
    pub out: PathBuf,
    /// Extractor executable; defaults to $CLIPFLOW_EXTRACTOR.
    #[arg(long)]
    pub extractor: Option<PathBuf>,
    /// Feature width the extractor must produce.
    #[arg(long, default_value_t = DEFAULT_FEATURE_DIM)]
    pub expected_dim: usize,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub square_resize: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_parser = parse_from_str::<TrainingMode>)]
    pub mode: TrainingMode,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Reduced dimension C.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub clamp: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub freeze_adapter: bool,
    /// Feed raw features to the flow without reduction or normalization.
    #[arg(long, conflicts_with_all = ["dim", "freeze_adapter"])]
    pub no_adapter: bool,
    #[arg(long)]
    pub paper_eq7_signs: bool,
    #[arg(long)]
    pub dequant_sigma: Option<f64>,
    /// Loss history CSV; defaults to <out>.loss.csv.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PickArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub val_manifest: PathBuf,
    #[arg(long, default_value = "balanced", value_parser = parse_from_str::<ThresholdCriterion>)]
    pub criterion: ThresholdCriterion,
    /// Where to write the updated model; defaults to overwriting --model.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub manifests: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the threshold stored in the model.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: PathBuf,
}

fn parse_from_str<T>(s: &str) -> Result<T, String>
where
    T: std::str::FromStr<Err = String>,
{
    s.parse()
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Commands::ForgeProxies(a) => forge(a, cli.verbose),
        Commands::ExtractFeatures(a) => extract(a, cli.verbose),
        Commands::Train(a) => train(a, cli.verbose),
        Commands::PickThreshold(a) => pick(a),
        Commands::Score(a) => score(a),
        Commands::Eval(a) => eval(a),
        Commands::InspectModel(a) => inspect(a),
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} not found: {}", path.display());
    }
    Ok(())
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if !path.is_dir() {
        bail!("{what} is not a directory: {}", path.display());
    }
    Ok(())
}

/// The parent directory of an output path must already exist.
fn require_output(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => {
            bail!("output directory does not exist: {}", p.display())
        }
        _ => Ok(()),
    }
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if path.is_file() && matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn forge(a: &ForgeArgs, verbose: bool) -> Result<()> {
    require_dir(&a.input, "input")?;
    if !(0.0..=1.0).contains(&a.ratio) {
        bail!("--ratio must lie in [0, 1]");
    }
    if a.output.exists() && !a.output.is_dir() {
        bail!("output exists and is not a directory: {}", a.output.display());
    }
    let images = list_images(&a.input)?;
    if images.is_empty() {
        bail!("no PNG or JPEG images in {}", a.input.display());
    }
    let spec = if a.validation_ring {
        SpectralMaskSpec {
            phase_only: a.phase_only,
            ..SpectralMaskSpec::validation_ring(a.seed)
        }
    } else {
        SpectralMaskSpec {
            phase_only: a.phase_only,
            geometry: BandGeometry {
                low_mid: a.low_mid,
                mid_high: a.mid_high,
            },
            ..SpectralMaskSpec::new(a.band, a.ratio, a.seed)
        }
    };
    let base = ProxyConfig {
        operation: a.op,
        spectral: (a.op == ProxyOp::FrequencyMask).then_some(spec),
        noise_sigma: a.noise_sigma,
        blur_sigma: a.blur_sigma,
        sharpen_amount: a.sharpen_amount,
        seed: a.seed,
        ..ProxyConfig::new(a.op)
    };
    fs::create_dir_all(&a.output).with_context(|| format!("creating {}", a.output.display()))?;
    for (i, path) in images.iter().enumerate() {
        let img = RasterImage::load(path)?;
        let cfg = base.reseeded(a.seed ^ i as u64);
        let out = proxy::make_proxy(&img, &cfg)?;
        let name = path.file_stem().expect("listed files have names");
        let dest = a.output.join(name).with_extension("png");
        out.save_png(&dest)?;
        if verbose {
            eprintln!("{} -> {}", path.display(), dest.display());
        }
    }
    println!("wrote {} proxy images to {}", images.len(), a.output.display());
    Ok(())
}

fn extract(a: &ExtractArgs, verbose: bool) -> Result<()> {
    let extractor = match &a.extractor {
        Some(p) => p.clone(),
        None => std::env::var_os(EXTRACTOR_ENV).map(PathBuf::from).ok_or_else(|| {
            anyhow!("no feature extractor configured: set {EXTRACTOR_ENV} or pass --extractor")
        })?,
    };
    if !extractor.is_file() {
        bail!(
            "feature extractor not found at {} (set {EXTRACTOR_ENV} or pass --extractor)",
            extractor.display()
        );
    }
    require_dir(&a.images, "image directory")?;
    require_output(&a.out)?;
    let images = list_images(&a.images)?;
    if images.is_empty() {
        bail!("no PNG or JPEG images in {}", a.images.display());
    }
    let mut list = tempfile::NamedTempFile::new().context("creating image list")?;
    for p in &images {
        writeln!(list, "{}", p.display())?;
    }
    list.flush()?;

    let mut cmd = Process::new(&extractor);
    cmd.arg("--images")
        .arg(list.path())
        .arg("--mode")
        .arg(a.mode.as_str())
        .arg("--out")
        .arg(&a.out)
        .arg("--seed")
        .arg(a.seed.to_string());
    if let Some(b) = a.batch {
        cmd.arg("--batch").arg(b.to_string());
    }
    if a.square_resize {
        cmd.arg("--square-resize");
    }
    let output = cmd
        .output()
        .with_context(|| format!("launching extractor {}", extractor.display()))?;
    if verbose {
        eprint!("{}", String::from_utf8_lossy(&output.stderr));
    }
    if !output.status.success() {
        bail!(
            "extractor {} failed ({}): {}",
            extractor.display(),
            output.status,
            String::from_utf8_lossy(&output.stderr).trim()
        );
    }
    let features = feature_store::read_feature_file(&a.out)
        .with_context(|| format!("validating extractor output {}", a.out.display()))?;
    if features.dim() != a.expected_dim {
        bail!(
            "extractor produced unexpected dimension {} (expected {})",
            features.dim(),
            a.expected_dim
        );
    }
    println!(
        "extracted {} x {} features from {} images into {}",
        features.rows(),
        features.dim(),
        images.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: &TrainArgs, verbose: bool) -> Result<()> {
    require_file(&a.manifest, "manifest")?;
    require_output(&a.out)?;
    let loss_csv = a
        .loss_csv
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.loss.csv", a.out.display())));
    require_output(&loss_csv)?;

    let mut cfg = TrainConfig::new(a.mode);
    cfg.seed = a.seed;
    if let Some(v) = a.lr {
        cfg.adam.learning_rate = v;
    }
    if let Some(v) = a.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.dim {
        cfg.dim = v;
    }
    if let Some(v) = a.blocks {
        cfg.blocks = v;
    }
    if let Some(v) = a.hidden {
        cfg.hidden = v;
    }
    if let Some(v) = a.clamp {
        cfg.clamp = v;
    }
    if let Some(v) = a.dequant_sigma {
        cfg.dequant_sigma = v;
    }
    cfg.use_adapter = !a.no_adapter;
    cfg.freeze_adapter = a.freeze_adapter;
    cfg.paper_eq7_signs = a.paper_eq7_signs;

    let manifest = feature_store::load_manifest(&a.manifest)?;
    let data = TrainingData::from_manifest(&manifest)?;
    if verbose {
        eprintln!(
            "training {} on {} natural / {} proxy rows of dimension {}",
            a.mode,
            data.natural.nrows(),
            data.proxy.nrows(),
            data.natural.ncols().max(data.proxy.ncols())
        );
    }
    let outcome = trainer::train(&data, &cfg)?;
    if verbose {
        for e in &outcome.history {
            eprintln!("epoch {:>3}  loss {:.6}", e.epoch, e.mean_loss);
        }
    }
    outcome.model.save(&a.out)?;
    trainer::write_loss_csv(&outcome.history, &loss_csv)?;
    println!(
        "saved {} model to {} (final loss {:.6})",
        a.mode,
        a.out.display(),
        outcome.history.last().map(|e| e.mean_loss).unwrap_or(f64::NAN)
    );
    Ok(())
}

fn pick(a: &PickArgs) -> Result<()> {
    require_file(&a.model, "model")?;
    require_file(&a.val_manifest, "validation manifest")?;
    let out = a.out.clone().unwrap_or_else(|| a.model.clone());
    require_output(&out)?;
    let mut model = Model::load(&a.model)?;
    let manifest = feature_store::load_manifest(&a.val_manifest)?;
    let samples: Vec<_> = scoring::score_manifests(&model, &[manifest], Role::Val)?
        .into_iter()
        .flat_map(|(_, s)| s)
        .collect();
    if samples.is_empty() {
        bail!("validation manifest has no entries with role 'val'");
    }
    let t = scoring::pick_threshold_with(&samples, a.criterion)?;
    let bal = scoring::balanced_accuracy(&samples, t)?;
    model.meta.threshold = Some(t);
    model.save(&out)?;
    println!(
        "threshold {t:.6} ({} criterion, balanced accuracy {:.4} on {} samples) stored in {}",
        a.criterion,
        bal,
        samples.len(),
        out.display()
    );
    Ok(())
}

fn score(a: &ScoreArgs) -> Result<()> {
    require_file(&a.model, "model")?;
    require_file(&a.features, "feature file")?;
    require_output(&a.out)?;
    let model = Model::load(&a.model)?;
    let features = feature_store::read_feature_file(&a.features)?;
    let scores = scoring::score_features(&model, &features)?;
    fs::write(&a.out, scoring::scores_csv(&scores)).with_context(|| format!("writing {}", a.out.display()))?;
    println!("scored {} rows into {}", scores.len(), a.out.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    require_file(&a.model, "model")?;
    for m in &a.manifests {
        require_file(m, "manifest")?;
    }
    require_output(&a.out)?;
    let model = Model::load(&a.model)?;
    let threshold = a
        .threshold
        .or(model.meta.threshold)
        .ok_or_else(|| anyhow!("model has no stored threshold; run pick-threshold or pass --threshold"))?;
    let manifests = a
        .manifests
        .iter()
        .map(|p| feature_store::load_manifest(p))
        .collect::<Result<Vec<_>, _>>()?;
    let report = scoring::benchmark(&model, &manifests, threshold)?;
    fs::write(&a.out, report.to_csv()).with_context(|| format!("writing {}", a.out.display()))?;
    print!("{}", report.to_pretty());
    Ok(())
}

fn inspect(a: &InspectArgs) -> Result<()> {
    require_file(&a.model, "model")?;
    let m = Model::load(&a.model)?;
    let adapter = match &m.adapter {
        FeatureAdapter::Reduce(p) => format!("linear {} -> {} + unit norm", p.in_dim(), p.out_dim()),
        FeatureAdapter::Passthrough { dim } => format!("passthrough ({dim})"),
    };
    println!("mode            {}", m.meta.mode);
    println!("input dim       {}", m.in_dim());
    println!("flow dim        {}", m.dim());
    println!("adapter         {adapter}");
    println!("adapter frozen  {}", m.meta.adapter_frozen);
    println!("blocks          {}", m.flow.blocks.len());
    println!("hidden          {}", m.flow.hidden);
    println!("clamp           {}", m.flow.clamp);
    println!("seed            {}", m.meta.seed);
    match m.meta.threshold {
        Some(t) => println!("threshold       {t}"),
        None => println!("threshold       unset"),
    }
    Ok(())
}
