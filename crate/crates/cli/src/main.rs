//! Command-line surface for point cloud style transfer: synthesize a
//! dataset, train the feature extractor, stylize clouds, classify.

mod cfgfile;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use cfgfile::{parse_usize_list, KvConfig};
use pcstyle::network::{load_params, save_params, Fusion, LayerKind, NetworkConfig};
use pcstyle::numerics::{GramNorm, OptimizerKind};
use pcstyle::pointcloud::{
    generate_synthetic_dataset, image_to_pixel_set, load_ply, save_ply, ColorRange,
    LabeledDataset, SplitTag, SyntheticConfig,
};
use pcstyle::training::{evaluate, train, TrainConfig};
use pcstyle::transfer::{
    preset, stylize, write_trace_csv, InitStrategy, StyleSource, TransferConfig, UpdateMask,
};

/// Exit codes: 0 success, 1 usage error, 2 runtime/numeric failure.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<pcstyle::Error> for CliError {
    fn from(e: pcstyle::Error) -> Self {
        CliError::Runtime(anyhow::Error::new(e))
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "pcstyle",
    about = "Neural style transfer for colored point clouds",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labeled dataset of colored shapes as PLY files
    /// plus a manifest.
    Synth(SynthArgs),
    /// Train the two-route classification network on a synthesized dataset.
    Train(TrainArgs),
    /// Stylize a content cloud from a style cloud or image.
    Transfer(TransferArgs),
    /// Classify a point cloud with a trained checkpoint.
    Classify(ClassifyArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory for PLY files and manifest.csv.
    #[arg(long)]
    out: PathBuf,
    /// Number of classes (default 8, max 18).
    #[arg(long)]
    classes: Option<usize>,
    /// Instances per class (default 32).
    #[arg(long = "per-class")]
    per_class: Option<usize>,
    /// Points per cloud (default 1024).
    #[arg(long)]
    points: Option<usize>,
    /// RNG seed (default 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Flat key=value config file (flags override it).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory containing manifest.csv (from `pcstyle synth`).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Epochs (default 50).
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch size (default 32).
    #[arg(long)]
    batch: Option<usize>,
    /// Learning rate (default 0.01).
    #[arg(long)]
    lr: Option<f64>,
    /// Rebalance target per class (default 320).
    #[arg(long)]
    rebalance: Option<usize>,
    /// Fusion mode: late or early (default late).
    #[arg(long)]
    fusion: Option<String>,
    /// Layer kind: fel or shared_fc (default fel).
    #[arg(long = "layer-kind")]
    layer_kind: Option<String>,
    /// Feature layer widths, e.g. 64,256,1024,2048 (default).
    #[arg(long = "layer-widths")]
    layer_widths: Option<String>,
    /// Classifier head hidden widths, e.g. 512,128 (default).
    #[arg(long = "head-widths")]
    head_widths: Option<String>,
    /// Dropout keep ratio on the head (default 0.7).
    #[arg(long = "dropout-keep")]
    dropout_keep: Option<f64>,
    /// Fraction held out as the test split (default 0.2).
    #[arg(long = "test-frac")]
    test_frac: Option<f64>,
    /// Fraction of the training pool used for validation (default 0.1).
    #[arg(long = "val-frac")]
    val_frac: Option<f64>,
    /// Stop early once validation accuracy reaches this value.
    #[arg(long = "early-stop-acc")]
    early_stop_acc: Option<f64>,
    /// Optional per-epoch training trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// RNG seed (default 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Flat key=value config file (flags override it).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TransferArgs {
    /// Content point cloud (ASCII PLY).
    #[arg(long)]
    content: PathBuf,
    /// Style source: PLY cloud or PPM/PNG image (detected by content).
    #[arg(long)]
    style: PathBuf,
    /// Trained checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Stylized output PLY.
    #[arg(long)]
    out: PathBuf,
    /// Recipe preset: pc-to-pc, image-to-object, or image-to-scene.
    #[arg(long)]
    preset: Option<String>,
    /// Force the style source type instead of detecting it.
    #[arg(long = "style-type", value_parser = ["auto", "cloud", "image"])]
    style_type: Option<String>,
    #[arg(long = "alpha-geo")]
    alpha_geo: Option<f64>,
    #[arg(long = "beta-geo")]
    beta_geo: Option<f64>,
    #[arg(long = "alpha-color")]
    alpha_color: Option<f64>,
    #[arg(long = "beta-color")]
    beta_color: Option<f64>,
    /// Content layers, e.g. 1 or 1,2.
    #[arg(long = "content-layers")]
    content_layers: Option<String>,
    /// Style layers, e.g. 1 or 3,4.
    #[arg(long = "style-layers")]
    style_layers: Option<String>,
    /// Updated properties: geometry, color, or both.
    #[arg(long)]
    mask: Option<String>,
    /// Target initialization: content or gaussian.
    #[arg(long)]
    init: Option<String>,
    /// Optimizer: sgd, momentum, adagrad, rmsprop, or adam.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Gram normalization: per-point or none.
    #[arg(long = "gram-norm")]
    gram_norm: Option<String>,
    /// Optional loss trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Trace sampling period (default 10).
    #[arg(long = "trace-every")]
    trace_every: Option<usize>,
    /// Target point count for gaussian init.
    #[arg(long = "target-points")]
    target_points: Option<usize>,
    /// RNG seed (default 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Flat key=value config file (flags override it).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ClassifyArgs {
    /// Trained checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Input point cloud (ASCII PLY).
    #[arg(long)]
    input: PathBuf,
    /// Flat key=value config file (flags override it).
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(message)) => {
            eprintln!("usage error: {message}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Transfer(args) => cmd_transfer(args),
        Command::Classify(args) => cmd_classify(args),
    }
}

fn load_kv(path: &Option<PathBuf>) -> Result<KvConfig, CliError> {
    match path {
        Some(p) => KvConfig::load(p),
        None => Ok(KvConfig::default()),
    }
}

/// flag > config file > default.
fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let result = std::fs::write(&tmp, contents)
        .and_then(|()| std::fs::rename(&tmp, path))
        .with_context(|| format!("writing {}", path.display()));
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result.map_err(CliError::from)
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let kv = load_kv(&args.config)?;
    let config = SyntheticConfig {
        classes: pick(args.classes, kv.get("classes")?, 8),
        per_class: pick(args.per_class, kv.get("per_class")?, 32),
        points: pick(args.points, kv.get("points")?, 1024),
        seed: pick(args.seed, kv.get("seed")?, 0),
    };
    log::info!("synth: {config:?}, out {}", args.out.display());

    let dataset = generate_synthetic_dataset(&config).map_err(usage_if_invalid)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .map_err(CliError::from)?;

    let mut manifest = String::from("file,label,class_name\n");
    let mut per_class_counter = vec![0usize; dataset.class_count];
    for cloud in &dataset.clouds {
        let label = cloud.label().expect("synthetic clouds are labeled");
        let instance = per_class_counter[label];
        per_class_counter[label] += 1;
        let name = format!("class{label:02}_inst{instance:04}.ply");
        // The synthetic set is normalized; export in raw coordinates.
        let denorm = cloud.clone().denormalize()?;
        save_ply(&denorm, args.out.join(&name))?;
        let _ = writeln!(
            manifest,
            "{name},{label},{}",
            dataset.class_names[label]
        );
    }
    write_atomic(&args.out.join("manifest.csv"), &manifest)?;
    println!(
        "wrote {} clouds across {} classes to {}",
        dataset.len(),
        dataset.class_count,
        args.out.display()
    );
    Ok(())
}

fn load_manifest_dataset(dir: &Path) -> Result<LabeledDataset, CliError> {
    let manifest_path = dir.join("manifest.csv");
    let text = std::fs::read_to_string(&manifest_path)
        .with_context(|| format!("reading {}", manifest_path.display()))
        .map_err(CliError::from)?;
    let mut clouds = Vec::new();
    let mut names: Vec<String> = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 && line.starts_with("file,") {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 2 {
            return Err(CliError::Usage(format!(
                "{}:{}: manifest rows need file,label[,class_name]",
                manifest_path.display(),
                idx + 1
            )));
        }
        let label: usize = fields[1].trim().parse().map_err(|_| {
            CliError::Usage(format!(
                "{}:{}: label {:?} is not an integer",
                manifest_path.display(),
                idx + 1,
                fields[1]
            ))
        })?;
        let cloud = load_ply(dir.join(fields[0].trim()))?
            .normalize_with(ColorRange::EightBit)?
            .with_label(label);
        clouds.push(cloud);
        labels.push(label);
        if label >= names.len() {
            names.resize(label + 1, String::new());
        }
        if fields.len() > 2 && names[label].is_empty() {
            names[label] = fields[2].trim().to_string();
        }
    }
    let class_count = labels.iter().max().map(|m| m + 1).unwrap_or(0);
    names.resize(class_count, String::new());
    for (i, name) in names.iter_mut().enumerate() {
        if name.is_empty() {
            *name = format!("class-{i}");
        }
    }
    LabeledDataset::new(clouds, class_count, names, SplitTag::All).map_err(CliError::from)
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let kv = load_kv(&args.config)?;

    let fusion: Fusion = pick(args.fusion, kv.get_raw("fusion").map(String::from), "late".into())
        .parse()
        .map_err(usage_if_invalid)?;
    let layer_kind: LayerKind =
        pick(args.layer_kind, kv.get_raw("layer_kind").map(String::from), "fel".into())
            .parse()
            .map_err(usage_if_invalid)?;
    let layer_widths = parse_widths::<4>(
        &pick(
            args.layer_widths,
            kv.get_raw("layer_widths").map(String::from),
            "64,256,1024,2048".into(),
        ),
        "layer-widths",
    )?;
    let head_widths = parse_widths::<2>(
        &pick(
            args.head_widths,
            kv.get_raw("head_widths").map(String::from),
            "512,128".into(),
        ),
        "head-widths",
    )?;
    let seed = pick(args.seed, kv.get("seed")?, 0);

    let train_config = TrainConfig {
        epochs: pick(args.epochs, kv.get("epochs")?, 50),
        batch_size: pick(args.batch, kv.get("batch")?, 32),
        learning_rate: pick(args.lr, kv.get("lr")?, 0.01),
        dropout_keep: pick(args.dropout_keep, kv.get("dropout_keep")?, 0.7),
        rebalance_target: pick(args.rebalance, kv.get("rebalance")?, 320),
        val_fraction: pick(args.val_frac, kv.get("val_frac")?, 0.1),
        early_stop_val_acc: args.early_stop_acc.or(kv.get("early_stop_acc")?),
        seed,
        ..TrainConfig::default()
    };
    let test_frac = pick(args.test_frac, kv.get("test_frac")?, 0.2);

    let dataset = load_manifest_dataset(&args.data)?;
    let mut net_config = NetworkConfig::new(dataset.class_count);
    net_config.layer_widths = layer_widths;
    net_config.head_widths = head_widths;
    net_config.fusion = fusion;
    net_config.layer_kind = layer_kind;
    net_config.seed = seed;

    log::info!(
        "train: {} clouds, {} classes, net {net_config:?}, {train_config:?}, test_frac {test_frac}",
        dataset.len(),
        dataset.class_count
    );

    let (train_split, test_split) =
        dataset.stratified_split(test_frac, seed.wrapping_add(101), SplitTag::Test)?;
    let report = train(&train_split, &net_config, &train_config)?;

    if let Some(trace_path) = &args.trace {
        let mut csv = String::from("epoch,train_loss,train_acc,val_acc\n");
        for e in &report.trace {
            let _ = writeln!(csv, "{},{},{},{}", e.epoch, e.train_loss, e.train_acc, e.val_acc);
        }
        write_atomic(trace_path, &csv)?;
    }

    save_params(&report.params, &args.out)?;
    let eval = evaluate(&report.params, &test_split)?;
    println!("test evaluation over {} clouds:", test_split.len());
    print!("{eval}");
    println!("checkpoint written to {}", args.out.display());
    Ok(())
}

fn parse_widths<const N: usize>(raw: &str, what: &str) -> Result<[usize; N], CliError> {
    let list = parse_usize_list(raw)?;
    let len = list.len();
    list.try_into()
        .map_err(|_| CliError::Usage(format!("--{what} needs exactly {N} values, got {len}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StyleKind {
    Cloud,
    Image,
}

fn detect_style_kind(path: &Path, forced: &str) -> Result<StyleKind, CliError> {
    match forced {
        "cloud" => return Ok(StyleKind::Cloud),
        "image" => return Ok(StyleKind::Image),
        _ => {}
    }
    let mut magic = [0u8; 8];
    let n = std::fs::File::open(path)
        .and_then(|mut f| {
            use std::io::Read;
            f.read(&mut magic)
        })
        .with_context(|| format!("reading {}", path.display()))
        .map_err(CliError::from)?;
    let head = &magic[..n];
    if head.starts_with(b"ply") {
        Ok(StyleKind::Cloud)
    } else if head.starts_with(b"P6") || head.starts_with(&[0x89, b'P', b'N', b'G']) {
        Ok(StyleKind::Image)
    } else {
        Err(CliError::Usage(format!(
            "cannot detect the style type of {}; pass --style-type cloud|image",
            path.display()
        )))
    }
}

fn cmd_transfer(args: TransferArgs) -> Result<(), CliError> {
    let kv = load_kv(&args.config)?;

    let preset_name = args.preset.or(kv.get_raw("preset").map(String::from));
    let mut config: TransferConfig = match &preset_name {
        Some(name) => preset(name).map_err(usage_if_invalid)?,
        None => TransferConfig::default(),
    };

    // Config-file overrides, then flag overrides.
    apply_transfer_overrides(&mut config, &kv)?;
    if let Some(v) = args.alpha_geo {
        config.alpha_geo = v;
    }
    if let Some(v) = args.beta_geo {
        config.beta_geo = v;
    }
    if let Some(v) = args.alpha_color {
        config.alpha_color = v;
    }
    if let Some(v) = args.beta_color {
        config.beta_color = v;
    }
    if let Some(raw) = &args.content_layers {
        config.content_layers = parse_usize_list(raw)?;
    }
    if let Some(raw) = &args.style_layers {
        config.style_layers = parse_usize_list(raw)?;
    }
    if let Some(raw) = &args.mask {
        config.update_mask = raw.parse().map_err(usage_if_invalid)?;
    }
    if let Some(raw) = &args.init {
        config.init = raw.parse().map_err(usage_if_invalid)?;
    }
    if let Some(raw) = &args.optimizer {
        config.optimizer = raw.parse().map_err(usage_if_invalid)?;
    }
    if let Some(v) = args.lr {
        config.learning_rate = v;
    }
    if let Some(v) = args.steps {
        config.steps = v;
    }
    if let Some(raw) = &args.gram_norm {
        config.gram_norm = raw.parse().map_err(usage_if_invalid)?;
    }
    if let Some(v) = args.trace_every {
        config.trace_every = v;
    }
    if args.target_points.is_some() {
        config.target_points = args.target_points;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }

    let params = load_params(&args.ckpt)?;
    config.fusion = params.fusion();

    let style_type = pick(
        args.style_type,
        kv.get_raw("style_type").map(String::from),
        "auto".into(),
    );
    let style_kind = detect_style_kind(&args.style, &style_type)?;
    if style_kind == StyleKind::Image && config.update_mask.geometry() {
        return Err(CliError::Usage(
            "an image style has no geometry; use --mask color".into(),
        ));
    }

    log::info!(
        "transfer: content {}, style {} ({:?}), ckpt {}, resolved {config:?}",
        args.content.display(),
        args.style.display(),
        style_kind,
        args.ckpt.display()
    );

    let content = load_ply(&args.content)?.normalize_with(ColorRange::EightBit)?;
    let result = match style_kind {
        StyleKind::Cloud => {
            let style_cloud = load_ply(&args.style)?.normalize_with(ColorRange::EightBit)?;
            stylize(&content, StyleSource::Cloud(&style_cloud), &params, &config)?
        }
        StyleKind::Image => {
            let pixels = image_to_pixel_set(&args.style)?;
            stylize(&content, StyleSource::Pixels(&pixels), &params, &config)?
        }
    };

    if let Some(trace_path) = &args.trace {
        write_trace_csv(&result.trace, trace_path)?;
    }
    // Back into the content cloud's original frame.
    let output = result.stylized.denormalize()?;
    save_ply(&output, &args.out)?;
    let last = result.trace.last().expect("at least one trace row");
    println!(
        "stylized {} points in {} steps (final total loss {}); wrote {}",
        output.len(),
        config.steps,
        last.total,
        args.out.display()
    );
    Ok(())
}

fn apply_transfer_overrides(config: &mut TransferConfig, kv: &KvConfig) -> Result<(), CliError> {
    if let Some(v) = kv.get("alpha_geo")? {
        config.alpha_geo = v;
    }
    if let Some(v) = kv.get("beta_geo")? {
        config.beta_geo = v;
    }
    if let Some(v) = kv.get("alpha_color")? {
        config.alpha_color = v;
    }
    if let Some(v) = kv.get("beta_color")? {
        config.beta_color = v;
    }
    if let Some(raw) = kv.get_raw("content_layers") {
        config.content_layers = parse_usize_list(raw)?;
    }
    if let Some(raw) = kv.get_raw("style_layers") {
        config.style_layers = parse_usize_list(raw)?;
    }
    if let Some(raw) = kv.get_raw("mask") {
        config.update_mask = raw.parse::<UpdateMask>().map_err(usage_if_invalid)?;
    }
    if let Some(raw) = kv.get_raw("init") {
        config.init = raw.parse::<InitStrategy>().map_err(usage_if_invalid)?;
    }
    if let Some(raw) = kv.get_raw("optimizer") {
        config.optimizer = raw.parse::<OptimizerKind>().map_err(usage_if_invalid)?;
    }
    if let Some(v) = kv.get("lr")? {
        config.learning_rate = v;
    }
    if let Some(v) = kv.get("steps")? {
        config.steps = v;
    }
    if let Some(raw) = kv.get_raw("gram_norm") {
        config.gram_norm = raw.parse::<GramNorm>().map_err(usage_if_invalid)?;
    }
    if let Some(v) = kv.get("trace_every")? {
        config.trace_every = v;
    }
    if let Some(v) = kv.get("target_points")? {
        config.target_points = Some(v);
    }
    if let Some(v) = kv.get("seed")? {
        config.seed = v;
    }
    Ok(())
}

fn cmd_classify(args: ClassifyArgs) -> Result<(), CliError> {
    let _ = load_kv(&args.config)?;
    let params = load_params(&args.ckpt)?;
    let cloud = load_ply(&args.input)?.normalize_with(ColorRange::EightBit)?;
    log::info!(
        "classify: {} ({} points) with {}",
        args.input.display(),
        cloud.len(),
        args.ckpt.display()
    );
    let logits = pcstyle::network::classify(&cloud, &params)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    let probs: Vec<f64> = exp.into_iter().map(|e| e / z).collect();
    let best = probs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
        .map(|(i, _)| i)
        .expect("at least two classes");
    println!("predicted: {} ({})", best, params.class_names[best]);
    for (i, p) in probs.iter().enumerate() {
        println!("p[{i}] {} = {}", params.class_names[i], p);
    }
    Ok(())
}

/// Argument-shaped library failures surface as usage errors (exit 1).
fn usage_if_invalid(e: pcstyle::Error) -> CliError {
    match e {
        pcstyle::Error::InvalidArgument(_)
        | pcstyle::Error::UnknownPreset { .. }
        | pcstyle::Error::Config(_) => CliError::Usage(e.to_string()),
        other => CliError::Runtime(anyhow::Error::new(other)),
    }
}
