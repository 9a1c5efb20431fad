//! The `fcbswin` command line.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use fcbswin::datakit::{
    audit_leakage, list_images, load_dataset, random_partition, read_image, sequence_partition, sorted_fixed_partition,
    write_mask_png, DatasetIndex, DatasetKind, PartitionSpec, Ratios, SequenceMap, Split,
};
use fcbswin::gradcheck::run_suite;
use fcbswin::model::{ModelConfig, SegModel};
use fcbswin::trainer::{evaluate, predict_mask, read_checkpoint, train, DiskSource, EvalResolution, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_LEAKAGE: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

/// Environment variable requesting bitwise-reproducible reductions.
pub const DETERMINISTIC_ENV: &str = "FCB_DETERMINISTIC";

#[derive(Debug, Parser)]
#[command(name = "fcbswin", version, about = "Polyp segmentation with a dual-branch FCN + SwinV2-UNET network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a train/val/test partition manifest.
    Split(SplitArgs),
    /// Check a manifest for video sequences shared between splits.
    Audit(AuditArgs),
    /// Train from a JSON run config.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest split or a whole dataset.
    Eval(EvalArgs),
    /// Write binary PNG masks for every image in a directory.
    Predict(PredictArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Method {
    Sorted,
    Random,
    Sequence,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Kind {
    KvasirSeg,
    CvcClinicDb,
    Generic,
}

impl From<Kind> for DatasetKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::KvasirSeg => DatasetKind::KvasirSeg,
            Kind::CvcClinicDb => DatasetKind::CvcClinicDb,
            Kind::Generic => DatasetKind::Generic,
        }
    }
}

#[derive(Debug, Args)]
struct DatasetArgs {
    /// Dataset root directory.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "generic")]
    kind: Kind,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[arg(long, value_enum)]
    method: Method,
    /// Percentages for train,val,test.
    #[arg(long, default_value = "80,10,10")]
    ratios: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Filename→sequence CSV, or `example` for the bundled illustrative map.
    #[arg(long)]
    seqmap: Option<String>,
    #[arg(long, value_delimiter = ',')]
    val_seqs: Vec<u32>,
    #[arg(long, value_delimiter = ',')]
    test_seqs: Vec<u32>,
    /// Manifest path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AuditArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Filename→sequence CSV, or `example` for the bundled illustrative map.
    #[arg(long)]
    seqmap: String,
    /// Report path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// JSON run config.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Directory holding best.fcbw and best.json.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DatasetArgs,
    #[arg(long, conflicts_with = "full_dataset", required_unless_present = "full_dataset")]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Evaluate every image in the dataset.
    #[arg(long)]
    full_dataset: bool,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Compare at each image's native size instead of the model input size.
    #[arg(long)]
    native: bool,
    #[arg(long)]
    out: PathBuf,
    /// File stem for the per-image `<stem>.csv` and the summary `<stem>.json`.
    #[arg(long, default_value = "metrics")]
    stem: String,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub root: PathBuf,
    pub kind: DatasetKind,
}

/// A named preset or a full model configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelChoice {
    Preset(String),
    Custom(ModelConfig),
}

impl ModelChoice {
    pub fn resolve(&self) -> anyhow::Result<ModelConfig> {
        match self {
            ModelChoice::Preset(p) if p == "base" => Ok(ModelConfig::base()),
            ModelChoice::Preset(p) if p == "toy" => Ok(ModelConfig::toy()),
            ModelChoice::Preset(p) => bail!("unknown model preset `{p}` (expected base or toy)"),
            ModelChoice::Custom(c) => Ok(c.clone()),
        }
    }
}

/// Everything `train` needs, read from JSON. Relative paths resolve against
/// the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub manifest: PathBuf,
    pub output_dir: PathBuf,
    pub model: ModelChoice,
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.dataset.root, &mut cfg.manifest, &mut cfg.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<ModelConfig> {
        let model = self.model.resolve()?;
        model.validate()?;
        self.train.validate()?;
        Ok(model)
    }
}

/// An error tagged with the exit code it maps to.
struct Failure {
    code: i32,
    error: anyhow::Error,
}

trait Stage<T> {
    fn stage(self, code: i32) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Stage<T> for Result<T, E> {
    fn stage(self, code: i32) -> Result<T, Failure> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

fn config_error(msg: impl std::fmt::Display) -> Failure {
    Failure { code: EXIT_CONFIG, error: anyhow::anyhow!("{msg}") }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1") {
        log::info!("{DETERMINISTIC_ENV}=1: reductions run in fixed order");
    }
    let result = match cli.command {
        Command::Split(a) => cmd_split(a),
        Command::Audit(a) => cmd_audit(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Gradcheck => cmd_gradcheck(),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            f.code
        }
    }
}

fn parse_ratios(text: &str) -> Result<Ratios, Failure> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| config_error(format!("bad --ratios `{text}`: {e}")))?;
    let [train, val, test] = parts[..] else {
        return Err(config_error(format!("--ratios needs three values, got `{text}`")));
    };
    Ratios::new(train, val, test).stage(EXIT_CONFIG)
}

fn load_seqmap(arg: &str) -> Result<SequenceMap, Failure> {
    if arg == "example" {
        log::warn!("using the bundled example sequence map; it is illustrative, not the official annotation");
        return Ok(SequenceMap::example_cvc());
    }
    SequenceMap::load(arg).stage(EXIT_CONFIG)
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())).stage(EXIT_RUNTIME),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_split(a: SplitArgs) -> Result<i32, Failure> {
    let ratios = parse_ratios(&a.ratios)?;
    let seqmap = match (a.method, a.seqmap.as_deref()) {
        (Method::Sequence, Some(s)) => Some(load_seqmap(s)?),
        (Method::Sequence, None) => return Err(config_error("--method sequence needs --seqmap")),
        _ => None,
    };
    let index = load_dataset(&a.data.dataset, a.data.kind.into()).stage(EXIT_CONFIG)?;
    let spec = match a.method {
        Method::Sorted => sorted_fixed_partition(&index, ratios),
        Method::Random => {
            let seed = a.seed.ok_or_else(|| config_error("--method random needs --seed"))?;
            random_partition(&index, ratios, seed)
        }
        Method::Sequence => {
            let val: BTreeSet<u32> = a.val_seqs.iter().copied().collect();
            let test: BTreeSet<u32> = a.test_seqs.iter().copied().collect();
            sequence_partition(&index, seqmap.as_ref().expect("loaded above"), &val, &test)
        }
    }
    .stage(EXIT_CONFIG)?;
    eprintln!("train {} / val {} / test {}", spec.train.len(), spec.val.len(), spec.test.len());
    emit(a.out.as_deref(), &spec.to_json())?;
    Ok(EXIT_OK)
}

fn cmd_audit(a: AuditArgs) -> Result<i32, Failure> {
    let spec = PartitionSpec::load(&a.manifest).stage(EXIT_CONFIG)?;
    let seqmap = load_seqmap(&a.seqmap)?;
    let report = audit_leakage(&spec, &seqmap).stage(EXIT_CONFIG)?;
    let json = serde_json::to_string_pretty(&report).stage(EXIT_RUNTIME)? + "\n";
    emit(a.out.as_deref(), &json)?;
    if report.is_clean {
        eprintln!("clean: no sequence appears in more than one split");
        Ok(EXIT_OK)
    } else {
        eprintln!("leaking: {} sequence(s) span several splits", report.leaking_sequences.len());
        Ok(EXIT_LEAKAGE)
    }
}

fn split_source(index: &DatasetIndex, spec: &PartitionSpec, split: Split) -> Result<DiskSource, Failure> {
    DiskSource::new(index.clone(), spec.split(split)).stage(EXIT_CONFIG)
}

fn cmd_train(a: TrainArgs) -> Result<i32, Failure> {
    let mut cfg = RunConfig::load(&a.config).stage(EXIT_CONFIG)?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.train.global_seed = s;
    }
    if let Some(o) = a.output {
        cfg.output_dir = o;
    }
    let model_cfg = cfg.validate().stage(EXIT_CONFIG)?;
    let index = load_dataset(&cfg.dataset.root, cfg.dataset.kind).stage(EXIT_CONFIG)?;
    let spec = PartitionSpec::load(&cfg.manifest).stage(EXIT_CONFIG)?;
    spec.check_covers(&index).stage(EXIT_CONFIG)?;
    let train_src = split_source(&index, &spec, Split::Train)?;
    let val_src = split_source(&index, &spec, Split::Val)?;

    let mut model = SegModel::<f32>::new(model_cfg, cfg.init_seed).stage(EXIT_CONFIG)?;
    fs::create_dir_all(&cfg.output_dir).stage(EXIT_RUNTIME)?;
    let run_json = serde_json::to_string_pretty(&cfg).stage(EXIT_RUNTIME)? + "\n";
    fs::write(cfg.output_dir.join("run_config.json"), run_json).stage(EXIT_RUNTIME)?;
    let report = train(&mut model, &cfg.train, &train_src, &val_src, Some(&cfg.output_dir)).stage(EXIT_RUNTIME)?;
    match report.state.checkpoint.best_epoch {
        Some(e) => eprintln!(
            "best val mDice {:.4} at epoch {e}; checkpoint in {}",
            report.state.checkpoint.best_val_dice,
            cfg.output_dir.display()
        ),
        None => eprintln!("no checkpoint written"),
    }
    Ok(EXIT_OK)
}

fn cmd_eval(a: EvalArgs) -> Result<i32, Failure> {
    let (model, _) = read_checkpoint(&a.checkpoint).stage(EXIT_CONFIG)?;
    let index = load_dataset(&a.data.dataset, a.data.kind.into()).stage(EXIT_CONFIG)?;
    let source = match &a.manifest {
        Some(m) => {
            let spec = PartitionSpec::load(m).stage(EXIT_CONFIG)?;
            split_source(&index, &spec, a.split)?
        }
        None => DiskSource::all(index),
    };
    let resolution = if a.native { EvalResolution::Native } else { EvalResolution::Model };
    let report = evaluate(&model, &source, a.threshold, resolution).stage(EXIT_RUNTIME)?;
    report.write(&a.out, &a.stem).stage(EXIT_RUNTIME)?;
    let s = &report.summary;
    println!(
        "images {} mDice {:.4} mIoU {:.4} mPrecision {:.4} mRecall {:.4}",
        s.images, s.m_dice, s.m_iou, s.m_precision, s.m_recall
    );
    Ok(EXIT_OK)
}

fn cmd_predict(a: PredictArgs) -> Result<i32, Failure> {
    if !(a.threshold > 0.0 && a.threshold < 1.0) {
        return Err(config_error("--threshold must lie in (0, 1)"));
    }
    let (model, _) = read_checkpoint(&a.checkpoint).stage(EXIT_CONFIG)?;
    let names = list_images(&a.images).stage(EXIT_CONFIG)?;
    fs::create_dir_all(&a.out).stage(EXIT_RUNTIME)?;
    for name in &names {
        let image = read_image(&a.images.join(name)).stage(EXIT_RUNTIME)?;
        let mask = predict_mask(&model, &image, a.threshold).stage(EXIT_RUNTIME)?;
        let stem = name.rsplit_once('.').map_or(name.as_str(), |(s, _)| s);
        write_mask_png(&a.out.join(format!("{stem}.png")), &mask).stage(EXIT_RUNTIME)?;
    }
    eprintln!("wrote {} mask(s) to {}", names.len(), a.out.display());
    Ok(EXIT_OK)
}

fn cmd_gradcheck() -> Result<i32, Failure> {
    let reports = run_suite().stage(EXIT_RUNTIME)?;
    let mut all = true;
    for r in &reports {
        all &= r.passed();
        println!(
            "{:<4} {:<26} max rel err {:.3e} (tol {:.0e}, {} probes, {} reduced step, {} skipped)",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.max_rel_error,
            r.tolerance,
            r.probes,
            r.reduced_step,
            r.skipped
        );
    }
    Ok(if all { EXIT_OK } else { EXIT_RUNTIME })
}
