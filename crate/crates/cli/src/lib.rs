//! Command-line front end. Every subcommand parses its flags, calls into
//! `covidnet-core`, and prints what the library returns.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use covidnet_core::complexity::{analyze_architecture, render_breakdown, render_table, FlopConvention};
use covidnet_core::data::{
    body_region_mask, build_manifest, generate_synthetic_dataset, load_png, patient_level_split,
    read_manifest, read_metadata, records_in, write_manifest, ClassLabel, Split, SynthConfig,
    BODY_THRESHOLD, DEFAULT_FRACTIONS,
};
use covidnet_core::explain::{critical_factors, render_overlay, save_overlay, ExplainConfig};
use covidnet_core::graph::{bundled_config, ArchitectureGraph, Checkpoint, ParamStore};
use covidnet_core::train::{
    argmax, check_operational_constraints, evaluate, load_images, preprocess, render_report, train,
    Classifier, GraphClassifier, TrainConfig, TrainStatus,
};
use serde::{Deserialize, Serialize};

/// Exit code for data, config and model errors.
pub const EXIT_DOMAIN: i32 = 1;
/// Exit code for malformed command lines.
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "covidnet", version, about = "Analyze, train, evaluate and explain COVIDNet-CT style networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Seed for every random choice (initialization, splits, sampling, augmentation).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Run single-threaded so results are bitwise reproducible.
    #[arg(long, global = true)]
    pub deterministic: bool,

    /// Worker threads for data loading and compute (default: all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parameter and FLOP counts of one or two architectures.
    Analyze(AnalyzeArgs),
    /// Curate slice metadata into a patient-level split manifest.
    BuildManifest(BuildManifestArgs),
    /// Generate a synthetic three-class dataset of CT-like slices.
    SynthData(SynthArgs),
    /// Train a network on the train split of a manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a manifest.
    Eval(EvalArgs),
    /// Find occlusion-based critical factors for one image.
    Explain(ExplainArgs),
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Architecture config: a JSON file or a bundled name (resnet50, covidnet-ct, covidnet-ct-mini).
    #[arg(long)]
    pub arch: String,
    /// Second architecture to compare against.
    #[arg(long)]
    pub baseline: Option<String>,
    /// Square input resolution to cost at (default: the config's input shape).
    #[arg(long)]
    pub resolution: Option<usize>,
    /// FLOPs per multiply-accumulate: 1x or 2x.
    #[arg(long, default_value = "2x")]
    pub convention: FlopConvention,
    /// Also print the per-node breakdown.
    #[arg(long)]
    pub breakdown: bool,
    /// Report format.
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BuildManifestArgs {
    /// Slice metadata CSV (patient_id, volume_id, slice_path, class, abnormality_marked, background_removed).
    #[arg(long)]
    pub metadata: PathBuf,
    /// Directory the metadata's slice paths are relative to.
    #[arg(long)]
    pub data_root: PathBuf,
    /// Manifest CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Train/val/test patient fractions.
    #[arg(long, num_args = 3, value_delimiter = ',', default_values_t = DEFAULT_FRACTIONS)]
    pub fractions: Vec<f64>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory (receives images/ and metadata.csv).
    #[arg(long)]
    pub out: PathBuf,
    /// Patients per class.
    #[arg(long, default_value_t = 20)]
    pub patients: usize,
    /// Slices per patient.
    #[arg(long, default_value_t = 6)]
    pub slices: usize,
    /// Width and height of each slice in pixels.
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    /// Leave out the bright scanner-table band below the body.
    #[arg(long)]
    pub no_table: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON file with any of: arch, manifest, data_root, out, init, train. Flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Architecture config file or bundled name.
    #[arg(long)]
    pub arch: Option<String>,
    /// Split manifest CSV; train and val rows are used.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Directory the manifest's file paths are relative to.
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    /// Where to write the best checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Checkpoint to start from instead of random initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Number of epochs (default 17).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Learning rate (default 5e-3).
    #[arg(long)]
    pub lr: Option<f64>,
    /// SGD momentum (default 0.9).
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Slices per batch, rebalanced across classes (default 8).
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Cap on batches per epoch (default: one pass over the train split).
    #[arg(long)]
    pub batches_per_epoch: Option<usize>,
    /// Disable augmentation (body masking stays as configured).
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Architecture config file or bundled name.
    #[arg(long)]
    pub arch: String,
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Split manifest CSV.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory the manifest's file paths are relative to.
    #[arg(long)]
    pub data_root: PathBuf,
    /// Which split to evaluate: train, val or test.
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Skip body-region masking before classification.
    #[arg(long)]
    pub no_body_mask: bool,
    /// Images per forward pass.
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Report format.
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    /// Architecture config file or bundled name.
    #[arg(long)]
    pub arch: String,
    /// Checkpoint to explain.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Slice to explain (PNG).
    #[arg(long)]
    pub image: PathBuf,
    /// Class to explain (default: the predicted class).
    #[arg(long)]
    pub class: Option<ClassLabel>,
    /// Occlusion grid, `N` or `ROWSxCOLS`.
    #[arg(long, default_value = "16x16", value_parser = parse_grid)]
    pub grid: (usize, usize),
    /// Target confidence must fall below this fraction of its initial value.
    #[arg(long, default_value_t = covidnet_core::explain::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Maximum number of cells to occlude.
    #[arg(long, default_value_t = covidnet_core::explain::DEFAULT_BUDGET)]
    pub budget: usize,
    /// Skip body-region masking before classification.
    #[arg(long)]
    pub no_body_mask: bool,
    /// Directory for overlay.png and mask.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    let (r, c) = match s.split_once(['x', 'X']) {
        Some((r, c)) => (parse(r)?, parse(c)?),
        None => {
            let n = parse(s)?;
            (n, n)
        }
    };
    if r == 0 || c == 0 {
        return Err("grid dimensions must be positive".into());
    }
    Ok((r, c))
}

/// Contents of a `train --config` file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub arch: Option<String>,
    pub manifest: Option<PathBuf>,
    pub data_root: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub train: TrainConfig,
}

fn display_name(arch: &str) -> String {
    let stem = Path::new(arch)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(arch);
    match stem {
        "resnet50" => "ResNet-50".into(),
        "covidnet-ct" => "COVIDNet-CT".into(),
        "covidnet-ct-mini" => "COVIDNet-CT-mini".into(),
        other => other.into(),
    }
}

/// Loads an architecture from a file, falling back to the bundled config of
/// the same name (with or without `.json`) when no such file exists.
pub fn load_arch(arch: &str) -> anyhow::Result<ArchitectureGraph> {
    let path = Path::new(arch);
    if path.exists() && !path.is_dir() {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        return ArchitectureGraph::parse(&text).with_context(|| format!("parsing {}", path.display()));
    }
    let name = arch.strip_suffix(".json").unwrap_or(arch);
    let name = Path::new(name).file_name().and_then(|s| s.to_str()).unwrap_or(name);
    if bundled_config(name).is_some() {
        return Ok(ArchitectureGraph::bundled(name)?);
    }
    bail!("architecture `{arch}` is neither a file nor a bundled config")
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}

pub fn analyze(args: &AnalyzeArgs) -> anyhow::Result<String> {
    let res = args.resolution.map(|r| (r, r));
    let mut reports = Vec::new();
    for arch in std::iter::once(&args.arch).chain(&args.baseline) {
        let graph = load_arch(arch)?;
        let mut report = analyze_architecture(&graph, res, args.convention)?;
        report.name = display_name(arch);
        reports.push(report);
    }
    if args.format == Format::Json {
        let mut v = serde_json::json!({ "reports": reports });
        if let [a, b] = &reports[..] {
            let (small, large) = if a.totals.params <= b.totals.params { (a, b) } else { (b, a) };
            v["reduction"] = serde_json::json!({
                "model": small.name,
                "relative_to": large.name,
                "values": small.reduction_vs(large),
            });
        }
        return Ok(serde_json::to_string_pretty(&v)? + "\n");
    }
    let refs: Vec<_> = reports.iter().collect();
    let mut out = render_table(&refs);
    if let [a, b] = &reports[..] {
        let (small, large) = if a.totals.params <= b.totals.params { (a, b) } else { (b, a) };
        let r = small.reduction_vs(large);
        writeln!(
            out,
            "\n{} has {:.1}% fewer parameters and {:.1}% fewer FLOPs than {}.",
            small.name, r.param_reduction_pct, r.flop_reduction_pct, large.name
        )?;
    }
    if args.breakdown {
        for r in &reports {
            write!(out, "\n{}\n{}", r.name, render_breakdown(r))?;
        }
    }
    Ok(out)
}

pub fn build_manifest_cmd(args: &BuildManifestArgs, seed: u64) -> anyhow::Result<String> {
    let fractions: [f64; 3] = args
        .fractions
        .as_slice()
        .try_into()
        .context("expected three fractions")?;
    let rows = read_metadata(&args.metadata)
        .with_context(|| format!("reading metadata {}", args.metadata.display()))?;
    let built = build_manifest(&rows, &args.data_root)?;
    let split = patient_level_split(&built.records, fractions, seed)?;
    write_manifest(&args.out, &split.records)?;

    let mut out = String::new();
    writeln!(out, "manifest: {}", args.out.display())?;
    writeln!(out, "{:<14}{:>8}{:>8}{:>8}", "class", "train", "val", "test")?;
    for c in ClassLabel::ALL {
        let counts: Vec<usize> = Split::ALL
            .iter()
            .map(|&s| split.records.iter().filter(|r| r.label == c && r.split == Some(s)).count())
            .collect();
        writeln!(out, "{:<14}{:>8}{:>8}{:>8}", c.display_name(), counts[0], counts[1], counts[2])?;
    }
    let p = split.patient_counts();
    writeln!(out, "{:<14}{:>8}{:>8}{:>8}", "patients", p[0], p[1], p[2])?;
    writeln!(out, "excluded slices: {}", built.excluded.len())?;
    for e in &built.excluded {
        writeln!(out, "  {:?}: {}", e.reason, e.slice_path)?;
    }
    for w in &split.warnings {
        writeln!(out, "warning: {w}")?;
    }
    Ok(out)
}

pub fn synth(args: &SynthArgs, seed: u64) -> anyhow::Result<String> {
    let cfg = SynthConfig {
        patients_per_class: [args.patients; 3],
        slices_per_patient: args.slices,
        resolution: args.resolution,
        seed,
        table_artifact: !args.no_table,
    };
    let summary = generate_synthetic_dataset(&args.out, &cfg)?;
    Ok(format!(
        "wrote {} slices of {} patients to {}\nmetadata: {}\n",
        summary.rows.len(),
        3 * args.patients,
        summary.image_root.display(),
        summary.metadata_path.display()
    ))
}

/// Merges the config file and flags; flags win.
pub fn resolve_train(args: &TrainArgs, cli: &Cli) -> anyhow::Result<TrainFile> {
    let mut file = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<TrainFile>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainFile::default(),
    };
    macro_rules! set {
        ($dst:expr, $src:expr) => {
            if let Some(v) = $src.clone() {
                $dst = v;
            }
        };
    }
    set!(file.arch, args.arch.clone().map(Some));
    set!(file.manifest, args.manifest.clone().map(Some));
    set!(file.data_root, args.data_root.clone().map(Some));
    set!(file.out, args.out.clone().map(Some));
    set!(file.init, args.init.clone().map(Some));
    let t = &mut file.train;
    set!(t.epochs, args.epochs);
    set!(t.learning_rate, args.lr);
    set!(t.momentum, args.momentum);
    set!(t.batch_size, args.batch_size);
    set!(t.seed, cli.seed);
    if args.batches_per_epoch.is_some() {
        t.batches_per_epoch = args.batches_per_epoch;
    }
    if cli.deterministic {
        t.deterministic = true;
    }
    if cli.workers.is_some() {
        t.workers = cli.workers;
    }
    if args.no_augment {
        let mask = t.augmentation.body_mask_enabled;
        t.augmentation = covidnet_core::data::AugmentationConfig {
            body_mask_enabled: mask,
            ..covidnet_core::data::AugmentationConfig::identity()
        };
    }
    Ok(file)
}

fn require<'a, T>(v: &'a Option<T>, flag: &str) -> anyhow::Result<&'a T> {
    v.as_ref().with_context(|| format!("missing --{flag} (flag or config file)"))
}

/// Training run: log lines go to `log` as they happen; returns the final
/// summary. Errors after writing the checkpoint when training diverged.
pub fn train_cmd(file: &TrainFile, log: &mut (dyn std::io::Write + Send)) -> anyhow::Result<String> {
    let arch = require(&file.arch, "arch")?;
    let manifest = require(&file.manifest, "manifest")?;
    let data_root = require(&file.data_root, "data-root")?;
    let out_path = require(&file.out, "out")?;
    if !data_root.is_dir() {
        bail!("data root {} is not a directory", data_root.display());
    }
    let graph = load_arch(arch)?;
    let records = read_manifest(manifest).with_context(|| format!("reading manifest {}", manifest.display()))?;
    let train_records = records_in(&records, Split::Train);
    let val_records = records_in(&records, Split::Val);
    if train_records.is_empty() {
        bail!("manifest {} has no train records", manifest.display());
    }
    let params = match &file.init {
        Some(p) => Checkpoint::load(p)
            .with_context(|| format!("loading checkpoint {}", p.display()))?
            .to_params::<f32>(&graph)?,
        None => ParamStore::init(&graph, file.train.seed),
    };
    let (train_set, val_set) = file.train.install(|| -> anyhow::Result<_> {
        Ok((load_images(&train_records, data_root)?, load_images(&val_records, data_root)?))
    })??;
    let mut log_err = None;
    let outcome = train(&graph, params, &train_set, &val_set, &file.train, |e| {
        if let Err(err) = writeln!(log, "{}", e.line()).and_then(|_| log.flush()) {
            log_err.get_or_insert(err);
        }
    })?;
    if let Some(err) = log_err {
        return Err(err).context("writing training log");
    }
    if let Some(dir) = out_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    outcome.best.save(out_path)?;

    let mut out = String::new();
    writeln!(out, "checkpoint: {}", out_path.display())?;
    match (outcome.best_epoch, outcome.history.last()) {
        (Some(best), _) => {
            let log = &outcome.history[best - 1];
            writeln!(out, "best epoch: {best}")?;
            if let Some(m) = &log.val {
                write!(out, "\n{}", render_report(&display_name(arch), &log.val_matrix, m))?;
                let check = check_operational_constraints(m);
                writeln!(out, "\n{}", constraint_line(&check))?;
            }
        }
        (None, _) => writeln!(out, "no epoch completed")?,
    }
    if let TrainStatus::Diverged { epoch, batch, reason } = &outcome.status {
        bail!(
            "training diverged at epoch {} batch {}: {reason}; last good weights saved to {}\n{out}",
            epoch + 1,
            batch + 1,
            out_path.display()
        );
    }
    Ok(out)
}

fn constraint_line(check: &covidnet_core::train::ConstraintCheck) -> String {
    if check.passed {
        "operational constraints: PASS (COVID-19 sensitivity and PPV >= 95%)".into()
    } else {
        format!("operational constraints: FAIL ({})", check.reasons.join("; "))
    }
}

pub fn eval_cmd(args: &EvalArgs) -> anyhow::Result<String> {
    let graph = load_arch(&args.arch)?;
    let params = Checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?
        .to_params::<f32>(&graph)?;
    let manifest = read_manifest(&args.manifest)
        .with_context(|| format!("reading manifest {}", args.manifest.display()))?;
    let records = records_in(&manifest, args.split);
    if records.is_empty() {
        bail!("manifest has no {} records", args.split.as_str());
    }
    let clf = GraphClassifier {
        graph: &graph,
        params: &params,
    };
    let outcome = evaluate(&clf, &records, &args.data_root, !args.no_body_mask, args.batch_size)?;
    for s in &outcome.skipped {
        eprintln!("warning: skipped {}: {}", s.filepath, s.reason);
    }
    let metrics = outcome.metrics()?;
    let check = check_operational_constraints(&metrics);
    if args.format == Format::Json {
        let v = serde_json::json!({
            "split": args.split.as_str(),
            "confusion_matrix": outcome.matrix,
            "metrics": metrics,
            "constraints": check,
            "skipped": outcome.skipped,
        });
        return Ok(serde_json::to_string_pretty(&v)? + "\n");
    }
    let mut out = format!("split: {}\n", args.split.as_str());
    if !outcome.skipped.is_empty() {
        writeln!(out, "skipped unreadable images: {}", outcome.skipped.len())?;
    }
    write!(out, "{}", render_report(&display_name(&args.arch), &outcome.matrix, &metrics))?;
    writeln!(out, "\n{}", constraint_line(&check))?;
    Ok(out)
}

pub fn explain_cmd(args: &ExplainArgs) -> anyhow::Result<String> {
    let graph = load_arch(&args.arch)?;
    let params = Checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?
        .to_params::<f32>(&graph)?;
    let clf = GraphClassifier {
        graph: &graph,
        params: &params,
    };
    let (w, h) = clf.input_size();
    let image = preprocess(&load_png(&args.image)?, !args.no_body_mask, w, h);
    let target = match args.class {
        Some(c) => c,
        None => {
            let p = clf.predict_proba(std::slice::from_ref(&image))?;
            ClassLabel::from_index(argmax(&p[0])).context("empty prediction")?
        }
    };
    let cfg = ExplainConfig {
        grid: args.grid,
        threshold: args.threshold,
        budget: args.budget,
    };
    let mask = critical_factors(&clf, &image, target, &cfg)?;
    let body = body_region_mask(&image, BODY_THRESHOLD);
    let outside = mask.outside_body_fraction(&body)?;
    std::fs::create_dir_all(&args.out)?;
    let overlay_path = args.out.join("overlay.png");
    let mask_path = args.out.join("mask.json");
    save_overlay(&overlay_path, &render_overlay(&image, &mask)?)?;
    std::fs::write(&mask_path, mask.to_json() + "\n")?;

    let mut out = String::new();
    writeln!(out, "method: {}", mask.method)?;
    writeln!(out, "target: {}", target.display_name())?;
    writeln!(out, "cells: {} of {}", mask.cells.len(), mask.grid.0 * mask.grid.1)?;
    writeln!(
        out,
        "confidence: {:.4} -> {:.4} (threshold {:.4})",
        mask.confidence_before,
        mask.confidence_after,
        mask.threshold * mask.confidence_before
    )?;
    writeln!(out, "achieved: {} ({:?})", mask.achieved, mask.stop_reason)?;
    writeln!(out, "mask outside body: {:.1}%", 100.0 * outside)?;
    writeln!(out, "overlay: {}", overlay_path.display())?;
    writeln!(out, "mask: {}", mask_path.display())?;
    Ok(out)
}

fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Analyze(a) => emit(a.out.as_deref(), &analyze(a)?),
        Command::BuildManifest(a) => emit(None, &build_manifest_cmd(a, seed)?),
        Command::SynthData(a) => emit(None, &synth(a, seed)?),
        Command::Train(a) => {
            let file = resolve_train(a, cli)?;
            let summary = train_cmd(&file, &mut std::io::stdout())?;
            emit(None, &summary)
        }
        Command::Eval(a) => emit(a.out.as_deref(), &eval_cmd(a)?),
        Command::Explain(a) => emit(None, &explain_cmd(a)?),
    }
}

/// Runs the tool on `argv` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let threads = if cli.deterministic { Some(1) } else { cli.workers };
    let result = match threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            Ok(pool) => pool.install(|| dispatch(&cli)),
            Err(e) => Err(anyhow::anyhow!("thread pool: {e}")),
        },
        None => dispatch(&cli),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_DOMAIN
        }
    }
}
