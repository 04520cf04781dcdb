//! `geocd`: train, infer, route and evaluate bi-temporal change detection.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use geocd_core::confidence::{ConfidenceEntry, Route, DEFAULT_TAU};
use geocd_core::dataset::{compute_norm_stats, load_manifest, Dataset, NormStats, ScenePair, Split};
use geocd_core::metrics::{confusion, falsecolor, metrics_csv, MetricsRow};
use geocd_core::model::{FcnConfig, FcnModel};
use geocd_core::pipeline::{confidence_entries, diversity_experiment, infer_scenes, run_pipeline, DiversityConfig};
use geocd_core::raster::{read_mask, write_mask, write_raster, write_raster_u8};
use geocd_core::synth::{synthesize, write_dataset, StylePool, StyleSpec, SynthConfig};
use geocd_core::train::{train, Augment, ClassWeighting, TrainConfig, TrainReport};
use geocd_core::Error;
use log::{info, warn};

const EXIT_VALIDATION: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_DEGENERATE: u8 = 3;

pub const WEIGHTS_FILE: &str = "model.weights";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";

#[derive(Parser)]
#[command(
    name = "geocd",
    version,
    about = "Bi-temporal change detection with confidence routing"
)]
struct Cli {
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic styled dataset.
    Synth(SynthArgs),
    /// Train the FCN on the manifest's train split.
    Train(TrainArgs),
    /// Predict change maps for test scenes.
    Infer(InferArgs),
    /// Compute per-scene confidence and routing for the test split.
    Confidence(RouteArgs),
    /// Route each test scene to the supervised or the unsupervised map.
    Pipeline(PipelineArgs),
    /// Score prediction masks against reference masks.
    Eval(EvalArgs),
    /// Localized vs. diverse training-set experiment.
    Diversity(DiversityArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolArg {
    Localized,
    Diverse,
    Graded,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    train_scenes: usize,
    #[arg(long, default_value_t = 4)]
    test_scenes: usize,
    #[arg(long, value_enum, default_value_t = PoolArg::Diverse)]
    pool: PoolArg,
    #[arg(long, value_enum, default_value_t = PoolArg::Diverse)]
    test_pool: PoolArg,
    /// Centre of the style window for localized pools.
    #[arg(long, default_value_t = 0.05)]
    center: f32,
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 0.1)]
    density: f64,
}

impl PoolArg {
    fn pool(self, center: f32) -> StylePool {
        match self {
            PoolArg::Localized => StylePool::Localized {
                center,
                width: StylePool::LOCALIZED_WIDTH,
            },
            PoolArg::Diverse => StylePool::Diverse,
            PoolArg::Graded => StylePool::Graded { from: 0.0, to: 1.0 },
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightingArg {
    None,
    InverseFrequency,
}

#[derive(Clone, Copy, ValueEnum)]
enum AugmentArg {
    None,
    D4,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory receiving the weights and the training report.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    base_channels: usize,
    #[arg(long, default_value_t = 3)]
    depth: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    patch_size: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 32)]
    patches_per_scene: usize,
    #[arg(long, value_enum, default_value_t = WeightingArg::InverseFrequency)]
    class_weighting: WeightingArg,
    #[arg(long, value_enum, default_value_t = AugmentArg::D4)]
    augment: AugmentArg,
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    common: ModelArgs,
    /// Restrict to one scene (any split).
    #[arg(long)]
    scene: Option<String>,
    #[arg(long)]
    dump_logits: bool,
}

#[derive(Args)]
struct RouteArgs {
    #[command(flatten)]
    common: ModelArgs,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    route: RouteArgs,
    #[arg(long)]
    dump_logits: bool,
    /// Treat the training set as large and diverse: skip routing, use the supervised model everywhere.
    #[arg(long)]
    assume_diverse: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory holding `<scene>_pred.cdr` masks.
    #[arg(long)]
    pred_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct DiversityArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    scene_size: Option<usize>,
}

/// Degenerate results seen during a command; escalated to exit 3 under `--strict`.
#[derive(Default)]
struct Warnings(Vec<String>);

impl Warnings {
    fn push(&mut self, msg: String) {
        warn!("{msg}");
        self.0.push(msg);
    }
}

fn pred_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_pred.cdr"))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Training statistics stored beside the weights, or recomputed from the train split.
fn norm_stats(weights: &Path, ds: &Dataset, warnings: &mut Warnings) -> anyhow::Result<NormStats> {
    let report_path = weights.with_file_name(TRAIN_REPORT_FILE);
    let stats = if report_path.is_file() {
        let text = fs::read_to_string(&report_path).map_err(|e| Error::io(&report_path, e))?;
        let report: TrainReport = serde_json::from_str(&text).map_err(|e| Error::json(&report_path, e))?;
        report.norm_stats
    } else {
        info!("no {TRAIN_REPORT_FILE} beside the weights; recomputing statistics from the train split");
        compute_norm_stats(ds.split(Split::Train))?
    };
    if stats.is_flagged() {
        warnings.push("normalization has zero-variance bands".into());
    }
    Ok(stats)
}

fn load_model(common: &ModelArgs, warnings: &mut Warnings) -> anyhow::Result<(Dataset, FcnModel, NormStats)> {
    let ds = load_manifest(&common.manifest)?;
    let model = FcnModel::load(&common.weights)?;
    if model.config().in_bands != ds.manifest.band_count {
        return Err(Error::Validation(format!(
            "model expects {} bands, manifest declares {}",
            model.config().in_bands,
            ds.manifest.band_count
        ))
        .into());
    }
    let stats = norm_stats(&common.weights, &ds, warnings)?;
    Ok((ds, model, stats))
}

fn test_scenes(ds: &Dataset) -> anyhow::Result<Vec<&ScenePair>> {
    let scenes: Vec<&ScenePair> = ds.split(Split::Test).collect();
    if scenes.is_empty() {
        return Err(Error::Validation("the test split is empty".into()).into());
    }
    Ok(scenes)
}

fn note_degenerate(entries: &[ConfidenceEntry], warnings: &mut Warnings) {
    if entries.first().is_some_and(|e| e.degenerate) {
        warnings.push("all test scenes have equal confidence; normalized values set to 1".into());
    }
}

fn note_metrics(rows: &[MetricsRow], warnings: &mut Warnings) {
    for r in rows {
        if r.kappa_degenerate {
            warnings.push(format!("scene {}: kappa is degenerate", r.scene_id));
        }
    }
}

fn cmd_synth(a: &SynthArgs) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        train_scenes: a.train_scenes,
        train_pool: a.pool.pool(a.center),
        test_scenes: a.test_scenes,
        test_pool: a.test_pool.pool(a.center),
        height: a.size,
        width: a.size,
        seed: a.seed,
        spec: StyleSpec {
            change_density: a.density,
            ..StyleSpec::default()
        },
    };
    let scenes = synthesize(&cfg)?;
    let manifest = write_dataset(&scenes, &a.out)?;
    info!("wrote {} scenes to {}", manifest.scenes.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs, warnings: &mut Warnings) -> anyhow::Result<()> {
    let ds = load_manifest(&a.manifest)?;
    let model_cfg = FcnConfig {
        base_channels: a.base_channels,
        depth: a.depth,
        seed: a.seed,
        ..FcnConfig::new(ds.manifest.band_count, ds.scheme.total_classes())
    };
    let cfg = TrainConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        patch_size: a.patch_size,
        batch_size: a.batch_size,
        patches_per_scene_per_epoch: a.patches_per_scene,
        class_weighting: match a.class_weighting {
            WeightingArg::None => ClassWeighting::None,
            WeightingArg::InverseFrequency => ClassWeighting::InverseFrequency,
        },
        augment: match a.augment {
            AugmentArg::None => Augment::None,
            AugmentArg::D4 => Augment::D4,
        },
        seed: a.seed,
    };
    let (mut report, model) = train(&ds, model_cfg, cfg)?;
    if report.norm_stats.is_flagged() {
        warnings.push("training data has zero-variance bands".into());
    }
    create_dir(&a.out)?;
    let weights = a.out.join(WEIGHTS_FILE);
    model.save(&weights)?;
    report.model_path = Some(WEIGHTS_FILE.into());
    write_json(&a.out.join(TRAIN_REPORT_FILE), &report)?;
    info!("wrote {}", weights.display());
    Ok(())
}

fn cmd_infer(a: &InferArgs, warnings: &mut Warnings) -> anyhow::Result<()> {
    let (ds, model, stats) = load_model(&a.common, warnings)?;
    let scenes: Vec<&ScenePair> = match &a.scene {
        Some(id) => vec![ds
            .scene(id)
            .ok_or_else(|| Error::Validation(format!("unknown scene id {id}")))?],
        None => test_scenes(&ds)?,
    };
    create_dir(&a.common.out)?;
    for inf in infer_scenes(&model, &scenes, &stats)? {
        write_mask(&inf.map, pred_path(&a.common.out, &inf.scene_id))?;
        if a.dump_logits {
            write_raster(
                inf.logits.raster(),
                a.common.out.join(format!("{}_logits.cdr", inf.scene_id)),
            )?;
        }
    }
    Ok(())
}

fn cmd_confidence(a: &RouteArgs, warnings: &mut Warnings) -> anyhow::Result<()> {
    let (ds, model, stats) = load_model(&a.common, warnings)?;
    let scenes = test_scenes(&ds)?;
    let inferences = infer_scenes(&model, &scenes, &stats)?;
    let entries = confidence_entries(&scenes, &inferences, a.tau)?;
    note_degenerate(&entries, warnings);
    create_dir(&a.common.out)?;
    write_json(&a.common.out.join("confidence.json"), &entries)?;
    Ok(())
}

#[derive(serde::Serialize)]
struct RoutedScene<'a> {
    #[serde(flatten)]
    entry: &'a ConfidenceEntry,
    map_source: Route,
    metrics: Option<&'a MetricsRow>,
}

fn cmd_pipeline(a: &PipelineArgs, warnings: &mut Warnings) -> anyhow::Result<()> {
    let common = &a.route.common;
    let (ds, model, stats) = load_model(common, warnings)?;
    let scenes = test_scenes(&ds)?;
    let run = run_pipeline(&model, &scenes, &stats, a.route.tau, a.assume_diverse)?;
    note_degenerate(&run.entries, warnings);
    create_dir(&common.out)?;
    for o in &run.outcomes {
        write_mask(&o.map, pred_path(&common.out, &o.scene_id))?;
        if a.dump_logits {
            write_raster(
                o.supervised.logits.raster(),
                common.out.join(format!("{}_logits.cdr", o.scene_id)),
            )?;
        }
    }
    let rows = run.metrics(&scenes)?;
    note_metrics(&rows, warnings);
    if !rows.is_empty() {
        write_text(&common.out.join("metrics.csv"), &metrics_csv(&rows))?;
    }
    let report: Vec<RoutedScene> = run
        .entries
        .iter()
        .zip(&run.outcomes)
        .map(|(e, o)| RoutedScene {
            entry: e,
            map_source: o.route,
            metrics: rows.iter().find(|r| r.scene_id == o.scene_id),
        })
        .collect();
    write_json(&common.out.join("routing.json"), &report)?;
    Ok(())
}

fn cmd_eval(a: &EvalArgs, warnings: &mut Warnings) -> anyhow::Result<()> {
    let ds = load_manifest(&a.manifest)?;
    create_dir(&a.out)?;
    let mut rows = Vec::new();
    for s in ds.split(Split::Test) {
        let Some(reference) = &s.mask else { continue };
        let path = pred_path(&a.pred_dir, &s.scene_id);
        if !path.is_file() {
            return Err(
                Error::Validation(format!("scene {}: prediction {} not found", s.scene_id, path.display())).into(),
            );
        }
        let pred = read_mask(&path, ds.scheme.num_change_classes()).with_context(|| format!("scene {}", s.scene_id))?;
        let cm = confusion(&pred, reference).with_context(|| format!("scene {}", s.scene_id))?;
        write_raster_u8(
            &falsecolor(&pred, reference)?,
            a.out.join(format!("{}_falsecolor.cdr", s.scene_id)),
        )?;
        rows.push(MetricsRow::from_confusion(&s.scene_id, cm));
    }
    if rows.is_empty() {
        return Err(Error::Validation("no labelled test scenes to evaluate".into()).into());
    }
    note_metrics(&rows, warnings);
    write_text(&a.out.join("metrics.csv"), &metrics_csv(&rows))?;
    Ok(())
}

fn cmd_diversity(a: &DiversityArgs) -> anyhow::Result<()> {
    let mut cfg = DiversityConfig::desk(a.seed, a.reps);
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = a.scene_size {
        cfg.scene_size = s;
    }
    let report = diversity_experiment(&cfg)?;
    create_dir(&a.out)?;
    write_text(&a.out.join("diversity.csv"), &report.table_csv())?;
    write_json(&a.out.join("diversity.json"), &report)?;
    println!("{}", report.table_csv().trim_end());
    println!(
        "diverse wins {}/{} (sign test p = {:.4})",
        report.diverse_wins,
        report.reps.len(),
        report.sign_test_p
    );
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(e) if e.is_io() => EXIT_IO,
        _ => EXIT_VALIDATION,
    }
}

fn run(cli: &Cli) -> anyhow::Result<(Warnings, bool)> {
    let mut w = Warnings::default();
    let strict = match &cli.command {
        Command::Synth(a) => {
            cmd_synth(a)?;
            false
        }
        Command::Train(a) => {
            cmd_train(a, &mut w)?;
            a.strict
        }
        Command::Infer(a) => {
            cmd_infer(a, &mut w)?;
            a.common.strict
        }
        Command::Confidence(a) => {
            cmd_confidence(a, &mut w)?;
            a.common.strict
        }
        Command::Pipeline(a) => {
            cmd_pipeline(a, &mut w)?;
            a.route.common.strict
        }
        Command::Eval(a) => {
            cmd_eval(a, &mut w)?;
            a.strict
        }
        Command::Diversity(a) => {
            if a.reps < 3 {
                bail!(Error::Validation("--reps must be at least 3".into()));
            }
            cmd_diversity(a)?;
            false
        }
    };
    Ok((w, strict))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.quiet {
            log::LevelFilter::Warn
        } else {
            log::LevelFilter::Info
        })
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok((w, strict)) if strict && !w.0.is_empty() => {
            eprintln!("error: {} degenerate result(s) under --strict", w.0.len());
            ExitCode::from(EXIT_DEGENERATE)
        }
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
