//! mrpd: generate synthetic reaching-motion datasets, train and evaluate the
//! late-fusion predictor, and reproduce the analysis artifacts (duration
//! statistics, motion-energy images, latency reports).
//!
//! Exit codes: 0 success, 1 a check ran and failed (gradient check over
//! tolerance, grace budget exhausted), 2 bad usage or a runtime error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use mrpd_core::analysis::{
    classification_metrics, collapse_columns, one_way_anova, region_stats, sad_image, tukey_hsd,
    write_pgm, ClassificationMetrics, ConfusionMatrix,
};
use mrpd_core::data::{kfold, read_dataset, split_dataset, Dataset, SampleWindow, SplitSpec};
use mrpd_core::model::{
    analytic_branch_counts, gradient_report, FusionModel, ModelConfig, ModelKind, MODEL_KINDS,
};
use mrpd_core::replay::{measure_latency, Clock};
use mrpd_core::synth::{generate_recording, generate_to_dir, GeneratorParams};
use mrpd_core::train::{
    aggregate_folds, check_geometry, comparison_csv, compare_models, cross_validate,
    dataset_windows, evaluate, loss_curve_csv, run_fold, train, TrainConfig,
};
use mrpd_core::{reference, Error, Region, Result, REGIONS};

// ── Command surface ─────────────────────────────────────────────────────────

#[derive(Parser)]
#[command(name = "mrpd", version, about = "Reaching-position prediction pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset container
    Gen(GenArgs),
    /// Train one model and write a run directory
    Train(TrainArgs),
    /// K-fold cross-validation
    Xval(XvalArgs),
    /// Evaluate a checkpoint on a dataset's held-out split
    Eval(EvalArgs),
    /// Train all four model kinds under one split and compare
    Compare(CompareArgs),
    /// Reaching-duration statistics, ANOVA and Tukey HSD
    Stats(StatsArgs),
    /// Sum-of-absolute-differences motion-energy image
    Sad(SadArgs),
    /// Replay recordings through a checkpoint and measure latency
    Replay(ReplayArgs),
    /// Parameter counts per branch, with published reference counts
    Params(ParamsArgs),
    /// Finite-difference gradient verification
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output directory for the container
    #[arg(long)]
    out: PathBuf,
    /// Recordings per shelf region (9 regions)
    #[arg(long, default_value_t = 171)]
    per_region: usize,
    /// Master seed; defaults to MRPD_SEED or 0
    #[arg(long)]
    seed: Option<u64>,
    /// Render 256x188 depth images instead of the 64x47 desk scale
    #[arg(long)]
    full_size: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (from `gen`)
    #[arg(long)]
    data: PathBuf,
    /// Run spec JSON: {"model": {...}, "kind": "fusion", "train": {...}};
    /// every field optional, defaults are the desk-scale fusion model
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory to write (config snapshot, checkpoint, curves, metrics)
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed; defaults to MRPD_SEED or the config value
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct XvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Number of folds
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Parallel fold workers
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the per-fold report CSV here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint path (from a `train` run directory)
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output directory for metrics CSV and confusion PGM
    #[arg(long, default_value = "eval-out")]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the comparison table CSV here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    data: PathBuf,
    /// Directory for stats.csv and tukey.csv (stdout only when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SadArgs {
    #[arg(long)]
    data: PathBuf,
    /// Recording id within the dataset
    #[arg(long)]
    rec: String,
    /// Number of consecutive frame differences to accumulate
    #[arg(long, default_value_t = 10)]
    span: usize,
    /// Output PGM path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Recordings to replay
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Deliver frames instantly instead of pacing out recorded gaps
    #[arg(long)]
    virtual_clock: bool,
    /// Write the latency report CSV here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ParamsArgs {
    /// Run spec JSON; defaults to the full-size architecture
    #[arg(long)]
    config: Option<PathBuf>,
    /// Width divisor shortcut (1 = full size, 16 = desk scale)
    #[arg(long, conflicts_with = "config")]
    scale: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Run spec JSON; defaults to the desk-scale fusion model
    #[arg(long)]
    config: Option<PathBuf>,
    /// Width divisor shortcut (16 = desk scale)
    #[arg(long, conflicts_with = "config")]
    scale: Option<usize>,
    /// Weight coordinates to verify
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long)]
    seed: Option<u64>,
}

// ── Run spec ────────────────────────────────────────────────────────────────

fn default_kind() -> String {
    "fusion".to_string()
}

/// The JSON config consumed by train/xval/compare/params/gradcheck and
/// snapshotted into run directories. Every field is optional.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunSpec {
    #[serde(default = "ModelConfig::desk_scale")]
    model: ModelConfig,
    #[serde(default = "default_kind")]
    kind: String,
    #[serde(default)]
    train: TrainConfig,
}

impl RunSpec {
    fn with_model(model: ModelConfig) -> RunSpec {
        RunSpec { model, kind: default_kind(), train: TrainConfig::default() }
    }

    fn load(path: &Path) -> Result<RunSpec> {
        let spec: RunSpec = serde_json::from_str(&fs::read_to_string(path)?)?;
        spec.model.validate()?;
        Ok(spec)
    }

    fn kind(&self) -> Result<ModelKind> {
        ModelKind::from_tag(&self.kind)
    }
}

/// Config file if given, else the supplied default model.
fn load_spec(config: &Option<PathBuf>, default_model: fn() -> ModelConfig) -> Result<RunSpec> {
    match config {
        Some(path) => RunSpec::load(path),
        None => Ok(RunSpec::with_model(default_model())),
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("MRPD_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::validation(format!("MRPD_SEED is not an integer: {s:?}"))),
        Err(_) => Ok(None),
    }
}

/// Seed precedence: explicit flag, then MRPD_SEED, then the fallback
/// (a config-file value or 0).
fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64> {
    Ok(match flag {
        Some(s) => s,
        None => env_seed()?.unwrap_or(fallback),
    })
}

// ── Shared helpers ──────────────────────────────────────────────────────────

fn region_labels() -> Vec<&'static str> {
    REGIONS.iter().map(|r| r.label()).collect()
}

fn open_dataset(dir: &Path) -> Result<Dataset> {
    read_dataset(dir)
        .map_err(|e| Error::validation(format!("cannot open dataset {}: {e}", dir.display())))
}

/// Split windows into (train, test) refs; uses the manifest split when the
/// container carries one, otherwise derives a stratified split from `seed`.
fn split_windows<'w>(
    ds: &Dataset,
    windows: &'w [(String, SampleWindow)],
    seed: u64,
) -> Result<(Vec<&'w SampleWindow>, Vec<&'w SampleWindow>, SplitSpec)> {
    let split = match &ds.manifest.split {
        Some(s) => s.clone(),
        None => {
            let items: Vec<(String, Region)> = ds
                .manifest
                .recordings
                .iter()
                .map(|e| Ok((e.id.clone(), Region::from_label(&e.label)?)))
                .collect::<Result<_>>()?;
            split_dataset(&items, seed, true)?
        }
    };
    let pick = |ids: &[String]| -> Result<Vec<&'w SampleWindow>> {
        ids.iter()
            .map(|id| {
                windows
                    .iter()
                    .find(|(wid, _)| wid == id)
                    .map(|(_, w)| w)
                    .ok_or_else(|| Error::validation(format!("split names {id}, not in dataset")))
            })
            .collect()
    };
    Ok((pick(&split.train)?, pick(&split.test)?, split))
}

fn metrics_csv(metrics: &ClassificationMetrics, labels: &[&str]) -> String {
    let mut out = String::from("name,value\n");
    out.push_str(&format!("accuracy,{}\n", metrics.accuracy));
    out.push_str(&format!("macro_precision,{}\n", metrics.macro_precision));
    out.push_str(&format!("macro_recall,{}\n", metrics.macro_recall));
    out.push_str(&format!("macro_f1,{}\n", metrics.macro_f1));
    for (label, c) in labels.iter().zip(&metrics.per_class) {
        out.push_str(&format!("precision_{label},{}\n", c.precision));
        out.push_str(&format!("recall_{label},{}\n", c.recall));
        out.push_str(&format!("f1_{label},{}\n", c.f1));
        out.push_str(&format!("support_{label},{}\n", c.support));
    }
    out
}

/// Confusion counts as a grayscale heatmap, brightest = largest count.
fn confusion_pgm(cm: &ConfusionMatrix, path: &Path) -> Result<()> {
    let k = cm.classes();
    let mut max = 0u64;
    for a in 0..k {
        for p in 0..k {
            max = max.max(cm.count(a, p));
        }
    }
    let scale = if max == 0 { 0.0 } else { 255.0 / max as f64 };
    let mut px = Vec::with_capacity(k * k);
    for a in 0..k {
        for p in 0..k {
            px.push(cm.count(a, p) as f64 * scale);
        }
    }
    write_pgm(path, k, k, &px)
}

fn print_metrics(metrics: &ClassificationMetrics, reference_tag: &str) {
    println!(
        "accuracy {:.4}  macro precision {:.4}  recall {:.4}  F1 {:.4}",
        metrics.accuracy, metrics.macro_precision, metrics.macro_recall, metrics.macro_f1
    );
    if let Some(r) = reference::MODEL_RESULTS.iter().find(|r| r.model == reference_tag) {
        println!(
            "reference ({}, full size, human data): accuracy {:.2}  precision {:.2}  recall {:.2}  F1 {:.2}",
            r.model, r.accuracy, r.precision, r.recall, r.f1
        );
    }
}

// ── Subcommands ─────────────────────────────────────────────────────────────

enum Outcome {
    Pass,
    CheckFailed(String),
}

fn cmd_gen(args: GenArgs) -> Result<Outcome> {
    let seed = resolve_seed(args.seed, 0)?;
    let params = if args.full_size {
        GeneratorParams::full_size(seed)
    } else {
        GeneratorParams::new(seed)
    };
    let counts = [args.per_region; 9];
    let mut ds = generate_to_dir(&params, &counts, &args.out)?;
    let n = ds.len();
    if n >= 10 {
        let items: Vec<(String, Region)> = ds
            .manifest
            .recordings
            .iter()
            .map(|e| Ok((e.id.clone(), Region::from_label(&e.label)?)))
            .collect::<Result<_>>()?;
        let ids: Vec<String> = items.iter().map(|(id, _)| id.clone()).collect();
        ds.manifest.split = Some(split_dataset(&items, seed, true)?);
        ds.manifest.folds = Some(kfold(&ids, 10, seed)?);
        ds.save_manifest()?;
    } else {
        println!("dataset of {n} recordings is below 10; no split or fold plan stored");
    }
    println!(
        "wrote {n} recordings ({}x{} depth, seed {seed}) to {}",
        params.depth_h,
        params.depth_w,
        args.out.display()
    );
    Ok(Outcome::Pass)
}

fn cmd_train(args: TrainArgs) -> Result<Outcome> {
    let mut spec = load_spec(&args.config, ModelConfig::desk_scale)?;
    spec.train.seed = resolve_seed(args.seed, spec.train.seed)?;
    let kind = spec.kind()?;
    let ds = open_dataset(&args.data)?;
    check_geometry(&spec.model, &ds)?;
    let windows = dataset_windows(&ds)?;
    let (train_set, test_set, split) = split_windows(&ds, &windows, spec.train.seed)?;

    let mut model = FusionModel::new(spec.model.clone(), kind, spec.train.seed)?;
    let curve = train(&mut model, &train_set, Some(&test_set), &spec.train)?;
    let cm = evaluate(&model, &test_set)?;
    let metrics = classification_metrics(&cm)?;

    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("config.json"), serde_json::to_string_pretty(&spec)?)?;
    fs::write(args.out.join("split.json"), serde_json::to_string_pretty(&split)?)?;
    fs::write(args.out.join("loss_curve.csv"), loss_curve_csv(&curve))?;
    let labels = region_labels();
    fs::write(args.out.join("metrics.csv"), metrics_csv(&metrics, &labels))?;
    fs::write(args.out.join("confusion.csv"), cm.to_csv(&labels)?)?;
    confusion_pgm(&cm, &args.out.join("confusion.pgm"))?;
    model.save(&args.out.join("model.ckpt"))?;

    let last = curve.last().expect("at least one epoch");
    println!(
        "{} model: {} epochs, final train loss {:.4}, {} train / {} test windows",
        kind.tag(),
        curve.len(),
        last.train_loss,
        train_set.len(),
        test_set.len()
    );
    print_metrics(&metrics, kind.tag());
    println!("run directory: {}", args.out.display());
    Ok(Outcome::Pass)
}

fn cmd_xval(args: XvalArgs) -> Result<Outcome> {
    let mut spec = load_spec(&args.config, ModelConfig::desk_scale)?;
    spec.train.seed = resolve_seed(args.seed, spec.train.seed)?;
    let kind = spec.kind()?;
    if args.jobs == 0 {
        return Err(Error::validation("--jobs must be at least 1"));
    }
    let ds = open_dataset(&args.data)?;
    check_geometry(&spec.model, &ds)?;
    let windows = dataset_windows(&ds)?;

    let cv = if args.jobs == 1 {
        cross_validate(&spec.model, kind, &windows, args.k, &spec.train)?
    } else {
        let ids: Vec<String> = windows.iter().map(|(id, _)| id.clone()).collect();
        let plan = kfold(&ids, args.k, spec.train.seed)?;
        let mut outcomes = Vec::with_capacity(args.k);
        let folds: Vec<usize> = (0..args.k).collect();
        for chunk in folds.chunks(args.jobs) {
            let batch: Vec<_> = std::thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|&f| {
                        let (model, train_cfg, plan, windows) =
                            (&spec.model, &spec.train, &plan, &windows);
                        scope.spawn(move || run_fold(model, kind, windows, plan, f, train_cfg))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("fold worker panicked")).collect()
            });
            for outcome in batch {
                outcomes.push(outcome?);
            }
        }
        aggregate_folds(outcomes)
    };

    for f in &cv.folds {
        println!(
            "fold {}: accuracy {:.4}  macro F1 {:.4}  ({} epochs)",
            f.fold,
            f.metrics.accuracy,
            f.metrics.macro_f1,
            f.curve.len()
        );
    }
    println!(
        "{}-fold {}: accuracy {:.4} +/- {:.4}, macro F1 {:.4} +/- {:.4}",
        args.k, kind.tag(), cv.mean_accuracy, cv.sd_accuracy, cv.mean_macro_f1, cv.sd_macro_f1
    );
    if let Some(out) = &args.out {
        let mut csv =
            String::from("fold,accuracy,macro_f1,macro_precision,macro_recall,epochs\n");
        for f in &cv.folds {
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                f.fold,
                f.metrics.accuracy,
                f.metrics.macro_f1,
                f.metrics.macro_precision,
                f.metrics.macro_recall,
                f.curve.len()
            ));
        }
        csv.push_str(&format!("mean,{},{},,,\n", cv.mean_accuracy, cv.mean_macro_f1));
        csv.push_str(&format!("sd,{},{},,,\n", cv.sd_accuracy, cv.sd_macro_f1));
        fs::write(out, csv)?;
        println!("report: {}", out.display());
    }
    Ok(Outcome::Pass)
}

fn cmd_eval(args: EvalArgs) -> Result<Outcome> {
    let model = FusionModel::load(&args.model)?;
    let ds = open_dataset(&args.data)?;
    check_geometry(&model.config, &ds)?;
    let windows = dataset_windows(&ds)?;
    let set: Vec<&SampleWindow> = match &ds.manifest.split {
        Some(split) => {
            let (_, test, _) = split_windows(&ds, &windows, split.seed)?;
            test
        }
        None => windows.iter().map(|(_, w)| w).collect(),
    };
    let cm = evaluate(&model, &set)?;
    let metrics = classification_metrics(&cm)?;

    fs::create_dir_all(&args.out)?;
    let labels = region_labels();
    fs::write(args.out.join("metrics.csv"), metrics_csv(&metrics, &labels))?;
    fs::write(args.out.join("confusion.csv"), cm.to_csv(&labels)?)?;
    confusion_pgm(&cm, &args.out.join("confusion.pgm"))?;

    println!("{} model on {} windows", model.kind.tag(), set.len());
    print_metrics(&metrics, model.kind.tag());
    if model.config.num_classes == 9 {
        let collapsed = collapse_columns(&cm)?;
        let [l, c, r] = collapsed.accuracy;
        let [rl, rc, rr] = reference::COLUMN_ACCURACY_PERCENT;
        println!(
            "column accuracy: left {:.2}% center {:.2}% right {:.2}% \
             (reference {rl}% {rc}% {rr}%)",
            100.0 * l,
            100.0 * c,
            100.0 * r
        );
    }
    println!("outputs: {}", args.out.display());
    Ok(Outcome::Pass)
}

fn cmd_compare(args: CompareArgs) -> Result<Outcome> {
    let mut spec = load_spec(&args.config, ModelConfig::desk_scale)?;
    spec.train.seed = resolve_seed(args.seed, spec.train.seed)?;
    let ds = open_dataset(&args.data)?;
    check_geometry(&spec.model, &ds)?;
    let windows = dataset_windows(&ds)?;
    let (train_set, test_set, _) = split_windows(&ds, &windows, spec.train.seed)?;

    let rows = compare_models(&spec.model, &train_set, &test_set, &spec.train)?;
    println!(
        "{:<8} {:>9} {:>9} {:>10} {:>8}   {:>7} {:>6}",
        "model", "accuracy", "macro F1", "precision", "recall", "ref acc", "ref F1"
    );
    for r in &rows {
        println!(
            "{:<8} {:>9.4} {:>9.4} {:>10.4} {:>8.4}   {:>7.2} {:>6.2}",
            r.kind.tag(),
            r.accuracy,
            r.macro_f1,
            r.macro_precision,
            r.macro_recall,
            r.reference_accuracy,
            r.reference_f1
        );
    }
    let fusion = rows.iter().find(|r| r.kind == ModelKind::Fusion).expect("fusion row");
    let best_unimodal = rows
        .iter()
        .filter(|r| r.kind != ModelKind::Fusion)
        .map(|r| r.macro_f1)
        .fold(f64::NEG_INFINITY, f64::max);
    println!(
        "fusion macro F1 {:.4} vs best unimodal {:.4}",
        fusion.macro_f1, best_unimodal
    );
    if let Some(out) = &args.out {
        fs::write(out, comparison_csv(&rows))?;
        println!("report: {}", out.display());
    }
    Ok(Outcome::Pass)
}

fn cmd_stats(args: StatsArgs) -> Result<Outcome> {
    let ds = open_dataset(&args.data)?;
    let durations: Vec<(Region, f64)> = ds
        .manifest
        .recordings
        .iter()
        .map(|e| Ok((Region::from_label(&e.label)?, e.end - e.start)))
        .collect::<Result<_>>()?;
    let table = region_stats(&durations)?;

    println!(
        "{:<7} {:>5} {:>7} {:>7} {:>7} {:>7} {:>7}   {:>8} {:>7}",
        "region", "n", "mean", "median", "max", "min", "sd", "ref mean", "ref sd"
    );
    for row in &table {
        let r = reference::region_duration_ref(row.region);
        println!(
            "{:<7} {:>5} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>7.3}   {:>8.2} {:>7.3}",
            row.region.label(),
            row.n,
            row.mean,
            row.median,
            row.max,
            row.min,
            row.sd,
            r.mean,
            r.sd
        );
    }
    let grand_mean =
        durations.iter().map(|(_, d)| d).sum::<f64>() / durations.len() as f64;
    println!(
        "{} motions, grand mean {:.3} s (reference {} s over {} motions)",
        durations.len(),
        grand_mean,
        reference::MEAN_MOTION_SECONDS,
        reference::REFERENCE_DATASET_SIZE
    );

    let groups: Vec<Vec<f64>> = REGIONS
        .iter()
        .map(|&region| {
            durations.iter().filter(|(r, _)| *r == region).map(|&(_, d)| d).collect()
        })
        .collect();
    let anova = one_way_anova(&groups)?;
    println!(
        "ANOVA: F({}, {}) = {:.4}, p = {:.3e}   (reference F({}, {}) = {}, p < .001)",
        anova.df_between,
        anova.df_within,
        anova.f,
        anova.p,
        reference::ANOVA_DF_BETWEEN,
        reference::ANOVA_DF_WITHIN,
        reference::ANOVA_F
    );
    let tukey = tukey_hsd(&groups)?;
    let significant = tukey.pairs.iter().filter(|p| p.significant).count();
    println!(
        "Tukey HSD: {significant} of {} pairs significant at alpha 0.05 (critical q {:.4})",
        tukey.pairs.len(),
        tukey.critical_q
    );

    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        let mut stats = String::from("region,n,mean,median,max,min,sd,ref_mean,ref_sd\n");
        for row in &table {
            let r = reference::region_duration_ref(row.region);
            stats.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                row.region.label(),
                row.n,
                row.mean,
                row.median,
                row.max,
                row.min,
                row.sd,
                r.mean,
                r.sd
            ));
        }
        fs::write(out.join("stats.csv"), stats)?;
        let mut tk = String::from("region_a,region_b,mean_diff,q,significant\n");
        for p in &tukey.pairs {
            tk.push_str(&format!(
                "{},{},{},{},{}\n",
                REGIONS[p.i].label(),
                REGIONS[p.j].label(),
                p.mean_diff,
                p.q,
                p.significant
            ));
        }
        fs::write(out.join("tukey.csv"), tk)?;
        println!("wrote stats.csv and tukey.csv to {}", out.display());
    }
    Ok(Outcome::Pass)
}

fn cmd_sad(args: SadArgs) -> Result<Outcome> {
    let ds = open_dataset(&args.data)?;
    let rec = ds.load(&args.rec)?;
    let frames: Vec<&[f32]> = rec.depth.iter().map(|f| f.pixels.as_slice()).collect();
    let image = sad_image(&frames, args.span)?;
    write_pgm(&args.out, ds.manifest.depth_w, ds.manifest.depth_h, &image)?;
    println!(
        "SAD over {} frame pairs of {} ({}x{}) -> {}",
        args.span.min(frames.len() - 1),
        args.rec,
        ds.manifest.depth_w,
        ds.manifest.depth_h,
        args.out.display()
    );
    Ok(Outcome::Pass)
}

fn cmd_replay(args: ReplayArgs) -> Result<Outcome> {
    let model = FusionModel::load(&args.model)?;
    let ds = open_dataset(&args.data)?;
    if ds.len() < args.n {
        return Err(Error::validation(format!(
            "dataset has {} recordings, --n {} requested",
            ds.len(),
            args.n
        )));
    }
    let mut recordings = Vec::with_capacity(args.n);
    for i in 0..args.n {
        recordings.push(ds.load_index(i)?);
    }
    let clock = if args.virtual_clock { Clock::Virtual } else { Clock::Real };
    let report =
        measure_latency(&model, &recordings, &ds.manifest.normalization, args.n, clock)?;
    print!("{}", report.text());
    if let Some(out) = &args.out {
        fs::write(out, report.csv())?;
        println!("report: {}", out.display());
    }
    if report.grace.exceeded {
        return Ok(Outcome::CheckFailed(format!(
            "grace budget exhausted: {:.4} s left after a {:.4} s mean prediction",
            report.grace.seconds, report.mean
        )));
    }
    Ok(Outcome::Pass)
}

fn cmd_params(args: ParamsArgs) -> Result<Outcome> {
    let spec = match (&args.config, args.scale) {
        (Some(_), _) => load_spec(&args.config, ModelConfig::full_size)?,
        (None, Some(divisor)) => RunSpec::with_model(ModelConfig::scaled(divisor)?),
        (None, None) => RunSpec::with_model(ModelConfig::full_size()),
    };
    let cfg = &spec.model;
    println!(
        "architecture: {}x{} depth, fused width {}, scale divisor {}",
        cfg.depth_h, cfg.depth_w, cfg.fused_dim, cfg.scale_divisor
    );
    println!(
        "{:<8} {:>12} {:>12} {:>12} {:>12} {:>13}   {:>13}",
        "model", "face", "motion", "depth", "classifier", "total", "ref total"
    );
    let refs = [
        ("fusion", reference::PARAMS_TOTAL_REF),
        ("face", reference::PARAMS_FACE_REF),
        ("motion", reference::PARAMS_MOTION_REF),
        ("depth", reference::PARAMS_DEPTH_REF),
    ];
    for kind in MODEL_KINDS {
        let counts = analytic_branch_counts(cfg, kind)?;
        let reference_total = refs
            .iter()
            .find(|(tag, _)| *tag == kind.tag())
            .map(|&(_, v)| v.to_string())
            .unwrap_or_default();
        println!(
            "{:<8} {:>12} {:>12} {:>12} {:>12} {:>13}   {:>13}",
            kind.tag(),
            counts.face,
            counts.motion,
            counts.depth,
            counts.classifier,
            counts.total,
            reference_total
        );
    }
    println!(
        "reference totals are the published ones; they do not reconcile with \
         the published layer shapes, so both are shown"
    );
    Ok(Outcome::Pass)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<Outcome> {
    let spec = match (&args.config, args.scale) {
        (Some(_), _) => load_spec(&args.config, ModelConfig::desk_scale)?,
        (None, Some(divisor)) => RunSpec::with_model(ModelConfig::scaled(divisor)?),
        (None, None) => RunSpec::with_model(ModelConfig::desk_scale()),
    };
    let seed = resolve_seed(args.seed, spec.train.seed)?;
    let kind = spec.kind()?;
    let cfg = spec.model.clone();

    // Any valid window exercises every gradient path; render one
    // synthetically at the model's depth geometry.
    let mut gen = GeneratorParams::new(seed);
    gen.depth_h = cfg.depth_h;
    gen.depth_w = cfg.depth_w;
    let rec = generate_recording(&gen, Region::Center, seed);
    let shape = mrpd_core::data::WindowShape {
        face_frames: cfg.face_frames,
        depth_frames: cfg.depth_frames,
        motion_frames: cfg.motion_frames,
        depth_h: cfg.depth_h,
        depth_w: cfg.depth_w,
    };
    let window = mrpd_core::data::extract_window(
        &rec,
        &shape,
        &mrpd_core::data::Normalization::identity(),
    )?;

    let mut model = FusionModel::new(cfg, kind, seed)?;
    let report = gradient_report(&mut model, &window, args.samples, seed, 1e-2)?;
    println!(
        "{} coordinates checked, max relative error {:.3e}, tolerance {:.0e}",
        report.coords_checked, report.max_rel_err, report.tolerance
    );
    for c in report.worst.iter().take(3) {
        println!(
            "  {}[{}]: analytic {:.6e}, numeric {:.6e}, rel err {:.3e}",
            c.name, c.index, c.analytic, c.numeric, c.rel_err
        );
    }
    if report.passed() {
        println!("gradient check passed");
        Ok(Outcome::Pass)
    } else {
        Ok(Outcome::CheckFailed(format!(
            "gradient check failed: {} of {} coordinates over tolerance",
            report.failures, report.coords_checked
        )))
    }
}

// ── Entry point ─────────────────────────────────────────────────────────────

fn run(cmd: Cmd) -> Result<Outcome> {
    match cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Xval(a) => cmd_xval(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Compare(a) => cmd_compare(a),
        Cmd::Stats(a) => cmd_stats(a),
        Cmd::Sad(a) => cmd_sad(a),
        Cmd::Replay(a) => cmd_replay(a),
        Cmd::Params(a) => cmd_params(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
