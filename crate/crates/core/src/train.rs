//! Training, evaluation, cross-validation, and the unimodal-vs-fusion
//! comparison.
//!
//! Training runs one sample per tape (losses scaled by 1/batch so gradients
//! accumulate to the batch mean), one Adam step per minibatch, minibatches
//! reshuffled each epoch from the run seed. Everything is deterministic on a
//! single thread for a fixed (seed, config, data) triple.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{classification_metrics, ClassificationMetrics, ConfusionMatrix};
use crate::data::{extract_window, kfold, Dataset, FoldSpec, SampleWindow};
use crate::error::{Error, Result};
use crate::model::{FusionModel, ModelConfig, ModelKind, MODEL_KINDS};
use crate::region::Region;
use crate::tensor::{adam_step, AdamParams, GradMode, Tape};

// ── Configuration ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamParams,
    pub seed: u64,
    /// Stop after the first epoch whose held-out accuracy reaches this;
    /// off by default so full runs stay reproducible end to end.
    pub stop_at_val_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            adam: AdamParams::default(),
            seed: 0,
            stop_at_val_accuracy: None,
        }
    }
}

/// One row of the loss curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-sample cross-entropy over the epoch's (shuffled) batches.
    pub train_loss: f64,
    /// Accuracy on the validation set, when one was supplied.
    pub val_accuracy: Option<f64>,
}

/// CSV rendering of a loss curve: `epoch,train_loss,val_accuracy`.
pub fn loss_curve_csv(stats: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,val_accuracy\n");
    for s in stats {
        let val = s.val_accuracy.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", s.epoch, s.train_loss, val));
    }
    out
}

// ── Window loading ──────────────────────────────────────────────────────────

/// Extract the model window of every recording in the dataset, keyed by
/// recording id, in manifest order.
pub fn dataset_windows(ds: &Dataset) -> Result<Vec<(String, SampleWindow)>> {
    let shape = crate::data::WindowShape::standard(ds.manifest.depth_h, ds.manifest.depth_w);
    let norm = ds.manifest.normalization.clone();
    let mut out = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let rec = ds.load_index(i)?;
        out.push((rec.id.clone(), extract_window(&rec, &shape, &norm)?));
    }
    Ok(out)
}

/// Check that a model's expected window geometry matches a dataset before
/// spending minutes training on it.
pub fn check_geometry(config: &ModelConfig, ds: &Dataset) -> Result<()> {
    if config.depth_h != ds.manifest.depth_h || config.depth_w != ds.manifest.depth_w {
        return Err(Error::validation(format!(
            "model expects {}x{} depth images, dataset holds {}x{}",
            config.depth_h, config.depth_w, ds.manifest.depth_h, ds.manifest.depth_w
        )));
    }
    Ok(())
}

// ── Training and evaluation ─────────────────────────────────────────────────

/// Train in place. Returns the per-epoch loss curve; `val` adds a held-out
/// accuracy column (evaluated once per epoch, dropout off). A non-finite
/// loss or gradient aborts with a diverged-training error naming the epoch
/// and batch.
pub fn train(
    model: &mut FusionModel,
    samples: &[&SampleWindow],
    val: Option<&[&SampleWindow]>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    if samples.is_empty() {
        return Err(Error::validation("cannot train on an empty sample set"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::validation("batch size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    model.store.clear_training_state();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let inv_b = 1.0 / chunk.len() as f32;
            for &i in chunk {
                let window = samples[i];
                let mut tape = Tape::new(GradMode::Record);
                let binds = model.store.bind(&mut tape);
                let logits = model.forward(&mut tape, &binds, window, true, &mut rng)?;
                let loss = tape.softmax_cross_entropy(logits, &[window.label.index()])?;
                let loss_val = tape.data(loss)[0] as f64;
                if !loss_val.is_finite() {
                    return Err(Error::Diverged { epoch, batch });
                }
                let scaled = tape.scale(loss, inv_b);
                tape.backward(scaled)?;
                if !tape.all_grads_finite() {
                    return Err(Error::Diverged { epoch, batch });
                }
                model.store.accumulate_grads(&tape, &binds);
                epoch_loss += loss_val;
            }
            step += 1;
            adam_step(&mut model.store, &cfg.adam, step)?;
        }
        let train_loss = epoch_loss / samples.len() as f64;
        let val_accuracy = match val {
            Some(v) => {
                let cm = evaluate(model, v)?;
                Some(cm.trace() as f64 / cm.total() as f64)
            }
            None => None,
        };
        curve.push(EpochStats { epoch, train_loss, val_accuracy });
        if let (Some(target), Some(acc)) = (cfg.stop_at_val_accuracy, val_accuracy) {
            if acc >= target {
                break;
            }
        }
    }
    Ok(curve)
}

/// Run the model over a sample set without touching weights or optimizer
/// state; dropout is inactive.
pub fn evaluate(model: &FusionModel, samples: &[&SampleWindow]) -> Result<ConfusionMatrix> {
    if samples.is_empty() {
        return Err(Error::validation("cannot evaluate on an empty sample set"));
    }
    let mut cm = ConfusionMatrix::new(model.config.num_classes);
    for window in samples {
        let (region, _) = predict(model, window)?;
        cm.record(window.label.index(), region.index())?;
    }
    Ok(cm)
}

/// Single-window inference: winning region plus raw logits.
pub fn predict(model: &FusionModel, window: &SampleWindow) -> Result<(Region, Vec<f32>)> {
    let mut tape = Tape::new(GradMode::NoGrad);
    let binds = model.store.bind(&mut tape);
    // The RNG is never consumed: dropout is identity outside training.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let logits = model.forward(&mut tape, &binds, window, false, &mut rng)?;
    let data = tape.data(logits).to_vec();
    let best = data
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    Ok((Region::from_index(best)?, data))
}

// ── Cross-validation ────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub metrics: ClassificationMetrics,
    pub curve: Vec<EpochStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub folds: Vec<FoldOutcome>,
    pub mean_accuracy: f64,
    pub sd_accuracy: f64,
    pub mean_macro_f1: f64,
    pub sd_macro_f1: f64,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Run a single fold of a k-fold plan: train a fresh model on the other
/// folds' windows, validate on this fold's. Fold f trains with seed
/// `cfg.seed + f`, so folds are independent (and safe to run in parallel)
/// while the whole run stays reproducible.
pub fn run_fold(
    config: &ModelConfig,
    kind: ModelKind,
    windows: &[(String, SampleWindow)],
    spec: &FoldSpec,
    fold: usize,
    cfg: &TrainConfig,
) -> Result<FoldOutcome> {
    let by_id: HashMap<&str, &SampleWindow> =
        windows.iter().map(|(id, w)| (id.as_str(), w)).collect();
    let lookup = |ids: &[String]| -> Result<Vec<&SampleWindow>> {
        ids.iter()
            .map(|id| {
                by_id.get(id.as_str()).copied().ok_or_else(|| {
                    Error::validation(format!("fold plan names {id}, but no window carries it"))
                })
            })
            .collect()
    };
    let (train_ids, val_ids) = spec.fold(fold);
    let train_set = lookup(&train_ids)?;
    let val_set = lookup(&val_ids)?;
    let fold_cfg = TrainConfig { seed: cfg.seed + fold as u64, ..cfg.clone() };
    let mut model = FusionModel::new(config.clone(), kind, fold_cfg.seed)?;
    let curve = train(&mut model, &train_set, Some(&val_set), &fold_cfg)?;
    let metrics = classification_metrics(&evaluate(&model, &val_set)?)?;
    Ok(FoldOutcome { fold, metrics, curve })
}

/// Combine per-fold outcomes (any order) into the summary statistics.
pub fn aggregate_folds(mut folds: Vec<FoldOutcome>) -> CrossValidation {
    folds.sort_by_key(|f| f.fold);
    let accs: Vec<f64> = folds.iter().map(|f| f.metrics.accuracy).collect();
    let f1s: Vec<f64> = folds.iter().map(|f| f.metrics.macro_f1).collect();
    let (mean_accuracy, sd_accuracy) = mean_sd(&accs);
    let (mean_macro_f1, sd_macro_f1) = mean_sd(&f1s);
    CrossValidation { folds, mean_accuracy, sd_accuracy, mean_macro_f1, sd_macro_f1 }
}

/// K-fold cross-validation over (recording id, window) pairs, folds run
/// sequentially.
pub fn cross_validate(
    config: &ModelConfig,
    kind: ModelKind,
    windows: &[(String, SampleWindow)],
    k: usize,
    cfg: &TrainConfig,
) -> Result<CrossValidation> {
    let ids: Vec<String> = windows.iter().map(|(id, _)| id.clone()).collect();
    let spec = kfold(&ids, k, cfg.seed)?;
    let folds: Result<Vec<FoldOutcome>> =
        (0..k).map(|f| run_fold(config, kind, windows, &spec, f, cfg)).collect();
    Ok(aggregate_folds(folds?))
}

// ── Model comparison ────────────────────────────────────────────────────────

/// One comparison row; `reference` carries the published full-size result
/// for the same model kind (context, not a target).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub kind: ModelKind,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub reference_accuracy: f64,
    pub reference_f1: f64,
}

/// Train every model kind (three unimodal + fusion) under the identical
/// split and seed, evaluate on the identical test set. Rows come out in
/// the published table's order: face, motion, depth, fusion.
pub fn compare_models(
    config: &ModelConfig,
    train_set: &[&SampleWindow],
    test_set: &[&SampleWindow],
    cfg: &TrainConfig,
) -> Result<Vec<ComparisonRow>> {
    let mut rows = Vec::with_capacity(MODEL_KINDS.len());
    for reference in &crate::reference::MODEL_RESULTS {
        let kind = ModelKind::from_tag(reference.model)?;
        let mut model = FusionModel::new(config.clone(), kind, cfg.seed)?;
        train(&mut model, train_set, None, cfg)?;
        let metrics = classification_metrics(&evaluate(&model, test_set)?)?;
        rows.push(ComparisonRow {
            kind,
            accuracy: metrics.accuracy,
            macro_f1: metrics.macro_f1,
            macro_precision: metrics.macro_precision,
            macro_recall: metrics.macro_recall,
            reference_accuracy: reference.accuracy,
            reference_f1: reference.f1,
        });
    }
    Ok(rows)
}

/// CSV rendering of a comparison table, with the published numbers as
/// labeled reference columns.
pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from(
        "model,accuracy,macro_f1,macro_precision,macro_recall,reference_accuracy,reference_f1\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.kind.tag(),
            r.accuracy,
            r.macro_f1,
            r.macro_precision,
            r.macro_recall,
            r.reference_accuracy,
            r.reference_f1
        ));
    }
    out
}

// ── Tests ───────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::PoolMode;
    use crate::tensor::Tensor;
    use rand::Rng;

    /// Small but complete config (same shape family as the real model).
    fn tiny_config() -> ModelConfig {
        ModelConfig {
            face_in: 5,
            face_out: 6,
            motion_in: 3,
            motion_out: 4,
            depth_h: 8,
            depth_w: 7,
            conv1_filters: 2,
            conv1_kernel: (3, 3),
            pool1: (2, 2),
            conv2_filters: 3,
            conv2_kernel: (2, 2),
            pool2: (1, 1),
            conv_stride: 1,
            cnn_dropout: 0.0,
            depth_cnn_latent: 5,
            depth_lstm_out: 4,
            fused_dim: 15,
            face_frames: 3,
            depth_frames: 2,
            motion_frames: 4,
            classifier_hidden: vec![8],
            classifier_dropout: vec![0.0],
            num_classes: 9,
            pool_mode: PoolMode::FinalQuery,
            scale_divisor: 1,
        }
    }

    fn random_window(cfg: &ModelConfig, label: Region, rng: &mut ChaCha8Rng) -> SampleWindow {
        let mut tensor = |shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        SampleWindow {
            face: tensor(vec![cfg.face_frames, cfg.face_in]),
            depth: tensor(vec![cfg.depth_frames, cfg.depth_h * cfg.depth_w + 1]),
            motion: tensor(vec![cfg.motion_frames, cfg.motion_in]),
            elapsed: 0.5,
            label,
        }
    }

    /// Windows whose every input feature is `label_index / 10`, trivially
    /// separable.
    fn easy_set(cfg: &ModelConfig, labels: &[Region]) -> Vec<SampleWindow> {
        labels
            .iter()
            .map(|&label| {
                let fill = |shape: Vec<usize>| {
                    let n: usize = shape.iter().product();
                    Tensor::new(shape, vec![label.index() as f32 / 10.0; n]).unwrap()
                };
                SampleWindow {
                    face: fill(vec![cfg.face_frames, cfg.face_in]),
                    depth: fill(vec![cfg.depth_frames, cfg.depth_h * cfg.depth_w + 1]),
                    motion: fill(vec![cfg.motion_frames, cfg.motion_in]),
                    elapsed: 0.5,
                    label,
                }
            })
            .collect()
    }

    fn weight_bits(model: &FusionModel) -> Vec<u32> {
        model
            .store
            .entries()
            .flat_map(|e| e.value.data.iter().map(|v| v.to_bits()))
            .collect()
    }

    #[test]
    fn one_sample_is_memorized() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_window(&cfg, Region::CenterRight, &mut rng);
        let mut model = FusionModel::new(cfg, ModelKind::Fusion, 3).unwrap();
        let tc = TrainConfig {
            epochs: 400,
            batch_size: 1,
            adam: AdamParams { learning_rate: 5e-3, ..AdamParams::default() },
            seed: 7,
            ..TrainConfig::default()
        };
        let curve = train(&mut model, &[&w], None, &tc).unwrap();
        let last = curve.last().unwrap().train_loss;
        assert!(last < 0.01, "memorization loss {last} not below 0.01");
        let (pred, _) = predict(&model, &w).unwrap();
        assert_eq!(pred, Region::CenterRight);
    }

    #[test]
    fn fixed_seed_reproduces_curve_and_weights() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let labels = [Region::TopLeft, Region::Center, Region::BottomRight, Region::TopCenter];
        let set: Vec<SampleWindow> =
            labels.iter().map(|&l| random_window(&cfg, l, &mut rng)).collect();
        let refs: Vec<&SampleWindow> = set.iter().collect();
        let tc = TrainConfig { epochs: 3, batch_size: 2, seed: 5, ..TrainConfig::default() };

        let mut a = FusionModel::new(cfg.clone(), ModelKind::Fusion, 11).unwrap();
        let curve_a = train(&mut a, &refs, Some(&refs), &tc).unwrap();
        let mut b = FusionModel::new(cfg, ModelKind::Fusion, 11).unwrap();
        let curve_b = train(&mut b, &refs, Some(&refs), &tc).unwrap();

        assert_eq!(curve_a, curve_b);
        assert_eq!(weight_bits(&a), weight_bits(&b));
    }

    #[test]
    fn nan_input_reports_divergence_with_location() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut w = random_window(&cfg, Region::TopLeft, &mut rng);
        w.motion.data[0] = f32::NAN;
        let mut model = FusionModel::new(cfg, ModelKind::Fusion, 1).unwrap();
        let tc = TrainConfig { epochs: 1, batch_size: 1, ..TrainConfig::default() };
        match train(&mut model, &[&w], None, &tc) {
            Err(Error::Diverged { epoch: 0, batch: 0 }) => {}
            other => panic!("want diverged at epoch 0 batch 0, got {other:?}"),
        }
    }

    #[test]
    fn evaluate_never_mutates_the_model() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let set: Vec<SampleWindow> =
            (0..3).map(|i| random_window(&cfg, Region::from_index(i).unwrap(), &mut rng)).collect();
        let refs: Vec<&SampleWindow> = set.iter().collect();
        let model = FusionModel::new(cfg, ModelKind::Depth, 9).unwrap();
        let before = weight_bits(&model);
        let cm = evaluate(&model, &refs).unwrap();
        assert_eq!(cm.total(), 3);
        assert_eq!(weight_bits(&model), before);
        assert!(evaluate(&model, &[]).is_err());
    }

    #[test]
    fn early_stop_cuts_the_curve_short() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random_window(&cfg, Region::TopLeft, &mut rng);
        let mut model = FusionModel::new(cfg, ModelKind::Fusion, 2).unwrap();
        let tc = TrainConfig {
            epochs: 50,
            batch_size: 1,
            seed: 1,
            stop_at_val_accuracy: Some(0.0),
            ..TrainConfig::default()
        };
        let curve = train(&mut model, &[&w], Some(&[&w]), &tc).unwrap();
        assert_eq!(curve.len(), 1, "accuracy target 0.0 is met after the first epoch");
        assert!(curve[0].val_accuracy.is_some());
    }

    #[test]
    fn cross_validation_aggregates_disjoint_folds() {
        let cfg = tiny_config();
        let labels = [
            Region::TopLeft,
            Region::TopLeft,
            Region::Center,
            Region::Center,
            Region::BottomRight,
            Region::BottomRight,
        ];
        let set = easy_set(&cfg, &labels);
        let windows: Vec<(String, SampleWindow)> = set
            .into_iter()
            .enumerate()
            .map(|(i, w)| (format!("rec-{i}"), w))
            .collect();
        let tc = TrainConfig { epochs: 2, batch_size: 2, seed: 3, ..TrainConfig::default() };
        let cv = cross_validate(&cfg, ModelKind::Motion, &windows, 3, &tc).unwrap();
        assert_eq!(cv.folds.len(), 3);
        let total: u64 = cv
            .folds
            .iter()
            .map(|f| f.metrics.per_class.iter().map(|c| c.support).sum::<u64>())
            .sum();
        assert_eq!(total, 6, "every window validates exactly once");
        let mean = cv.folds.iter().map(|f| f.metrics.accuracy).sum::<f64>() / 3.0;
        assert!((cv.mean_accuracy - mean).abs() < 1e-12);
    }

    #[test]
    fn comparison_covers_all_four_kinds_with_references() {
        let cfg = tiny_config();
        let labels = [Region::TopLeft, Region::Center, Region::BottomRight];
        let set = easy_set(&cfg, &labels);
        let refs: Vec<&SampleWindow> = set.iter().collect();
        let tc = TrainConfig { epochs: 1, batch_size: 4, seed: 2, ..TrainConfig::default() };
        let rows = compare_models(&cfg, &refs, &refs, &tc).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[3].kind, ModelKind::Fusion);
        assert_eq!(rows[3].reference_accuracy, 0.93);
        assert_eq!(rows[0].reference_f1, 0.59);
        let csv = comparison_csv(&rows);
        assert!(csv.starts_with("model,accuracy"));
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn loss_curve_csv_is_well_formed() {
        let stats = vec![
            EpochStats { epoch: 0, train_loss: 2.0, val_accuracy: None },
            EpochStats { epoch: 1, train_loss: 1.0, val_accuracy: Some(0.5) },
        ];
        assert_eq!(
            loss_curve_csv(&stats),
            "epoch,train_loss,val_accuracy\n0,2,\n1,1,0.5\n"
        );
    }
}
