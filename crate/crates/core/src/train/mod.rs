//! Training loop, evaluation and the metrics reported for a trained model.

mod metrics;
mod optim;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    augment_sample, load_png, sample_rng, AugmentationConfig, ClassLabel, Image, ImageRecord,
    RebalancedBatches,
};
use crate::error::{Error, Result};
use crate::graph::{ArchitectureGraph, Checkpoint, ParamStore};
use crate::tensor::{self, Mode};

pub use self::metrics::{
    check_operational_constraints, metrics_from_confusion, render_ppv_table, render_report,
    render_sensitivity_table, ConfusionMatrix, ConstraintCheck, MetricsReport,
    CONSTRAINT_THRESHOLD,
};
pub use self::optim::{sgd_momentum_step, SgdMomentum};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// L2 penalty folded into the gradient; 0 disables it.
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Multiply the learning rate by `lr_decay_factor` every this many
    /// epochs; `None` keeps it constant.
    pub lr_decay_epochs: Option<usize>,
    pub lr_decay_factor: f64,
    /// Overrides the default of one pass over the training set per epoch.
    pub batches_per_epoch: Option<usize>,
    pub eval_batch_size: usize,
    /// Run on a single worker thread.
    pub deterministic: bool,
    /// Worker threads; `None` uses the global pool.
    pub workers: Option<usize>,
    pub augmentation: AugmentationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-3,
            momentum: 0.9,
            weight_decay: 0.0,
            epochs: 17,
            batch_size: 8,
            seed: 0,
            lr_decay_epochs: None,
            lr_decay_factor: 0.1,
            batches_per_epoch: None,
            eval_batch_size: 16,
            deterministic: false,
            workers: None,
            augmentation: AugmentationConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Argument(format!("learning rate {} is invalid", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Argument(format!("momentum {} is outside [0, 1)", self.momentum)));
        }
        if self.batch_size < ClassLabel::COUNT {
            return Err(Error::Argument(format!(
                "batch size {} cannot hold one slice per class",
                self.batch_size
            )));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::Argument("eval batch size must be positive".into()));
        }
        if self.lr_decay_epochs == Some(0) {
            return Err(Error::Argument("lr_decay_epochs must be positive".into()));
        }
        self.augmentation.validate()
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.lr_decay_epochs {
            Some(every) => self.learning_rate * self.lr_decay_factor.powi((epoch / every) as i32),
            None => self.learning_rate,
        }
    }

    /// Runs `f` on the thread pool this configuration asks for.
    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> Result<R> {
        let threads = if self.deterministic { Some(1) } else { self.workers };
        match threads {
            None => Ok(f()),
            Some(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n.max(1))
                    .build()
                    .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
                Ok(pool.install(f))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub filepath: String,
    pub image: Image,
    pub label: ClassLabel,
}

pub fn resolve_image_path(data_root: &Path, filepath: &str) -> PathBuf {
    let p = Path::new(filepath);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        data_root.join(p)
    }
}

/// Loads every record's image; any unreadable file is an error.
pub fn load_images(records: &[ImageRecord], data_root: &Path) -> Result<Vec<LabeledImage>> {
    records
        .par_iter()
        .map(|r| {
            Ok(LabeledImage {
                filepath: r.filepath.clone(),
                image: load_png(&resolve_image_path(data_root, &r.filepath))?,
                label: r.label,
            })
        })
        .collect()
}

/// Deterministic preprocessing used outside training: optional body mask and
/// crop to its bounding box, then resampling to the network input.
pub fn preprocess(img: &Image, body_mask: bool, width: usize, height: usize) -> Image {
    let cfg = AugmentationConfig {
        body_mask_enabled: body_mask,
        ..AugmentationConfig::identity()
    };
    augment_sample(img, &cfg, &mut ChaCha8Rng::seed_from_u64(0), width, height)
}

/// Anything that maps preprocessed slices to class probabilities.
pub trait Classifier: Sync {
    /// `(width, height)` the classifier expects.
    fn input_size(&self) -> (usize, usize);

    /// One probability row per image, in `ClassLabel` order.
    fn predict_proba(&self, images: &[Image]) -> Result<Vec<Vec<f64>>>;
}

pub struct GraphClassifier<'a> {
    pub graph: &'a ArchitectureGraph,
    pub params: &'a ParamStore<f32>,
}

impl Classifier for GraphClassifier<'_> {
    fn input_size(&self) -> (usize, usize) {
        let s = self.graph.input_shape();
        (s.w, s.h)
    }

    fn predict_proba(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let x = Image::batch_tensor::<f32>(images, self.graph.input_shape().c)?;
        let probs = self.graph.predict(self.params, &x)?;
        let k = self.graph.num_classes();
        Ok(probs
            .data()
            .chunks(k)
            .map(|row| row.iter().map(|&p| p as f64).collect())
            .collect())
    }
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub filepath: String,
    pub label: ClassLabel,
    pub predicted: ClassLabel,
    pub probabilities: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedImage {
    pub filepath: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub matrix: ConfusionMatrix,
    pub predictions: Vec<Prediction>,
    /// Unreadable images; they are not part of `matrix`.
    pub skipped: Vec<SkippedImage>,
}

impl EvalOutcome {
    pub fn metrics(&self) -> Result<MetricsReport> {
        metrics_from_confusion(&self.matrix)
    }
}

fn classify_chunk(classifier: &dyn Classifier, chunk: &[LabeledImage]) -> Result<Vec<Prediction>> {
    let images: Vec<Image> = chunk.iter().map(|s| s.image.clone()).collect();
    let probs = classifier.predict_proba(&images)?;
    if probs.len() != chunk.len() {
        return Err(Error::Internal(format!(
            "classifier returned {} rows for {} images",
            probs.len(),
            chunk.len()
        )));
    }
    chunk
        .iter()
        .zip(probs)
        .map(|(s, p)| {
            let predicted = ClassLabel::from_index(argmax(&p))
                .ok_or_else(|| Error::Internal(format!("prediction row of length {}", p.len())))?;
            Ok(Prediction {
                filepath: s.filepath.clone(),
                label: s.label,
                predicted,
                probabilities: p,
            })
        })
        .collect()
}

/// Classifies already-preprocessed images in parallel chunks. Counts are
/// merged in input order, so the result does not depend on scheduling.
pub fn evaluate_images(
    classifier: &dyn Classifier,
    samples: &[LabeledImage],
    batch_size: usize,
) -> Result<EvalOutcome> {
    let chunks: Vec<Vec<Prediction>> = samples
        .par_chunks(batch_size.max(1))
        .map(|c| classify_chunk(classifier, c))
        .collect::<Result<_>>()?;
    let mut matrix = ConfusionMatrix::default();
    let predictions: Vec<Prediction> = chunks.into_iter().flatten().collect();
    for p in &predictions {
        matrix.record(p.label, p.predicted);
    }
    Ok(EvalOutcome {
        matrix,
        predictions,
        skipped: Vec::new(),
    })
}

/// Loads, preprocesses and classifies every record. Unreadable images are
/// skipped and listed in the outcome instead of failing the run.
pub fn evaluate(
    classifier: &dyn Classifier,
    records: &[ImageRecord],
    data_root: &Path,
    body_mask: bool,
    batch_size: usize,
) -> Result<EvalOutcome> {
    let (w, h) = classifier.input_size();
    let loaded: Vec<std::result::Result<LabeledImage, SkippedImage>> = records
        .par_iter()
        .map(|r| match load_png(&resolve_image_path(data_root, &r.filepath)) {
            Ok(img) => Ok(LabeledImage {
                filepath: r.filepath.clone(),
                image: preprocess(&img, body_mask, w, h),
                label: r.label,
            }),
            Err(e) => Err(SkippedImage {
                filepath: r.filepath.clone(),
                reason: e.to_string(),
            }),
        })
        .collect();
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for item in loaded {
        match item {
            Ok(s) => samples.push(s),
            Err(s) => skipped.push(s),
        }
    }
    let mut out = evaluate_images(classifier, &samples, batch_size)?;
    out.skipped = skipped;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val: Option<MetricsReport>,
    pub val_matrix: ConfusionMatrix,
    pub seconds: f64,
}

fn fmt_classes(v: &[Option<f64>; 3]) -> String {
    v.iter()
        .map(|x| x.map(|x| format!("{x:.2}")).unwrap_or_else(|| "n/a".into()))
        .collect::<Vec<_>>()
        .join("/")
}

impl EpochLog {
    /// One-line summary; per-class values are in Normal/Non-COVID-19/COVID-19
    /// order. Wall-clock time is left out so deterministic runs log
    /// identically.
    pub fn line(&self) -> String {
        match &self.val {
            Some(m) => format!(
                "epoch={} lr={:.3e} train_loss={:.6} val_accuracy={:.2} val_sensitivity={} val_ppv={}",
                self.epoch,
                self.learning_rate,
                self.train_loss,
                m.accuracy,
                fmt_classes(&m.sensitivity),
                fmt_classes(&m.ppv),
            ),
            None => format!(
                "epoch={} lr={:.3e} train_loss={:.6} val_accuracy=n/a",
                self.epoch, self.learning_rate, self.train_loss
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TrainStatus {
    Completed,
    /// Loss or gradients stopped being finite; the run was cut short.
    Diverged { epoch: usize, batch: usize, reason: String },
}

pub struct TrainOutcome {
    /// Weights of the epoch with the best validation accuracy (the last
    /// epoch when there is no validation set).
    pub best: Checkpoint,
    pub best_epoch: Option<usize>,
    pub final_params: ParamStore<f32>,
    pub history: Vec<EpochLog>,
    pub status: TrainStatus,
}

/// Trains `params` on `train`, validating on `val` after
/// every epoch. `train` holds raw slices; augmentation and resampling to the
/// graph input happen per draw, while `val` goes through [`preprocess`].
pub fn train(
    graph: &ArchitectureGraph,
    params: ParamStore<f32>,
    train: &[LabeledImage],
    val: &[LabeledImage],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog) + Send,
) -> Result<TrainOutcome> {
    config.validate()?;
    params.check_compatible(graph)?;
    config.install(|| train_inner(graph, params, train, val, config, &mut on_epoch))?
}

fn train_inner(
    graph: &ArchitectureGraph,
    mut params: ParamStore<f32>,
    train: &[LabeledImage],
    val: &[LabeledImage],
    config: &TrainConfig,
    on_epoch: &mut (dyn FnMut(&EpochLog) + Send),
) -> Result<TrainOutcome> {
    if graph.num_classes() != ClassLabel::COUNT {
        return Err(Error::Argument(format!(
            "graph has {} outputs, expected {}",
            graph.num_classes(),
            ClassLabel::COUNT
        )));
    }
    let shape = graph.input_shape();
    let labels: Vec<ClassLabel> = train.iter().map(|s| s.label).collect();
    let mut sampler = RebalancedBatches::from_labels(&labels, config.batch_size, config.seed)?;
    let per_epoch = config
        .batches_per_epoch
        .unwrap_or_else(|| sampler.batches_per_epoch())
        .max(1);
    let val_ready: Vec<LabeledImage> = val
        .par_iter()
        .map(|s| LabeledImage {
            filepath: s.filepath.clone(),
            image: preprocess(&s.image, config.augmentation.body_mask_enabled, shape.w, shape.h),
            label: s.label,
        })
        .collect();
    let aug_seed = config.seed ^ config.augmentation.seed.rotate_left(32);

    let mut optimizer = SgdMomentum::new(config.learning_rate, config.momentum, config.weight_decay);
    let mut best = Checkpoint::from_params(&params, 0, None);
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_epoch = None;
    let mut history = Vec::new();
    let mut step = 0u64;

    for epoch in 0..config.epochs {
        let start = Instant::now();
        optimizer.lr = config.learning_rate_at(epoch);
        let mut loss_sum = 0.0;
        for b in 0..per_epoch {
            let batch = sampler.next_batch();
            let images: Vec<Image> = batch
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let idx = (b * config.batch_size + j) as u64;
                    let mut rng = sample_rng(aug_seed, epoch as u64, idx);
                    augment_sample(&train[i].image, &config.augmentation, &mut rng, shape.w, shape.h)
                })
                .collect();
            let y: Vec<usize> = batch.iter().map(|&i| train[i].label.index()).collect();
            let x = Image::batch_tensor::<f32>(&images, shape.c)?;
            let pass = graph.forward(&params, &x, Mode::Train)?;
            let (loss, _) = tensor::softmax_xent(&pass.logits, &y)?;
            let diverged = |reason: String| TrainStatus::Diverged { epoch, batch: b, reason };
            if !loss.is_finite() {
                return Ok(TrainOutcome {
                    best,
                    best_epoch,
                    final_params: params,
                    history,
                    status: diverged(format!("training loss is {loss}")),
                });
            }
            let grads = graph.backward(&params, &pass, &y)?;
            match optimizer.step(&mut params, &grads) {
                Ok(()) => {}
                Err(Error::NonFinite(reason)) => {
                    return Ok(TrainOutcome {
                        best,
                        best_epoch,
                        final_params: params,
                        history,
                        status: diverged(reason),
                    })
                }
                Err(e) => return Err(e),
            }
            params.commit_running_stats(graph, &pass)?;
            loss_sum += loss;
            step += 1;
        }

        let (val_metrics, val_matrix) = if val_ready.is_empty() {
            (None, ConfusionMatrix::default())
        } else {
            let classifier = GraphClassifier {
                graph,
                params: &params,
            };
            let out = evaluate_images(&classifier, &val_ready, config.eval_batch_size)?;
            (Some(out.metrics()?), out.matrix)
        };
        let log = EpochLog {
            epoch: epoch + 1,
            learning_rate: optimizer.lr,
            train_loss: loss_sum / per_epoch as f64,
            val: val_metrics,
            val_matrix,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        let acc = val_metrics.map(|m| m.accuracy);
        if acc.is_none() || acc.unwrap() > best_acc {
            best_acc = acc.unwrap_or(f64::NEG_INFINITY);
            best_epoch = Some(epoch + 1);
            best = Checkpoint::from_params(&params, step, acc);
        }
        history.push(log);
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        final_params: params,
        history,
        status: TrainStatus::Completed,
    })
}
