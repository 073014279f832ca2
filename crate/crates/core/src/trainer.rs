//! Curriculum training loop: Adam on pixel cross-entropy with a step-decayed
//! learning rate, an audit trail of consumed samples, and model selection by
//! training mIoU.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use ndarray::ArrayD;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::curriculum::{CurriculumConfig, CurriculumError, Schedule};
use crate::dataset::{partition, DatasetManifest, Split, Subset};
use crate::metrics::{class_iou, mean_defined, ConfusionMatrix};
use crate::models::{argmax_masks, build_model, images_to_tensor, Arch, ModelError, ModelParams};
use crate::nn::{Adam, AdamConfig, Session};
use crate::raster::{Mask, RasterError, RgbImage, CLOUD, SNOW};
use crate::seed;
use crate::tensor::{softmax_cross_entropy, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    #[serde(default = "default_width")]
    pub width_multiplier: f64,
}

fn default_width() -> f64 {
    0.25
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::UnetRes,
            width_multiplier: default_width(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Total epochs.
    pub epochs: usize,
    pub lr_init: f64,
    pub lr_decay_factor: f64,
    pub lr_step_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Checkpoint stem to start from instead of a fresh initialization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
}

impl TrainConfig {
    pub fn for_arch(arch: Arch) -> Self {
        Self {
            epochs: 150,
            lr_init: default_lr(arch),
            lr_decay_factor: 10.0,
            lr_step_epochs: 10,
            batch_size: 8,
            seed: 0,
            checkpoint_every: 10,
            adam: AdamConfig::default(),
            init_checkpoint: None,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::for_arch(Arch::UnetRes)
    }
}

pub fn default_lr(arch: Arch) -> f64 {
    match arch {
        Arch::UnetRes => 1e-3,
        Arch::TransformerSeg => 6e-5,
    }
}

pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    let k = (epoch / config.lr_step_epochs.max(1)) as i32;
    config.lr_init / config.lr_decay_factor.powi(k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: u8,
    pub lr: f64,
    pub loss: f64,
    /// Cloud/snow mIoU of training-mode predictions against the observed labels.
    pub train_miou: Option<f64>,
    pub noisy_quota: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub epoch: usize,
    pub sample_id: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub epoch: usize,
    pub model: ModelParams<f32>,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Curriculum(#[from] CurriculumError),
    #[error("data error: {0}")]
    DataError(String),
    #[error("loss diverged at epoch {epoch} (value {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("no checkpoints to select from")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("{0}")]
    Sink(String),
}

/// Receives per-epoch progress; checkpoints may be persisted or kept.
pub trait TrainObserver {
    fn on_epoch(&mut self, _record: &EpochRecord, _audit: &[AuditEntry]) -> Result<(), TrainError> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _checkpoint: Checkpoint) -> Result<(), TrainError> {
        Ok(())
    }
}

/// Keeps everything in memory.
#[derive(Debug, Default)]
pub struct Collect {
    pub checkpoints: Vec<Checkpoint>,
}

impl TrainObserver for Collect {
    fn on_checkpoint(&mut self, checkpoint: Checkpoint) -> Result<(), TrainError> {
        self.checkpoints.push(checkpoint);
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoints: Vec<Checkpoint>,
    pub log: Vec<EpochRecord>,
    pub audit: Vec<AuditEntry>,
}

/// Checks the cross-field invariants before any work is done.
pub fn validate(curriculum: &CurriculumConfig, train: &TrainConfig, model: &ModelConfig) -> Result<(), TrainError> {
    curriculum.validate()?;
    let fail = |msg: String| Err(TrainError::Config(msg));
    if train.epochs == 0 {
        return fail("epochs must be at least 1".into());
    }
    if !(train.lr_init > 0.0 && train.lr_init.is_finite()) {
        return fail(format!("lr_init = {} must be positive", train.lr_init));
    }
    if !(train.lr_decay_factor >= 1.0) {
        return fail(format!("lr_decay_factor = {} must be at least 1", train.lr_decay_factor));
    }
    if train.lr_step_epochs == 0 {
        return fail("lr_step_epochs must be at least 1".into());
    }
    if train.batch_size == 0 {
        return fail("batch_size must be at least 1".into());
    }
    if train.checkpoint_every == 0 {
        return fail("checkpoint_every must be at least 1".into());
    }
    if curriculum.n > train.epochs {
        return fail(format!(
            "curriculum.n = {} exceeds train.epochs = {}",
            curriculum.n, train.epochs
        ));
    }
    if !(model.width_multiplier > 0.0) {
        return fail(format!("width_multiplier = {} must be positive", model.width_multiplier));
    }
    Ok(())
}

struct Sample {
    id: String,
    image: RgbImage,
    label: Mask,
}

fn load_pool(manifest: &DatasetManifest) -> Result<BTreeMap<String, Sample>, TrainError> {
    let mut pool = BTreeMap::new();
    for subset in Subset::ALL {
        for rec in partition(manifest, subset, Split::Trainval) {
            let image = manifest.load_image(&rec)?;
            let label = manifest.load_label(&rec)?;
            if image.dims() != label.dims() {
                return Err(TrainError::DataError(format!(
                    "sample {}: image {:?} vs label {:?}",
                    rec.id,
                    image.dims(),
                    label.dims()
                )));
            }
            if let Some(v) = label.first_invalid() {
                return Err(TrainError::DataError(format!("sample {}: label value {v}", rec.id)));
            }
            pool.insert(
                rec.id.clone(),
                Sample {
                    id: rec.id,
                    image,
                    label,
                },
            );
        }
    }
    Ok(pool)
}

fn shuffle_ids(ids: &mut [String], seed: u64, epoch: usize) {
    let mut rng = seed::rng(seed, seed::stream::EPOCH_SHUFFLE, epoch as u64);
    for i in (1..ids.len()).rev() {
        let j = rng.random_range(0..=i);
        ids.swap(i, j);
    }
}

/// One optimization step; returns the batch loss and training-mode predictions.
pub fn train_step(
    model: &mut ModelParams<f32>,
    adam: &mut Adam<f32>,
    images: &ArrayD<f32>,
    labels: &[u8],
    lr: f64,
) -> Result<Option<(f64, Vec<Mask>)>, TrainError> {
    let tape = Tape::new();
    let cx = Session::new(&tape, &model.params, true, true);
    let (logits, _) = model.forward(&cx, tape.constant(images.clone()))?;
    let Ok(loss) = softmax_cross_entropy(logits, labels) else {
        return Ok(None);
    };
    let value = loss.value().iter().next().copied().unwrap_or(f32::NAN) as f64;
    let preds = argmax_masks(&logits.value());
    let (vars, updates) = cx.finish();
    let mut grads = tape.backward(loss);
    let grads: BTreeMap<String, ArrayD<f32>> = vars
        .into_iter()
        .filter_map(|(name, v)| grads.take(v).map(|g| (name, g)))
        .collect();
    if value.is_finite() {
        adam.step(&mut model.params, &grads, lr);
        model.params.apply_updates(updates);
    }
    Ok(Some((value, preds)))
}

fn train_miou(cm: &ConfusionMatrix) -> Option<f64> {
    mean_defined(&[class_iou(cm, CLOUD).ok(), class_iou(cm, SNOW).ok()])
}

/// Runs all epochs, reporting to `observer`. Returns the log and audit trail.
pub fn train_with(
    manifest: &DatasetManifest,
    curriculum: &CurriculumConfig,
    train: &TrainConfig,
    model_config: &ModelConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(Vec<EpochRecord>, Vec<AuditEntry>), TrainError> {
    validate(curriculum, train, model_config)?;
    let schedule = Schedule::new(*curriculum, manifest)?;
    let pool = load_pool(manifest)?;
    let mut model: ModelParams<f32> = match &train.init_checkpoint {
        Some(stem) => {
            let m = ModelParams::load(stem)?;
            if m.arch() != model_config.arch {
                return Err(TrainError::Config(format!(
                    "init checkpoint is {}, config asks for {}",
                    m.arch(),
                    model_config.arch
                )));
            }
            m
        }
        None => build_model(
            model_config.arch,
            crate::raster::NUM_CLASSES,
            model_config.width_multiplier,
            seed::derive(train.seed, seed::stream::MODEL_INIT, 0),
        )?,
    };
    let mut adam = Adam::new(train.adam);
    let mut log = Vec::with_capacity(train.epochs);
    let mut audit = Vec::new();

    for epoch in 0..train.epochs {
        let started = Instant::now();
        let plan = schedule.plan(epoch);
        let lr = lr_at(epoch, train);
        let mut ids: Vec<String> = plan.clean_ids.iter().chain(&plan.noisy_ids).cloned().collect();
        shuffle_ids(&mut ids, train.seed, epoch);

        let mut cm = ConfusionMatrix::new();
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        let epoch_audit_start = audit.len();
        for chunk in ids.chunks(train.batch_size) {
            let samples: Vec<&Sample> = chunk.iter().map(|id| &pool[id]).collect();
            let images: Vec<&RgbImage> = samples.iter().map(|s| &s.image).collect();
            if images.iter().any(|i| i.dims() != images[0].dims()) {
                return Err(TrainError::DataError("batch images differ in size".into()));
            }
            let tensor = images_to_tensor::<f32>(&images);
            let labels: Vec<u8> = samples.iter().flat_map(|s| s.label.data.iter().copied()).collect();
            audit.extend(samples.iter().map(|s| AuditEntry {
                epoch,
                sample_id: s.id.clone(),
            }));
            let Some((loss, preds)) = train_step(&mut model, &mut adam, &tensor, &labels, lr)? else {
                tracing::warn!(epoch, "skipping batch with no labelled pixels");
                continue;
            };
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, loss });
            }
            for (pred, s) in preds.iter().zip(&samples) {
                cm.accumulate(pred, &s.label)
                    .map_err(|e| TrainError::DataError(e.to_string()))?;
            }
            loss_sum += loss;
            batches += 1;
        }

        let record = EpochRecord {
            epoch,
            stage: plan.stage,
            lr,
            loss: if batches > 0 { loss_sum / batches as f64 } else { f64::NAN },
            train_miou: train_miou(&cm),
            noisy_quota: plan.noisy_quota,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        tracing::info!(
            epoch,
            stage = record.stage,
            lr = record.lr,
            loss = record.loss,
            train_miou = record.train_miou,
            noisy = record.noisy_quota,
            "epoch done"
        );
        observer.on_epoch(&record, &audit[epoch_audit_start..])?;
        log.push(record);

        if (epoch + 1) % train.checkpoint_every == 0 || epoch + 1 == train.epochs {
            let mut snapshot = model.clone();
            snapshot.meta.epoch = Some(epoch);
            observer.on_checkpoint(Checkpoint { epoch, model: snapshot })?;
        }
    }
    Ok((log, audit))
}

pub fn train(
    manifest: &DatasetManifest,
    curriculum: &CurriculumConfig,
    train: &TrainConfig,
    model: &ModelConfig,
) -> Result<TrainOutcome, TrainError> {
    let mut sink = Collect::default();
    let (log, audit) = train_with(manifest, curriculum, train, model, &mut sink)?;
    Ok(TrainOutcome {
        checkpoints: sink.checkpoints,
        log,
        audit,
    })
}

/// Epoch with the highest training mIoU among `epochs`; ties go to the
/// earliest. Undefined mIoU ranks below any value.
pub fn best_epoch(epochs: impl IntoIterator<Item = usize>, log: &[EpochRecord]) -> Option<usize> {
    let score = |e: usize| log.iter().find(|r| r.epoch == e).and_then(|r| r.train_miou);
    let mut best: Option<(usize, Option<f64>)> = None;
    let mut candidates: Vec<usize> = epochs.into_iter().collect();
    candidates.sort_unstable();
    for e in candidates {
        let s = score(e);
        let better = match best {
            None => true,
            Some((_, None)) => s.is_some(),
            Some((_, Some(b))) => s.is_some_and(|v| v > b),
        };
        if better {
            best = Some((e, s));
        }
    }
    best.map(|(e, _)| e)
}

pub fn select_best<'a>(checkpoints: &'a [Checkpoint], log: &[EpochRecord]) -> Result<&'a Checkpoint, TrainError> {
    let epoch = best_epoch(checkpoints.iter().map(|c| c.epoch), log).ok_or(TrainError::Empty)?;
    Ok(checkpoints.iter().find(|c| c.epoch == epoch).expect("epoch from checkpoints"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(epoch: usize, miou: Option<f64>) -> EpochRecord {
        EpochRecord {
            epoch,
            stage: 1,
            lr: 1e-3,
            loss: 1.0,
            train_miou: miou,
            noisy_quota: 0,
            wall_time_s: 0.0,
        }
    }

    #[test]
    fn lr_examples() {
        let unet = TrainConfig::for_arch(Arch::UnetRes);
        assert_eq!(lr_at(0, &unet), 0.001);
        assert_eq!(lr_at(9, &unet), 0.001);
        assert_eq!(lr_at(10, &unet), 0.0001);
        let seg = TrainConfig::for_arch(Arch::TransformerSeg);
        assert!((lr_at(25, &seg) - 6e-7).abs() <= 1e-22);
        assert!((lr_at(10, &seg) - 6e-6).abs() <= 1e-21);
    }

    #[test]
    fn selection_rule() {
        let log = vec![record(0, Some(0.5)), record(1, Some(0.9)), record(2, Some(0.7))];
        assert_eq!(best_epoch([0, 1, 2], &log), Some(1));
        assert_eq!(best_epoch([2], &log), Some(2));
        assert_eq!(best_epoch([], &log), None);
        let tie = vec![record(0, Some(0.8)), record(1, Some(0.8))];
        assert_eq!(best_epoch([1, 0], &tie), Some(0));
        let undefined = vec![record(0, None), record(1, Some(0.1))];
        assert_eq!(best_epoch([0, 1], &undefined), Some(1));
    }

    #[test]
    fn config_cross_checks() {
        let model = ModelConfig::default();
        let mut t = TrainConfig::for_arch(Arch::UnetRes);
        t.epochs = 50;
        let c = CurriculumConfig {
            m: 10,
            n: 60,
            ..CurriculumConfig::default()
        };
        assert!(matches!(validate(&c, &t, &model), Err(TrainError::Config(msg)) if msg.contains("curriculum.n")));
        assert!(validate(&CurriculumConfig::baseline(0), &t, &model).is_ok());
        t.batch_size = 0;
        assert!(validate(&CurriculumConfig::baseline(0), &t, &model).is_err());
    }
}
