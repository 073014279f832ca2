//! Pixel confusion matrices and the per-class accuracy / IoU family.

use serde::{Deserialize, Serialize};

use crate::dataset::{partition, DatasetManifest, SampleRecord, Split, Subset};
use crate::models::{ModelError, ModelParams};
use crate::raster::{Mask, RasterError, RgbImage, CLOUD, IGNORE, NUM_CLASSES, SNOW};
use crate::tensor::Real;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("prediction is {pred:?} but label is {label:?}")]
    ShapeMismatch { pred: (usize, usize), label: (usize, usize) },
    #[error("{what} contains value {value}")]
    BadValue { what: &'static str, value: u8 },
    #[error("metric undefined: class {0} absent")]
    Undefined(u8),
    #[error("partition {0}/{1} is empty")]
    EmptyPartition(Subset, Split),
    #[error("sample {0} has no true label")]
    MissingTruth(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
    pub ignored_pixels: u64,
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, pred: &Mask, label: &Mask) -> Result<(), MetricsError> {
        if pred.dims() != label.dims() {
            return Err(MetricsError::ShapeMismatch {
                pred: pred.dims(),
                label: label.dims(),
            });
        }
        if let Some(&value) = pred.data.iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(MetricsError::BadValue { what: "prediction", value });
        }
        if let Some(value) = label.first_invalid() {
            return Err(MetricsError::BadValue { what: "label", value });
        }
        for (&p, &l) in pred.data.iter().zip(&label.data) {
            if l == IGNORE {
                self.ignored_pixels += 1;
            } else {
                self.counts[l as usize][p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, o) in self.counts.iter_mut().zip(&other.counts) {
            for (a, b) in row.iter_mut().zip(o) {
                *a += b;
            }
        }
        self.ignored_pixels += other.ignored_pixels;
    }

    pub fn row_sum(&self, c: u8) -> u64 {
        self.counts[c as usize].iter().sum()
    }

    pub fn col_sum(&self, c: u8) -> u64 {
        self.counts.iter().map(|r| r[c as usize]).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum::<u64>() + self.ignored_pixels
    }
}

pub fn accumulate(mut cm: ConfusionMatrix, pred: &Mask, label: &Mask) -> Result<ConfusionMatrix, MetricsError> {
    cm.accumulate(pred, label)?;
    Ok(cm)
}

/// Recall of class `c`.
pub fn class_accuracy(cm: &ConfusionMatrix, c: u8) -> Result<f64, MetricsError> {
    let row = cm.row_sum(c);
    if row == 0 {
        return Err(MetricsError::Undefined(c));
    }
    Ok(cm.counts[c as usize][c as usize] as f64 / row as f64)
}

pub fn class_iou(cm: &ConfusionMatrix, c: u8) -> Result<f64, MetricsError> {
    let tp = cm.counts[c as usize][c as usize];
    let union = cm.row_sum(c) + cm.col_sum(c) - tp;
    if union == 0 {
        return Err(MetricsError::Undefined(c));
    }
    Ok(tp as f64 / union as f64)
}

/// Cloud and snow metrics; `None` where the class is absent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CleanMetrics {
    pub oa_cloud: Option<f64>,
    pub oa_snow: Option<f64>,
    pub iou_cloud: Option<f64>,
    pub iou_snow: Option<f64>,
    pub miou: Option<f64>,
}

/// Mean over the defined values.
pub fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

impl CleanMetrics {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        let iou_cloud = class_iou(cm, CLOUD).ok();
        let iou_snow = class_iou(cm, SNOW).ok();
        Self {
            oa_cloud: class_accuracy(cm, CLOUD).ok(),
            oa_snow: class_accuracy(cm, SNOW).ok(),
            iou_cloud,
            iou_snow,
            miou: mean_defined(&[iou_cloud, iou_snow]),
        }
    }

    /// Values as percentages rounded to two decimals.
    pub fn report(&self) -> MetricsReport {
        let pct = |v: Option<f64>| v.map(|x| (x * 10_000.0).round() / 100.0);
        MetricsReport {
            oa_cloud: pct(self.oa_cloud),
            oa_snow: pct(self.oa_snow),
            iou_cloud: pct(self.iou_cloud),
            iou_snow: pct(self.iou_snow),
            miou: pct(self.miou),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub oa_cloud: Option<f64>,
    pub oa_snow: Option<f64>,
    pub iou_cloud: Option<f64>,
    pub iou_snow: Option<f64>,
    pub miou: Option<f64>,
}

/// Which mask of a sample counts as the reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reference {
    Observed,
    True,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub metrics: CleanMetrics,
    pub confusion: ConfusionMatrix,
    pub images: usize,
}

/// Accumulates one global matrix over a partition using `predict` per image.
pub fn evaluate_partition(
    manifest: &DatasetManifest,
    subset: Subset,
    split: Split,
    reference: Reference,
    mut predict: impl FnMut(&[&SampleRecord], &[&RgbImage]) -> Result<Vec<Mask>, MetricsError>,
) -> Result<Evaluation, MetricsError> {
    let records = partition(manifest, subset, split);
    if records.is_empty() {
        return Err(MetricsError::EmptyPartition(subset, split));
    }
    let mut cm = ConfusionMatrix::new();
    for chunk in records.chunks(8) {
        let images = chunk
            .iter()
            .map(|r| manifest.load_image(r))
            .collect::<Result<Vec<_>, _>>()?;
        let recs: Vec<&SampleRecord> = chunk.iter().collect();
        let preds = predict(&recs, &images.iter().collect::<Vec<_>>())?;
        for (rec, pred) in chunk.iter().zip(&preds) {
            let label = match reference {
                Reference::Observed => manifest.load_label(rec)?,
                Reference::True => manifest
                    .load_true_label(rec)?
                    .ok_or_else(|| MetricsError::MissingTruth(rec.id.clone()))?,
            };
            cm.accumulate(pred, &label)?;
        }
    }
    Ok(Evaluation {
        metrics: CleanMetrics::from_confusion(&cm),
        confusion: cm,
        images: records.len(),
    })
}

pub fn evaluate_clean<F: Real>(
    model: &ModelParams<F>,
    manifest: &DatasetManifest,
    split: Split,
    subset: Subset,
) -> Result<Evaluation, MetricsError> {
    evaluate_partition(manifest, subset, split, Reference::Observed, |_, images| {
        Ok(model.segment(images)?)
    })
}
