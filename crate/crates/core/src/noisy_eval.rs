//! Noisy-set evaluation: per-image error judgments, the automated prescreen
//! that proposes them, error% aggregation and the method comparison table.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::{self, Write as _};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::components::label_components;
use crate::dataset::{partition, DatasetManifest, Split, Subset};
use crate::metrics::CleanMetrics;
use crate::raster::{Mask, BACKGROUND, CLOUD, SNOW};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCategory {
    CloudAsSnow,
    LargeOmission,
    LargeFalseDetection,
}

impl ErrorCategory {
    pub const ALL: [ErrorCategory; 3] = [Self::CloudAsSnow, Self::LargeOmission, Self::LargeFalseDetection];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::CloudAsSnow => "CLOUD_AS_SNOW",
            Self::LargeOmission => "LARGE_OMISSION",
            Self::LargeFalseDetection => "LARGE_FALSE_DETECTION",
        }
    }
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Ok,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Source {
    Human,
    Prescreen,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub image_id: String,
    pub verdict: Verdict,
    #[serde(default)]
    pub categories: BTreeSet<ErrorCategory>,
    pub reviewer: String,
    pub source: Source,
    pub timestamp: DateTime<Utc>,
}

impl Judgment {
    /// Categories must be non-empty exactly when the verdict is ERROR.
    pub fn validate(&self) -> Result<(), NoisyEvalError> {
        match (self.verdict, self.categories.is_empty()) {
            (Verdict::Error, true) => Err(NoisyEvalError::InvalidJudgment(format!(
                "{}: ERROR verdict without categories",
                self.image_id
            ))),
            (Verdict::Ok, false) => Err(NoisyEvalError::InvalidJudgment(format!(
                "{}: OK verdict with categories",
                self.image_id
            ))),
            _ => Ok(()),
        }
    }

    /// Total order used to pick the winner among conflicting judgments.
    fn rank(&self) -> impl Ord + '_ {
        (self.timestamp, &self.reviewer, self.verdict, &self.categories)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum NoisyEvalError {
    #[error("prediction is {pred:?} but label is {label:?}")]
    ShapeMismatch { pred: (usize, usize), label: (usize, usize) },
    #[error("judgment references unknown image {0}")]
    UnknownImage(String),
    #[error("invalid judgment: {0}")]
    InvalidJudgment(String),
    #[error("threshold {name} = {value} must lie in [0, 1]")]
    BadThreshold { name: &'static str, value: f64 },
}

/// Minimum single-component area, as a fraction of the image, per category.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub cloud_as_snow: f64,
    pub omission: f64,
    pub false_detection: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            cloud_as_snow: 0.05,
            omission: 0.05,
            false_detection: 0.05,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<(), NoisyEvalError> {
        for (name, value) in [
            ("cloud_as_snow", self.cloud_as_snow),
            ("omission", self.omission),
            ("false_detection", self.false_detection),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(NoisyEvalError::BadThreshold { name, value });
            }
        }
        Ok(())
    }

    fn get(&self, c: ErrorCategory) -> f64 {
        match c {
            ErrorCategory::CloudAsSnow => self.cloud_as_snow,
            ErrorCategory::LargeOmission => self.omission,
            ErrorCategory::LargeFalseDetection => self.false_detection,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrescreenResult {
    pub verdict: Verdict,
    pub categories: BTreeSet<ErrorCategory>,
    /// Largest disagreement component per category, as a fraction of the image.
    pub largest_fraction: BTreeMap<ErrorCategory, f64>,
}

fn disagreement(c: ErrorCategory, label: u8, pred: u8) -> bool {
    match c {
        ErrorCategory::CloudAsSnow => label == CLOUD && pred == SNOW,
        ErrorCategory::LargeOmission => (label == CLOUD || label == SNOW) && pred == BACKGROUND,
        ErrorCategory::LargeFalseDetection => label == BACKGROUND && (pred == CLOUD || pred == SNOW),
    }
}

/// Flags a category when one 4-connected disagreement region reaches its
/// threshold. Ignore pixels never belong to a region.
pub fn prescreen(pred: &Mask, label: &Mask, thresholds: &Thresholds) -> Result<PrescreenResult, NoisyEvalError> {
    if pred.dims() != label.dims() {
        return Err(NoisyEvalError::ShapeMismatch {
            pred: pred.dims(),
            label: label.dims(),
        });
    }
    let area = pred.len().max(1) as f64;
    let mut categories = BTreeSet::new();
    let mut largest_fraction = BTreeMap::new();
    for c in ErrorCategory::ALL {
        let comps = label_components(pred.width, pred.height, |i| disagreement(c, label.data[i], pred.data[i]));
        let fraction = comps.largest() as f64 / area;
        if comps.largest() > 0 && fraction >= thresholds.get(c) {
            categories.insert(c);
        }
        largest_fraction.insert(c, fraction);
    }
    Ok(PrescreenResult {
        verdict: if categories.is_empty() { Verdict::Ok } else { Verdict::Error },
        categories,
        largest_fraction,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisyEvalSummary {
    pub total_images: usize,
    pub error_images: usize,
    pub error_percent: f64,
}

impl NoisyEvalSummary {
    /// 0.0 for an empty partition.
    pub fn new(total_images: usize, error_images: usize) -> Self {
        assert!(error_images <= total_images, "more errors than images");
        let error_percent = if total_images == 0 {
            0.0
        } else {
            (100 * error_images) as f64 / total_images as f64
        };
        Self {
            total_images,
            error_images,
            error_percent,
        }
    }
}

/// HUMAN judgments from different reviewers that disagree on one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Disagreement {
    pub image_id: String,
    pub judgments: Vec<Judgment>,
    pub winner: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub summary: NoisyEvalSummary,
    pub category_counts: BTreeMap<ErrorCategory, usize>,
    pub human_judged: usize,
    /// Effective verdict per image.
    pub verdicts: BTreeMap<String, Effective>,
    pub disagreements: Vec<Disagreement>,
    /// Images with no judgment at all; filled only when no prescreen was supplied.
    pub missing_coverage: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Effective {
    pub verdict: Verdict,
    pub categories: BTreeSet<ErrorCategory>,
    /// `None` when the image defaulted to OK.
    pub source: Option<Source>,
}

/// Resolves one effective verdict per image id and tallies errors.
pub fn aggregate_ids(judgments: &[Judgment], ids: &[String]) -> Result<Aggregate, NoisyEvalError> {
    let known: HashSet<&str> = ids.iter().map(String::as_str).collect();
    let mut by_image: BTreeMap<&str, Vec<&Judgment>> = BTreeMap::new();
    for j in judgments {
        if !known.contains(j.image_id.as_str()) {
            return Err(NoisyEvalError::UnknownImage(j.image_id.clone()));
        }
        j.validate()?;
        by_image.entry(&j.image_id).or_default().push(j);
    }
    let any_prescreen = judgments.iter().any(|j| j.source == Source::Prescreen);

    let mut verdicts = BTreeMap::new();
    let mut disagreements = Vec::new();
    let mut missing_coverage = Vec::new();
    let mut human_judged = 0;
    for id in ids {
        let list = by_image.get(id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        let latest = |source: Source| {
            list.iter()
                .filter(|j| j.source == source)
                .max_by(|a, b| a.rank().cmp(&b.rank()))
                .copied()
        };
        let effective = if let Some(winner) = latest(Source::Human) {
            human_judged += 1;
            let mut per_reviewer: BTreeMap<&str, &Judgment> = BTreeMap::new();
            for j in list.iter().filter(|j| j.source == Source::Human) {
                let slot = per_reviewer.entry(&j.reviewer).or_insert(j);
                if j.rank() > slot.rank() {
                    *slot = j;
                }
            }
            let distinct: BTreeSet<_> = per_reviewer.values().map(|j| (j.verdict, &j.categories)).collect();
            if distinct.len() > 1 {
                disagreements.push(Disagreement {
                    image_id: id.clone(),
                    judgments: per_reviewer.values().map(|j| (*j).clone()).collect(),
                    winner: winner.reviewer.clone(),
                });
            }
            Effective {
                verdict: winner.verdict,
                categories: winner.categories.clone(),
                source: Some(Source::Human),
            }
        } else if let Some(p) = latest(Source::Prescreen) {
            Effective {
                verdict: p.verdict,
                categories: p.categories.clone(),
                source: Some(Source::Prescreen),
            }
        } else {
            if !any_prescreen {
                missing_coverage.push(id.clone());
            }
            Effective {
                verdict: Verdict::Ok,
                categories: BTreeSet::new(),
                source: None,
            }
        };
        verdicts.insert(id.clone(), effective);
    }

    let mut category_counts: BTreeMap<ErrorCategory, usize> = ErrorCategory::ALL.iter().map(|&c| (c, 0)).collect();
    let mut errors = 0;
    for e in verdicts.values().filter(|e| e.verdict == Verdict::Error) {
        errors += 1;
        for c in &e.categories {
            *category_counts.get_mut(c).expect("all categories present") += 1;
        }
    }
    Ok(Aggregate {
        summary: NoisyEvalSummary::new(ids.len(), errors),
        category_counts,
        human_judged,
        verdicts,
        disagreements,
        missing_coverage,
    })
}

pub fn aggregate_error_rate(
    judgments: &[Judgment],
    manifest: &DatasetManifest,
    subset: Subset,
    split: Split,
) -> Result<Aggregate, NoisyEvalError> {
    let ids: Vec<String> = partition(manifest, subset, split).into_iter().map(|r| r.id).collect();
    aggregate_ids(judgments, &ids)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodEntry {
    pub name: String,
    #[serde(default)]
    pub clean: Option<CleanMetrics>,
    #[serde(default)]
    pub noisy: Option<NoisyEvalSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Better {
    Higher,
    Lower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub better: Better,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub values: Vec<Option<f64>>,
    pub best: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub columns: Vec<Column>,
    pub rows: Vec<ReportRow>,
}

fn pct2(v: f64) -> f64 {
    (v * 10_000.0).round() / 100.0
}

/// Clean-set OA/IoU as percentages and noisy-set error%; every row holding
/// the best displayed value of a column is marked.
pub fn compare_methods(entries: &[MethodEntry]) -> ComparisonReport {
    let columns: Vec<Column> = [
        ("OA_c", Better::Higher),
        ("OA_s", Better::Higher),
        ("IoU_c", Better::Higher),
        ("IoU_s", Better::Higher),
        ("error%", Better::Lower),
    ]
    .into_iter()
    .map(|(name, better)| Column {
        name: name.into(),
        better,
    })
    .collect();

    let values: Vec<Vec<Option<f64>>> = entries
        .iter()
        .map(|e| {
            let c = e.clean.as_ref();
            vec![
                c.and_then(|m| m.oa_cloud).map(pct2),
                c.and_then(|m| m.oa_snow).map(pct2),
                c.and_then(|m| m.iou_cloud).map(pct2),
                c.and_then(|m| m.iou_snow).map(pct2),
                e.noisy.map(|s| (s.error_percent * 100.0).round() / 100.0),
            ]
        })
        .collect();

    let best_per_column: Vec<Option<f64>> = columns
        .iter()
        .enumerate()
        .map(|(k, col)| {
            let present = values.iter().filter_map(|v| v[k]);
            match col.better {
                Better::Higher => present.reduce(f64::max),
                Better::Lower => present.reduce(f64::min),
            }
        })
        .collect();

    let rows = entries
        .iter()
        .zip(values)
        .map(|(e, vals)| ReportRow {
            method: e.name.clone(),
            best: vals
                .iter()
                .zip(&best_per_column)
                .map(|(v, b)| v.is_some() && v == b)
                .collect(),
            values: vals,
        })
        .collect();
    ComparisonReport { columns, rows }
}

impl ComparisonReport {
    /// Aligned plain text; best values carry a trailing `*`.
    pub fn to_text(&self) -> String {
        let mut cells: Vec<Vec<String>> = vec![std::iter::once("Method".to_string())
            .chain(self.columns.iter().map(|c| c.name.clone()))
            .collect()];
        for row in &self.rows {
            let mut line = vec![row.method.clone()];
            for (v, best) in row.values.iter().zip(&row.best) {
                line.push(match v {
                    Some(x) => format!("{x:.2}{}", if *best { "*" } else { "" }),
                    None => "-".into(),
                });
            }
            cells.push(line);
        }
        let widths: Vec<usize> = (0..cells[0].len())
            .map(|k| cells.iter().map(|r| r[k].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, row) in cells.iter().enumerate() {
            for (k, cell) in row.iter().enumerate() {
                if k == 0 {
                    let _ = write!(out, "{cell:<w$}", w = widths[k]);
                } else {
                    let _ = write!(out, "  {cell:>w$}", w = widths[k]);
                }
            }
            out.push('\n');
            if i == 0 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
                out.push('\n');
            }
        }
        out
    }
}
