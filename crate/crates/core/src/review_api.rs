//! Wire types of the review HTTP API, shared by server and client.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::noisy_eval::{ErrorCategory, Judgment, NoisyEvalSummary, PrescreenResult, Verdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ItemFilter {
    #[default]
    All,
    Pending,
    ErrorOnly,
}

impl ItemFilter {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::All => "ALL",
            Self::Pending => "PENDING",
            Self::ErrorOnly => "ERROR_ONLY",
        }
    }
}

impl fmt::Display for ItemFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ItemFilter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "ALL" => Ok(Self::All),
            "PENDING" => Ok(Self::Pending),
            "ERROR_ONLY" => Ok(Self::ErrorOnly),
            _ => Err(format!("unknown filter {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ItemStatus {
    Pending,
    Judged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemSummary {
    pub image_id: String,
    pub status: ItemStatus,
    pub verdict: Verdict,
    pub categories: BTreeSet<ErrorCategory>,
    pub suggested: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemPage {
    pub items: Vec<ItemSummary>,
    /// 1-based.
    pub page: usize,
    pub page_size: usize,
    /// Items matching the filter across all pages.
    pub total: usize,
    pub pages: usize,
}

/// Rasters are base64-encoded PNGs of identical dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemBundle {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub image: String,
    pub label: String,
    pub prediction: String,
    pub disagreement: String,
    pub prescreen: PrescreenResult,
    pub status: ItemStatus,
    pub verdict: Verdict,
    /// HUMAN judgments recorded for this image, oldest first.
    pub judgments: Vec<Judgment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgmentRequest {
    pub verdict: Verdict,
    #[serde(default)]
    pub categories: BTreeSet<ErrorCategory>,
    #[serde(default)]
    pub reviewer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgmentResponse {
    pub judgment: Judgment,
    /// False when an identical judgment was already stored.
    pub created: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub judged: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryResponse {
    pub summary: NoisyEvalSummary,
    pub category_counts: BTreeMap<ErrorCategory, usize>,
    pub progress: Progress,
    pub disagreements: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub items: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub error: String,
}
