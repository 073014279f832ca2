//! HTTP backend for the manual noisy-set error tally.
//!
//! A session is built once from a manifest, a directory of predicted class
//! masks and a judgments file. Reads are concurrent; judgments are appended
//! through a single writer and become visible to the next request.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use chrono::{DateTime, TimeDelta, Utc};
use serde::{Deserialize, Serialize};

use cirrus_core::dataset::{load_manifest, partition, DatasetManifest, SampleRecord, Split, Subset};
use cirrus_core::jsonl;
use cirrus_core::noisy_eval::{
    aggregate_ids, prescreen, Aggregate, Judgment, NoisyEvalError, PrescreenResult, Source, Thresholds, Verdict,
};
use cirrus_core::raster::{Mask, RgbaImage, BACKGROUND, CLOUD, IGNORE, SNOW};
use cirrus_core::review_api::{
    ApiError, Health, ItemBundle, ItemFilter, ItemPage, ItemStatus, ItemSummary, JudgmentRequest, JudgmentResponse,
    Progress, SummaryResponse,
};

pub const DEFAULT_PAGE_SIZE: usize = 50;
pub const MAX_PAGE_SIZE: usize = 500;
pub const ANONYMOUS: &str = "anonymous";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassColors {
    pub background: [u8; 4],
    pub cloud: [u8; 4],
    pub snow: [u8; 4],
    pub ignore: [u8; 4],
}

impl ClassColors {
    fn of(&self, v: u8) -> [u8; 4] {
        match v {
            BACKGROUND => self.background,
            CLOUD => self.cloud,
            SNOW => self.snow,
            _ => self.ignore,
        }
    }
}

/// RGBA colors of the display rasters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Palette {
    pub label: ClassColors,
    pub prediction: ClassColors,
    pub disagreement: [u8; 4],
}

impl Default for Palette {
    fn default() -> Self {
        Self {
            label: ClassColors {
                background: [0, 0, 0, 0],
                cloud: [0, 0, 255, 255],
                snow: [0, 0, 128, 255],
                ignore: [128, 128, 128, 255],
            },
            prediction: ClassColors {
                background: [0, 0, 0, 0],
                cloud: [255, 0, 0, 255],
                snow: [128, 0, 0, 255],
                ignore: [128, 128, 128, 255],
            },
            disagreement: [255, 0, 255, 255],
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReviewConfig {
    pub manifest: PathBuf,
    pub predictions_dir: PathBuf,
    pub judgments_file: PathBuf,
    pub reviewer_required: bool,
    pub thresholds: Thresholds,
    pub palette: Palette,
    pub subset: Subset,
    pub split: Split,
}

impl ReviewConfig {
    pub fn new(manifest: impl Into<PathBuf>, predictions_dir: impl Into<PathBuf>, judgments_file: impl Into<PathBuf>) -> Self {
        Self {
            manifest: manifest.into(),
            predictions_dir: predictions_dir.into(),
            judgments_file: judgments_file.into(),
            reviewer_required: false,
            thresholds: Thresholds::default(),
            palette: Palette::default(),
            subset: Subset::Noisy,
            split: Split::Test,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ReviewError {
    #[error(transparent)]
    Dataset(#[from] cirrus_core::dataset::DatasetError),
    #[error(transparent)]
    Raster(#[from] cirrus_core::raster::RasterError),
    #[error("no prediction for {id} at {path}")]
    MissingPrediction { id: String, path: PathBuf },
    #[error(transparent)]
    NoisyEval(#[from] NoisyEvalError),
    #[error(transparent)]
    Jsonl(#[from] jsonl::JsonlError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

struct Item {
    record: SampleRecord,
    label: Mask,
    prediction: Mask,
    prescreen: PrescreenResult,
}

struct Store {
    judgments: Vec<Judgment>,
    last_timestamp: Option<DateTime<Utc>>,
}

pub struct Session {
    config: ReviewConfig,
    manifest: DatasetManifest,
    items: Vec<Item>,
    ids: Vec<String>,
    store: RwLock<Store>,
    writer: tokio::sync::Mutex<()>,
}

impl Session {
    /// Loads every item of the review partition with its prediction.
    pub fn open(config: ReviewConfig) -> Result<Self, ReviewError> {
        config.thresholds.validate()?;
        let manifest = load_manifest(&config.manifest)?;
        let mut items = Vec::new();
        let mut records = partition(&manifest, config.subset, config.split);
        records.sort_by(|a, b| a.id.cmp(&b.id));
        for record in records {
            let label = manifest.load_label(&record)?;
            let path = config.predictions_dir.join(format!("{}.png", record.id));
            if !path.exists() {
                return Err(ReviewError::MissingPrediction { id: record.id, path });
            }
            let prediction = Mask::load_png(&path)?;
            let prescreen = prescreen(&prediction, &label, &config.thresholds)?;
            items.push(Item {
                record,
                label,
                prediction,
                prescreen,
            });
        }
        let ids: Vec<String> = items.iter().map(|i| i.record.id.clone()).collect();
        let judgments: Vec<Judgment> = if config.judgments_file.exists() {
            jsonl::read(&config.judgments_file)?
        } else {
            Vec::new()
        };
        aggregate_ids(&judgments, &ids)?;
        let last_timestamp = judgments.iter().filter(|j| j.source == Source::Human).map(|j| j.timestamp).max();
        Ok(Self {
            config,
            manifest,
            items,
            ids,
            store: RwLock::new(Store {
                judgments,
                last_timestamp,
            }),
            writer: tokio::sync::Mutex::new(()),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn item(&self, id: &str) -> Option<&Item> {
        self.ids.binary_search_by(|x| x.as_str().cmp(id)).ok().map(|i| &self.items[i])
    }

    fn aggregate(&self) -> Aggregate {
        let store = self.store.read().expect("store lock");
        aggregate_ids(&store.judgments, &self.ids).expect("judgments are validated on write")
    }

    fn human_judgments(&self, id: &str) -> Vec<Judgment> {
        let store = self.store.read().expect("store lock");
        let mut out: Vec<Judgment> = store
            .judgments
            .iter()
            .filter(|j| j.image_id == id && j.source == Source::Human)
            .cloned()
            .collect();
        out.sort_by_key(|j| j.timestamp);
        out
    }

    pub fn summary(&self) -> SummaryResponse {
        let agg = self.aggregate();
        SummaryResponse {
            summary: agg.summary,
            category_counts: agg.category_counts,
            progress: Progress {
                judged: agg.human_judged,
                total: self.items.len(),
            },
            disagreements: agg.disagreements.len(),
        }
    }

    pub fn list(&self, filter: ItemFilter, page: usize, page_size: usize) -> ItemPage {
        let agg = self.aggregate();
        let matching: Vec<ItemSummary> = self
            .items
            .iter()
            .filter_map(|item| {
                let id = &item.record.id;
                let eff = &agg.verdicts[id];
                let status = status_of(eff.source);
                let keep = match filter {
                    ItemFilter::All => true,
                    ItemFilter::Pending => status == ItemStatus::Pending,
                    ItemFilter::ErrorOnly => eff.verdict == Verdict::Error,
                };
                keep.then(|| ItemSummary {
                    image_id: id.clone(),
                    status,
                    verdict: eff.verdict,
                    categories: eff.categories.clone(),
                    suggested: item.prescreen.verdict,
                })
            })
            .collect();
        let total = matching.len();
        let items = matching.into_iter().skip((page - 1) * page_size).take(page_size).collect();
        ItemPage {
            items,
            page,
            page_size,
            total,
            pages: total.div_ceil(page_size),
        }
    }

    pub fn bundle(&self, id: &str) -> Result<Option<ItemBundle>, ReviewError> {
        let Some(item) = self.item(id) else {
            return Ok(None);
        };
        let image = self.manifest.load_image(&item.record)?;
        let palette = &self.config.palette;
        let (w, h) = item.label.dims();
        let colorize = |mask: &Mask, colors: &ClassColors| {
            let mut out = RgbaImage::new(w, h);
            for (px, &v) in out.data.chunks_exact_mut(4).zip(&mask.data) {
                px.copy_from_slice(&colors.of(v));
            }
            out
        };
        let mut overlay = RgbaImage::new(w, h);
        for ((px, &l), &p) in overlay.data.chunks_exact_mut(4).zip(&item.label.data).zip(&item.prediction.data) {
            if l != IGNORE && l != p {
                px.copy_from_slice(&palette.disagreement);
            }
        }
        let b64 = |bytes: Vec<u8>| STANDARD.encode(bytes);
        let agg = self.aggregate();
        let eff = &agg.verdicts[id];
        Ok(Some(ItemBundle {
            image_id: id.to_string(),
            width: w,
            height: h,
            image: b64(image.encode_png()?),
            label: b64(colorize(&item.label, &palette.label).encode_png()?),
            prediction: b64(colorize(&item.prediction, &palette.prediction).encode_png()?),
            disagreement: b64(overlay.encode_png()?),
            prescreen: item.prescreen.clone(),
            status: status_of(eff.source),
            verdict: eff.verdict,
            judgments: self.human_judgments(id),
        }))
    }

    /// Appends a HUMAN judgment unless the reviewer's latest one for this
    /// image already says the same.
    pub async fn judge(&self, id: &str, request: JudgmentRequest) -> Result<JudgmentResponse, JudgeError> {
        if self.item(id).is_none() {
            return Err(JudgeError::UnknownImage(id.to_string()));
        }
        let reviewer = match request.reviewer.as_deref().map(str::trim) {
            Some(r) if !r.is_empty() => r.to_string(),
            _ if self.config.reviewer_required => {
                return Err(JudgeError::BadRequest("a reviewer name is required".into()))
            }
            _ => ANONYMOUS.to_string(),
        };
        let _guard = self.writer.lock().await;
        let previous = self
            .human_judgments(id)
            .into_iter()
            .filter(|j| j.reviewer == reviewer)
            .max_by_key(|j| j.timestamp);
        if let Some(p) = previous.filter(|p| p.verdict == request.verdict && p.categories == request.categories) {
            return Ok(JudgmentResponse {
                judgment: p,
                created: false,
            });
        }
        let mut timestamp = Utc::now();
        if let Some(last) = self.store.read().expect("store lock").last_timestamp {
            if timestamp <= last {
                timestamp = last + TimeDelta::microseconds(1);
            }
        }
        let judgment = Judgment {
            image_id: id.to_string(),
            verdict: request.verdict,
            categories: request.categories,
            reviewer,
            source: Source::Human,
            timestamp,
        };
        judgment.validate().map_err(|e| JudgeError::BadRequest(e.to_string()))?;
        jsonl::append(&self.config.judgments_file, std::slice::from_ref(&judgment))
            .map_err(|e| JudgeError::Storage(e.to_string()))?;
        let mut store = self.store.write().expect("store lock");
        store.judgments.push(judgment.clone());
        store.last_timestamp = Some(timestamp);
        tracing::info!(image = id, verdict = ?judgment.verdict, reviewer = %judgment.reviewer, "judgment stored");
        Ok(JudgmentResponse {
            judgment,
            created: true,
        })
    }
}

fn status_of(source: Option<Source>) -> ItemStatus {
    if source == Some(Source::Human) {
        ItemStatus::Judged
    } else {
        ItemStatus::Pending
    }
}

#[derive(Debug, thiserror::Error)]
pub enum JudgeError {
    #[error("unknown image {0}")]
    UnknownImage(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("could not persist judgment: {0}")]
    Storage(String),
}

struct AppError(StatusCode, String);

impl IntoResponse for AppError {
    fn into_response(self) -> Response {
        (self.0, Json(ApiError { error: self.1 })).into_response()
    }
}

impl From<JudgeError> for AppError {
    fn from(e: JudgeError) -> Self {
        let code = match e {
            JudgeError::UnknownImage(_) => StatusCode::NOT_FOUND,
            JudgeError::BadRequest(_) => StatusCode::BAD_REQUEST,
            JudgeError::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        AppError(code, e.to_string())
    }
}

type Shared = Arc<Session>;

#[derive(Debug, Deserialize)]
struct ListQuery {
    filter: Option<String>,
    page: Option<usize>,
    page_size: Option<usize>,
}

async fn health(State(s): State<Shared>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        items: s.len(),
    })
}

async fn list_items(State(s): State<Shared>, Query(q): Query<ListQuery>) -> Result<Json<ItemPage>, AppError> {
    let bad = |msg: String| AppError(StatusCode::BAD_REQUEST, msg);
    let filter = match q.filter.as_deref() {
        None => ItemFilter::All,
        Some(f) => f.parse().map_err(bad)?,
    };
    let page = q.page.unwrap_or(1);
    let page_size = q.page_size.unwrap_or(DEFAULT_PAGE_SIZE);
    if page == 0 {
        return Err(bad("page is 1-based".into()));
    }
    if !(1..=MAX_PAGE_SIZE).contains(&page_size) {
        return Err(bad(format!("page_size must be in 1..={MAX_PAGE_SIZE}")));
    }
    Ok(Json(s.list(filter, page, page_size)))
}

async fn get_item(State(s): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<ItemBundle>, AppError> {
    match s.bundle(&id) {
        Ok(Some(b)) => Ok(Json(b)),
        Ok(None) => Err(AppError(StatusCode::NOT_FOUND, format!("unknown image {id}"))),
        Err(e) => Err(AppError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())),
    }
}

async fn post_judgment(
    State(s): State<Shared>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<JudgmentRequest>, axum::extract::rejection::JsonRejection>,
) -> Result<(StatusCode, Json<JudgmentResponse>), AppError> {
    let Json(request) = body.map_err(|e| AppError(StatusCode::BAD_REQUEST, e.body_text()))?;
    let response = s.judge(&id, request).await?;
    let code = if response.created { StatusCode::CREATED } else { StatusCode::OK };
    Ok((code, Json(response)))
}

async fn summary(State(s): State<Shared>) -> Json<SummaryResponse> {
    Json(s.summary())
}

pub fn router(session: Shared) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/items", get(list_items))
        .route("/api/items/{id}", get(get_item))
        .route("/api/items/{id}/judgment", post(post_judgment))
        .route("/api/summary", get(summary))
        .with_state(session)
}

/// Binds and serves in a background task; returns the bound address.
pub async fn spawn(
    session: Shared,
    addr: SocketAddr,
) -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<std::io::Result<()>>)> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let handle = tokio::spawn(async move { axum::serve(listener, router(session)).await });
    Ok((local, handle))
}

/// Serves until Ctrl-C.
pub async fn serve(config: ReviewConfig, addr: SocketAddr) -> Result<(), ReviewError> {
    let session = Arc::new(Session::open(config)?);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, items = session.len(), "review service listening");
    axum::serve(listener, router(session))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
