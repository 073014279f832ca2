//! Async client for the review service API.

use std::collections::BTreeSet;

use cirrus_core::noisy_eval::{ErrorCategory, Verdict};
use cirrus_core::review_api::{
    ApiError, Health, ItemBundle, ItemFilter, ItemPage, JudgmentRequest, JudgmentResponse, SummaryResponse,
};
use serde::de::DeserializeOwned;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    #[error("server answered {status}: {message}")]
    Api { status: u16, message: String },
}

impl ClientError {
    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            ClientError::Http(e) => e.status().map(|s| s.as_u16()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReviewClient {
    base: String,
    http: reqwest::Client,
}

impl ReviewClient {
    /// `base` is the server root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    async fn decode<T: DeserializeOwned>(response: reqwest::Response) -> Result<T, ClientError> {
        let status = response.status();
        if status.is_success() {
            return Ok(response.json().await?);
        }
        let text = response.text().await.unwrap_or_default();
        let message = serde_json::from_str::<ApiError>(&text).map(|e| e.error).unwrap_or(text);
        Err(ClientError::Api {
            status: status.as_u16(),
            message,
        })
    }

    pub async fn health(&self) -> Result<Health, ClientError> {
        Self::decode(self.http.get(self.url("/api/health")).send().await?).await
    }

    pub async fn list_items(&self, filter: ItemFilter, page: usize, page_size: usize) -> Result<ItemPage, ClientError> {
        let query = [
            ("filter", filter.as_str().to_string()),
            ("page", page.to_string()),
            ("page_size", page_size.to_string()),
        ];
        Self::decode(self.http.get(self.url("/api/items")).query(&query).send().await?).await
    }

    pub async fn get_item(&self, id: &str) -> Result<ItemBundle, ClientError> {
        Self::decode(self.http.get(self.url(&format!("/api/items/{id}"))).send().await?).await
    }

    pub async fn post_judgment(&self, id: &str, request: &JudgmentRequest) -> Result<JudgmentResponse, ClientError> {
        let url = self.url(&format!("/api/items/{id}/judgment"));
        Self::decode(self.http.post(url).json(request).send().await?).await
    }

    pub async fn judge(
        &self,
        id: &str,
        verdict: Verdict,
        categories: impl IntoIterator<Item = ErrorCategory>,
        reviewer: Option<&str>,
    ) -> Result<JudgmentResponse, ClientError> {
        let request = JudgmentRequest {
            verdict,
            categories: categories.into_iter().collect::<BTreeSet<_>>(),
            reviewer: reviewer.map(str::to_string),
        };
        self.post_judgment(id, &request).await
    }

    pub async fn summary(&self) -> Result<SummaryResponse, ClientError> {
        Self::decode(self.http.get(self.url("/api/summary")).send().await?).await
    }
}
