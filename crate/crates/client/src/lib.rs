//! Typed access to a running controller's HTTP API.

use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use thiserror::Error;

use music_core::api::{ApiError, DispatchResponse, Health, MetricsView, NodeView, PolicyView, TickView};
use music_core::wire::{self, CommandMsg, Message};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    #[error("controller answered {status}: {message}")]
    Api { status: StatusCode, message: String },
    #[error("cannot encode command: {0}")]
    Encode(#[from] wire::WireError),
}

impl ClientError {
    pub fn status(&self) -> Option<StatusCode> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            ClientError::Http(e) => e.status(),
            ClientError::Encode(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the API root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Client {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    async fn read<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T, ClientError> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let message = match resp.json::<ApiError>().await {
            Ok(e) => e.error,
            Err(_) => status.canonical_reason().unwrap_or("error").to_string(),
        };
        Err(ClientError::Api { status, message })
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        Self::read(self.http.get(format!("{}{path}", self.base)).send().await?).await
    }

    pub async fn health(&self) -> Result<Health, ClientError> {
        self.get("/healthz").await
    }

    pub async fn nodes(&self) -> Result<Vec<NodeView>, ClientError> {
        self.get("/nodes").await
    }

    pub async fn node(&self, imei: &str) -> Result<NodeView, ClientError> {
        self.get(&format!("/nodes/{imei}")).await
    }

    pub async fn policy(&self) -> Result<PolicyView, ClientError> {
        self.get("/policy").await
    }

    pub async fn metrics(&self) -> Result<MetricsView, ClientError> {
        self.get("/metrics").await
    }

    pub async fn ticks(&self) -> Result<Vec<TickView>, ClientError> {
        self.get("/analytics/ticks").await
    }

    pub async fn latest_tick(&self) -> Result<TickView, ClientError> {
        self.get("/analytics/latest").await
    }

    /// Sends `cmd` to one node, bypassing the policy.
    pub async fn dispatch(&self, imei: &str, cmd: &CommandMsg) -> Result<DispatchResponse, ClientError> {
        let body = wire::encode(&Message::Command(cmd.clone()))?;
        let resp = self
            .http
            .post(format!("{}/nodes/{imei}/commands", self.base))
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body)
            .send()
            .await?;
        Self::read(resp).await
    }
}
