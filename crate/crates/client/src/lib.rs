//! Thin typed client for the consist service: one async method per endpoint,
//! with the service's error classes surfaced for exit-code mapping.

use consist_api::{
    AccuracyRequest, ErrorBody, FrameRequest, FrameResponse, IdentityRequest, IdentityResponse,
    RingsRequest, SelfcheckRequest, SelfcheckResponse, TableResponse,
};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    /// The service answered with an error body; `class` is `config`,
    /// `format`, or `internal`.
    #[error("{class} error from service: {message}")]
    Api { class: String, message: String },

    #[error("transport: {0}")]
    Transport(#[from] reqwest::Error),

    #[error("unexpected response ({status}): {body}")]
    Unexpected { status: u16, body: String },
}

impl ClientError {
    pub fn class(&self) -> &str {
        match self {
            ClientError::Api { class, .. } => class,
            _ => "internal",
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    http: reqwest::Client,
    base: String,
}

impl Client {
    pub fn new(base_url: &str) -> Self {
        Client {
            http: reqwest::Client::new(),
            base: base_url.trim_end_matches('/').to_owned(),
        }
    }

    async fn post<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        path: &str,
        req: &Req,
    ) -> Result<Resp> {
        let response = self
            .http
            .post(format!("{}{path}", self.base))
            .json(req)
            .send()
            .await?;
        let status = response.status();
        if status.is_success() {
            return Ok(response.json().await?);
        }
        let body = response.text().await.unwrap_or_default();
        match serde_json::from_str::<ErrorBody>(&body) {
            Ok(err) => Err(ClientError::Api {
                class: err.class,
                message: err.message,
            }),
            Err(_) => Err(ClientError::Unexpected {
                status: status.as_u16(),
                body,
            }),
        }
    }

    pub async fn health(&self) -> Result<()> {
        let response = self
            .http
            .get(format!("{}/v1/health", self.base))
            .send()
            .await?;
        if response.status().is_success() {
            Ok(())
        } else {
            Err(ClientError::Unexpected {
                status: response.status().as_u16(),
                body: response.text().await.unwrap_or_default(),
            })
        }
    }

    pub async fn identity(&self, req: &IdentityRequest) -> Result<IdentityResponse> {
        self.post("/v1/identity", req).await
    }

    pub async fn frame(&self, req: &FrameRequest) -> Result<FrameResponse> {
        self.post("/v1/frame", req).await
    }

    pub async fn diagnose_rings(&self, req: &RingsRequest) -> Result<TableResponse> {
        self.post("/v1/diagnose/rings", req).await
    }

    pub async fn diagnose_accuracy(&self, req: &AccuracyRequest) -> Result<TableResponse> {
        self.post("/v1/diagnose/accuracy", req).await
    }

    pub async fn selfcheck(&self, req: &SelfcheckRequest) -> Result<SelfcheckResponse> {
        self.post("/v1/selfcheck", req).await
    }
}
