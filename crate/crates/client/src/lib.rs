//! Async client for the maskfit HTTP service.

use maskfit_core::api::{
    AnnotationDoc, ErrorBody, LandmarkSource, PredictRequest, Prediction, RunStatus, SampleInfo, SampleView,
    SizeRequest, SizeResponse, StartRunRequest, StoredAnnotation,
};
use maskfit_core::run::RunReport;
use maskfit_core::TrainConfig;
use reqwest::{Method, RequestBuilder, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
    /// The service answered with a non-success status.
    #[error("{status}: {}", body.error)]
    Api { status: StatusCode, body: ErrorBody },
}

impl ClientError {
    pub fn status(&self) -> Option<StatusCode> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            ClientError::Transport(e) => e.status(),
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn request(&self, method: Method, path: &str) -> RequestBuilder {
        self.http.request(method, format!("{}{}", self.base, path))
    }

    async fn send(req: RequestBuilder) -> Result<reqwest::Response> {
        let resp = req.send().await?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let text = resp.text().await.unwrap_or_default();
        let body = serde_json::from_str(&text).unwrap_or(ErrorBody {
            error: text,
            field: None,
            rule: None,
        });
        Err(ClientError::Api { status, body })
    }

    async fn json<T: DeserializeOwned>(req: RequestBuilder) -> Result<T> {
        Ok(Self::send(req).await?.json().await?)
    }

    async fn post_json<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        Self::json(self.request(Method::POST, path).json(body)).await
    }

    pub async fn health(&self) -> Result<serde_json::Value> {
        Self::json(self.request(Method::GET, "/health")).await
    }

    /// Uploads PGM or PNG bytes; the content type is chosen from the signature.
    pub async fn upload_sample(&self, bytes: Vec<u8>) -> Result<SampleInfo> {
        let ct = if bytes.starts_with(b"\x89PNG") {
            "image/png"
        } else {
            "image/x-portable-graymap"
        };
        Self::json(self.request(Method::POST, "/samples").header("content-type", ct).body(bytes)).await
    }

    pub async fn list_samples(&self) -> Result<Vec<SampleInfo>> {
        Self::json(self.request(Method::GET, "/samples")).await
    }

    pub async fn sample(&self, id: &str) -> Result<SampleView> {
        Self::json(self.request(Method::GET, &format!("/samples/{id}"))).await
    }

    pub async fn image(&self, id: &str) -> Result<Vec<u8>> {
        let resp = Self::send(self.request(Method::GET, &format!("/samples/{id}/image"))).await?;
        Ok(resp.bytes().await?.to_vec())
    }

    pub async fn put_annotation(&self, id: &str, annotation: &AnnotationDoc) -> Result<StoredAnnotation> {
        Self::json(self.request(Method::PUT, &format!("/samples/{id}/annotation")).json(annotation)).await
    }

    pub async fn annotation(&self, id: &str, version: Option<u32>) -> Result<StoredAnnotation> {
        let path = match version {
            Some(v) => format!("/samples/{id}/annotation?version={v}"),
            None => format!("/samples/{id}/annotation"),
        };
        Self::json(self.request(Method::GET, &path)).await
    }

    pub async fn annotation_history(&self, id: &str) -> Result<Vec<StoredAnnotation>> {
        Self::json(self.request(Method::GET, &format!("/samples/{id}/annotations"))).await
    }

    pub async fn predict(&self, id: &str, crop: Option<[usize; 2]>) -> Result<Prediction> {
        self.post_json(&format!("/samples/{id}/predict"), &PredictRequest { crop }).await
    }

    pub async fn size(&self, id: &str, source: Option<LandmarkSource>) -> Result<SizeResponse> {
        self.post_json(&format!("/samples/{id}/size"), &SizeRequest { source }).await
    }

    pub async fn list_runs(&self) -> Result<Vec<RunStatus>> {
        Self::json(self.request(Method::GET, "/runs")).await
    }

    /// Starts a run over a manifest path as the service sees it.
    pub async fn start_run(&self, manifest: &str, config: Option<TrainConfig>) -> Result<RunStatus> {
        let req = StartRunRequest {
            manifest: manifest.to_string(),
            config,
        };
        self.post_json("/runs", &req).await
    }

    pub async fn run(&self, id: &str) -> Result<RunStatus> {
        Self::json(self.request(Method::GET, &format!("/runs/{id}"))).await
    }

    pub async fn report(&self, id: &str) -> Result<RunReport> {
        Self::json(self.request(Method::GET, &format!("/runs/{id}/report"))).await
    }
}
