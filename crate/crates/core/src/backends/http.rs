//! HTTP adapter: POSTs the JSON request envelope and decodes the reply.
//!
//! Endpoints and credentials come from the environment:
//! `TAILGEN_ENDPOINT_<KIND>` (for example `TAILGEN_ENDPOINT_GENERATE_IMAGE`)
//! falling back to `TAILGEN_ENDPOINT`, and an optional `TAILGEN_API_KEY`
//! sent as a bearer token. Decoding parameters are left at provider defaults.

use std::time::Duration;

use reqwest::StatusCode;

use super::{Backend, BackendError, BackendRequest, BackendResponse, BackendResult, Kind};
use crate::error::{Error, Result};

pub const ENDPOINT_VAR: &str = "TAILGEN_ENDPOINT";
pub const API_KEY_VAR: &str = "TAILGEN_API_KEY";

pub struct HttpBackend {
    endpoint: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(
        endpoint: impl Into<String>,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::validation(format!("cannot build http client: {e}")))?;
        Ok(HttpBackend {
            endpoint: endpoint.into(),
            api_key,
            client,
        })
    }

    pub fn from_env(kind: Kind, timeout: Duration) -> Result<Self> {
        let specific = format!("{ENDPOINT_VAR}_{}", kind.as_str().to_uppercase());
        let endpoint = std::env::var(&specific)
            .or_else(|_| std::env::var(ENDPOINT_VAR))
            .map_err(|_| {
                Error::validation(format!(
                    "http backend for {kind} needs {specific} or {ENDPOINT_VAR}"
                ))
            })?;
        log::info!(
            "{kind}: http backend at {endpoint}, decoding parameters left at provider defaults"
        );
        Self::new(endpoint, std::env::var(API_KEY_VAR).ok(), timeout)
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

fn classify(kind: Kind, status: StatusCode, body: &str) -> BackendError {
    let message = format!(
        "HTTP {status}: {}",
        body.chars().take(200).collect::<String>()
    );
    if status == StatusCode::TOO_MANY_REQUESTS
        || status == StatusCode::REQUEST_TIMEOUT
        || status.is_server_error()
    {
        BackendError::retryable(kind, message)
    } else {
        BackendError::hard(kind, message)
    }
}

impl Backend for HttpBackend {
    fn call(&self, request: &BackendRequest) -> BackendResult<BackendResponse> {
        let kind = request.kind;
        let mut builder = self.client.post(&self.endpoint).json(request);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| {
            if e.is_timeout() || e.is_connect() || e.is_request() {
                BackendError::retryable(kind, e.to_string())
            } else {
                BackendError::hard(kind, e.to_string())
            }
        })?;
        let status = response.status();
        let body = response
            .text()
            .map_err(|e| BackendError::retryable(kind, e.to_string()))?;
        if !status.is_success() {
            return Err(classify(kind, status, &body));
        }
        serde_json::from_str(&body)
            .map_err(|e| BackendError::hard(kind, format!("malformed response body: {e}")))
    }
}
