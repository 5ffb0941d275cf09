//! Blocking HTTP transport.

use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::header::{AUTHORIZATION, CONTENT_TYPE};

use super::{ServiceEndpoint, ServiceError, Transport, TransportFailure};

pub struct HttpTransport {
    base_url: String,
    bearer_token: Option<String>,
    client: Client,
}

impl HttpTransport {
    pub fn new(endpoint: &ServiceEndpoint) -> Result<Self, ServiceError> {
        let client = Client::builder()
            .timeout(Duration::from_millis(endpoint.timeout_ms))
            .build()
            .map_err(|e| ServiceError::Endpoint(format!("{}: {e}", endpoint.base_url)))?;
        Ok(Self {
            base_url: endpoint.base_url.trim_end_matches('/').to_owned(),
            bearer_token: endpoint.bearer_token.clone(),
            client,
        })
    }
}

impl Transport for HttpTransport {
    fn post(&self, path: &str, body: &[u8]) -> Result<Vec<u8>, TransportFailure> {
        let mut req = self
            .client
            .post(format!("{}{}", self.base_url, path))
            .header(CONTENT_TYPE, "application/json")
            .body(body.to_vec());
        if let Some(token) = &self.bearer_token {
            req = req.header(AUTHORIZATION, format!("Bearer {token}"));
        }
        let resp = req.send().map_err(classify)?;
        let status = resp.status();
        let bytes = resp.bytes().map_err(classify)?;
        if !status.is_success() {
            return Err(TransportFailure::Status {
                code: status.as_u16(),
                body: String::from_utf8_lossy(&bytes).chars().take(512).collect(),
            });
        }
        Ok(bytes.to_vec())
    }
}

fn classify(e: reqwest::Error) -> TransportFailure {
    if e.is_timeout() {
        TransportFailure::Timeout
    } else if e.is_connect() {
        TransportFailure::Connect(e.to_string())
    } else {
        TransportFailure::Io(e.to_string())
    }
}
