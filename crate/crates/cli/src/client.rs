//! Thin async client for the `/v1` API and the collection server.

use std::io::{BufWriter, Write};
use std::path::Path;

use aero_core::checksum::HashingWriter;
use aero_core::model::VersionMetadata;
use futures::StreamExt;
use reqwest::{Method, StatusCode};
use serde::de::DeserializeOwned;
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("{message} (HTTP {status}, {code})")]
    Api { status: u16, code: String, message: String },
    #[error("server unreachable at {url}: {message}")]
    Unreachable { url: String, message: String },
    #[error("downloaded bytes hash to {actual}, metadata says {expected}")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("unexpected response: {0}")]
    Decode(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type ClientResult<T> = Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct ApiClient {
    base: String,
    token: Option<String>,
    http: reqwest::Client,
}

impl ApiClient {
    pub fn new(base: &str, token: Option<String>) -> Self {
        Self {
            base: base.trim_end_matches('/').to_owned(),
            token,
            http: reqwest::Client::new(),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn request(&self, method: Method, url: &str) -> reqwest::RequestBuilder {
        let req = self.http.request(method, url);
        match &self.token {
            Some(t) => req.bearer_auth(t),
            None => req,
        }
    }

    async fn send(&self, req: reqwest::RequestBuilder, url: &str) -> ClientResult<reqwest::Response> {
        let resp = req.send().await.map_err(|e| ClientError::Unreachable {
            url: url.to_owned(),
            message: e.to_string(),
        })?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status().as_u16();
        let text = resp.text().await.unwrap_or_default();
        let body: Value = serde_json::from_str(&text).unwrap_or(Value::Null);
        Err(ClientError::Api {
            status,
            code: body["code"].as_str().unwrap_or("http_error").to_owned(),
            message: body["message"].as_str().map(str::to_owned).unwrap_or(text),
        })
    }

    /// Calls `/v1{path}` and decodes the JSON answer. Empty answers decode as `null`.
    pub async fn call<T: DeserializeOwned>(&self, method: Method, path: &str, body: Option<&Value>) -> ClientResult<T> {
        let url = format!("{}/v1{path}", self.base);
        let mut req = self.request(method, &url);
        if let Some(b) = body {
            req = req.json(b);
        }
        let resp = self.send(req, &url).await?;
        let bytes = resp.bytes().await.map_err(|e| ClientError::Decode(e.to_string()))?;
        let bytes = if bytes.is_empty() { &b"null"[..] } else { &bytes[..] };
        serde_json::from_slice(bytes).map_err(|e| ClientError::Decode(e.to_string()))
    }

    pub async fn get<T: DeserializeOwned>(&self, path: &str) -> ClientResult<T> {
        self.call(Method::GET, path, None).await
    }

    pub async fn post<T: DeserializeOwned>(&self, path: &str, body: &Value) -> ClientResult<T> {
        self.call(Method::POST, path, Some(body)).await
    }

    /// `GET /v1/search` with the given query pairs.
    pub async fn search(&self, query: &[(&str, String)]) -> ClientResult<Value> {
        let url = format!("{}/v1/search", self.base);
        let resp = self.send(self.request(Method::GET, &url).query(query), &url).await?;
        resp.json().await.map_err(|e| ClientError::Decode(e.to_string()))
    }

    pub async fn health(&self) -> ClientResult<()> {
        self.get::<Value>("/health").await.map(|_| ())
    }

    pub async fn upload(&self, asset: &str, media_type: &str, bytes: Vec<u8>) -> ClientResult<Value> {
        let url = format!("{}/v1/assets/{asset}/versions", self.base);
        let req = self.request(Method::POST, &url).header("content-type", media_type).body(bytes);
        let resp = self.send(req, &url).await?;
        resp.json().await.map_err(|e| ClientError::Decode(e.to_string()))
    }

    /// Looks up version metadata, then streams the bytes from the collection server into `dest`
    /// and checks them against the recorded checksum.
    pub async fn fetch(&self, asset: &str, version: &str, dest: &Path) -> ClientResult<VersionMetadata> {
        if version != "latest" && version.parse::<u64>().is_err() {
            return Err(ClientError::Api {
                status: 400,
                code: "invalid_request".into(),
                message: format!("expected `latest` or a version number, got {version:?}"),
            });
        }
        let meta: VersionMetadata = self.get(&format!("/assets/{asset}/versions/{version}")).await?;
        let url = meta.download_url.clone();
        let resp = self.send(self.request(Method::GET, &url), &url).await?;
        if resp.status() != StatusCode::OK {
            return Err(ClientError::Decode(format!("collection server answered {}", resp.status())));
        }
        let tmp = dest.with_extension("part");
        let mut out = HashingWriter::new(BufWriter::new(std::fs::File::create(&tmp)?));
        let mut body = resp.bytes_stream();
        while let Some(chunk) = body.next().await {
            let chunk = chunk.map_err(|e| ClientError::Unreachable { url: url.clone(), message: e.to_string() })?;
            out.write_all(&chunk)?;
        }
        let (w, actual, _) = out.finish();
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        if actual != meta.version.checksum {
            let _ = std::fs::remove_file(&tmp);
            return Err(ClientError::ChecksumMismatch {
                expected: meta.version.checksum.to_string(),
                actual: actual.to_string(),
            });
        }
        std::fs::rename(&tmp, dest)?;
        Ok(meta)
    }
}
