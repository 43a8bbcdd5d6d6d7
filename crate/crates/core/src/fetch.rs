//! HTTP(S) source retrieval for ingestion flows.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Duration;

use futures::StreamExt;
use reqwest::{header, redirect, Client};

use crate::checksum::{Checksum, HashingWriter};
use crate::error::{AeroError, ErrorClass, Result};

pub const DEFAULT_MAX_BYTES: u64 = 2 << 30;
pub const MAX_REDIRECTS: usize = 5;

#[derive(Debug, Clone)]
pub struct FetchConfig {
    pub max_bytes: u64,
    pub connect_timeout: Duration,
    /// Whole-request limit, body included.
    pub timeout: Duration,
}

impl Default for FetchConfig {
    fn default() -> Self {
        Self {
            max_bytes: DEFAULT_MAX_BYTES,
            connect_timeout: Duration::from_secs(10),
            timeout: Duration::from_secs(600),
        }
    }
}

/// What was retrieved: digest, length and the server's declared media type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fetched {
    pub checksum: Checksum,
    pub size_bytes: u64,
    pub media_type: String,
}

#[derive(Clone)]
pub struct Fetcher {
    client: Client,
    config: FetchConfig,
}

fn fetch_err(class: ErrorClass, message: impl Into<String>) -> AeroError {
    AeroError::Fetch {
        class,
        message: message.into(),
    }
}

/// 4xx means the request itself is wrong; retrying will not help. Everything else may pass.
pub fn status_class(status: u16) -> ErrorClass {
    if (400..500).contains(&status) && status != 408 && status != 429 {
        ErrorClass::Terminal
    } else {
        ErrorClass::Transient
    }
}

impl Fetcher {
    pub fn new(config: FetchConfig) -> Result<Self> {
        let client = Client::builder()
            .redirect(redirect::Policy::limited(MAX_REDIRECTS))
            .connect_timeout(config.connect_timeout)
            .timeout(config.timeout)
            .build()
            .map_err(|e| AeroError::InvalidRequest(format!("http client: {e}")))?;
        Ok(Self { client, config })
    }

    /// Streams `url` into `dest`, hashing on the way.
    pub async fn fetch_to(&self, url: &str, dest: &Path) -> Result<Fetched> {
        let resp = self.client.get(url).send().await.map_err(|e| {
            if e.is_redirect() {
                fetch_err(ErrorClass::Terminal, format!("too many redirects: {e}"))
            } else if e.is_builder() {
                fetch_err(ErrorClass::Terminal, format!("bad source url: {e}"))
            } else {
                fetch_err(ErrorClass::Transient, format!("GET {url}: {e}"))
            }
        })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(fetch_err(
                status_class(status.as_u16()),
                format!("GET {url}: HTTP {}", status.as_u16()),
            ));
        }
        if let Some(len) = resp.content_length() {
            if len > self.config.max_bytes {
                return Err(fetch_err(
                    ErrorClass::Terminal,
                    format!("source is {len} bytes, over the {} byte cap", self.config.max_bytes),
                ));
            }
        }
        let media_type = resp
            .headers()
            .get(header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .map(|v| v.split(';').next().unwrap_or(v).trim().to_owned())
            .filter(|v| !v.is_empty())
            .unwrap_or_else(|| "application/octet-stream".into());

        let file = File::create(dest).map_err(AeroError::io_transient)?;
        let mut out = HashingWriter::new(BufWriter::with_capacity(1 << 20, file));
        let mut body = resp.bytes_stream();
        while let Some(chunk) = body.next().await {
            let chunk = chunk.map_err(|e| fetch_err(ErrorClass::Transient, format!("GET {url}: {e}")))?;
            if out.written() + chunk.len() as u64 > self.config.max_bytes {
                return Err(fetch_err(
                    ErrorClass::Terminal,
                    format!("source exceeds the {} byte cap", self.config.max_bytes),
                ));
            }
            out.write_all(&chunk).map_err(AeroError::io_transient)?;
        }
        let (mut buf, checksum, size_bytes) = out.finish();
        buf.flush().map_err(AeroError::io_transient)?;
        Ok(Fetched {
            checksum,
            size_bytes,
            media_type,
        })
    }
}
