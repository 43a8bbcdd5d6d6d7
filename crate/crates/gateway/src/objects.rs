//! Collection server: streams stored objects straight from disk.
//!
//! This runs on its own listener so object bytes never travel through the API.

use std::io::SeekFrom;
use std::sync::Arc;

use aero_core::ids::{CollectionId, StorageKey};
use aero_core::{Aero, AeroError};
use axum::body::Body;
use axum::extract::{Path, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use tokio::io::{AsyncReadExt, AsyncSeekExt};
use tokio_util::io::ReaderStream;

use crate::api::authenticate;
use crate::error::{ApiError, ApiResult};

pub const CHECKSUM_HEADER: &str = "x-object-sha256";

pub fn router(aero: Arc<Aero>) -> Router {
    Router::new()
        .route("/collections/{cid}/objects/{key}", get(object).head(object))
        .with_state(aero)
}

/// Parses a single `bytes=` range against an object of `len` bytes.
/// `None` means unsatisfiable; multi-range requests are served whole.
pub fn parse_range(value: &str, len: u64) -> Option<Option<(u64, u64)>> {
    let Some(spec) = value.trim().strip_prefix("bytes=") else {
        return Some(None);
    };
    if spec.contains(',') {
        return Some(None);
    }
    let (a, b) = spec.split_once('-')?;
    let (start, end) = match (a.trim(), b.trim()) {
        ("", n) => {
            let n: u64 = n.parse().ok()?;
            if n == 0 {
                return None;
            }
            (len.saturating_sub(n), len.checked_sub(1)?)
        }
        (s, "") => (s.parse().ok()?, len.checked_sub(1)?),
        (s, e) => {
            let (s, e): (u64, u64) = (s.parse().ok()?, e.parse().ok()?);
            if e < s {
                return None;
            }
            (s, e.min(len.checked_sub(1)?))
        }
    };
    (start < len).then_some(Some((start, end)))
}

async fn object(
    State(aero): State<Arc<Aero>>,
    Path((cid, key)): Path<(String, String)>,
    req: Request,
) -> ApiResult<Response> {
    let (parts, _) = req.into_parts();
    let me = authenticate(&aero, &parts)?.ok_or(AeroError::Unauthenticated)?;
    let not_found = |code| ApiError { status: StatusCode::NOT_FOUND, code, message: "no such object".into() };
    let cid: CollectionId = cid.parse().map_err(|_| not_found("unknown_collection"))?;
    let key: StorageKey = key.parse().map_err(|_| not_found("unknown_key"))?;
    let (file, meta) = aero.open_object(me, cid, key)?;
    let len = meta.size_bytes;

    let mut headers = HeaderMap::new();
    headers.insert(header::ACCEPT_RANGES, HeaderValue::from_static("bytes"));
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("application/octet-stream"));
    let digest = HeaderValue::from_str(&meta.checksum.to_string()).expect("hex digest");
    headers.insert(header::ETAG, HeaderValue::from_str(&format!("\"{}\"", meta.checksum)).expect("hex digest"));
    headers.insert(CHECKSUM_HEADER, digest);

    let range = match parts.headers.get(header::RANGE).and_then(|v| v.to_str().ok()) {
        None => None,
        Some(v) => match parse_range(v, len) {
            Some(r) => r,
            None => {
                headers.insert(header::CONTENT_RANGE, HeaderValue::from_str(&format!("bytes */{len}")).unwrap());
                return Ok((StatusCode::RANGE_NOT_SATISFIABLE, headers).into_response());
            }
        },
    };
    let (status, start, count) = match range {
        Some((s, e)) => {
            let v = format!("bytes {s}-{e}/{len}");
            headers.insert(header::CONTENT_RANGE, HeaderValue::from_str(&v).unwrap());
            (StatusCode::PARTIAL_CONTENT, s, e - s + 1)
        }
        None => (StatusCode::OK, 0, len),
    };
    headers.insert(header::CONTENT_LENGTH, HeaderValue::from(count));
    if parts.method == Method::HEAD {
        return Ok((status, headers).into_response());
    }
    let mut file = tokio::fs::File::from_std(file);
    if start > 0 {
        file.seek(SeekFrom::Start(start)).await.map_err(AeroError::from)?;
    }
    let stream = ReaderStream::with_capacity(file.take(count), 256 * 1024);
    Ok((status, headers, Body::from_stream(stream)).into_response())
}
