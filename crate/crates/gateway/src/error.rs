use aero_core::AeroError;
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

/// Uniform error body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            code: "invalid_request",
            message: message.into(),
        }
    }
}

impl From<AeroError> for ApiError {
    fn from(err: AeroError) -> Self {
        use AeroError::*;
        let (status, code) = match &err {
            Unauthenticated => (StatusCode::UNAUTHORIZED, "unauthenticated"),
            Forbidden(_) => (StatusCode::FORBIDDEN, "forbidden"),
            UnknownAsset(_) => (StatusCode::NOT_FOUND, "unknown_asset"),
            UnknownVersion { .. } => (StatusCode::NOT_FOUND, "unknown_version"),
            UnknownFlow(_) => (StatusCode::NOT_FOUND, "unknown_flow"),
            UnknownRun(_) => (StatusCode::NOT_FOUND, "unknown_run"),
            UnknownFunction(_) => (StatusCode::NOT_FOUND, "unknown_function"),
            UnknownEndpoint(_) => (StatusCode::NOT_FOUND, "unknown_endpoint"),
            UnknownCollection(_) => (StatusCode::NOT_FOUND, "unknown_collection"),
            UnknownKey(_) => (StatusCode::NOT_FOUND, "unknown_key"),
            UnknownTask(_) => (StatusCode::NOT_FOUND, "unknown_task"),
            DuplicateFlow(_) => (StatusCode::CONFLICT, "duplicate_flow"),
            DuplicateName { .. } => (StatusCode::CONFLICT, "duplicate_name"),
            InvalidUrl(_) => (StatusCode::BAD_REQUEST, "invalid_url"),
            MalformedChecksum(_) => (StatusCode::BAD_REQUEST, "malformed_checksum"),
            InvalidFlow(_) => (StatusCode::BAD_REQUEST, "invalid_flow"),
            InvalidEntry(_) => (StatusCode::BAD_REQUEST, "invalid_entry"),
            FunctionNotAllowed { .. } => (StatusCode::BAD_REQUEST, "function_not_allowed"),
            MalformedFilter(_) => (StatusCode::BAD_REQUEST, "malformed_filter"),
            InvalidRequest(_) => (StatusCode::BAD_REQUEST, "invalid_request"),
            EndpointUnavailable(_) | StorageUnavailable(_) | DiskFull(_) => {
                (StatusCode::SERVICE_UNAVAILABLE, "unavailable")
            }
            Timeout(_) => (StatusCode::GATEWAY_TIMEOUT, "timeout"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            tracing::error!("request failed: {err}");
        }
        Self {
            status,
            code,
            message: err.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code.to_owned(),
            message: self.message,
        };
        let mut resp = (self.status, Json(body)).into_response();
        if self.status == StatusCode::UNAUTHORIZED {
            resp.headers_mut()
                .insert(header::WWW_AUTHENTICATE, HeaderValue::from_static("Bearer realm=\"aero\""));
        }
        resp
    }
}

pub type ApiResult<T> = Result<T, ApiError>;
