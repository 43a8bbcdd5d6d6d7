//! The `/v1` JSON API. Handlers authenticate, then delegate to [`Aero`].

use std::collections::BTreeSet;
use std::sync::Arc;

use aero_core::auth::{Permission, ResourceRef};
use aero_core::executor::EndpointKind;
use aero_core::ids::{AssetId, FlowId, FunctionId, PrincipalId, TokenId};
use aero_core::model::{FlowRequest, NewAsset, VersionSelector};
use aero_core::search::SearchQuery;
use aero_core::{Aero, AeroError};
use axum::extract::{DefaultBodyLimit, FromRequest, FromRequestParts, Path, Query, Request, State};
use axum::http::request::Parts;
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{ApiError, ApiResult};

/// The authenticated principal behind a request.
pub struct Caller(pub PrincipalId);

/// Like [`Caller`], but requests without a token are let through as anonymous.
pub struct MaybeCaller(pub Option<PrincipalId>);

fn bearer(parts: &Parts) -> Result<Option<&str>, ApiError> {
    let Some(value) = parts.headers.get(header::AUTHORIZATION) else {
        return Ok(None);
    };
    let value = value.to_str().map_err(|_| ApiError::from(AeroError::Unauthenticated))?;
    match value.split_once(' ') {
        Some((scheme, token)) if scheme.eq_ignore_ascii_case("bearer") => Ok(Some(token.trim())),
        _ => Err(AeroError::Unauthenticated.into()),
    }
}

pub(crate) fn authenticate(aero: &Aero, parts: &Parts) -> Result<Option<PrincipalId>, ApiError> {
    match bearer(parts)? {
        None => Ok(None),
        Some(token) => Ok(Some(aero.authenticate(token)?.principal_id)),
    }
}

impl FromRequestParts<Arc<Aero>> for Caller {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, aero: &Arc<Aero>) -> Result<Self, ApiError> {
        authenticate(aero, parts)?
            .map(Caller)
            .ok_or_else(|| AeroError::Unauthenticated.into())
    }
}

impl FromRequestParts<Arc<Aero>> for MaybeCaller {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, aero: &Arc<Aero>) -> Result<Self, ApiError> {
        authenticate(aero, parts).map(MaybeCaller)
    }
}

/// JSON body whose rejections use the uniform error shape.
pub struct Body<T>(pub T);

impl<T: DeserializeOwned, S: Send + Sync> FromRequest<S> for Body<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, ApiError> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(Body(v)),
            Err(e) => Err(ApiError { status: e.status(), code: "invalid_request", message: e.body_text() }),
        }
    }
}

/// Query string, with the same error shape.
pub struct Params<T>(pub T);

impl<T: DeserializeOwned, S: Send + Sync> FromRequestParts<S> for Params<T> {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &S) -> Result<Self, ApiError> {
        match Query::<T>::from_request_parts(parts, state).await {
            Ok(Query(v)) => Ok(Params(v)),
            Err(e) => Err(ApiError::bad_request(e.body_text())),
        }
    }
}

fn parse<T: std::str::FromStr>(what: &str, s: &str) -> ApiResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e| ApiError::bad_request(format!("bad {what} {s:?}: {e}")))
}

pub fn router(aero: Arc<Aero>, max_upload_bytes: usize) -> Router {
    let v1 = Router::new()
        .route("/health", get(health))
        .route("/collections", post(create_collection))
        .route("/assets", post(create_asset))
        .route("/assets/{id}", get(get_asset).delete(delete_asset))
        .route(
            "/assets/{id}/versions",
            get(list_versions).post(upload).layer(DefaultBodyLimit::max(max_upload_bytes)),
        )
        .route("/assets/{id}/versions/{selector}", get(get_version))
        .route("/flows", post(register_flow))
        .route("/flows/{id}", get(get_flow).delete(delete_flow))
        .route("/flows/{id}/runs", get(list_runs))
        .route("/flows/{id}/dispatch", post(dispatch))
        .route("/functions", post(register_function))
        .route("/endpoints", post(register_endpoint))
        .route("/search", get(search))
        .route("/provenance/{asset}/{version}", get(provenance))
        .route("/tokens", post(issue_token))
        .route("/tokens/{id}", delete(revoke_token))
        .route("/acl", post(change_acl));
    Router::new().nest("/v1", v1).with_state(aero)
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn create_collection(State(aero): State<Arc<Aero>>, Caller(me): Caller) -> ApiResult<impl IntoResponse> {
    Ok((StatusCode::CREATED, Json(aero.create_collection(me)?)))
}

async fn create_asset(
    State(aero): State<Arc<Aero>>,
    Caller(me): Caller,
    Body(spec): Body<NewAsset>,
) -> ApiResult<impl IntoResponse> {
    Ok((StatusCode::CREATED, Json(aero.create_asset(me, &spec)?)))
}

async fn get_asset(State(aero): State<Arc<Aero>>, Caller(me): Caller, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(aero.asset(me, parse::<AssetId>("asset id", &id)?)?))
}

async fn delete_asset(State(aero): State<Arc<Aero>>, Caller(me): Caller, Path(id): Path<String>) -> ApiResult<StatusCode> {
    aero.delete_asset(me, parse("asset id", &id)?)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn list_versions(State(aero): State<Arc<Aero>>, Caller(me): Caller, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(aero.versions(me, parse("asset id", &id)?)?))
}

#[derive(Serialize)]
struct UploadResult {
    /// `new_version` or `unchanged`.
    result: &'static str,
    version: Option<u64>,
}

/// Commits the request body as the asset's next version.
async fn upload(
    State(aero): State<Arc<Aero>>,
    Caller(me): Caller,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: axum::body::Bytes,
) -> ApiResult<impl IntoResponse> {
    let id: AssetId = parse("asset id", &id)?;
    let media_type = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("application/octet-stream")
        .to_owned();
    let result = tokio::task::spawn_blocking(move || aero.upload(me, id, &media_type, &body[..]))
        .await
        .map_err(|e| ApiError::from(AeroError::StorageUnavailable(e.to_string())))??;
    Ok(match result {
        aero_core::model::CommitResult::NewVersion(n) => (
            StatusCode::CREATED,
            Json(UploadResult { result: "new_version", version: Some(n) }),
        ),
        aero_core::model::CommitResult::Unchanged => {
            (StatusCode::OK, Json(UploadResult { result: "unchanged", version: None }))
        }
    })
}

async fn get_version(
    State(aero): State<Arc<Aero>>,
    Caller(me): Caller,
    Path((id, selector)): Path<(String, String)>,
) -> ApiResult<impl IntoResponse> {
    let selector: VersionSelector = parse("version", &selector)?;
    Ok(Json(aero.metadata(me, parse("asset id", &id)?, selector)?))
}

async fn register_flow(
    State(aero): State<Arc<Aero>>,
    Caller(me): Caller,
    Body(req): Body<FlowRequest>,
) -> ApiResult<impl IntoResponse> {
    Ok((StatusCode::CREATED, Json(aero.register_flow(me, &req)?)))
}

async fn get_flow(State(aero): State<Arc<Aero>>, Caller(me): Caller, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(aero.flow(me, parse::<FlowId>("flow id", &id)?)?))
}

async fn delete_flow(State(aero): State<Arc<Aero>>, Caller(me): Caller, Path(id): Path<String>) -> ApiResult<StatusCode> {
    aero.delete_flow(me, parse("flow id", &id)?)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn list_runs(State(aero): State<Arc<Aero>>, Caller(me): Caller, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(aero.runs(me, parse("flow id", &id)?)?))
}

async fn dispatch(State(aero): State<Arc<Aero>>, Caller(me): Caller, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let accepted = aero.dispatch(me, parse("flow id", &id)?)?;
    Ok((StatusCode::ACCEPTED, Json(serde_json::json!({ "accepted": accepted }))))
}

#[derive(Deserialize)]
struct FunctionBody {
    entry: Vec<String>,
    #[serde(default)]
    description: String,
}

async fn register_function(
    State(aero): State<Arc<Aero>>,
    Caller(me): Caller,
    Body(body): Body<FunctionBody>,
) -> ApiResult<impl IntoResponse> {
    Ok((StatusCode::CREATED, Json(aero.register_function(me, body.entry, &body.description)?)))
}

#[derive(Deserialize)]
struct EndpointBody {
    #[serde(default = "local")]
    kind: EndpointKind,
    slots: Option<u32>,
    base_url: Option<String>,
    allowed_functions: Option<BTreeSet<FunctionId>>,
}

fn local() -> EndpointKind {
    EndpointKind::LocalSubprocess
}

async fn register_endpoint(
    State(aero): State<Arc<Aero>>,
    Caller(me): Caller,
    Body(body): Body<EndpointBody>,
) -> ApiResult<impl IntoResponse> {
    let ep = aero.register_endpoint(me, body.kind, body.slots, body.base_url, body.allowed_functions)?;
    Ok((StatusCode::CREATED, Json(ep)))
}

/// `q`, repeated `tag`, `asset`, `after`, `before`, `limit`, `offset`.
async fn search(
    State(aero): State<Arc<Aero>>,
    MaybeCaller(me): MaybeCaller,
    Params(pairs): Params<Vec<(String, String)>>,
) -> ApiResult<impl IntoResponse> {
    let mut q = SearchQuery::default();
    for (k, v) in pairs {
        match k.as_str() {
            "q" => q.text = v,
            "tag" => {
                q.tags.insert(v);
            }
            "asset" => q.asset_id = Some(parse("asset id", &v)?),
            "after" => q.created_after = Some(parse::<DateTime<Utc>>("timestamp", &v)?),
            "before" => q.created_before = Some(parse::<DateTime<Utc>>("timestamp", &v)?),
            "limit" => q.limit = Some(parse("limit", &v)?),
            "offset" => q.offset = parse("offset", &v)?,
            other => return Err(ApiError::bad_request(format!("unknown search parameter {other:?}"))),
        }
    }
    Ok(Json(aero.search(me, &q)?))
}

#[derive(Deserialize)]
struct DepthQuery {
    depth: Option<usize>,
}

async fn provenance(
    State(aero): State<Arc<Aero>>,
    Caller(me): Caller,
    Path((asset, version)): Path<(String, String)>,
    Params(q): Params<DepthQuery>,
) -> ApiResult<impl IntoResponse> {
    let asset: AssetId = parse("asset id", &asset)?;
    let version = match parse::<VersionSelector>("version", &version)? {
        VersionSelector::Pinned(n) => n,
        VersionSelector::Latest => aero.metadata(me, asset, VersionSelector::Latest)?.version.version,
    };
    Ok(Json(aero.provenance(me, asset, version, q.depth)?))
}

#[derive(Deserialize)]
struct TokenBody {
    /// Issue for an existing principal; otherwise a new one is created.
    principal_id: Option<PrincipalId>,
    #[serde(default)]
    display_name: String,
    expires_at: Option<DateTime<Utc>>,
}

async fn issue_token(
    State(aero): State<Arc<Aero>>,
    Caller(me): Caller,
    Body(body): Body<TokenBody>,
) -> ApiResult<impl IntoResponse> {
    let (_, token) = aero.issue_token(me, body.principal_id, &body.display_name, body.expires_at)?;
    Ok((StatusCode::CREATED, Json(token)))
}

async fn revoke_token(State(aero): State<Arc<Aero>>, Caller(me): Caller, Path(id): Path<String>) -> ApiResult<StatusCode> {
    aero.revoke_token(me, parse::<TokenId>("token id", &id)?)?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Deserialize)]
struct AclBody {
    resource: ResourceRef,
    principal_id: PrincipalId,
    perms: BTreeSet<Permission>,
    #[serde(default)]
    revoke: bool,
}

async fn change_acl(State(aero): State<Arc<Aero>>, Caller(me): Caller, Body(body): Body<AclBody>) -> ApiResult<StatusCode> {
    if body.revoke {
        aero.revoke(me, body.resource, body.principal_id, &body.perms)?;
    } else {
        aero.grant(me, body.resource, body.principal_id, &body.perms)?;
    }
    Ok(StatusCode::NO_CONTENT)
}
