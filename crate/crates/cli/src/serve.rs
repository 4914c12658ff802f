//! JSON-over-HTTP access to a project. Mutations run one at a time behind a
//! lock; reads load the last saved `project.json`, which is replaced
//! atomically, so they always see a committed state.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};

use spheresfm_core::PixelCoord;

use crate::config::Config;
use crate::error::{CliError, ErrorKind};
use crate::ops::{self, EstimateMode};
use crate::project::Project;

struct AppState {
    dir: PathBuf,
    config: Config,
    writer: tokio::sync::Mutex<()>,
}

type Shared = Arc<AppState>;

pub struct ApiError(CliError);

impl From<CliError> for ApiError {
    fn from(e: CliError) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.kind.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.0.to_json())).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, CliError> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| CliError::new(ErrorKind::Io, "Internal", e.to_string()))?
        .map_err(ApiError)
}

async fn read<T: Send + 'static>(
    st: &Shared,
    f: impl FnOnce(&Project, &Config) -> Result<T, CliError> + Send + 'static,
) -> ApiResult<T> {
    let (dir, config) = (st.dir.clone(), st.config.clone());
    blocking(move || f(&Project::load(&dir)?, &config)).await
}

async fn write<T: Send + 'static>(
    st: &Shared,
    f: impl FnOnce(&mut Project, &Config) -> Result<T, CliError> + Send + 'static,
) -> ApiResult<T> {
    let _guard = st.writer.lock().await;
    let (dir, config) = (st.dir.clone(), st.config.clone());
    blocking(move || f(&mut Project::load(&dir)?, &config)).await
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, CliError> {
    serde_json::from_slice(body).map_err(|e| CliError::new(ErrorKind::Malformed, "MalformedRequest", e.to_string()))
}

async fn get_project(State(st): State<Shared>) -> ApiResult<Json<Value>> {
    Ok(Json(read(&st, |p, _| Ok(ops::summary(&p.state))).await?))
}

async fn get_image(State(st): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    let (bytes, path) = read(&st, move |p, _| {
        let entry = p.state.image(&id)?;
        let bytes = std::fs::read(p.path(&entry.path)).map_err(|e| CliError::io(&entry.path, e))?;
        Ok((bytes, entry.path.clone()))
    })
    .await?;
    let mime = if path.ends_with(".jpg") || path.ends_with(".jpeg") {
        "image/jpeg"
    } else {
        "image/png"
    };
    Ok(([(header::CONTENT_TYPE, mime)], Body::from(bytes)).into_response())
}

async fn list_corrs(State(st): State<Shared>, Path((a, b)): Path<(String, String)>) -> ApiResult<Json<Value>> {
    Ok(Json(read(&st, move |p, _| ops::list_correspondences(&p.state, &a, &b)).await?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NewCorrespondence {
    pa: PixelCoord,
    pb: PixelCoord,
}

async fn add_corr(
    State(st): State<Shared>,
    Path((a, b)): Path<(String, String)>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let req: NewCorrespondence = parse_body(&body)?;
    let id = write(&st, move |p, _| ops::add_correspondence(p, &a, &b, req.pa, req.pb)).await?;
    Ok((StatusCode::CREATED, Json(json!({ "id": id }))))
}

async fn delete_corr(
    State(st): State<Shared>,
    Path((a, b, id)): Path<(String, String, String)>,
) -> ApiResult<Json<Value>> {
    let id: u64 = id
        .parse()
        .map_err(|_| CliError::malformed(format!("correspondence id {id:?} is not an integer")))?;
    write(&st, move |p, _| ops::delete_correspondence(p, &a, &b, id)).await?;
    Ok(Json(json!({ "deleted": id })))
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SolveRequest {
    method: Option<String>,
}

async fn solve(State(st): State<Shared>, Path((a, b)): Path<(String, String)>, body: Bytes) -> ApiResult<Json<Value>> {
    let req: SolveRequest = if body.iter().all(u8::is_ascii_whitespace) {
        SolveRequest::default()
    } else {
        parse_body(&body)?
    };
    let mode = match req.method.as_deref() {
        None => EstimateMode::from_config(&st.config),
        Some("linear") => EstimateMode::Linear,
        Some("manual_only") => EstimateMode::ManualOnly,
        Some("ransac") => EstimateMode::Ransac,
        Some(m) => return Err(CliError::malformed(format!("unknown method {m:?}")).into()),
    };
    Ok(Json(write(&st, move |p, c| ops::estimate_pair(p, c, &a, &b, mode)).await?))
}

async fn epipolar_curve(
    State(st): State<Shared>,
    Path((a, b)): Path<(String, String)>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<Value>> {
    let coord = |k: &str| -> Result<f64, CliError> {
        q.get(k)
            .ok_or_else(|| CliError::malformed(format!("missing query parameter {k}")))?
            .parse()
            .map_err(|_| CliError::malformed(format!("query parameter {k} is not a number")))
    };
    let click = PixelCoord::new(coord("x")?, coord("y")?);
    Ok(Json(read(&st, move |p, c| ops::curve(&p.state, c, &a, &b, click)).await?))
}

async fn register(State(st): State<Shared>) -> ApiResult<Json<Value>> {
    Ok(Json(write(&st, |p, _| ops::register(p)).await?))
}

async fn triangulate(State(st): State<Shared>) -> ApiResult<Json<Value>> {
    Ok(Json(write(&st, |p, _| ops::triangulate(p)).await?))
}

async fn pointcloud(State(st): State<Shared>) -> ApiResult<Json<Value>> {
    Ok(Json(read(&st, |p, _| ops::pointcloud(&p.state)).await?))
}

async fn dense(State(st): State<Shared>, Path((a, b)): Path<(String, String)>) -> ApiResult<Response> {
    let bytes = read(&st, move |p, _| ops::dense_ply(p, &a, &b)).await?;
    Ok(([(header::CONTENT_TYPE, "application/x-ply")], Body::from(bytes)).into_response())
}

pub fn router(dir: PathBuf, config: Config) -> Router {
    let state = Arc::new(AppState {
        dir,
        config,
        writer: tokio::sync::Mutex::new(()),
    });
    Router::new()
        .route("/api/project", get(get_project))
        .route("/api/images/{id}", get(get_image))
        .route("/api/pairs/{a}/{b}/correspondences", get(list_corrs).post(add_corr))
        .route("/api/pairs/{a}/{b}/correspondences/{id}", delete(delete_corr))
        .route("/api/pairs/{a}/{b}/solve", post(solve))
        .route("/api/pairs/{a}/{b}/epipolar-curve", get(epipolar_curve))
        .route("/api/register", post(register))
        .route("/api/triangulate", post(triangulate))
        .route("/api/pointcloud", get(pointcloud))
        .route("/api/dense/{a}/{b}", get(dense))
        .with_state(state)
}

/// Serves the project on `127.0.0.1:port` until the process is stopped.
pub fn serve(dir: PathBuf, config: Config, port: u16) -> Result<(), CliError> {
    Project::load(&dir)?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::io("runtime", e))?;
    runtime.block_on(async move {
        let addr = std::net::SocketAddr::from(([127, 0, 0, 1], port));
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::io(addr, e))?;
        let local = listener.local_addr().map_err(|e| CliError::io(addr, e))?;
        println!("serving {} on http://{local}/", dir.display());
        axum::serve(listener, router(dir, config))
            .await
            .map_err(|e| CliError::io("server", e))
    })
}
