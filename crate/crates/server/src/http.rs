//! HTTP routes over [`Service`].

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use farc_core::format::MAX_DOCUMENT_BYTES;
use farc_core::model::{parse_iso_date, ModelInfo};
use farc_core::store::{ScoreQuery, UserRecord};
use serde::Deserialize;
use serde_json::json;
use tokio::sync::oneshot;

use crate::jobs::{ExportFormat, JobFile};
use crate::service::{Page, Service, ServiceError};

type AppState = State<Arc<Service>>;

pub fn router(svc: Arc<Service>) -> Router {
    Router::new()
        .route("/api/token", post(token))
        .route("/api/projects", get(list_projects).post(create_project))
        .route("/api/projects/{id}", get(project).delete(delete_project))
        .route("/api/projects/{id}/models", get(list_models).post(add_model))
        .route("/api/models/{id}", get(model))
        .route("/api/models/{id}/forecasts", post(upload_forecast))
        .route("/api/forecasts/{id}/data", get(forecast_data))
        .route("/api/projects/{id}/truth", post(upload_truth))
        .route("/api/projects/{id}/forecast_queries", post(forecast_query))
        .route("/api/projects/{id}/scores", get(scores))
        .route("/api/jobs/{id}", get(job))
        .layer(DefaultBodyLimit::max(MAX_DOCUMENT_BYTES))
        .with_state(svc)
}

fn status_of(e: &ServiceError) -> StatusCode {
    match e {
        ServiceError::Unauthenticated | ServiceError::BadToken(_) => StatusCode::UNAUTHORIZED,
        ServiceError::Forbidden(_) => StatusCode::FORBIDDEN,
        ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
        ServiceError::BadRequest { .. } => StatusCode::BAD_REQUEST,
        ServiceError::Conflict(_) => StatusCode::CONFLICT,
        ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

/// Error envelope: `{"error": {"status", "message", "detail"?}}`.
fn error_response(e: ServiceError) -> Response {
    let status = status_of(&e);
    let mut body = json!({ "status": status.as_u16(), "message": e.to_string() });
    if let Some(detail) = e.detail() {
        body["detail"] = detail.clone();
    }
    let mut resp = (status, Json(json!({ "error": body }))).into_response();
    if status == StatusCode::UNAUTHORIZED {
        resp.headers_mut()
            .insert(header::WWW_AUTHENTICATE, header::HeaderValue::from_static("Bearer"));
    }
    resp
}

fn file_response(file: &JobFile) -> Response {
    ([(header::CONTENT_TYPE, file.content_type)], file.bytes.clone()).into_response()
}

fn bearer(headers: &HeaderMap) -> Result<Option<String>, ServiceError> {
    let Some(value) = headers.get(header::AUTHORIZATION) else {
        return Ok(None);
    };
    let text = value.to_str().map_err(|_| ServiceError::Unauthenticated)?;
    match text.strip_prefix("Bearer ") {
        Some(token) => Ok(Some(token.trim().to_string())),
        None => Err(ServiceError::Unauthenticated),
    }
}

/// Runs a blocking service call for the identified caller.
async fn call<F>(svc: Arc<Service>, headers: &HeaderMap, f: F) -> Response
where
    F: FnOnce(&Service, Option<&UserRecord>) -> Result<Response, ServiceError> + Send + 'static,
{
    let token = match bearer(headers) {
        Ok(t) => t,
        Err(e) => return error_response(e),
    };
    let outcome = tokio::task::spawn_blocking(move || {
        let caller = svc.identify(token.as_deref())?;
        f(&svc, caller.as_ref())
    })
    .await;
    match outcome {
        Ok(Ok(resp)) => resp,
        Ok(Err(e)) => error_response(e),
        Err(e) => error_response(ServiceError::Internal(e.to_string())),
    }
}

fn ok_json<T: serde::Serialize>(value: T) -> Result<Response, ServiceError> {
    Ok(Json(value).into_response())
}

fn accepted<T: serde::Serialize>(value: T) -> Result<Response, ServiceError> {
    Ok((StatusCode::ACCEPTED, Json(value)).into_response())
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ServiceError> {
    serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest {
        message: format!("invalid request body: {e}"),
        detail: None,
    })
}

#[derive(Deserialize)]
struct Credentials {
    username: String,
    password: String,
}

async fn token(State(svc): AppState, headers: HeaderMap, body: Bytes) -> Response {
    call(svc, &headers, move |svc, _| {
        let c: Credentials = parse_json(&body)?;
        ok_json(svc.login(&c.username, &c.password)?)
    })
    .await
}

async fn list_projects(State(svc): AppState, headers: HeaderMap, Query(page): Query<Page>) -> Response {
    call(svc, &headers, move |svc, caller| ok_json(svc.list_projects(caller, page)?)).await
}

async fn create_project(State(svc): AppState, headers: HeaderMap, body: Bytes) -> Response {
    call(svc, &headers, move |svc, caller| {
        let view = svc.create_project(caller, &body)?;
        Ok((StatusCode::CREATED, Json(view)).into_response())
    })
    .await
}

async fn project(State(svc): AppState, headers: HeaderMap, Path(id): Path<i64>) -> Response {
    call(svc, &headers, move |svc, caller| ok_json(svc.project(caller, id)?)).await
}

async fn delete_project(State(svc): AppState, headers: HeaderMap, Path(id): Path<i64>) -> Response {
    call(svc, &headers, move |svc, caller| {
        svc.delete_project(caller, id)?;
        Ok(StatusCode::NO_CONTENT.into_response())
    })
    .await
}

async fn list_models(
    State(svc): AppState,
    headers: HeaderMap,
    Path(id): Path<i64>,
    Query(page): Query<Page>,
) -> Response {
    call(svc, &headers, move |svc, caller| ok_json(svc.list_models(caller, id, page)?)).await
}

async fn add_model(State(svc): AppState, headers: HeaderMap, Path(id): Path<i64>, body: Bytes) -> Response {
    call(svc, &headers, move |svc, caller| {
        let info: ModelInfo = parse_json(&body)?;
        let record = svc.add_model(caller, id, &info)?;
        Ok((StatusCode::CREATED, Json(record)).into_response())
    })
    .await
}

async fn model(State(svc): AppState, headers: HeaderMap, Path(id): Path<i64>) -> Response {
    call(svc, &headers, move |svc, caller| ok_json(svc.model(caller, id)?)).await
}

async fn upload_forecast(State(svc): AppState, headers: HeaderMap, Path(id): Path<i64>, body: Bytes) -> Response {
    call(svc, &headers, move |svc, caller| accepted(svc.submit_forecast(caller, id, &body)?)).await
}

async fn forecast_data(State(svc): AppState, headers: HeaderMap, Path(id): Path<i64>) -> Response {
    call(svc, &headers, move |svc, caller| {
        let bytes = svc.forecast_data(caller, id)?;
        Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
    })
    .await
}

async fn upload_truth(State(svc): AppState, headers: HeaderMap, Path(id): Path<i64>, body: Bytes) -> Response {
    call(svc, &headers, move |svc, caller| accepted(svc.submit_truth(caller, id, body.to_vec())?)).await
}

#[derive(Deserialize, Default)]
struct FormatParam {
    #[serde(default)]
    format: ExportFormat,
}

async fn forecast_query(
    State(svc): AppState,
    headers: HeaderMap,
    Path(id): Path<i64>,
    Query(p): Query<FormatParam>,
    body: Bytes,
) -> Response {
    call(svc, &headers, move |svc, caller| accepted(svc.submit_query(caller, id, &body, p.format)?)).await
}

/// Score filters as comma-separated query parameters.
#[derive(Deserialize, Default)]
struct ScoreParams {
    models: Option<String>,
    units: Option<String>,
    targets: Option<String>,
    timezeros: Option<String>,
    scores: Option<String>,
    #[serde(default)]
    format: ExportFormat,
}

fn split(list: &Option<String>) -> Vec<String> {
    list.as_deref()
        .map(|s| s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(String::from).collect())
        .unwrap_or_default()
}

impl ScoreParams {
    fn query(&self) -> Result<ScoreQuery, ServiceError> {
        let timezeros = split(&self.timezeros)
            .iter()
            .map(|d| {
                parse_iso_date(d).ok_or_else(|| ServiceError::BadRequest {
                    message: format!("{d:?} is not a YYYY-MM-DD date"),
                    detail: None,
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(ScoreQuery {
            models: split(&self.models),
            units: split(&self.units),
            targets: split(&self.targets),
            timezeros,
            scores: split(&self.scores),
        })
    }
}

async fn scores(State(svc): AppState, headers: HeaderMap, Path(id): Path<i64>, Query(p): Query<ScoreParams>) -> Response {
    call(svc, &headers, move |svc, caller| {
        let file = svc.scores(caller, id, &p.query()?, p.format)?;
        Ok(file_response(&file))
    })
    .await
}

#[derive(Deserialize, Default)]
struct JobParams {
    #[serde(default)]
    download: bool,
}

async fn job(State(svc): AppState, headers: HeaderMap, Path(id): Path<u64>, Query(p): Query<JobParams>) -> Response {
    call(svc, &headers, move |svc, caller| {
        if p.download {
            let file = svc.job_file(caller, id)?;
            Ok(file_response(&file))
        } else {
            ok_json(svc.job(caller, id)?)
        }
    })
    .await
}

/// A server running on a background runtime.
pub struct RunningServer {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<thread::JoinHandle<()>>,
}

impl RunningServer {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Binds `addr` (port 0 picks a free port) and serves on a background
/// thread until the handle is dropped.
pub fn spawn(svc: Arc<Service>, addr: SocketAddr) -> std::io::Result<RunningServer> {
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let listener = runtime.block_on(tokio::net::TcpListener::bind(addr))?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = thread::Builder::new().name("http".into()).spawn(move || {
        runtime.block_on(async move {
            let _ = axum::serve(listener, router(svc))
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
    })?;
    Ok(RunningServer {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

/// Serves until the process is stopped.
pub fn serve_forever(svc: Arc<Service>, addr: SocketAddr) -> std::io::Result<()> {
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(svc)).await?;
        Ok(())
    })
}
