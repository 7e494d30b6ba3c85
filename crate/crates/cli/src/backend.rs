//! The archive the CLI talks to: a database file opened in-process, or a
//! server reached over HTTP. Both speak the JSON shapes of the HTTP API.

use std::path::Path;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use farc_core::model::ModelInfo;
use farc_core::store::{ScoreQuery, Store, UserRecord};
use farc_server::auth::{TokenIssuer, DEFAULT_TOKEN_LIFETIME};
use farc_server::jobs::ExportFormat;
use farc_server::{Service, ServiceError};
use reqwest::blocking::{Client, RequestBuilder, Response};
use serde_json::Value as Json;

use crate::error::CliError;

const LOCAL_WORKERS: usize = 2;
const JOB_TIMEOUT: Duration = Duration::from_secs(600);

pub trait Backend {
    fn projects(&self) -> Result<Vec<Json>, CliError>;
    fn create_project(&self, config: &[u8]) -> Result<Json, CliError>;
    /// Project record with its `config`.
    fn project(&self, id: i64) -> Result<Json, CliError>;
    fn models(&self, project: i64) -> Result<Vec<Json>, CliError>;
    fn add_model(&self, project: i64, info: &ModelInfo) -> Result<Json, CliError>;
    fn submit_forecast(&self, model: i64, envelope: &[u8]) -> Result<Json, CliError>;
    fn submit_truth(&self, project: i64, csv: Vec<u8>) -> Result<Json, CliError>;
    fn submit_query(&self, project: i64, filters: &[u8], format: ExportFormat) -> Result<Json, CliError>;
    fn scores(&self, project: i64, query: &ScoreQuery, format: ExportFormat) -> Result<Vec<u8>, CliError>;
    /// Blocks until the job is terminal and returns its view.
    fn wait(&self, job: u64) -> Result<Json, CliError>;
    fn job_file(&self, job: u64) -> Result<Vec<u8>, CliError>;
    /// The in-process service, when there is one.
    fn local(&self) -> Option<&Local> {
        None
    }
}

fn to_json<T: serde::Serialize>(value: T) -> Json {
    serde_json::to_value(value).expect("views serialise")
}

/// Waits for a job and turns a failure into an error.
pub fn finish(backend: &dyn Backend, job: &Json) -> Result<Json, CliError> {
    let id = job["id"].as_u64().ok_or_else(|| CliError::Failed(format!("no job id in {job}")))?;
    let done = backend.wait(id)?;
    if done["status"] == "failed" {
        let error = &done["error"];
        let message = format!("job {id} failed: {}", error["message"].as_str().unwrap_or("unknown error"));
        return Err(CliError::rejected(message, error.get("detail").cloned().unwrap_or(Json::Null)));
    }
    Ok(done)
}

// ---------------------------------------------------------------------------

/// A database file served in-process, acting as one local user.
pub struct Local {
    svc: Arc<Service>,
    caller: Option<UserRecord>,
    user: String,
}

impl Local {
    pub fn open(db: &Path, user: &str) -> Result<Self, CliError> {
        let store = Store::open(db).map_err(|e| CliError::Failed(format!("{}: {e}", db.display())))?;
        let caller = store.user_by_name(user).map_err(|e| CliError::Failed(e.to_string()))?;
        let svc = Service::new(Arc::new(store), TokenIssuer::ephemeral(DEFAULT_TOKEN_LIFETIME));
        svc.start(LOCAL_WORKERS);
        Ok(Local {
            svc,
            caller,
            user: user.to_string(),
        })
    }

    pub fn service(&self) -> &Service {
        &self.svc
    }

    fn caller(&self) -> Option<&UserRecord> {
        self.caller.as_ref()
    }

    fn error(&self, e: ServiceError) -> CliError {
        match e {
            ServiceError::BadRequest { message, detail } => CliError::rejected(message, detail.unwrap_or(Json::Null)),
            ServiceError::Unauthenticated if self.caller.is_none() => CliError::Failed(format!(
                "no local user {:?}; create one with `farc user add`",
                self.user
            )),
            other => CliError::Failed(other.to_string()),
        }
    }
}

impl Drop for Local {
    /// Lets follow-up scoring finish before the process exits.
    fn drop(&mut self) {
        self.svc.jobs().drain();
        self.svc.jobs().shutdown();
    }
}

impl Backend for Local {
    fn projects(&self) -> Result<Vec<Json>, CliError> {
        let list = self.svc.list_projects(self.caller(), Default::default()).map_err(|e| self.error(e))?;
        Ok(list.into_iter().map(to_json).collect())
    }

    fn create_project(&self, config: &[u8]) -> Result<Json, CliError> {
        self.svc.create_project(self.caller(), config).map(to_json).map_err(|e| self.error(e))
    }

    fn project(&self, id: i64) -> Result<Json, CliError> {
        self.svc.project(self.caller(), id).map(to_json).map_err(|e| self.error(e))
    }

    fn models(&self, project: i64) -> Result<Vec<Json>, CliError> {
        let list = self
            .svc
            .list_models(self.caller(), project, Default::default())
            .map_err(|e| self.error(e))?;
        Ok(list.into_iter().map(to_json).collect())
    }

    fn add_model(&self, project: i64, info: &ModelInfo) -> Result<Json, CliError> {
        self.svc.add_model(self.caller(), project, info).map(to_json).map_err(|e| self.error(e))
    }

    fn submit_forecast(&self, model: i64, envelope: &[u8]) -> Result<Json, CliError> {
        self.svc.submit_forecast(self.caller(), model, envelope).map(to_json).map_err(|e| self.error(e))
    }

    fn submit_truth(&self, project: i64, csv: Vec<u8>) -> Result<Json, CliError> {
        self.svc.submit_truth(self.caller(), project, csv).map(to_json).map_err(|e| self.error(e))
    }

    fn submit_query(&self, project: i64, filters: &[u8], format: ExportFormat) -> Result<Json, CliError> {
        self.svc
            .submit_query(self.caller(), project, filters, format)
            .map(to_json)
            .map_err(|e| self.error(e))
    }

    fn scores(&self, project: i64, query: &ScoreQuery, format: ExportFormat) -> Result<Vec<u8>, CliError> {
        let file = self.svc.scores(self.caller(), project, query, format).map_err(|e| self.error(e))?;
        Ok(file.bytes.clone())
    }

    fn wait(&self, job: u64) -> Result<Json, CliError> {
        self.svc
            .jobs()
            .wait(job)
            .map(to_json)
            .ok_or_else(|| CliError::Failed(format!("job {job} not found")))
    }

    fn job_file(&self, job: u64) -> Result<Vec<u8>, CliError> {
        let file = self.svc.job_file(self.caller(), job).map_err(|e| self.error(e))?;
        Ok(file.bytes.clone())
    }

    fn local(&self) -> Option<&Local> {
        Some(self)
    }
}

// ---------------------------------------------------------------------------

/// A server reached over HTTP with an optional bearer token.
pub struct Remote {
    base: String,
    token: Option<String>,
    http: Client,
}

impl Remote {
    pub fn new(base: &str, token: Option<String>) -> Result<Self, CliError> {
        let http = Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| CliError::Failed(e.to_string()))?;
        Ok(Remote {
            base: base.trim_end_matches('/').to_string(),
            token,
            http,
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn send(&self, req: RequestBuilder) -> Result<Response, CliError> {
        let req = match &self.token {
            Some(t) => req.bearer_auth(t),
            None => req,
        };
        let resp = req.send().map_err(|e| self.transport(e))?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status();
        let body: Json = resp.json().unwrap_or(Json::Null);
        let error = &body["error"];
        let message = format!(
            "server answered {status}: {}",
            error["message"].as_str().unwrap_or("no details")
        );
        Err(match error.get("detail") {
            Some(detail) => CliError::rejected(message, detail.clone()),
            None => CliError::Failed(message),
        })
    }

    fn transport(&self, e: reqwest::Error) -> CliError {
        if e.is_connect() || e.is_timeout() {
            CliError::Unreachable {
                url: self.base.clone(),
                message: e.to_string(),
            }
        } else {
            CliError::Failed(e.to_string())
        }
    }

    fn json(&self, req: RequestBuilder) -> Result<Json, CliError> {
        self.send(req)?.json().map_err(|e| CliError::Failed(format!("bad response: {e}")))
    }

    fn bytes(&self, req: RequestBuilder) -> Result<Vec<u8>, CliError> {
        let resp = self.send(req)?;
        resp.bytes().map(|b| b.to_vec()).map_err(|e| self.transport(e))
    }

    fn list(&self, req: RequestBuilder) -> Result<Vec<Json>, CliError> {
        match self.json(req)? {
            Json::Array(items) => Ok(items),
            other => Err(CliError::Failed(format!("expected a list, got {other}"))),
        }
    }

    /// Exchanges credentials for a token.
    pub fn login(&self, username: &str, password: &str) -> Result<Json, CliError> {
        let body = serde_json::json!({"username": username, "password": password});
        self.json(self.http.post(self.url("/api/token")).json(&body))
    }
}

fn export_format(format: ExportFormat) -> &'static str {
    match format {
        ExportFormat::Csv => "csv",
        ExportFormat::Json => "json",
    }
}

impl Backend for Remote {
    fn projects(&self) -> Result<Vec<Json>, CliError> {
        self.list(self.http.get(self.url("/api/projects")))
    }

    fn create_project(&self, config: &[u8]) -> Result<Json, CliError> {
        self.json(self.http.post(self.url("/api/projects")).body(config.to_vec()))
    }

    fn project(&self, id: i64) -> Result<Json, CliError> {
        self.json(self.http.get(self.url(&format!("/api/projects/{id}"))))
    }

    fn models(&self, project: i64) -> Result<Vec<Json>, CliError> {
        self.list(self.http.get(self.url(&format!("/api/projects/{project}/models"))))
    }

    fn add_model(&self, project: i64, info: &ModelInfo) -> Result<Json, CliError> {
        self.json(self.http.post(self.url(&format!("/api/projects/{project}/models"))).json(info))
    }

    fn submit_forecast(&self, model: i64, envelope: &[u8]) -> Result<Json, CliError> {
        self.json(
            self.http
                .post(self.url(&format!("/api/models/{model}/forecasts")))
                .body(envelope.to_vec()),
        )
    }

    fn submit_truth(&self, project: i64, csv: Vec<u8>) -> Result<Json, CliError> {
        self.json(self.http.post(self.url(&format!("/api/projects/{project}/truth"))).body(csv))
    }

    fn submit_query(&self, project: i64, filters: &[u8], format: ExportFormat) -> Result<Json, CliError> {
        let url = self.url(&format!(
            "/api/projects/{project}/forecast_queries?format={}",
            export_format(format)
        ));
        self.json(self.http.post(url).body(filters.to_vec()))
    }

    fn scores(&self, project: i64, query: &ScoreQuery, format: ExportFormat) -> Result<Vec<u8>, CliError> {
        let mut params: Vec<(&str, String)> = vec![("format", export_format(format).to_string())];
        for (key, values) in [
            ("models", &query.models),
            ("units", &query.units),
            ("targets", &query.targets),
            ("scores", &query.scores),
        ] {
            if !values.is_empty() {
                params.push((key, values.join(",")));
            }
        }
        if !query.timezeros.is_empty() {
            let dates: Vec<String> = query.timezeros.iter().map(|d| d.to_string()).collect();
            params.push(("timezeros", dates.join(",")));
        }
        self.bytes(
            self.http
                .get(self.url(&format!("/api/projects/{project}/scores")))
                .query(&params),
        )
    }

    fn wait(&self, job: u64) -> Result<Json, CliError> {
        let start = Instant::now();
        let mut delay = Duration::from_millis(20);
        loop {
            let view = self.json(self.http.get(self.url(&format!("/api/jobs/{job}"))))?;
            if view["status"] == "success" || view["status"] == "failed" {
                return Ok(view);
            }
            if start.elapsed() > JOB_TIMEOUT {
                return Err(CliError::Failed(format!("job {job} still {} after {JOB_TIMEOUT:?}", view["status"])));
            }
            thread::sleep(delay);
            delay = (delay * 2).min(Duration::from_millis(500));
        }
    }

    fn job_file(&self, job: u64) -> Result<Vec<u8>, CliError> {
        self.bytes(self.http.get(self.url(&format!("/api/jobs/{job}?download=true"))))
    }
}
