//! Transport-independent service operations with access control.

use std::collections::BTreeSet;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use farc_core::format::{
    parse_project_config, parse_truth_csv, parse_upload, serialize_forecast, serialize_project_config,
    ForecastDocument, FormatError,
};
use farc_core::model::{element_kinds_for, ModelInfo};
use farc_core::scoring::{applicable_scores, score_forecast, write_scores_csv};
use farc_core::store::{
    ForecastId, ForecastQuery, ModelId, ModelRecord, ProjectId, ProjectRecord, ScoreQuery, Store, StoreError,
    UserRecord, QUERY_CSV_HEADER,
};
use farc_core::validation::{check_forecast, validate_truth};
use farc_core::{ProjectConfig, ScoreKind};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::auth::{verify_password, TokenError, TokenIssuer};
use crate::jobs::{ExportFormat, Executor, JobFailure, JobFile, JobId, JobOutput, JobQueue, JobTask, JobView};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("authentication required")]
    Unauthenticated,
    #[error("{0}")]
    BadToken(#[from] TokenError),
    #[error("not permitted: {0}")]
    Forbidden(String),
    #[error("{0} not found")]
    NotFound(String),
    #[error("{message}")]
    BadRequest {
        message: String,
        detail: Option<serde_json::Value>,
    },
    #[error("{0}")]
    Conflict(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ServiceError {
    fn bad_request(message: impl Into<String>) -> Self {
        ServiceError::BadRequest {
            message: message.into(),
            detail: None,
        }
    }

    fn from_format(context: &str, e: FormatError) -> Self {
        ServiceError::BadRequest {
            message: format!("{context}: {e}"),
            detail: Some(json!({ "diagnostics": e.diagnostics })),
        }
    }

    /// Additional machine-readable detail, if any.
    pub fn detail(&self) -> Option<&serde_json::Value> {
        match self {
            ServiceError::BadRequest { detail, .. } => detail.as_ref(),
            _ => None,
        }
    }
}

impl From<StoreError> for ServiceError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::UnknownProject(_) | StoreError::UnknownModel(_) | StoreError::UnknownForecast(_) => {
                ServiceError::NotFound(e.to_string())
            }
            StoreError::DuplicateProject(_) | StoreError::DuplicateModel(_) | StoreError::DuplicateUser(_) => {
                ServiceError::Conflict(e.to_string())
            }
            StoreError::UnknownFilter { .. } | StoreError::UnknownTimezero(_) | StoreError::UnknownReference { .. } => {
                ServiceError::bad_request(e.to_string())
            }
            StoreError::Sqlite(_) | StoreError::Corrupt(_) => ServiceError::Internal(e.to_string()),
        }
    }
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

/// `limit`/`offset` pagination for list endpoints.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
pub struct Page {
    pub limit: Option<usize>,
    #[serde(default)]
    pub offset: usize,
}

impl Page {
    fn apply<T>(self, items: Vec<T>) -> Vec<T> {
        items
            .into_iter()
            .skip(self.offset)
            .take(self.limit.unwrap_or(usize::MAX))
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TokenGrant {
    pub token: String,
    pub expires_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProjectView {
    #[serde(flatten)]
    pub record: ProjectRecord,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelView {
    #[serde(flatten)]
    pub record: ModelRecord,
    pub forecasts: Vec<ForecastSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ForecastSummary {
    pub id: ForecastId,
    pub timezero: chrono::NaiveDate,
    pub issued_at: DateTime<Utc>,
    pub source: Option<String>,
}

/// Score kinds any prediction in the project can produce.
pub fn project_score_kinds(config: &ProjectConfig) -> Vec<ScoreKind> {
    let kinds: BTreeSet<ScoreKind> = config
        .targets
        .iter()
        .flat_map(|t| {
            element_kinds_for(t.target_type())
                .iter()
                .flat_map(move |&k| applicable_scores(t.target_type(), k).iter().copied())
        })
        .collect();
    kinds.into_iter().collect()
}

pub struct Service {
    store: Arc<Store>,
    tokens: TokenIssuer,
    jobs: JobQueue,
}

impl Service {
    pub fn new(store: Arc<Store>, tokens: TokenIssuer) -> Arc<Self> {
        Arc::new(Service {
            store,
            tokens,
            jobs: JobQueue::new(),
        })
    }

    /// Starts `workers` job threads.
    pub fn start(self: &Arc<Self>, workers: usize) {
        self.jobs.start(workers, Arc::clone(self) as Arc<dyn Executor>);
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn jobs(&self) -> &JobQueue {
        &self.jobs
    }

    // ---- identity ------------------------------------------------------

    pub fn login(&self, username: &str, password: &str) -> Result<TokenGrant> {
        match self.store.user_by_name(username)? {
            Some(u) if verify_password(password, &u.password_hash) => {
                let (token, expires_at) = self.tokens.issue(u.id, &u.username, Utc::now());
                Ok(TokenGrant { token, expires_at })
            }
            _ => Err(ServiceError::Unauthenticated),
        }
    }

    /// Resolves an optional bearer token to a user. A present but invalid
    /// or expired token is an error, not an anonymous caller.
    pub fn identify(&self, bearer: Option<&str>) -> Result<Option<UserRecord>> {
        let Some(token) = bearer else { return Ok(None) };
        let claims = self.tokens.verify(token)?;
        let id: i64 = claims.sub.parse().map_err(|_| TokenError::Invalid)?;
        match self.store.user(id)? {
            Some(u) => Ok(Some(u)),
            None => Err(TokenError::Invalid.into()),
        }
    }

    fn require_user(caller: Option<&UserRecord>) -> Result<&UserRecord> {
        caller.ok_or(ServiceError::Unauthenticated)
    }

    fn require_read(&self, caller: Option<&UserRecord>, project: ProjectId) -> Result<ProjectRecord> {
        let record = self.store.project(project)?;
        if self.store.can_read(project, caller.map(|u| u.id))? {
            Ok(record)
        } else if caller.is_none() {
            Err(ServiceError::Unauthenticated)
        } else {
            Err(ServiceError::Forbidden(format!("no read access to project {project}")))
        }
    }

    /// Owner or admin.
    fn require_manage(&self, caller: Option<&UserRecord>, project: ProjectId) -> Result<ProjectRecord> {
        let record = self.require_read(caller, project)?;
        let user = Self::require_user(caller)?;
        if user.is_admin || record.owner == Some(user.id) {
            Ok(record)
        } else {
            Err(ServiceError::Forbidden(format!("only the owner may modify project {project}")))
        }
    }

    // ---- projects ------------------------------------------------------

    pub fn list_projects(&self, caller: Option<&UserRecord>, page: Page) -> Result<Vec<ProjectRecord>> {
        let mut visible = Vec::new();
        for p in self.store.projects()? {
            if self.store.can_read(p.id, caller.map(|u| u.id))? {
                visible.push(p);
            }
        }
        Ok(page.apply(visible))
    }

    pub fn create_project(&self, caller: Option<&UserRecord>, body: &[u8]) -> Result<ProjectView> {
        let user = Self::require_user(caller)?;
        let config = parse_project_config(body).map_err(|e| ServiceError::from_format("invalid project config", e))?;
        let id = self.store.create_project(&config, Some(user.id))?;
        self.project(caller, id)
    }

    pub fn project(&self, caller: Option<&UserRecord>, id: ProjectId) -> Result<ProjectView> {
        let record = self.require_read(caller, id)?;
        let config = self.store.project_config(id)?;
        let config = serde_json::from_slice(&serialize_project_config(&config))
            .map_err(|e| ServiceError::Internal(e.to_string()))?;
        Ok(ProjectView { record, config })
    }

    pub fn delete_project(&self, caller: Option<&UserRecord>, id: ProjectId) -> Result<()> {
        self.require_manage(caller, id)?;
        Ok(self.store.delete_project(id)?)
    }

    /// Lets `username` read a private project.
    pub fn grant_read(&self, caller: Option<&UserRecord>, project: ProjectId, username: &str) -> Result<()> {
        self.require_manage(caller, project)?;
        let user = self
            .store
            .user_by_name(username)?
            .ok_or_else(|| ServiceError::NotFound(format!("user {username:?}")))?;
        Ok(self.store.grant_read(project, user.id)?)
    }

    // ---- models ----------------------------------------------------------

    pub fn list_models(&self, caller: Option<&UserRecord>, project: ProjectId, page: Page) -> Result<Vec<ModelRecord>> {
        self.require_read(caller, project)?;
        Ok(page.apply(self.store.models(project)?))
    }

    /// Registered users with read access may add models; they own them.
    pub fn add_model(&self, caller: Option<&UserRecord>, project: ProjectId, info: &ModelInfo) -> Result<ModelRecord> {
        let user = Self::require_user(caller)?;
        self.require_read(caller, project)?;
        if info.abbreviation.trim().is_empty() || info.name.trim().is_empty() {
            return Err(ServiceError::bad_request("model name and abbreviation must not be empty"));
        }
        let id = self.store.add_model(project, info, Some(user.id))?;
        Ok(self.store.model(id)?)
    }

    pub fn model(&self, caller: Option<&UserRecord>, id: ModelId) -> Result<ModelView> {
        let record = self.store.model(id)?;
        self.require_read(caller, record.project_id)?;
        let forecasts = self
            .store
            .forecasts(record.project_id, Some(id))?
            .into_iter()
            .map(|f| ForecastSummary {
                id: f.id,
                timezero: f.timezero,
                issued_at: f.issued_at,
                source: f.source,
            })
            .collect();
        Ok(ModelView { record, forecasts })
    }

    // ---- forecasts -------------------------------------------------------

    /// Accepts an upload envelope and queues validation plus registration.
    pub fn submit_forecast(&self, caller: Option<&UserRecord>, model: ModelId, body: &[u8]) -> Result<JobView> {
        let user = Self::require_user(caller)?;
        let record = self.store.model(model)?;
        let project = self.require_read(caller, record.project_id)?;
        if !(user.is_admin || record.owner == Some(user.id) || project.owner == Some(user.id)) {
            return Err(ServiceError::Forbidden(format!("only the owner may upload to model {model}")));
        }
        let envelope = parse_upload(body).map_err(|e| ServiceError::from_format("invalid upload", e))?;
        let config = self.store.project_config(project.id)?;
        if config.timezero(envelope.timezero).is_none() {
            return Err(StoreError::UnknownTimezero(envelope.timezero).into());
        }
        let id = self.jobs.submit(
            JobTask::UploadForecast {
                project: project.id,
                model,
                envelope,
            },
            Some(user.id),
        );
        Ok(self.jobs.get(id).expect("just submitted"))
    }

    /// The stored forecast as a JSON document.
    pub fn forecast_data(&self, caller: Option<&UserRecord>, id: ForecastId) -> Result<Vec<u8>> {
        let project = self.store.forecast_project(id)?;
        self.require_read(caller, project)?;
        let forecast = self.store.load_forecast(id)?;
        Ok(serialize_forecast(&ForecastDocument::from_forecast(&forecast)))
    }

    // ---- truth -----------------------------------------------------------

    pub fn submit_truth(&self, caller: Option<&UserRecord>, project: ProjectId, csv: Vec<u8>) -> Result<JobView> {
        let user = Self::require_user(caller)?;
        self.require_manage(caller, project)?;
        let id = self.jobs.submit(JobTask::UploadTruth { project, csv }, Some(user.id));
        Ok(self.jobs.get(id).expect("just submitted"))
    }

    // ---- queries ---------------------------------------------------------

    pub fn submit_query(
        &self,
        caller: Option<&UserRecord>,
        project: ProjectId,
        body: &[u8],
        format: ExportFormat,
    ) -> Result<JobView> {
        self.require_read(caller, project)?;
        let query: ForecastQuery = if body.iter().all(u8::is_ascii_whitespace) {
            ForecastQuery::default()
        } else {
            serde_json::from_slice(body)
                .map_err(|e| ServiceError::bad_request(format!("invalid forecast query: {e}")))?
        };
        let id = self.jobs.submit(JobTask::ForecastQuery { project, query, format }, caller.map(|u| u.id));
        Ok(self.jobs.get(id).expect("just submitted"))
    }

    /// Filtered score export.
    pub fn scores(
        &self,
        caller: Option<&UserRecord>,
        project: ProjectId,
        query: &ScoreQuery,
        format: ExportFormat,
    ) -> Result<JobFile> {
        self.require_read(caller, project)?;
        let records = self.store.query_scores(project, query)?;
        Ok(match format {
            ExportFormat::Csv => JobFile {
                content_type: "text/csv",
                bytes: write_scores_csv(&records),
            },
            ExportFormat::Json => JobFile {
                content_type: "application/json",
                bytes: serde_json::to_vec(&records).map_err(|e| ServiceError::Internal(e.to_string()))?,
            },
        })
    }

    // ---- jobs ------------------------------------------------------------

    pub fn job(&self, caller: Option<&UserRecord>, id: JobId) -> Result<JobView> {
        let view = self
            .jobs
            .get(id)
            .ok_or_else(|| ServiceError::NotFound(format!("job {id}")))?;
        self.require_read(caller, view.project_id)?;
        Ok(view)
    }

    pub fn job_file(&self, caller: Option<&UserRecord>, id: JobId) -> Result<Arc<JobFile>> {
        self.job(caller, id)?;
        self.jobs
            .file(id)
            .ok_or_else(|| ServiceError::NotFound(format!("result file of job {id}")))
    }

    /// Queues one scoring job per (score kind, model).
    pub fn enqueue_scoring(&self, project: ProjectId, models: &[ModelId]) -> Result<Vec<JobId>> {
        let config = self.store.project_config(project)?;
        let kinds = project_score_kinds(&config);
        let mut ids = Vec::new();
        for &model in models {
            for &kind in &kinds {
                ids.push(self.jobs.submit(JobTask::ScoreBatch { project, model, kind }, None));
            }
        }
        Ok(ids)
    }

    fn run(&self, task: JobTask) -> Result<JobOutput, JobFailure> {
        let internal = |e: ServiceError| JobFailure::new(e.to_string());
        match task {
            JobTask::UploadForecast {
                project,
                model,
                envelope,
            } => {
                let config = self.store.project_config(project).map_err(|e| internal(e.into()))?;
                let validated = check_forecast(&envelope.forecast, &config).map_err(|violations| JobFailure {
                    message: format!("forecast failed validation with {} violation(s)", violations.len()),
                    detail: Some(json!({ "violations": violations })),
                })?;
                let key = self
                    .store
                    .register_forecast(model, envelope.timezero, envelope.source.as_deref(), &validated.predictions)
                    .map_err(|e| internal(e.into()))?;
                let scoring = if self.store.truth(project).map_err(|e| internal(e.into()))?.is_empty() {
                    Vec::new()
                } else {
                    self.enqueue_scoring(project, &[model]).map_err(internal)?
                };
                Ok(JobOutput {
                    summary: json!({
                        "forecast_id": key.forecast_id,
                        "timezero": key.timezero,
                        "issued_at": key.issued_at,
                        "replaced": key.replaced,
                        "warnings": validated.warnings,
                        "scoring_jobs": scoring,
                    }),
                    file: None,
                })
            }
            JobTask::UploadTruth { project, csv } => {
                let config = self.store.project_config(project).map_err(|e| internal(e.into()))?;
                let parsed = parse_truth_csv(&csv, &config).map_err(|e| JobFailure {
                    message: format!("invalid truth file: {e}"),
                    detail: Some(json!({ "diagnostics": e.diagnostics })),
                })?;
                let warnings = validate_truth(&parsed.table, &config);
                let rows = self
                    .store
                    .replace_truth(project, &parsed.table)
                    .map_err(|e| internal(e.into()))?;
                let scoring = if parsed.table.is_empty() {
                    Vec::new()
                } else {
                    let models: Vec<ModelId> = self
                        .store
                        .models(project)
                        .map_err(|e| internal(e.into()))?
                        .iter()
                        .map(|m| m.id)
                        .collect();
                    self.enqueue_scoring(project, &models).map_err(internal)?
                };
                Ok(JobOutput {
                    summary: json!({
                        "rows": rows,
                        "skipped": parsed.warnings,
                        "warnings": warnings,
                        "scoring_jobs": scoring,
                    }),
                    file: None,
                })
            }
            JobTask::ForecastQuery { project, query, format } => {
                let (rows, file) = export_query(&self.store, project, &query, format).map_err(|e| internal(e.into()))?;
                Ok(JobOutput {
                    summary: json!({ "rows": rows }),
                    file: Some(file),
                })
            }
            JobTask::ScoreBatch { project, model, kind } => {
                let config = self.store.project_config(project).map_err(|e| internal(e.into()))?;
                let truth = self.store.truth(project).map_err(|e| internal(e.into()))?;
                let forecasts = self
                    .store
                    .load_forecasts(project, Some(model))
                    .map_err(|e| internal(e.into()))?;
                let mut records = Vec::new();
                let mut deferrals = 0usize;
                for f in &forecasts {
                    let run = score_forecast(f, &config, &truth, &[kind]);
                    records.extend(run.records);
                    deferrals += run.deferrals.len();
                }
                self.store
                    .replace_scores(model, &[kind], &records)
                    .map_err(|e| internal(e.into()))?;
                Ok(JobOutput {
                    summary: json!({
                        "model_id": model,
                        "score": kind,
                        "records": records.len(),
                        "deferrals": deferrals,
                    }),
                    file: None,
                })
            }
        }
    }
}

impl Executor for Service {
    fn execute(&self, _queue: &JobQueue, task: JobTask) -> Result<JobOutput, JobFailure> {
        self.run(task)
    }
}

/// Materialises a forecast query as CSV or JSON. Returns the row count.
pub fn export_query(
    store: &Store,
    project: ProjectId,
    query: &ForecastQuery,
    format: ExportFormat,
) -> Result<(usize, JobFile), StoreError> {
    match format {
        ExportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(QUERY_CSV_HEADER).expect("in-memory write");
            let n = store.query_forecasts(project, query, |row| {
                w.write_record(row.csv_fields()).expect("in-memory write");
                Ok(())
            })?;
            let bytes = w.into_inner().expect("in-memory flush");
            Ok((
                n,
                JobFile {
                    content_type: "text/csv",
                    bytes,
                },
            ))
        }
        ExportFormat::Json => {
            let mut rows = Vec::new();
            let n = store.query_forecasts(project, query, |row| {
                rows.push(row);
                Ok(())
            })?;
            let bytes = serde_json::to_vec(&rows).expect("query rows serialise");
            Ok((
                n,
                JobFile {
                    content_type: "application/json",
                    bytes,
                },
            ))
        }
    }
}
