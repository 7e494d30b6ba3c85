//! Embedded relational archive.
//!
//! One SQLite database holds users, projects with their units, targets and
//! time-zeros, models, forecasts, truth and scores. Prediction elements
//! live in five kind-specific tables (`point_elements`, `named_elements`,
//! `bin_elements`, `sample_elements`, `quantile_elements`) keyed by
//! (forecast, unit, target[, index]).
//!
//! Every mutation runs in a transaction, so a crash leaves either the old
//! or the new state. Writes are serialised through one connection.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Mutex, MutexGuard};

use chrono::{DateTime, NaiveDate, SecondsFormat, Utc};
use rusqlite::types::{Value as SqlValue, ValueRef};
use rusqlite::{params, params_from_iter, Connection, OptionalExtension, Transaction};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{ProjectConfig, TruthRow, TruthTable};
use crate::model::{
    parse_iso_date, BinElement, DataType, ElementKind, Family, Forecast, ModelInfo,
    NamedDistribution, Prediction, PredictionElement, PredictionKey, QuantileElement,
    SampleElement, TargetDefinition, TargetParts, TargetType, TimeZero, Unit, Value, Visibility,
};
use crate::scoring::{ScoreFlag, ScoreId, ScoreKind, ScoreRecord};

pub type ProjectId = i64;
pub type ModelId = i64;
pub type ForecastId = i64;
pub type UserId = i64;

pub const QUERY_CSV_HEADER: [&str; 13] = [
    "model", "timezero", "unit", "target", "class", "index", "value", "cat", "prob", "quantile",
    "family", "param1", "param2",
];

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("database error: {0}")]
    Sqlite(#[from] rusqlite::Error),
    #[error("a project named {0:?} already exists")]
    DuplicateProject(String),
    #[error("model abbreviation {0:?} is already used in this project")]
    DuplicateModel(String),
    #[error("user {0:?} already exists")]
    DuplicateUser(String),
    #[error("no project with id {0}")]
    UnknownProject(ProjectId),
    #[error("no model with id {0}")]
    UnknownModel(ModelId),
    #[error("no forecast with id {0}")]
    UnknownForecast(ForecastId),
    #[error("timezero {0} is not one of the project's time-zeros")]
    UnknownTimezero(NaiveDate),
    #[error("unknown {field}: {}", .values.join(", "))]
    UnknownFilter { field: &'static str, values: Vec<String> },
    #[error("forecast references unknown {what} {name:?}")]
    UnknownReference { what: &'static str, name: String },
    #[error("stored data is inconsistent: {0}")]
    Corrupt(String),
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct UserRecord {
    pub id: UserId,
    pub username: String,
    #[serde(skip)]
    pub password_hash: String,
    pub is_admin: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectRecord {
    pub id: ProjectId,
    pub name: String,
    pub description: String,
    pub visibility: Visibility,
    pub owner: Option<UserId>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelRecord {
    pub id: ModelId,
    pub project_id: ProjectId,
    #[serde(flatten)]
    pub info: ModelInfo,
    pub owner: Option<UserId>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForecastRecord {
    pub id: ForecastId,
    pub model_id: ModelId,
    pub model: String,
    pub timezero: NaiveDate,
    pub issued_at: DateTime<Utc>,
    pub source: Option<String>,
}

/// A superseded registration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditEntry {
    pub seq: i64,
    pub forecast_id: ForecastId,
    pub model_id: ModelId,
    pub timezero: NaiveDate,
    pub issued_at: DateTime<Utc>,
    pub superseded_at: DateTime<Utc>,
    pub source: Option<String>,
}

/// Result of registering a forecast.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StoredForecastKey {
    pub forecast_id: ForecastId,
    pub model_id: ModelId,
    pub timezero: NaiveDate,
    pub issued_at: DateTime<Utc>,
    pub replaced: Option<AuditEntry>,
}

/// Filters for forecast queries. An empty list means "all".
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastQuery {
    pub models: Vec<String>,
    pub units: Vec<String>,
    pub targets: Vec<String>,
    pub timezeros: Vec<NaiveDate>,
    pub types: Vec<ElementKind>,
}

/// Filters for score queries. `scores` takes full ids
/// (`interval_score_0.1`) or kinds (`interval_score` matches every alpha).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreQuery {
    pub models: Vec<String>,
    pub units: Vec<String>,
    pub targets: Vec<String>,
    pub timezeros: Vec<NaiveDate>,
    pub scores: Vec<String>,
}

/// One element row of a forecast query.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryRow {
    pub model: String,
    pub timezero: NaiveDate,
    pub unit: String,
    pub target: String,
    pub class: ElementKind,
    pub index: Option<usize>,
    pub value: Option<Value>,
    pub cat: Option<Value>,
    pub prob: Option<f64>,
    pub quantile: Option<f64>,
    pub family: Option<Family>,
    pub param1: Option<f64>,
    pub param2: Option<f64>,
}

impl QueryRow {
    /// Fields in [`QUERY_CSV_HEADER`] order.
    pub fn csv_fields(&self) -> [String; 13] {
        let opt = |v: &Option<Value>| v.as_ref().map(ToString::to_string).unwrap_or_default();
        let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        [
            self.model.clone(),
            self.timezero.format("%Y-%m-%d").to_string(),
            self.unit.clone(),
            self.target.clone(),
            self.class.as_str().to_string(),
            self.index.map(|i| i.to_string()).unwrap_or_default(),
            opt(&self.value),
            opt(&self.cat),
            num(self.prob),
            num(self.quantile),
            self.family.map(|f| f.as_str().to_string()).unwrap_or_default(),
            num(self.param1),
            num(self.param2),
        ]
    }
}

const SCHEMA: &str = r#"
CREATE TABLE IF NOT EXISTS users (
    id INTEGER PRIMARY KEY,
    username TEXT NOT NULL UNIQUE,
    password_hash TEXT NOT NULL,
    is_admin INTEGER NOT NULL DEFAULT 0
);
CREATE TABLE IF NOT EXISTS projects (
    id INTEGER PRIMARY KEY,
    name TEXT NOT NULL UNIQUE,
    description TEXT NOT NULL,
    visibility TEXT NOT NULL,
    owner_id INTEGER REFERENCES users(id) ON DELETE SET NULL,
    bin_sum_tolerance REAL NOT NULL
);
CREATE TABLE IF NOT EXISTS project_readers (
    project_id INTEGER NOT NULL REFERENCES projects(id) ON DELETE CASCADE,
    user_id INTEGER NOT NULL REFERENCES users(id) ON DELETE CASCADE,
    PRIMARY KEY (project_id, user_id)
);
CREATE TABLE IF NOT EXISTS units (
    id INTEGER PRIMARY KEY,
    project_id INTEGER NOT NULL REFERENCES projects(id) ON DELETE CASCADE,
    position INTEGER NOT NULL,
    code TEXT NOT NULL,
    name TEXT NOT NULL,
    UNIQUE (project_id, code)
);
CREATE TABLE IF NOT EXISTS targets (
    id INTEGER PRIMARY KEY,
    project_id INTEGER NOT NULL REFERENCES projects(id) ON DELETE CASCADE,
    position INTEGER NOT NULL,
    name TEXT NOT NULL,
    type TEXT NOT NULL,
    description TEXT NOT NULL,
    range_lower,
    range_upper,
    has_categories INTEGER NOT NULL,
    is_step_ahead INTEGER NOT NULL,
    step_unit TEXT,
    step_count INTEGER,
    UNIQUE (project_id, name)
);
CREATE TABLE IF NOT EXISTS target_categories (
    target_id INTEGER NOT NULL REFERENCES targets(id) ON DELETE CASCADE,
    idx INTEGER NOT NULL,
    value NOT NULL,
    PRIMARY KEY (target_id, idx)
);
CREATE TABLE IF NOT EXISTS timezeros (
    id INTEGER PRIMARY KEY,
    project_id INTEGER NOT NULL REFERENCES projects(id) ON DELETE CASCADE,
    position INTEGER NOT NULL,
    date TEXT NOT NULL,
    data_version_date TEXT,
    UNIQUE (project_id, date)
);
CREATE TABLE IF NOT EXISTS models (
    id INTEGER PRIMARY KEY,
    project_id INTEGER NOT NULL REFERENCES projects(id) ON DELETE CASCADE,
    name TEXT NOT NULL,
    abbreviation TEXT NOT NULL,
    team TEXT NOT NULL,
    description TEXT NOT NULL,
    owners TEXT NOT NULL,
    owner_id INTEGER REFERENCES users(id) ON DELETE SET NULL,
    UNIQUE (project_id, abbreviation)
);
CREATE TABLE IF NOT EXISTS forecasts (
    id INTEGER PRIMARY KEY,
    model_id INTEGER NOT NULL REFERENCES models(id) ON DELETE CASCADE,
    timezero_id INTEGER NOT NULL REFERENCES timezeros(id) ON DELETE CASCADE,
    issued_at TEXT NOT NULL,
    source TEXT,
    UNIQUE (model_id, timezero_id)
);
CREATE TABLE IF NOT EXISTS forecast_audit (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    forecast_id INTEGER NOT NULL,
    model_id INTEGER NOT NULL,
    timezero TEXT NOT NULL,
    issued_at TEXT NOT NULL,
    superseded_at TEXT NOT NULL,
    source TEXT
);
CREATE TRIGGER IF NOT EXISTS forecast_audit_no_update BEFORE UPDATE ON forecast_audit
BEGIN SELECT RAISE(ABORT, 'forecast_audit is append-only'); END;
CREATE TRIGGER IF NOT EXISTS forecast_audit_no_delete BEFORE DELETE ON forecast_audit
BEGIN SELECT RAISE(ABORT, 'forecast_audit is append-only'); END;
CREATE TABLE IF NOT EXISTS point_elements (
    forecast_id INTEGER NOT NULL REFERENCES forecasts(id) ON DELETE CASCADE,
    unit_id INTEGER NOT NULL REFERENCES units(id) ON DELETE CASCADE,
    target_id INTEGER NOT NULL REFERENCES targets(id) ON DELETE CASCADE,
    value NOT NULL,
    PRIMARY KEY (forecast_id, unit_id, target_id)
);
CREATE TABLE IF NOT EXISTS named_elements (
    forecast_id INTEGER NOT NULL REFERENCES forecasts(id) ON DELETE CASCADE,
    unit_id INTEGER NOT NULL REFERENCES units(id) ON DELETE CASCADE,
    target_id INTEGER NOT NULL REFERENCES targets(id) ON DELETE CASCADE,
    family TEXT NOT NULL,
    param1 REAL NOT NULL,
    param2 REAL,
    PRIMARY KEY (forecast_id, unit_id, target_id)
);
CREATE TABLE IF NOT EXISTS bin_elements (
    forecast_id INTEGER NOT NULL REFERENCES forecasts(id) ON DELETE CASCADE,
    unit_id INTEGER NOT NULL REFERENCES units(id) ON DELETE CASCADE,
    target_id INTEGER NOT NULL REFERENCES targets(id) ON DELETE CASCADE,
    idx INTEGER NOT NULL,
    cat NOT NULL,
    prob REAL NOT NULL,
    PRIMARY KEY (forecast_id, unit_id, target_id, idx)
);
CREATE TABLE IF NOT EXISTS sample_elements (
    forecast_id INTEGER NOT NULL REFERENCES forecasts(id) ON DELETE CASCADE,
    unit_id INTEGER NOT NULL REFERENCES units(id) ON DELETE CASCADE,
    target_id INTEGER NOT NULL REFERENCES targets(id) ON DELETE CASCADE,
    idx INTEGER NOT NULL,
    value NOT NULL,
    PRIMARY KEY (forecast_id, unit_id, target_id, idx)
);
CREATE TABLE IF NOT EXISTS quantile_elements (
    forecast_id INTEGER NOT NULL REFERENCES forecasts(id) ON DELETE CASCADE,
    unit_id INTEGER NOT NULL REFERENCES units(id) ON DELETE CASCADE,
    target_id INTEGER NOT NULL REFERENCES targets(id) ON DELETE CASCADE,
    idx INTEGER NOT NULL,
    quantile REAL NOT NULL,
    value NOT NULL,
    PRIMARY KEY (forecast_id, unit_id, target_id, idx)
);
CREATE TABLE IF NOT EXISTS truth (
    timezero_id INTEGER NOT NULL REFERENCES timezeros(id) ON DELETE CASCADE,
    unit_id INTEGER NOT NULL REFERENCES units(id) ON DELETE CASCADE,
    target_id INTEGER NOT NULL REFERENCES targets(id) ON DELETE CASCADE,
    value NOT NULL,
    PRIMARY KEY (timezero_id, unit_id, target_id)
);
CREATE TABLE IF NOT EXISTS scores (
    model_id INTEGER NOT NULL REFERENCES models(id) ON DELETE CASCADE,
    timezero_id INTEGER NOT NULL REFERENCES timezeros(id) ON DELETE CASCADE,
    unit_id INTEGER NOT NULL REFERENCES units(id) ON DELETE CASCADE,
    target_id INTEGER NOT NULL REFERENCES targets(id) ON DELETE CASCADE,
    score TEXT NOT NULL,
    kind TEXT NOT NULL,
    class TEXT NOT NULL,
    value REAL,
    flag TEXT,
    PRIMARY KEY (model_id, timezero_id, unit_id, target_id, score)
);
"#;

/// Ordinal of each element kind, used for query ordering.
fn kind_ordinal(kind: ElementKind) -> i64 {
    ElementKind::ALL
        .iter()
        .position(|k| *k == kind)
        .expect("kind listed in ALL") as i64
}

fn to_sql(v: &Value) -> SqlValue {
    match v {
        Value::Float(x) => SqlValue::Real(*x),
        Value::Int(i) => SqlValue::Integer(*i),
        Value::Text(s) => SqlValue::Text(s.clone()),
        Value::Bool(b) => SqlValue::Integer(i64::from(*b)),
        Value::Date(_) => SqlValue::Text(v.to_string()),
    }
}

fn from_sql(v: ValueRef<'_>, data_type: DataType) -> Result<Value> {
    let bad = || StoreError::Corrupt(format!("cannot read {v:?} as {data_type}"));
    Ok(match (data_type, v) {
        (DataType::Float, ValueRef::Real(x)) => Value::Float(x),
        (DataType::Float, ValueRef::Integer(i)) => Value::Float(i as f64),
        (DataType::Int, ValueRef::Integer(i)) => Value::Int(i),
        (DataType::Bool, ValueRef::Integer(i)) => Value::Bool(i != 0),
        (DataType::Text, ValueRef::Text(t)) => {
            Value::Text(String::from_utf8(t.to_vec()).map_err(|_| bad())?)
        }
        (DataType::Date, ValueRef::Text(t)) => {
            Value::Date(parse_iso_date(std::str::from_utf8(t).map_err(|_| bad())?).ok_or_else(bad)?)
        }
        _ => return Err(bad()),
    })
}

fn date_sql(d: NaiveDate) -> String {
    d.format("%Y-%m-%d").to_string()
}

fn parse_date_col(s: &str) -> Result<NaiveDate> {
    parse_iso_date(s).ok_or_else(|| StoreError::Corrupt(format!("bad stored date {s:?}")))
}

fn timestamp_sql(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Micros, true)
}

fn parse_timestamp(s: &str) -> Result<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|_| StoreError::Corrupt(format!("bad stored timestamp {s:?}")))
}

/// Current time truncated to the stored (microsecond) precision.
fn now_micros() -> DateTime<Utc> {
    let now = Utc::now();
    DateTime::from_timestamp_micros(now.timestamp_micros()).expect("current time in range")
}

fn placeholders(n: usize) -> String {
    vec!["?"; n].join(", ")
}

/// Per-project lookup tables from names to row ids and target definitions.
struct Catalog {
    config: ProjectConfig,
    units: HashMap<String, i64>,
    targets: HashMap<String, (i64, TargetDefinition)>,
    timezeros: HashMap<NaiveDate, i64>,
}

pub struct Store {
    conn: Mutex<Connection>,
    last_issued: Mutex<DateTime<Utc>>,
}

impl Store {
    /// Opens (creating if needed) a database file.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let conn = Connection::open(path)?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.pragma_update(None, "synchronous", "NORMAL")?;
        Self::init(conn)
    }

    pub fn open_in_memory() -> Result<Self> {
        Self::init(Connection::open_in_memory()?)
    }

    fn init(conn: Connection) -> Result<Self> {
        conn.pragma_update(None, "foreign_keys", "ON")?;
        conn.busy_timeout(std::time::Duration::from_secs(30))?;
        conn.execute_batch(SCHEMA)?;
        let last: Option<String> = conn.query_row(
            "SELECT MAX(t) FROM (SELECT MAX(issued_at) AS t FROM forecasts
                                 UNION ALL SELECT MAX(superseded_at) FROM forecast_audit)",
            [],
            |r| r.get(0),
        )?;
        let last_issued = match last {
            Some(s) => parse_timestamp(&s)?,
            None => DateTime::<Utc>::MIN_UTC,
        };
        Ok(Store {
            conn: Mutex::new(conn),
            last_issued: Mutex::new(last_issued),
        })
    }

    fn conn(&self) -> MutexGuard<'_, Connection> {
        self.conn.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Server clock reading that never runs backwards within the store.
    fn next_issued_at(&self) -> DateTime<Utc> {
        let mut last = self.last_issued.lock().unwrap_or_else(|e| e.into_inner());
        let t = now_micros().max(*last);
        *last = t;
        t
    }

    // ---- users -------------------------------------------------------

    pub fn create_user(&self, username: &str, password_hash: &str, is_admin: bool) -> Result<UserId> {
        let conn = self.conn();
        let n = conn.execute(
            "INSERT OR IGNORE INTO users (username, password_hash, is_admin) VALUES (?1, ?2, ?3)",
            params![username, password_hash, is_admin],
        )?;
        if n == 0 {
            return Err(StoreError::DuplicateUser(username.to_string()));
        }
        Ok(conn.last_insert_rowid())
    }

    pub fn set_password(&self, user: UserId, password_hash: &str) -> Result<()> {
        self.conn().execute(
            "UPDATE users SET password_hash = ?1 WHERE id = ?2",
            params![password_hash, user],
        )?;
        Ok(())
    }

    pub fn user_by_name(&self, username: &str) -> Result<Option<UserRecord>> {
        Ok(self
            .conn()
            .query_row(
                "SELECT id, username, password_hash, is_admin FROM users WHERE username = ?1",
                [username],
                |r| {
                    Ok(UserRecord {
                        id: r.get(0)?,
                        username: r.get(1)?,
                        password_hash: r.get(2)?,
                        is_admin: r.get(3)?,
                    })
                },
            )
            .optional()?)
    }

    pub fn user(&self, id: UserId) -> Result<Option<UserRecord>> {
        Ok(self
            .conn()
            .query_row(
                "SELECT id, username, password_hash, is_admin FROM users WHERE id = ?1",
                [id],
                |r| {
                    Ok(UserRecord {
                        id: r.get(0)?,
                        username: r.get(1)?,
                        password_hash: r.get(2)?,
                        is_admin: r.get(3)?,
                    })
                },
            )
            .optional()?)
    }

    pub fn user_count(&self) -> Result<usize> {
        let n: i64 = self
            .conn()
            .query_row("SELECT COUNT(*) FROM users", [], |r| r.get(0))?;
        Ok(n as usize)
    }

    // ---- projects ----------------------------------------------------

    /// Persists a validated configuration atomically.
    pub fn create_project(&self, config: &ProjectConfig, owner: Option<UserId>) -> Result<ProjectId> {
        let mut conn = self.conn();
        let tx = conn.transaction()?;
        let exists: bool = tx.query_row(
            "SELECT EXISTS(SELECT 1 FROM projects WHERE name = ?1)",
            [&config.name],
            |r| r.get(0),
        )?;
        if exists {
            return Err(StoreError::DuplicateProject(config.name.clone()));
        }
        tx.execute(
            "INSERT INTO projects (name, description, visibility, owner_id, bin_sum_tolerance)
             VALUES (?1, ?2, ?3, ?4, ?5)",
            params![
                config.name,
                config.description,
                config.visibility.as_str(),
                owner,
                config.bin_sum_tolerance
            ],
        )?;
        let pid = tx.last_insert_rowid();
        {
            let mut unit_stmt = tx.prepare(
                "INSERT INTO units (project_id, position, code, name) VALUES (?1, ?2, ?3, ?4)",
            )?;
            for (i, u) in config.units.iter().enumerate() {
                unit_stmt.execute(params![pid, i as i64, u.code(), u.name()])?;
            }
            let mut target_stmt = tx.prepare(
                "INSERT INTO targets (project_id, position, name, type, description, range_lower,
                     range_upper, has_categories, is_step_ahead, step_unit, step_count)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11)",
            )?;
            let mut cat_stmt =
                tx.prepare("INSERT INTO target_categories (target_id, idx, value) VALUES (?1, ?2, ?3)")?;
            for (i, t) in config.targets.iter().enumerate() {
                let (lo, hi) = match t.range() {
                    Some((lo, hi)) => (to_sql(lo), to_sql(hi)),
                    None => (SqlValue::Null, SqlValue::Null),
                };
                target_stmt.execute(params![
                    pid,
                    i as i64,
                    t.name(),
                    t.target_type().as_str(),
                    t.description(),
                    lo,
                    hi,
                    t.categories().is_some(),
                    t.is_step_ahead(),
                    t.step_unit(),
                    t.step_count()
                ])?;
                let tid = tx.last_insert_rowid();
                for (j, c) in t.categories().unwrap_or(&[]).iter().enumerate() {
                    cat_stmt.execute(params![tid, j as i64, to_sql(c)])?;
                }
            }
            let mut tz_stmt = tx.prepare(
                "INSERT INTO timezeros (project_id, position, date, data_version_date)
                 VALUES (?1, ?2, ?3, ?4)",
            )?;
            for (i, tz) in config.timezeros.iter().enumerate() {
                tz_stmt.execute(params![
                    pid,
                    i as i64,
                    date_sql(tz.date),
                    tz.data_version_date.map(date_sql)
                ])?;
            }
        }
        tx.commit()?;
        Ok(pid)
    }

    fn project_row(conn: &Connection, id: ProjectId) -> Result<ProjectRecord> {
        conn.query_row(
            "SELECT id, name, description, visibility, owner_id FROM projects WHERE id = ?1",
            [id],
            project_from_row,
        )
        .optional()?
        .ok_or(StoreError::UnknownProject(id))?
    }

    pub fn project(&self, id: ProjectId) -> Result<ProjectRecord> {
        Self::project_row(&self.conn(), id)
    }

    pub fn project_by_name(&self, name: &str) -> Result<Option<ProjectRecord>> {
        let conn = self.conn();
        let row = conn
            .query_row(
                "SELECT id, name, description, visibility, owner_id FROM projects WHERE name = ?1",
                [name],
                project_from_row,
            )
            .optional()?;
        row.transpose()
    }

    pub fn projects(&self) -> Result<Vec<ProjectRecord>> {
        let conn = self.conn();
        let mut stmt = conn.prepare(
            "SELECT id, name, description, visibility, owner_id FROM projects ORDER BY id",
        )?;
        let rows = stmt.query_map([], project_from_row)?;
        rows.map(|r| r?).collect()
    }

    pub fn delete_project(&self, id: ProjectId) -> Result<()> {
        let n = self.conn().execute("DELETE FROM projects WHERE id = ?1", [id])?;
        if n == 0 {
            return Err(StoreError::UnknownProject(id));
        }
        Ok(())
    }

    pub fn grant_read(&self, project: ProjectId, user: UserId) -> Result<()> {
        self.conn().execute(
            "INSERT OR IGNORE INTO project_readers (project_id, user_id) VALUES (?1, ?2)",
            params![project, user],
        )?;
        Ok(())
    }

    /// Whether `user` may read the project: public projects are readable by
    /// anyone; private ones by the owner, granted readers and admins.
    pub fn can_read(&self, project: ProjectId, user: Option<UserId>) -> Result<bool> {
        let conn = self.conn();
        let p = Self::project_row(&conn, project)?;
        if p.visibility == Visibility::Public {
            return Ok(true);
        }
        let Some(user) = user else { return Ok(false) };
        Ok(conn.query_row(
            "SELECT EXISTS(SELECT 1 FROM projects WHERE id = ?1 AND owner_id = ?2)
                 OR EXISTS(SELECT 1 FROM project_readers WHERE project_id = ?1 AND user_id = ?2)
                 OR EXISTS(SELECT 1 FROM users WHERE id = ?2 AND is_admin = 1)",
            params![project, user],
            |r| r.get(0),
        )?)
    }

    /// Rebuilds the configuration a project was created from.
    pub fn project_config(&self, id: ProjectId) -> Result<ProjectConfig> {
        Ok(Self::catalog(&self.conn(), id)?.config)
    }

    fn catalog(conn: &Connection, id: ProjectId) -> Result<Catalog> {
        let p = Self::project_row(conn, id)?;
        let tolerance: f64 = conn.query_row(
            "SELECT bin_sum_tolerance FROM projects WHERE id = ?1",
            [id],
            |r| r.get(0),
        )?;
        let mut units = Vec::new();
        let mut unit_ids = HashMap::new();
        {
            let mut stmt =
                conn.prepare("SELECT id, code, name FROM units WHERE project_id = ?1 ORDER BY position")?;
            let mut rows = stmt.query([id])?;
            while let Some(r) = rows.next()? {
                let code: String = r.get(1)?;
                let name: String = r.get(2)?;
                unit_ids.insert(code.clone(), r.get(0)?);
                units.push(Unit::new(code, name).map_err(|e| StoreError::Corrupt(e.to_string()))?);
            }
        }
        let mut targets = Vec::new();
        let mut target_ids = HashMap::new();
        {
            let mut stmt = conn.prepare(
                "SELECT id, name, type, description, range_lower, range_upper, has_categories,
                        is_step_ahead, step_unit, step_count
                 FROM targets WHERE project_id = ?1 ORDER BY position",
            )?;
            let mut cat_stmt =
                conn.prepare("SELECT value FROM target_categories WHERE target_id = ?1 ORDER BY idx")?;
            let mut rows = stmt.query([id])?;
            while let Some(r) = rows.next()? {
                let tid: i64 = r.get(0)?;
                let type_name: String = r.get(2)?;
                let target_type = TargetType::parse(&type_name)
                    .ok_or_else(|| StoreError::Corrupt(format!("bad target type {type_name:?}")))?;
                let dt = target_type.data_type();
                let range = match (r.get_ref(4)?, r.get_ref(5)?) {
                    (ValueRef::Null, ValueRef::Null) => None,
                    (lo, hi) => Some((from_sql(lo, dt)?, from_sql(hi, dt)?)),
                };
                let has_categories: bool = r.get(6)?;
                let categories = if has_categories {
                    let mut cats = Vec::new();
                    let mut crow = cat_stmt.query([tid])?;
                    while let Some(c) = crow.next()? {
                        cats.push(from_sql(c.get_ref(0)?, dt)?);
                    }
                    Some(cats)
                } else {
                    None
                };
                let parts = TargetParts {
                    name: r.get(1)?,
                    target_type,
                    description: r.get(3)?,
                    range,
                    categories,
                    is_step_ahead: r.get(7)?,
                    step_unit: r.get(8)?,
                    step_count: r.get(9)?,
                };
                let def = TargetDefinition::new(parts).map_err(|e| StoreError::Corrupt(e.to_string()))?;
                target_ids.insert(def.name().to_string(), (tid, def.clone()));
                targets.push(def);
            }
        }
        let mut timezeros = Vec::new();
        let mut tz_ids = HashMap::new();
        {
            let mut stmt = conn.prepare(
                "SELECT id, date, data_version_date FROM timezeros WHERE project_id = ?1 ORDER BY position",
            )?;
            let mut rows = stmt.query([id])?;
            while let Some(r) = rows.next()? {
                let date = parse_date_col(&r.get::<_, String>(1)?)?;
                let version: Option<String> = r.get(2)?;
                tz_ids.insert(date, r.get(0)?);
                timezeros.push(match version {
                    Some(v) => TimeZero::with_data_version(date, parse_date_col(&v)?),
                    None => TimeZero::new(date),
                });
            }
        }
        Ok(Catalog {
            config: ProjectConfig {
                name: p.name,
                description: p.description,
                visibility: p.visibility,
                units,
                targets,
                timezeros,
                bin_sum_tolerance: tolerance,
            },
            units: unit_ids,
            targets: target_ids,
            timezeros: tz_ids,
        })
    }

    // ---- models ------------------------------------------------------

    pub fn add_model(&self, project: ProjectId, info: &ModelInfo, owner: Option<UserId>) -> Result<ModelId> {
        let conn = self.conn();
        Self::project_row(&conn, project)?;
        let n = conn.execute(
            "INSERT OR IGNORE INTO models (project_id, name, abbreviation, team, description, owners, owner_id)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)",
            params![
                project,
                info.name,
                info.abbreviation,
                info.team,
                info.description,
                info.owners.join(","),
                owner
            ],
        )?;
        if n == 0 {
            return Err(StoreError::DuplicateModel(info.abbreviation.clone()));
        }
        Ok(conn.last_insert_rowid())
    }

    pub fn models(&self, project: ProjectId) -> Result<Vec<ModelRecord>> {
        let conn = self.conn();
        Self::project_row(&conn, project)?;
        let mut stmt = conn.prepare(
            "SELECT id, project_id, name, abbreviation, team, description, owners, owner_id
             FROM models WHERE project_id = ?1 ORDER BY abbreviation",
        )?;
        let rows = stmt.query_map([project], model_from_row)?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    pub fn model(&self, id: ModelId) -> Result<ModelRecord> {
        self.conn()
            .query_row(
                "SELECT id, project_id, name, abbreviation, team, description, owners, owner_id
                 FROM models WHERE id = ?1",
                [id],
                model_from_row,
            )
            .optional()?
            .ok_or(StoreError::UnknownModel(id))
    }

    pub fn model_by_abbreviation(&self, project: ProjectId, abbreviation: &str) -> Result<Option<ModelRecord>> {
        Ok(self
            .conn()
            .query_row(
                "SELECT id, project_id, name, abbreviation, team, description, owners, owner_id
                 FROM models WHERE project_id = ?1 AND abbreviation = ?2",
                params![project, abbreviation],
                model_from_row,
            )
            .optional()?)
    }

    pub fn delete_model(&self, id: ModelId) -> Result<()> {
        let n = self.conn().execute("DELETE FROM models WHERE id = ?1", [id])?;
        if n == 0 {
            return Err(StoreError::UnknownModel(id));
        }
        Ok(())
    }

    // ---- forecasts ---------------------------------------------------

    /// Stores a validated forecast for (model, time-zero). An existing
    /// forecast for the pair is replaced in the same transaction and its
    /// registration appended to the audit log; its scores are withdrawn.
    pub fn register_forecast(
        &self,
        model: ModelId,
        timezero: NaiveDate,
        source: Option<&str>,
        predictions: &BTreeMap<PredictionKey, Prediction>,
    ) -> Result<StoredForecastKey> {
        let mut conn = self.conn();
        let project: ProjectId = conn
            .query_row("SELECT project_id FROM models WHERE id = ?1", [model], |r| r.get(0))
            .optional()?
            .ok_or(StoreError::UnknownModel(model))?;
        let catalog = Self::catalog(&conn, project)?;
        let tz_id = *catalog
            .timezeros
            .get(&timezero)
            .ok_or(StoreError::UnknownTimezero(timezero))?;
        let tx = conn.transaction()?;
        let issued_at = self.next_issued_at();

        let previous: Option<(ForecastId, String, Option<String>)> = tx
            .query_row(
                "SELECT id, issued_at, source FROM forecasts WHERE model_id = ?1 AND timezero_id = ?2",
                params![model, tz_id],
                |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?)),
            )
            .optional()?;
        let replaced = match previous {
            Some((old_id, old_issued, old_source)) => {
                tx.execute(
                    "INSERT INTO forecast_audit (forecast_id, model_id, timezero, issued_at, superseded_at, source)
                     VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
                    params![old_id, model, date_sql(timezero), old_issued, timestamp_sql(issued_at), old_source],
                )?;
                let seq = tx.last_insert_rowid();
                tx.execute("DELETE FROM forecasts WHERE id = ?1", [old_id])?;
                tx.execute(
                    "DELETE FROM scores WHERE model_id = ?1 AND timezero_id = ?2",
                    params![model, tz_id],
                )?;
                Some(AuditEntry {
                    seq,
                    forecast_id: old_id,
                    model_id: model,
                    timezero,
                    issued_at: parse_timestamp(&old_issued)?,
                    superseded_at: issued_at,
                    source: old_source,
                })
            }
            None => None,
        };

        tx.execute(
            "INSERT INTO forecasts (model_id, timezero_id, issued_at, source) VALUES (?1, ?2, ?3, ?4)",
            params![model, tz_id, timestamp_sql(issued_at), source],
        )?;
        let fid = tx.last_insert_rowid();
        write_elements(&tx, fid, &catalog, predictions)?;
        tx.commit()?;
        Ok(StoredForecastKey {
            forecast_id: fid,
            model_id: model,
            timezero,
            issued_at,
            replaced,
        })
    }

    pub fn forecast(&self, id: ForecastId) -> Result<ForecastRecord> {
        self.conn()
            .query_row(
                "SELECT f.id, f.model_id, m.abbreviation, tz.date, f.issued_at, f.source
                 FROM forecasts f JOIN models m ON m.id = f.model_id
                 JOIN timezeros tz ON tz.id = f.timezero_id WHERE f.id = ?1",
                [id],
                forecast_from_row,
            )
            .optional()?
            .ok_or(StoreError::UnknownForecast(id))?
    }

    /// Forecasts of a project (optionally one model), ordered by model
    /// abbreviation then time-zero.
    pub fn forecasts(&self, project: ProjectId, model: Option<ModelId>) -> Result<Vec<ForecastRecord>> {
        let conn = self.conn();
        Self::project_row(&conn, project)?;
        let mut stmt = conn.prepare(
            "SELECT f.id, f.model_id, m.abbreviation, tz.date, f.issued_at, f.source
             FROM forecasts f JOIN models m ON m.id = f.model_id
             JOIN timezeros tz ON tz.id = f.timezero_id
             WHERE m.project_id = ?1 AND (?2 IS NULL OR m.id = ?2)
             ORDER BY m.abbreviation, tz.date",
        )?;
        let rows = stmt.query_map(params![project, model], forecast_from_row)?;
        rows.map(|r| r?).collect()
    }

    pub fn forecast_project(&self, id: ForecastId) -> Result<ProjectId> {
        self.conn()
            .query_row(
                "SELECT m.project_id FROM forecasts f JOIN models m ON m.id = f.model_id WHERE f.id = ?1",
                [id],
                |r| r.get(0),
            )
            .optional()?
            .ok_or(StoreError::UnknownForecast(id))
    }

    /// Loads a stored forecast with typed predictions.
    pub fn load_forecast(&self, id: ForecastId) -> Result<Forecast> {
        let record = self.forecast(id)?;
        let project = self.forecast_project(id)?;
        let query = ForecastQuery {
            models: vec![record.model.clone()],
            timezeros: vec![record.timezero],
            ..Default::default()
        };
        let mut rows = Vec::new();
        self.query_forecasts(project, &query, |row| {
            rows.push(row);
            Ok(())
        })?;
        let config = self.project_config(project)?;
        let predictions = assemble(&config, rows)?;
        Ok(Forecast {
            model: record.model,
            timezero: record.timezero,
            issued_at: record.issued_at,
            source: record.source,
            predictions,
        })
    }

    /// Loads every forecast of a project, optionally restricted to one model.
    pub fn load_forecasts(&self, project: ProjectId, model: Option<ModelId>) -> Result<Vec<Forecast>> {
        let records = self.forecasts(project, model)?;
        let config = self.project_config(project)?;
        let query = ForecastQuery {
            models: match model {
                Some(m) => vec![self.model(m)?.info.abbreviation],
                None => Vec::new(),
            },
            ..Default::default()
        };
        let mut grouped: BTreeMap<(String, NaiveDate), Vec<QueryRow>> = BTreeMap::new();
        self.query_forecasts(project, &query, |row| {
            grouped
                .entry((row.model.clone(), row.timezero))
                .or_default()
                .push(row);
            Ok(())
        })?;
        records
            .into_iter()
            .map(|r| {
                let rows = grouped.remove(&(r.model.clone(), r.timezero)).unwrap_or_default();
                Ok(Forecast {
                    model: r.model,
                    timezero: r.timezero,
                    issued_at: r.issued_at,
                    source: r.source,
                    predictions: assemble(&config, rows)?,
                })
            })
            .collect()
    }

    /// Superseded registrations of one model, oldest first.
    pub fn audit_log(&self, model: ModelId) -> Result<Vec<AuditEntry>> {
        let conn = self.conn();
        let mut stmt = conn.prepare(
            "SELECT seq, forecast_id, model_id, timezero, issued_at, superseded_at, source
             FROM forecast_audit WHERE model_id = ?1 ORDER BY seq",
        )?;
        let rows = stmt.query_map([model], |r| {
            Ok((
                r.get::<_, i64>(0)?,
                r.get::<_, i64>(1)?,
                r.get::<_, i64>(2)?,
                r.get::<_, String>(3)?,
                r.get::<_, String>(4)?,
                r.get::<_, String>(5)?,
                r.get::<_, Option<String>>(6)?,
            ))
        })?;
        rows.map(|r| {
            let (seq, forecast_id, model_id, tz, issued, superseded, source) = r?;
            Ok(AuditEntry {
                seq,
                forecast_id,
                model_id,
                timezero: parse_date_col(&tz)?,
                issued_at: parse_timestamp(&issued)?,
                superseded_at: parse_timestamp(&superseded)?,
                source,
            })
        })
        .collect()
    }

    /// Streams element rows matching every filter, ordered by model,
    /// time-zero, unit, target, element kind and intra-element index.
    /// Returns the number of rows delivered.
    pub fn query_forecasts(
        &self,
        project: ProjectId,
        query: &ForecastQuery,
        mut sink: impl FnMut(QueryRow) -> Result<()>,
    ) -> Result<usize> {
        let conn = self.conn();
        let catalog = Self::catalog(&conn, project)?;
        let filters = Filters::resolve(&conn, project, &catalog, &query.models, &query.units, &query.targets, &query.timezeros)?;

        let kinds: Vec<ElementKind> = if query.types.is_empty() {
            ElementKind::ALL.to_vec()
        } else {
            query.types.clone()
        };
        let branches: Vec<String> = ElementKind::ALL
            .iter()
            .filter(|k| kinds.contains(k))
            .map(|k| {
                let o = kind_ordinal(*k);
                match k {
                    ElementKind::Point => format!(
                        "SELECT forecast_id, unit_id, target_id, {o} AS kind, NULL AS idx, value AS a, NULL AS b, NULL AS c FROM point_elements"
                    ),
                    ElementKind::Named => format!(
                        "SELECT forecast_id, unit_id, target_id, {o} AS kind, NULL AS idx, family AS a, param1 AS b, param2 AS c FROM named_elements"
                    ),
                    ElementKind::Bin => format!(
                        "SELECT forecast_id, unit_id, target_id, {o} AS kind, idx, cat AS a, prob AS b, NULL AS c FROM bin_elements"
                    ),
                    ElementKind::Sample => format!(
                        "SELECT forecast_id, unit_id, target_id, {o} AS kind, idx, value AS a, NULL AS b, NULL AS c FROM sample_elements"
                    ),
                    ElementKind::Quantile => format!(
                        "SELECT forecast_id, unit_id, target_id, {o} AS kind, idx, value AS a, quantile AS b, NULL AS c FROM quantile_elements"
                    ),
                }
            })
            .collect();
        if branches.is_empty() {
            return Ok(0);
        }
        let mut sql = format!(
            "SELECT m.abbreviation, tz.date, u.code, t.name, e.kind, e.idx, e.a, e.b, e.c
             FROM ({}) e
             JOIN forecasts f ON f.id = e.forecast_id
             JOIN models m ON m.id = f.model_id
             JOIN timezeros tz ON tz.id = f.timezero_id
             JOIN units u ON u.id = e.unit_id
             JOIN targets t ON t.id = e.target_id
             WHERE m.project_id = ?",
            branches.join(" UNION ALL ")
        );
        let mut args: Vec<SqlValue> = vec![SqlValue::Integer(project)];
        filters.append_sql(&mut sql, &mut args, "m.id", "tz.id", "u.id", "t.id");
        sql.push_str(" ORDER BY m.abbreviation, tz.date, u.code, t.name, e.kind, e.idx");

        let mut stmt = conn.prepare(&sql)?;
        let mut rows = stmt.query(params_from_iter(args))?;
        let mut count = 0;
        while let Some(r) = rows.next()? {
            let target: String = r.get(3)?;
            let dt = catalog
                .targets
                .get(&target)
                .map(|(_, d)| d.data_type())
                .ok_or_else(|| StoreError::Corrupt(format!("unknown target {target:?}")))?;
            let class = ElementKind::ALL[r.get::<_, i64>(4)? as usize];
            let mut row = QueryRow {
                model: r.get(0)?,
                timezero: parse_date_col(&r.get::<_, String>(1)?)?,
                unit: r.get(2)?,
                target,
                class,
                index: r.get::<_, Option<i64>>(5)?.map(|i| i as usize),
                value: None,
                cat: None,
                prob: None,
                quantile: None,
                family: None,
                param1: None,
                param2: None,
            };
            match class {
                ElementKind::Point | ElementKind::Sample => {
                    row.value = Some(from_sql(r.get_ref(6)?, dt)?);
                }
                ElementKind::Named => {
                    let f: String = r.get(6)?;
                    row.family = Some(
                        Family::parse(&f).ok_or_else(|| StoreError::Corrupt(format!("bad family {f:?}")))?,
                    );
                    row.param1 = Some(r.get(7)?);
                    row.param2 = r.get(8)?;
                }
                ElementKind::Bin => {
                    row.cat = Some(from_sql(r.get_ref(6)?, dt)?);
                    row.prob = Some(r.get(7)?);
                }
                ElementKind::Quantile => {
                    row.value = Some(from_sql(r.get_ref(6)?, dt)?);
                    row.quantile = Some(r.get(7)?);
                }
            }
            sink(row)?;
            count += 1;
        }
        Ok(count)
    }

    // ---- truth -------------------------------------------------------

    /// Replaces the project's truth. Scores whose observed value changed or
    /// disappeared are withdrawn. Rows must reference known time-zeros,
    /// units and targets.
    pub fn replace_truth(&self, project: ProjectId, truth: &TruthTable) -> Result<usize> {
        let mut conn = self.conn();
        let catalog = Self::catalog(&conn, project)?;
        let old = Self::truth_in(&conn, &catalog)?;
        let tx = conn.transaction()?;
        let tz_list: Vec<i64> = catalog.timezeros.values().copied().collect();
        tx.execute(
            &format!("DELETE FROM truth WHERE timezero_id IN ({})", placeholders(tz_list.len())),
            params_from_iter(&tz_list),
        )?;
        let mut count = 0;
        {
            let mut ins = tx.prepare(
                "INSERT INTO truth (timezero_id, unit_id, target_id, value) VALUES (?1, ?2, ?3, ?4)",
            )?;
            for row in truth.rows() {
                let (tz, unit, target) = catalog.ids(row.timezero, &row.unit, &row.target)?;
                ins.execute(params![tz, unit, target, to_sql(&row.value)])?;
                count += 1;
            }
        }
        {
            let mut del = tx.prepare(
                "DELETE FROM scores WHERE timezero_id = ?1 AND unit_id = ?2 AND target_id = ?3",
            )?;
            for row in old.rows() {
                if truth.get(row.timezero, &row.unit, &row.target) != Some(&row.value) {
                    let (tz, unit, target) = catalog.ids(row.timezero, &row.unit, &row.target)?;
                    del.execute(params![tz, unit, target])?;
                }
            }
        }
        tx.commit()?;
        Ok(count)
    }

    pub fn truth(&self, project: ProjectId) -> Result<TruthTable> {
        let conn = self.conn();
        let catalog = Self::catalog(&conn, project)?;
        Self::truth_in(&conn, &catalog)
    }

    fn truth_in(conn: &Connection, catalog: &Catalog) -> Result<TruthTable> {
        let tz_list: Vec<i64> = catalog.timezeros.values().copied().collect();
        let mut stmt = conn.prepare(&format!(
            "SELECT tz.date, u.code, t.name, tr.value FROM truth tr
             JOIN timezeros tz ON tz.id = tr.timezero_id
             JOIN units u ON u.id = tr.unit_id
             JOIN targets t ON t.id = tr.target_id
             WHERE tr.timezero_id IN ({})",
            placeholders(tz_list.len())
        ))?;
        let mut rows = stmt.query(params_from_iter(&tz_list))?;
        let mut table = TruthTable::new();
        while let Some(r) = rows.next()? {
            let target: String = r.get(2)?;
            let dt = catalog
                .targets
                .get(&target)
                .map(|(_, d)| d.data_type())
                .ok_or_else(|| StoreError::Corrupt(format!("unknown target {target:?}")))?;
            table.insert(TruthRow {
                timezero: parse_date_col(&r.get::<_, String>(0)?)?,
                unit: r.get(1)?,
                target,
                value: from_sql(r.get_ref(3)?, dt)?,
            });
        }
        Ok(table)
    }

    // ---- scores ------------------------------------------------------

    /// Atomically replaces a model's records of the given score kinds.
    pub fn replace_scores(
        &self,
        model: ModelId,
        kinds: &[ScoreKind],
        records: &[ScoreRecord],
    ) -> Result<usize> {
        let mut conn = self.conn();
        let project: ProjectId = conn
            .query_row("SELECT project_id FROM models WHERE id = ?1", [model], |r| r.get(0))
            .optional()?
            .ok_or(StoreError::UnknownModel(model))?;
        let catalog = Self::catalog(&conn, project)?;
        let tx = conn.transaction()?;
        {
            let mut del = tx.prepare("DELETE FROM scores WHERE model_id = ?1 AND kind = ?2")?;
            for k in kinds {
                del.execute(params![model, k.as_str()])?;
            }
            let mut ins = tx.prepare(
                "INSERT OR REPLACE INTO scores (model_id, timezero_id, unit_id, target_id, score, kind, class, value, flag)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9)",
            )?;
            for r in records {
                let (tz, unit, target) = catalog.ids(r.timezero, &r.unit, &r.target)?;
                ins.execute(params![
                    model,
                    tz,
                    unit,
                    target,
                    r.score.to_string(),
                    r.score.kind.as_str(),
                    r.class.as_str(),
                    r.value,
                    r.flag.map(|f| f.as_str())
                ])?;
            }
        }
        tx.commit()?;
        Ok(records.len())
    }

    /// Score records matching every filter, ordered by model, time-zero,
    /// unit, target and score id.
    pub fn query_scores(&self, project: ProjectId, query: &ScoreQuery) -> Result<Vec<ScoreRecord>> {
        let conn = self.conn();
        let catalog = Self::catalog(&conn, project)?;
        let filters = Filters::resolve(&conn, project, &catalog, &query.models, &query.units, &query.targets, &query.timezeros)?;
        let bad: Vec<String> = query
            .scores
            .iter()
            .filter(|s| ScoreId::parse(s).is_none())
            .cloned()
            .collect();
        if !bad.is_empty() {
            return Err(StoreError::UnknownFilter {
                field: "scores",
                values: bad,
            });
        }
        let mut sql = String::from(
            "SELECT m.abbreviation, tz.date, u.code, t.name, s.score, s.class, s.value, s.flag
             FROM scores s
             JOIN models m ON m.id = s.model_id
             JOIN timezeros tz ON tz.id = s.timezero_id
             JOIN units u ON u.id = s.unit_id
             JOIN targets t ON t.id = s.target_id
             WHERE m.project_id = ?",
        );
        let mut args: Vec<SqlValue> = vec![SqlValue::Integer(project)];
        filters.append_sql(&mut sql, &mut args, "m.id", "tz.id", "u.id", "t.id");
        let mut stmt = conn.prepare(&sql)?;
        let mut rows = stmt.query(params_from_iter(args))?;
        let mut out = Vec::new();
        while let Some(r) = rows.next()? {
            let score_text: String = r.get(4)?;
            let score = ScoreId::parse(&score_text)
                .ok_or_else(|| StoreError::Corrupt(format!("bad score id {score_text:?}")))?;
            if !query.scores.is_empty()
                && !query.scores.iter().any(|f| *f == score_text || *f == score.kind.as_str())
            {
                continue;
            }
            let class: String = r.get(5)?;
            let flag: Option<String> = r.get(7)?;
            out.push(ScoreRecord {
                model: r.get(0)?,
                timezero: parse_date_col(&r.get::<_, String>(1)?)?,
                unit: r.get(2)?,
                target: r.get(3)?,
                score,
                class: ElementKind::parse(&class)
                    .ok_or_else(|| StoreError::Corrupt(format!("bad class {class:?}")))?,
                value: r.get(6)?,
                flag: match flag {
                    Some(f) => Some(
                        ScoreFlag::parse(&f).ok_or_else(|| StoreError::Corrupt(format!("bad flag {f:?}")))?,
                    ),
                    None => None,
                },
            });
        }
        out.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        Ok(out)
    }

    /// Row counts of the element tables, for diagnostics and tests.
    pub fn element_row_count(&self) -> Result<usize> {
        let conn = self.conn();
        let mut total = 0i64;
        for table in [
            "point_elements",
            "named_elements",
            "bin_elements",
            "sample_elements",
            "quantile_elements",
        ] {
            total += conn.query_row(&format!("SELECT COUNT(*) FROM {table}"), [], |r| r.get::<_, i64>(0))?;
        }
        Ok(total as usize)
    }
}

impl Catalog {
    fn ids(&self, tz: NaiveDate, unit: &str, target: &str) -> Result<(i64, i64, i64)> {
        let tz_id = *self.timezeros.get(&tz).ok_or(StoreError::UnknownTimezero(tz))?;
        let unit_id = *self.units.get(unit).ok_or_else(|| StoreError::UnknownReference {
            what: "unit",
            name: unit.to_string(),
        })?;
        let target_id = self
            .targets
            .get(target)
            .ok_or_else(|| StoreError::UnknownReference {
                what: "target",
                name: target.to_string(),
            })?
            .0;
        Ok((tz_id, unit_id, target_id))
    }
}

/// Filter values resolved to row ids.
struct Filters {
    models: Vec<i64>,
    timezeros: Vec<i64>,
    units: Vec<i64>,
    targets: Vec<i64>,
}

impl Filters {
    fn resolve(
        conn: &Connection,
        project: ProjectId,
        catalog: &Catalog,
        models: &[String],
        units: &[String],
        targets: &[String],
        timezeros: &[NaiveDate],
    ) -> Result<Self> {
        fn lookup<K: ToString>(
            field: &'static str,
            wanted: &[K],
            find: impl Fn(&K) -> Option<i64>,
        ) -> Result<Vec<i64>> {
            let mut ids = Vec::new();
            let mut missing = Vec::new();
            for w in wanted {
                match find(w) {
                    Some(id) => ids.push(id),
                    None => missing.push(w.to_string()),
                }
            }
            if missing.is_empty() {
                Ok(ids)
            } else {
                Err(StoreError::UnknownFilter {
                    field,
                    values: missing,
                })
            }
        }
        let model_ids = lookup("models", models, |abbr| {
            conn.query_row(
                "SELECT id FROM models WHERE project_id = ?1 AND abbreviation = ?2",
                params![project, abbr],
                |r| r.get(0),
            )
            .ok()
        })?;
        Ok(Filters {
            models: model_ids,
            timezeros: lookup("timezeros", timezeros, |d| catalog.timezeros.get(d).copied())?,
            units: lookup("units", units, |u| catalog.units.get(u).copied())?,
            targets: lookup("targets", targets, |t| catalog.targets.get(t).map(|x| x.0))?,
        })
    }

    fn append_sql(
        &self,
        sql: &mut String,
        args: &mut Vec<SqlValue>,
        model_col: &str,
        tz_col: &str,
        unit_col: &str,
        target_col: &str,
    ) {
        for (col, ids) in [
            (model_col, &self.models),
            (tz_col, &self.timezeros),
            (unit_col, &self.units),
            (target_col, &self.targets),
        ] {
            if !ids.is_empty() {
                sql.push_str(&format!(" AND {col} IN ({})", placeholders(ids.len())));
                args.extend(ids.iter().map(|&i| SqlValue::Integer(i)));
            }
        }
    }
}

fn write_elements(
    tx: &Transaction<'_>,
    fid: ForecastId,
    catalog: &Catalog,
    predictions: &BTreeMap<PredictionKey, Prediction>,
) -> Result<()> {
    let mut point = tx.prepare_cached(
        "INSERT INTO point_elements (forecast_id, unit_id, target_id, value) VALUES (?1, ?2, ?3, ?4)",
    )?;
    let mut named = tx.prepare_cached(
        "INSERT INTO named_elements (forecast_id, unit_id, target_id, family, param1, param2)
         VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
    )?;
    let mut bin = tx.prepare_cached(
        "INSERT INTO bin_elements (forecast_id, unit_id, target_id, idx, cat, prob) VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
    )?;
    let mut sample = tx.prepare_cached(
        "INSERT INTO sample_elements (forecast_id, unit_id, target_id, idx, value) VALUES (?1, ?2, ?3, ?4, ?5)",
    )?;
    let mut quantile = tx.prepare_cached(
        "INSERT INTO quantile_elements (forecast_id, unit_id, target_id, idx, quantile, value)
         VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
    )?;
    for ((unit, target), prediction) in predictions {
        let uid = *catalog.units.get(unit).ok_or_else(|| StoreError::UnknownReference {
            what: "unit",
            name: unit.clone(),
        })?;
        let tid = catalog
            .targets
            .get(target)
            .ok_or_else(|| StoreError::UnknownReference {
                what: "target",
                name: target.clone(),
            })?
            .0;
        for element in prediction.elements() {
            match element {
                PredictionElement::Point(v) => {
                    point.execute(params![fid, uid, tid, to_sql(v)])?;
                }
                PredictionElement::Named(n) => {
                    named.execute(params![fid, uid, tid, n.family().as_str(), n.param1(), n.param2()])?;
                }
                PredictionElement::Bin(b) => {
                    for (i, (c, p)) in b.entries().iter().enumerate() {
                        bin.execute(params![fid, uid, tid, i as i64, to_sql(c), p])?;
                    }
                }
                PredictionElement::Sample(s) => {
                    for (i, v) in s.values().iter().enumerate() {
                        sample.execute(params![fid, uid, tid, i as i64, to_sql(v)])?;
                    }
                }
                PredictionElement::Quantile(q) => {
                    for (i, (l, v)) in q.entries().iter().enumerate() {
                        quantile.execute(params![fid, uid, tid, i as i64, l, to_sql(v)])?;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Rebuilds typed predictions from ordered query rows of one forecast.
fn assemble(config: &ProjectConfig, rows: Vec<QueryRow>) -> Result<BTreeMap<PredictionKey, Prediction>> {
    let corrupt = |e: crate::model::ModelError| StoreError::Corrupt(e.to_string());
    let mut groups: BTreeMap<(PredictionKey, ElementKind), Vec<QueryRow>> = BTreeMap::new();
    for row in rows {
        groups
            .entry(((row.unit.clone(), row.target.clone()), row.class))
            .or_default()
            .push(row);
    }
    let mut out: BTreeMap<PredictionKey, Prediction> = BTreeMap::new();
    for ((key, class), rows) in groups {
        let missing = || StoreError::Corrupt(format!("incomplete {class} rows"));
        let element = match class {
            ElementKind::Point => PredictionElement::Point(rows[0].value.clone().ok_or_else(missing)?),
            ElementKind::Named => PredictionElement::Named(
                NamedDistribution::new(
                    rows[0].family.ok_or_else(missing)?,
                    rows[0].param1.ok_or_else(missing)?,
                    rows[0].param2,
                )
                .map_err(corrupt)?,
            ),
            ElementKind::Bin => {
                // Stored bins passed validation under the project tolerance.
                let entries = rows
                    .iter()
                    .map(|r| Ok((r.cat.clone().ok_or_else(missing)?, r.prob.ok_or_else(missing)?)))
                    .collect::<Result<Vec<_>>>()?;
                PredictionElement::Bin(BinElement::new(entries, config.bin_sum_tolerance).map_err(corrupt)?)
            }
            ElementKind::Sample => PredictionElement::Sample(
                SampleElement::new(rows.iter().map(|r| r.value.clone().ok_or_else(missing)).collect::<Result<_>>()?)
                    .map_err(corrupt)?,
            ),
            ElementKind::Quantile => PredictionElement::Quantile(
                QuantileElement::new(
                    rows.iter()
                        .map(|r| Ok((r.quantile.ok_or_else(missing)?, r.value.clone().ok_or_else(missing)?)))
                        .collect::<Result<_>>()?,
                )
                .map_err(corrupt)?,
            ),
        };
        out.entry(key).or_default().insert(element).map_err(corrupt)?;
    }
    Ok(out)
}

fn project_from_row(r: &rusqlite::Row<'_>) -> rusqlite::Result<Result<ProjectRecord>> {
    let vis: String = r.get(3)?;
    Ok((|| {
        Ok(ProjectRecord {
            id: r.get(0)?,
            name: r.get(1)?,
            description: r.get(2)?,
            visibility: match vis.as_str() {
                "public" => Visibility::Public,
                "private" => Visibility::Private,
                _ => return Err(StoreError::Corrupt(format!("bad visibility {vis:?}"))),
            },
            owner: r.get(4)?,
        })
    })())
}

fn model_from_row(r: &rusqlite::Row<'_>) -> rusqlite::Result<ModelRecord> {
    let owners: String = r.get(6)?;
    Ok(ModelRecord {
        id: r.get(0)?,
        project_id: r.get(1)?,
        info: ModelInfo {
            name: r.get(2)?,
            abbreviation: r.get(3)?,
            team: r.get(4)?,
            description: r.get(5)?,
            owners: owners
                .split(',')
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect(),
        },
        owner: r.get(7)?,
    })
}

fn forecast_from_row(r: &rusqlite::Row<'_>) -> rusqlite::Result<Result<ForecastRecord>> {
    let date: String = r.get(3)?;
    let issued: String = r.get(4)?;
    let id = r.get(0)?;
    let model_id = r.get(1)?;
    let model = r.get(2)?;
    let source = r.get(5)?;
    Ok((|| {
        Ok(ForecastRecord {
            id,
            model_id,
            model,
            timezero: parse_date_col(&date)?,
            issued_at: parse_timestamp(&issued)?,
            source,
        })
    })())
}
