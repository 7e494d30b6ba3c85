//! `farc`: command-line access to a forecast archive, either a local
//! database file (`--db`) or a running server (`--server`).
//!
//! Exit codes: 0 success, 1 usage or other failure, 2-125 number of
//! validation errors, 126 I/O error, 127 server unreachable.

mod backend;
mod convert;
mod error;
mod plot;

use std::fs;
use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};
use farc_core::conversion::PointMethod;
use farc_core::format::{parse_forecast, parse_project_config, project_template, serialize_forecast, serialize_project_config};
use farc_core::model::ModelInfo;
use farc_core::store::{ScoreQuery, Store};
use farc_core::validation::{check_forecast, error_count, validate_forecast};
use farc_core::ProjectConfig;
use farc_server::auth::{hash_password, TokenIssuer, DEFAULT_TOKEN_LIFETIME};
use farc_server::jobs::ExportFormat;
use farc_server::{serve_forever, Service};
use serde_json::{json, Value as Json};

use backend::{finish, Backend, Local, Remote};
use convert::{convert_forecast, Representation};
use error::CliError;

#[derive(Parser)]
#[command(name = "farc", version, about = "Probabilistic forecast archive")]
struct Cli {
    /// Archive database file (local mode).
    #[arg(long, global = true, env = "FARC_DB")]
    db: Option<PathBuf>,
    /// Server base URL, e.g. http://127.0.0.1:8080 (remote mode).
    #[arg(long, global = true, env = "FARC_SERVER")]
    server: Option<String>,
    /// User that local-mode commands act as.
    #[arg(long, global = true, env = "FARC_USER", default_value = "admin")]
    user: String,
    /// Bearer token for remote mode; overrides the token file.
    #[arg(long, global = true, env = "FARC_TOKEN", hide_env_values = true)]
    token: Option<String>,
    /// Where `login` stores the token [default: ~/.farc/token].
    #[arg(long, global = true, env = "FARC_TOKEN_FILE")]
    token_file: Option<PathBuf>,
    /// Print machine-readable JSON.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the HTTP API over the database given by --db.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        #[arg(long, default_value_t = 4)]
        workers: usize,
    },
    #[command(subcommand)]
    Project(ProjectCommand),
    #[command(subcommand)]
    Model(ModelCommand),
    #[command(subcommand)]
    Forecast(ForecastCommand),
    #[command(subcommand)]
    Truth(TruthCommand),
    /// Export forecast data matching the filters.
    Query(QueryArgs),
    #[command(subcommand)]
    Scores(ScoresCommand),
    /// Truth series and step-ahead point forecasts for plotting (local mode).
    PlotData {
        #[arg(long)]
        project: String,
        #[arg(long)]
        unit: String,
        #[arg(long)]
        target_prefix: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert a forecast file to one representation.
    Convert(ConvertArgs),
    #[command(subcommand)]
    User(UserCommand),
    /// Obtain a token from the server and store it in the token file.
    Login {
        username: String,
        #[arg(long, env = "FARC_PASSWORD", hide_env_values = true)]
        password: String,
    },
}

#[derive(Subcommand)]
enum ProjectCommand {
    /// Create a project from a configuration file.
    Create { config: PathBuf },
    /// Print an example configuration.
    Template,
    List,
    Show { project: String },
}

#[derive(Subcommand)]
enum ModelCommand {
    /// Add a model; NAME doubles as the abbreviation unless one is given.
    Add {
        #[arg(long)]
        project: String,
        name: String,
        #[arg(long)]
        abbreviation: Option<String>,
        #[arg(long, default_value = "")]
        team: String,
        #[arg(long, default_value = "")]
        description: String,
    },
    List {
        #[arg(long)]
        project: String,
    },
}

#[derive(Subcommand)]
enum ForecastCommand {
    /// Upload a forecast JSON file for one time-zero.
    Upload {
        /// Model id, or abbreviation together with --project.
        #[arg(long)]
        model: String,
        #[arg(long)]
        project: Option<String>,
        #[arg(long)]
        timezero: NaiveDate,
        file: PathBuf,
    },
    /// Check a forecast file without uploading it. Exit code = error count.
    Validate {
        #[arg(long, required_unless_present = "config")]
        project: Option<String>,
        /// Project configuration file, for fully offline checks.
        #[arg(long, conflicts_with = "project")]
        config: Option<PathBuf>,
        file: PathBuf,
    },
}

#[derive(Subcommand)]
enum TruthCommand {
    /// Upload truth CSV (timezero,unit,target,value).
    Upload {
        #[arg(long)]
        project: String,
        file: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for ExportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ExportFormat::Csv,
            Format::Json => ExportFormat::Json,
        }
    }
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    project: String,
    #[arg(long, value_delimiter = ',')]
    models: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    units: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    targets: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    timezeros: Vec<NaiveDate>,
    #[arg(long, value_delimiter = ',')]
    types: Vec<String>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ScoresCommand {
    Download {
        #[arg(long)]
        project: String,
        #[arg(long, value_delimiter = ',')]
        models: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        units: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        targets: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        timezeros: Vec<NaiveDate>,
        /// Score ids or kinds, e.g. crps,interval_score_0.1.
        #[arg(long, value_delimiter = ',')]
        scores: Vec<String>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Point,
    Bin,
    Sample,
    Quantile,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long, value_enum)]
    to: Target,
    #[arg(long, required_unless_present = "config")]
    project: Option<String>,
    #[arg(long, conflicts_with = "project")]
    config: Option<PathBuf>,
    /// Point summary: median or mean.
    #[arg(long, default_value = "median")]
    method: String,
    #[arg(long, default_value_t = 1000)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "0.025,0.1,0.25,0.5,0.75,0.9,0.975")]
    levels: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    file: PathBuf,
}

#[derive(Subcommand)]
enum UserCommand {
    /// Create a user in the database given by --db.
    Add {
        username: String,
        #[arg(long, env = "FARC_PASSWORD", hide_env_values = true)]
        password: String,
        #[arg(long)]
        admin: bool,
    },
}

/// What a command produced: a report, or raw bytes for stdout.
enum Output {
    Report { text: String, json: Json },
    Raw(Vec<u8>),
}

fn report(text: impl Into<String>, json: Json) -> Output {
    Output::Report { text: text.into(), json }
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

fn write_out(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Writes to `out` when given, else returns the bytes for stdout.
fn deliver(out: Option<&Path>, bytes: Vec<u8>, what: &str, rows: Option<usize>) -> Result<Output, CliError> {
    match out {
        Some(path) => {
            write_out(path, &bytes)?;
            let text = match rows {
                Some(n) => format!("wrote {n} {what} to {}", path.display()),
                None => format!("wrote {what} to {}", path.display()),
            };
            Ok(report(text, json!({"path": path, "rows": rows, "bytes": bytes.len()})))
        }
        None => Ok(Output::Raw(bytes)),
    }
}

impl Cli {
    fn token_path(&self) -> Option<PathBuf> {
        self.token_file
            .clone()
            .or_else(|| std::env::var_os("HOME").map(|h| PathBuf::from(h).join(".farc").join("token")))
    }

    fn backend(&self) -> Result<Box<dyn Backend>, CliError> {
        match (&self.db, &self.server) {
            (Some(_), Some(_)) => Err(CliError::Usage("give either --db or --server, not both".into())),
            (Some(db), None) => Ok(Box::new(Local::open(db, &self.user)?)),
            (None, Some(url)) => {
                let token = match &self.token {
                    Some(t) => Some(t.clone()),
                    None => self
                        .token_path()
                        .and_then(|p| fs::read_to_string(p).ok())
                        .map(|t| t.trim().to_string())
                        .filter(|t| !t.is_empty()),
                };
                Ok(Box::new(Remote::new(url, token)?))
            }
            (None, None) => Err(CliError::Usage(
                "no archive: give --db PATH (or FARC_DB) or --server URL (or FARC_SERVER)".into(),
            )),
        }
    }

    fn local_db(&self, command: &str) -> Result<&Path, CliError> {
        match (&self.db, &self.server) {
            (Some(db), None) => Ok(db),
            _ => Err(CliError::Usage(format!("`{command}` works on a database file; give --db PATH"))),
        }
    }
}

fn resolve_project(backend: &dyn Backend, project: &str) -> Result<i64, CliError> {
    if let Ok(id) = project.parse() {
        return Ok(id);
    }
    backend
        .projects()?
        .iter()
        .find(|p| p["name"] == project)
        .and_then(|p| p["id"].as_i64())
        .ok_or_else(|| CliError::Failed(format!("no visible project named {project:?}")))
}

fn resolve_model(backend: &dyn Backend, model: &str, project: Option<&str>) -> Result<i64, CliError> {
    if let Ok(id) = model.parse() {
        return Ok(id);
    }
    let project = project.ok_or_else(|| CliError::Usage("a model abbreviation needs --project".into()))?;
    let project = resolve_project(backend, project)?;
    backend
        .models(project)?
        .iter()
        .find(|m| m["abbreviation"] == model)
        .and_then(|m| m["id"].as_i64())
        .ok_or_else(|| CliError::Failed(format!("no model {model:?} in project {project}")))
}

fn project_config(backend: &dyn Backend, project: &str) -> Result<ProjectConfig, CliError> {
    let id = resolve_project(backend, project)?;
    let view = backend.project(id)?;
    let bytes = serde_json::to_vec(&view["config"]).expect("JSON serialises");
    parse_project_config(&bytes).map_err(|e| CliError::Failed(format!("project {id} configuration: {e}")))
}

/// Configuration from `--config FILE`, else from the archive.
fn config_from(cli: &Cli, config: Option<&Path>, project: Option<&str>) -> Result<ProjectConfig, CliError> {
    match (config, project) {
        (Some(path), _) => {
            let bytes = read(path)?;
            parse_project_config(&bytes).map_err(|e| {
                CliError::rejected(
                    format!("{}: invalid configuration", path.display()),
                    json!({ "diagnostics": e.diagnostics }),
                )
            })
        }
        (None, Some(project)) => project_config(cli.backend()?.as_ref(), project),
        (None, None) => Err(CliError::Usage("give --project or --config".into())),
    }
}

fn run(cli: &Cli) -> Result<Output, CliError> {
    match &cli.command {
        Command::Serve { port, host, workers } => {
            let db = cli.local_db("serve")?;
            let store = Store::open(db).map_err(|e| CliError::Failed(format!("{}: {e}", db.display())))?;
            let tokens = match std::env::var("FARC_SECRET") {
                Ok(secret) if !secret.is_empty() => TokenIssuer::new(secret.as_bytes(), DEFAULT_TOKEN_LIFETIME),
                _ => TokenIssuer::ephemeral(DEFAULT_TOKEN_LIFETIME),
            };
            let svc = Service::new(Arc::new(store), tokens);
            svc.start(*workers);
            serve_forever(svc, SocketAddr::new(*host, *port)).map_err(|e| CliError::Failed(format!("serve: {e}")))?;
            Ok(report("server stopped", json!({"stopped": true})))
        }

        Command::Project(ProjectCommand::Template) => {
            Ok(Output::Raw(serialize_project_config(&project_template())))
        }
        Command::Project(ProjectCommand::Create { config }) => {
            let bytes = read(config)?;
            let view = cli.backend()?.create_project(&bytes)?;
            Ok(report(format!("created project {} ({})", view["id"], view["name"].as_str().unwrap_or("")), view))
        }
        Command::Project(ProjectCommand::List) => {
            let projects = cli.backend()?.projects()?;
            let text = projects
                .iter()
                .map(|p| format!("{}\t{}\t{}", p["id"], p["name"].as_str().unwrap_or(""), p["visibility"].as_str().unwrap_or("")))
                .collect::<Vec<_>>()
                .join("\n");
            Ok(report(text, Json::Array(projects)))
        }
        Command::Project(ProjectCommand::Show { project }) => {
            let backend = cli.backend()?;
            let view = backend.project(resolve_project(backend.as_ref(), project)?)?;
            Ok(report(serde_json::to_string_pretty(&view).expect("JSON serialises"), view))
        }

        Command::Model(ModelCommand::Add { project, name, abbreviation, team, description }) => {
            let backend = cli.backend()?;
            let project = resolve_project(backend.as_ref(), project)?;
            let info = ModelInfo {
                name: name.clone(),
                abbreviation: abbreviation.clone().unwrap_or_else(|| name.clone()),
                team: team.clone(),
                description: description.clone(),
                owners: Vec::new(),
            };
            let model = backend.add_model(project, &info)?;
            Ok(report(format!("added model {} ({})", model["id"], info.abbreviation), model))
        }
        Command::Model(ModelCommand::List { project }) => {
            let backend = cli.backend()?;
            let models = backend.models(resolve_project(backend.as_ref(), project)?)?;
            let text = models
                .iter()
                .map(|m| format!("{}\t{}\t{}", m["id"], m["abbreviation"].as_str().unwrap_or(""), m["name"].as_str().unwrap_or("")))
                .collect::<Vec<_>>()
                .join("\n");
            Ok(report(text, Json::Array(models)))
        }

        Command::Forecast(ForecastCommand::Upload { model, project, timezero, file }) => {
            let bytes = read(file)?;
            let forecast: Json = serde_json::from_slice(&bytes).map_err(|e| {
                CliError::rejected(
                    format!("{}: not JSON", file.display()),
                    json!({"diagnostics": [{"code": "malformed-json", "location": format!("line {}, column {}", e.line(), e.column()), "message": e.to_string()}]}),
                )
            })?;
            let source = file.file_name().map(|n| n.to_string_lossy().into_owned());
            let envelope = json!({"timezero": timezero, "source": source, "forecast": forecast});
            let backend = cli.backend()?;
            let model = resolve_model(backend.as_ref(), model, project.as_deref())?;
            let job = backend.submit_forecast(model, &serde_json::to_vec(&envelope).expect("JSON serialises"))?;
            let done = finish(backend.as_ref(), &job)?;
            let result = &done["result"];
            let mut text = format!(
                "stored forecast {} for {} (issued {})",
                result["forecast_id"], timezero, result["issued_at"].as_str().unwrap_or("?")
            );
            if let Some(n) = result["warnings"].as_array().map(Vec::len).filter(|n| *n > 0) {
                text.push_str(&format!("; {n} warning(s)"));
            }
            Ok(report(text, done))
        }
        Command::Forecast(ForecastCommand::Validate { project, config, file }) => {
            let config = config_from(cli, config.as_deref(), project.as_deref())?;
            let bytes = read(file)?;
            let doc = parse_forecast(&bytes).map_err(|e| {
                CliError::rejected(format!("{}: unreadable forecast", file.display()), json!({ "diagnostics": e.diagnostics }))
            })?;
            let violations = validate_forecast(&doc, &config);
            let errors = error_count(&violations);
            let detail = json!({ "violations": violations });
            if errors > 0 {
                return Err(CliError::rejected(
                    format!("{}: {errors} error(s), {} warning(s)", file.display(), violations.len() - errors),
                    detail,
                ));
            }
            let mut text = format!("{}: valid ({} record(s))", file.display(), doc.len());
            for v in &violations {
                text.push_str(&format!("\n  {v}"));
            }
            Ok(report(text, json!({"errors": 0, "violations": violations})))
        }

        Command::Truth(TruthCommand::Upload { project, file }) => {
            let bytes = read(file)?;
            let backend = cli.backend()?;
            let project = resolve_project(backend.as_ref(), project)?;
            let job = backend.submit_truth(project, bytes)?;
            let done = finish(backend.as_ref(), &job)?;
            let result = &done["result"];
            Ok(report(
                format!(
                    "stored {} truth row(s); {} skipped; {} scoring job(s)",
                    result["rows"],
                    result["skipped"].as_array().map_or(0, Vec::len),
                    result["scoring_jobs"].as_array().map_or(0, Vec::len)
                ),
                done,
            ))
        }

        Command::Query(q) => {
            let filters = json!({
                "models": q.models, "units": q.units, "targets": q.targets,
                "timezeros": q.timezeros, "types": q.types,
            });
            let backend = cli.backend()?;
            let project = resolve_project(backend.as_ref(), &q.project)?;
            let job = backend.submit_query(project, &serde_json::to_vec(&filters).expect("JSON serialises"), q.format.into())?;
            let done = finish(backend.as_ref(), &job)?;
            let bytes = backend.job_file(done["id"].as_u64().unwrap_or_default())?;
            deliver(q.out.as_deref(), bytes, "rows", done["result"]["rows"].as_u64().map(|n| n as usize))
        }

        Command::Scores(ScoresCommand::Download { project, models, units, targets, timezeros, scores, format, out }) => {
            let backend = cli.backend()?;
            let project = resolve_project(backend.as_ref(), project)?;
            let query = ScoreQuery {
                models: models.clone(),
                units: units.clone(),
                targets: targets.clone(),
                timezeros: timezeros.clone(),
                scores: scores.clone(),
            };
            let bytes = backend.scores(project, &query, (*format).into())?;
            let rows = match format {
                Format::Csv => bytes.iter().filter(|&&b| b == b'\n').count().saturating_sub(1),
                Format::Json => serde_json::from_slice::<Vec<Json>>(&bytes).map_or(0, |v| v.len()),
            };
            deliver(out.as_deref(), bytes, "score records", Some(rows))
        }

        Command::PlotData { project, unit, target_prefix, out } => {
            cli.local_db("plot-data")?;
            let backend = cli.backend()?;
            let local = backend.local().expect("local mode");
            let project = resolve_project(backend.as_ref(), project)?;
            // Access check through the service before reading the store.
            backend.project(project)?;
            let store = local.service().store();
            let failed = |e: farc_core::store::StoreError| CliError::Failed(e.to_string());
            let config = store.project_config(project).map_err(failed)?;
            let truth = store.truth(project).map_err(failed)?;
            let forecasts = store.load_forecasts(project, None).map_err(failed)?;
            let data = plot::plot_data(&config, &truth, &forecasts, unit, target_prefix).map_err(CliError::Failed)?;
            let bytes = serde_json::to_vec_pretty(&data).expect("JSON serialises");
            deliver(out.as_deref(), bytes, "plot data", None)
        }

        Command::Convert(c) => {
            let config = config_from(cli, c.config.as_deref(), c.project.as_deref())?;
            let to = match c.to {
                Target::Point => Representation::Point(
                    PointMethod::parse(&c.method)
                        .ok_or_else(|| CliError::Usage(format!("unknown point method {:?}", c.method)))?,
                ),
                Target::Bin => Representation::Bin,
                Target::Sample => Representation::Sample { draws: c.draws, seed: c.seed },
                Target::Quantile => Representation::Quantile(c.levels.clone()),
            };
            let bytes = read(&c.file)?;
            let doc = parse_forecast(&bytes).map_err(|e| {
                CliError::rejected(format!("{}: unreadable forecast", c.file.display()), json!({ "diagnostics": e.diagnostics }))
            })?;
            let validated = check_forecast(&doc, &config).map_err(|violations| {
                CliError::rejected(format!("{}: invalid forecast", c.file.display()), json!({ "violations": violations }))
            })?;
            let (converted, skipped) = convert_forecast(&validated.predictions, &config, &to);
            for (unit, target, reason) in &skipped {
                eprintln!("skipped {unit} / {target}: {reason}");
            }
            deliver(c.out.as_deref(), serialize_forecast(&converted), "records", Some(converted.len()))
        }

        Command::User(UserCommand::Add { username, password, admin }) => {
            let db = cli.local_db("user add")?;
            let store = Store::open(db).map_err(|e| CliError::Failed(format!("{}: {e}", db.display())))?;
            let id = store
                .create_user(username, &hash_password(password), *admin)
                .map_err(|e| CliError::Failed(e.to_string()))?;
            Ok(report(format!("created user {username} ({id})"), json!({"id": id, "username": username, "is_admin": admin})))
        }

        Command::Login { username, password } => {
            let url = match (&cli.server, &cli.db) {
                (Some(url), None) => url,
                _ => return Err(CliError::Usage("`login` needs --server URL".into())),
            };
            let grant = Remote::new(url, None)?.login(username, password)?;
            let token = grant["token"].as_str().ok_or_else(|| CliError::Failed("no token in response".into()))?;
            let path = cli
                .token_path()
                .ok_or_else(|| CliError::Usage("no token file: set --token-file or HOME".into()))?;
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            }
            write_out(&path, token.as_bytes())?;
            Ok(report(
                format!("logged in as {username}; token saved to {}", path.display()),
                json!({"token_file": path, "expires_at": grant["expires_at"]}),
            ))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let outcome = run(&cli);
    let mut stdout = std::io::stdout().lock();
    match outcome {
        Ok(Output::Raw(bytes)) => {
            let _ = stdout.write_all(&bytes);
            ExitCode::SUCCESS
        }
        Ok(Output::Report { text, json }) => {
            let _ = if cli.json {
                writeln!(stdout, "{}", serde_json::to_string_pretty(&json).expect("JSON serialises"))
            } else if text.is_empty() {
                Ok(())
            } else {
                writeln!(stdout, "{text}")
            };
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = e.exit_code();
            if cli.json {
                let mut body = json!({"message": e.to_string(), "exit_code": code});
                if let CliError::Rejected { errors, detail, .. } = &e {
                    body["errors"] = json!(errors);
                    body["detail"] = detail.clone();
                }
                let _ = writeln!(stdout, "{}", json!({ "error": body }));
            } else {
                eprintln!("farc: {e}");
            }
            ExitCode::from(code)
        }
    }
}
