//! Network service for the forecast archive: bearer-token authentication,
//! a background job queue for uploads, queries and scoring, and the HTTP
//! routes under `/api`.

pub mod auth;
pub mod http;
pub mod jobs;
pub mod service;

pub use http::{router, serve_forever, spawn, RunningServer};
pub use jobs::{JobKind, JobQueue, JobStatus, JobView};
pub use service::{Service, ServiceError};
