//! Background job queue.
//!
//! Jobs run on a fixed pool of worker threads. Jobs of one project run one
//! at a time in submission order; different projects proceed in parallel.
//! A scoring job submitted while an identical one is still queued
//! coalesces into the queued job.

use std::collections::{HashMap, HashSet, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread;

use chrono::{DateTime, Utc};
use farc_core::format::UploadEnvelope;
use farc_core::store::{ForecastQuery, ModelId, ProjectId, UserId};
use farc_core::ScoreKind;
use serde::Serialize;

pub type JobId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    UploadForecast,
    UploadTruth,
    ForecastQuery,
    ScoreBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Success,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Success | JobStatus::Failed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    #[default]
    Csv,
    Json,
}

/// Work carried by a job.
#[derive(Debug, Clone)]
pub enum JobTask {
    UploadForecast {
        project: ProjectId,
        model: ModelId,
        envelope: UploadEnvelope,
    },
    UploadTruth {
        project: ProjectId,
        csv: Vec<u8>,
    },
    ForecastQuery {
        project: ProjectId,
        query: ForecastQuery,
        format: ExportFormat,
    },
    ScoreBatch {
        project: ProjectId,
        model: ModelId,
        kind: ScoreKind,
    },
}

impl JobTask {
    pub fn kind(&self) -> JobKind {
        match self {
            JobTask::UploadForecast { .. } => JobKind::UploadForecast,
            JobTask::UploadTruth { .. } => JobKind::UploadTruth,
            JobTask::ForecastQuery { .. } => JobKind::ForecastQuery,
            JobTask::ScoreBatch { .. } => JobKind::ScoreBatch,
        }
    }

    pub fn project(&self) -> ProjectId {
        match self {
            JobTask::UploadForecast { project, .. }
            | JobTask::UploadTruth { project, .. }
            | JobTask::ForecastQuery { project, .. }
            | JobTask::ScoreBatch { project, .. } => *project,
        }
    }

    fn coalesce_key(&self) -> Option<(ModelId, ScoreKind)> {
        match self {
            JobTask::ScoreBatch { model, kind, .. } => Some((*model, *kind)),
            _ => None,
        }
    }
}

/// A downloadable job result.
#[derive(Debug, Clone, PartialEq)]
pub struct JobFile {
    pub content_type: &'static str,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct JobOutput {
    pub summary: serde_json::Value,
    pub file: Option<JobFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JobFailure {
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<serde_json::Value>,
}

impl JobFailure {
    pub fn new(message: impl Into<String>) -> Self {
        JobFailure {
            message: message.into(),
            detail: None,
        }
    }
}

/// Public view of a job.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JobView {
    pub id: JobId,
    pub kind: JobKind,
    pub project_id: ProjectId,
    pub status: JobStatus,
    pub submitted_by: Option<UserId>,
    pub submitted_at: DateTime<Utc>,
    pub started_at: Option<DateTime<Utc>>,
    pub finished_at: Option<DateTime<Utc>>,
    pub result: Option<serde_json::Value>,
    pub error: Option<JobFailure>,
    /// Where the result file can be fetched, when there is one.
    pub result_url: Option<String>,
}

pub trait Executor: Send + Sync + 'static {
    fn execute(&self, queue: &JobQueue, task: JobTask) -> Result<JobOutput, JobFailure>;
}

struct Entry {
    view: JobView,
    task: Option<JobTask>,
    coalesce_key: Option<(ModelId, ScoreKind)>,
    file: Option<Arc<JobFile>>,
}

#[derive(Default)]
struct State {
    jobs: HashMap<JobId, Entry>,
    pending: VecDeque<JobId>,
    busy_projects: HashSet<ProjectId>,
    running: usize,
    next_id: JobId,
    stopping: bool,
}

#[derive(Default)]
struct Inner {
    state: Mutex<State>,
    work: Condvar,
    idle: Condvar,
}

#[derive(Clone, Default)]
pub struct JobQueue {
    inner: Arc<Inner>,
}

impl JobQueue {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.inner.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Spawns `workers` threads (at least one) that run jobs with `executor`.
    pub fn start(&self, workers: usize, executor: Arc<dyn Executor>) {
        for i in 0..workers.max(1) {
            let queue = self.clone();
            let executor = Arc::clone(&executor);
            thread::Builder::new()
                .name(format!("job-worker-{i}"))
                .spawn(move || queue.work_loop(executor.as_ref()))
                .expect("spawn job worker");
        }
    }

    /// Stops workers once their current job finishes.
    pub fn shutdown(&self) {
        self.lock().stopping = true;
        self.inner.work.notify_all();
    }

    /// Queues a task. Returns the new job id, or the id of an identical
    /// scoring job that is still queued.
    pub fn submit(&self, task: JobTask, by: Option<UserId>) -> JobId {
        let mut st = self.lock();
        let key = task.coalesce_key();
        let project = task.project();
        if key.is_some() {
            let existing = st.pending.iter().copied().find(|id| {
                let e = &st.jobs[id];
                e.coalesce_key == key && e.view.project_id == project
            });
            if let Some(id) = existing {
                return id;
            }
        }
        st.next_id += 1;
        let id = st.next_id;
        let view = JobView {
            id,
            kind: task.kind(),
            project_id: project,
            status: JobStatus::Queued,
            submitted_by: by,
            submitted_at: Utc::now(),
            started_at: None,
            finished_at: None,
            result: None,
            error: None,
            result_url: None,
        };
        st.jobs.insert(
            id,
            Entry {
                view,
                task: Some(task),
                coalesce_key: key,
                file: None,
            },
        );
        st.pending.push_back(id);
        drop(st);
        self.inner.work.notify_one();
        id
    }

    pub fn get(&self, id: JobId) -> Option<JobView> {
        self.lock().jobs.get(&id).map(|e| e.view.clone())
    }

    pub fn file(&self, id: JobId) -> Option<Arc<JobFile>> {
        self.lock().jobs.get(&id).and_then(|e| e.file.clone())
    }

    /// Jobs submitted so far, oldest first.
    pub fn jobs(&self) -> Vec<JobView> {
        let st = self.lock();
        let mut v: Vec<JobView> = st.jobs.values().map(|e| e.view.clone()).collect();
        v.sort_by_key(|j| j.id);
        v
    }

    /// Blocks until no job is queued or running.
    pub fn drain(&self) {
        let mut st = self.lock();
        while !(st.pending.is_empty() && st.running == 0) {
            st = self.inner.idle.wait(st).unwrap_or_else(|e| e.into_inner());
        }
    }

    /// Blocks until job `id` is terminal.
    pub fn wait(&self, id: JobId) -> Option<JobView> {
        let mut st = self.lock();
        loop {
            let view = st.jobs.get(&id)?.view.clone();
            if view.status.is_terminal() {
                return Some(view);
            }
            st = self.inner.idle.wait(st).unwrap_or_else(|e| e.into_inner());
        }
    }

    fn next_job(&self) -> Option<(JobId, JobTask)> {
        let mut st = self.lock();
        loop {
            if st.stopping {
                return None;
            }
            let pos = st
                .pending
                .iter()
                .position(|id| !st.busy_projects.contains(&st.jobs[id].view.project_id));
            if let Some(pos) = pos {
                let id = st.pending.remove(pos).expect("position is in range");
                st.running += 1;
                let entry = st.jobs.get_mut(&id).expect("pending job exists");
                entry.view.status = JobStatus::Running;
                entry.view.started_at = Some(Utc::now());
                let project = entry.view.project_id;
                let task = entry.task.take().expect("queued job has a task");
                st.busy_projects.insert(project);
                return Some((id, task));
            }
            st = self.inner.work.wait(st).unwrap_or_else(|e| e.into_inner());
        }
    }

    fn work_loop(&self, executor: &dyn Executor) {
        while let Some((id, task)) = self.next_job() {
            let outcome = catch_unwind(AssertUnwindSafe(|| executor.execute(self, task)))
                .unwrap_or_else(|_| Err(JobFailure::new("job panicked")));
            let mut st = self.lock();
            let entry = st.jobs.get_mut(&id).expect("running job exists");
            entry.view.finished_at = Some(Utc::now());
            match outcome {
                Ok(out) => {
                    entry.view.status = JobStatus::Success;
                    entry.view.result = Some(out.summary);
                    if let Some(file) = out.file {
                        entry.view.result_url = Some(format!("/api/jobs/{id}?download=true"));
                        entry.file = Some(Arc::new(file));
                    }
                }
                Err(failure) => {
                    entry.view.status = JobStatus::Failed;
                    entry.view.error = Some(failure);
                }
            }
            let project = entry.view.project_id;
            st.busy_projects.remove(&project);
            st.running -= 1;
            drop(st);
            self.inner.work.notify_all();
            self.inner.idle.notify_all();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::time::Duration;

    struct Recorder {
        log: Mutex<Vec<(ProjectId, ScoreKind)>>,
        active: AtomicUsize,
        overlap: AtomicUsize,
    }

    impl Executor for Recorder {
        fn execute(&self, _: &JobQueue, task: JobTask) -> Result<JobOutput, JobFailure> {
            let JobTask::ScoreBatch { project, kind, .. } = task else {
                return Err(JobFailure::new("unexpected"));
            };
            if self.active.fetch_add(1, Ordering::SeqCst) > 0 {
                self.overlap.fetch_add(1, Ordering::SeqCst);
            }
            thread::sleep(Duration::from_millis(2));
            self.log.lock().unwrap().push((project, kind));
            self.active.fetch_sub(1, Ordering::SeqCst);
            Ok(JobOutput {
                summary: serde_json::json!({}),
                file: None,
            })
        }
    }

    fn score(project: ProjectId, model: ModelId, kind: ScoreKind) -> JobTask {
        JobTask::ScoreBatch { project, model, kind }
    }

    #[test]
    fn coalesces_identical_pending_jobs_and_keeps_fifo() {
        let queue = JobQueue::new();
        let a = queue.submit(score(1, 1, ScoreKind::Crps), None);
        let b = queue.submit(score(1, 1, ScoreKind::Crps), None);
        let c = queue.submit(score(1, 2, ScoreKind::Crps), None);
        let d = queue.submit(score(1, 1, ScoreKind::Pit), None);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let recorder = Arc::new(Recorder {
            log: Mutex::new(vec![]),
            active: AtomicUsize::new(0),
            overlap: AtomicUsize::new(0),
        });
        queue.start(4, recorder.clone());
        queue.drain();
        assert_eq!(
            *recorder.log.lock().unwrap(),
            vec![(1, ScoreKind::Crps), (1, ScoreKind::Crps), (1, ScoreKind::Pit)]
        );
        // Single project: never two jobs at once.
        assert_eq!(recorder.overlap.load(Ordering::SeqCst), 0);
        for id in [a, c, d] {
            assert_eq!(queue.get(id).unwrap().status, JobStatus::Success);
        }
        queue.shutdown();
    }
}
