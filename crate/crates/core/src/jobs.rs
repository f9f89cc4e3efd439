//! Long-running phase jobs: status, progress, message log and cancellation.

use std::collections::HashMap;
use std::future::Future;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tokio::sync::{watch, Semaphore};
use uuid::Uuid;

use crate::phase::Phase;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Completed,
    CompletedWithErrors,
    Failed,
    Cancelled,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        !matches!(self, JobStatus::Queued | JobStatus::Running)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogLevel {
    Info,
    Warn,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobMessage {
    pub at: DateTime<Utc>,
    pub level: LogLevel,
    pub message: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub done: u64,
    pub total: u64,
}

/// Point-in-time view of a job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub job_id: Uuid,
    pub project: String,
    pub phase: Phase,
    pub status: JobStatus,
    pub progress: Progress,
    pub messages: Vec<JobMessage>,
    pub created_at: DateTime<Utc>,
    pub started_at: Option<DateTime<Utc>>,
    pub ended_at: Option<DateTime<Utc>>,
    /// Phase-specific summary set when the job finishes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum JobError {
    #[error("a {phase} job is already running for project `{project}`")]
    Conflict { project: String, phase: Phase, running: Uuid },
    #[error("unknown job {0}")]
    UnknownJob(Uuid),
    #[error("job {0} already finished")]
    AlreadyTerminal(Uuid),
}

struct JobShared {
    state: Mutex<Job>,
    cancel: AtomicBool,
    errors: AtomicUsize,
    terminal: watch::Sender<bool>,
}

/// Handle a running pipeline uses to report progress and observe
/// cancellation. A detached context belongs to no manager and is handy for
/// calling pipelines directly.
#[derive(Clone)]
pub struct RunContext {
    shared: Arc<JobShared>,
}

impl std::fmt::Debug for RunContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RunContext").field("job_id", &self.job_id()).finish()
    }
}

/// Returned by pipelines that stopped because of a cancel request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("job cancelled")]
pub struct Cancelled;

impl RunContext {
    pub fn detached(project: impl Into<String>, phase: Phase) -> Self {
        let (terminal, _) = watch::channel(false);
        Self {
            shared: Arc::new(JobShared {
                state: Mutex::new(Job {
                    job_id: Uuid::new_v4(),
                    project: project.into(),
                    phase,
                    status: JobStatus::Running,
                    progress: Progress::default(),
                    messages: Vec::new(),
                    created_at: Utc::now(),
                    started_at: Some(Utc::now()),
                    ended_at: None,
                    result: None,
                }),
                cancel: AtomicBool::new(false),
                errors: AtomicUsize::new(0),
                terminal,
            }),
        }
    }

    pub fn job_id(&self) -> Uuid {
        self.shared.state.lock().unwrap().job_id
    }

    pub fn log(&self, level: LogLevel, message: impl Into<String>) {
        let message = message.into();
        match level {
            LogLevel::Info => tracing::info!(job = %self.job_id(), "{message}"),
            LogLevel::Warn => tracing::warn!(job = %self.job_id(), "{message}"),
            LogLevel::Error => {
                self.shared.errors.fetch_add(1, Ordering::SeqCst);
                tracing::error!(job = %self.job_id(), "{message}")
            }
        }
        self.shared.state.lock().unwrap().messages.push(JobMessage {
            at: Utc::now(),
            level,
            message,
        });
    }

    pub fn info(&self, message: impl Into<String>) {
        self.log(LogLevel::Info, message)
    }

    pub fn warn(&self, message: impl Into<String>) {
        self.log(LogLevel::Warn, message)
    }

    /// Records an item-level failure; a job with any such entry finishes as
    /// `completed_with_errors`.
    pub fn error(&self, message: impl Into<String>) {
        self.log(LogLevel::Error, message)
    }

    pub fn error_count(&self) -> usize {
        self.shared.errors.load(Ordering::SeqCst)
    }

    pub fn set_total(&self, total: u64) {
        let mut job = self.shared.state.lock().unwrap();
        job.progress.total = total.max(job.progress.done);
    }

    /// Moves progress forward; never backwards.
    pub fn set_done(&self, done: u64) {
        let mut job = self.shared.state.lock().unwrap();
        let done = done.min(job.progress.total).max(job.progress.done);
        job.progress.done = done;
    }

    pub fn advance(&self) {
        let mut job = self.shared.state.lock().unwrap();
        if job.progress.done < job.progress.total {
            job.progress.done += 1;
        }
    }

    pub fn request_cancel(&self) {
        self.shared.cancel.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.shared.cancel.load(Ordering::SeqCst)
    }

    pub fn check_cancelled(&self) -> Result<(), Cancelled> {
        if self.is_cancelled() {
            Err(Cancelled)
        } else {
            Ok(())
        }
    }

    pub fn snapshot(&self) -> Job {
        self.shared.state.lock().unwrap().clone()
    }

    fn transition(&self, status: JobStatus) {
        let mut job = self.shared.state.lock().unwrap();
        if job.status.is_terminal() {
            return;
        }
        job.status = status;
        match status {
            JobStatus::Running => job.started_at = Some(Utc::now()),
            s if s.is_terminal() => job.ended_at = Some(Utc::now()),
            _ => {}
        }
    }
}

/// How a job body ended.
#[derive(Debug)]
pub enum JobEnd {
    Finished(serde_json::Value),
    Cancelled,
    Failed(String),
}

/// Owns all jobs of the service. At most one job per (project, phase) is
/// active at a time; a bounded pool of workers runs them.
pub struct JobManager {
    jobs: Mutex<HashMap<Uuid, RunContext>>,
    active: Arc<Mutex<HashMap<(String, Phase), Uuid>>>,
    workers: Arc<Semaphore>,
}

impl std::fmt::Debug for JobManager {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("JobManager")
            .field("jobs", &self.jobs.lock().unwrap().len())
            .finish_non_exhaustive()
    }
}

impl JobManager {
    pub fn new(max_workers: usize) -> Self {
        Self {
            jobs: Mutex::new(HashMap::new()),
            active: Arc::new(Mutex::new(HashMap::new())),
            workers: Arc::new(Semaphore::new(max_workers.max(1))),
        }
    }

    /// Queues `body` as a new job. Must be called within a tokio runtime.
    pub fn start<F, Fut>(&self, project: &str, phase: Phase, body: F) -> Result<Job, JobError>
    where
        F: FnOnce(RunContext) -> Fut + Send + 'static,
        Fut: Future<Output = JobEnd> + Send + 'static,
    {
        let key = (project.to_string(), phase);
        let ctx = {
            let mut active = self.active.lock().unwrap();
            if let Some(running) = active.get(&key) {
                return Err(JobError::Conflict {
                    project: project.to_string(),
                    phase,
                    running: *running,
                });
            }
            let ctx = RunContext::detached(project, phase);
            {
                let mut job = ctx.shared.state.lock().unwrap();
                job.status = JobStatus::Queued;
                job.started_at = None;
            }
            active.insert(key.clone(), ctx.job_id());
            ctx
        };
        let job_id = ctx.job_id();
        self.jobs.lock().unwrap().insert(job_id, ctx.clone());
        let snapshot = ctx.snapshot();

        let active = self.active.clone();
        let workers = self.workers.clone();
        tokio::spawn(async move {
            let _permit = workers.acquire_owned().await.expect("worker pool never closed");
            let end = if ctx.is_cancelled() {
                JobEnd::Cancelled
            } else {
                ctx.transition(JobStatus::Running);
                body(ctx.clone()).await
            };
            let status = match end {
                JobEnd::Finished(result) => {
                    ctx.shared.state.lock().unwrap().result = Some(result);
                    if ctx.error_count() > 0 {
                        JobStatus::CompletedWithErrors
                    } else {
                        JobStatus::Completed
                    }
                }
                JobEnd::Cancelled => {
                    ctx.info("cancelled; artifacts produced so far are kept");
                    JobStatus::Cancelled
                }
                JobEnd::Failed(reason) => {
                    ctx.log(LogLevel::Error, format!("job failed: {reason}"));
                    JobStatus::Failed
                }
            };
            ctx.transition(status);
            active.lock().unwrap().remove(&key);
            ctx.shared.terminal.send_replace(true);
        });
        Ok(snapshot)
    }

    pub fn get(&self, job_id: Uuid) -> Result<Job, JobError> {
        self.context(job_id).map(|c| c.snapshot())
    }

    pub fn list(&self, project: Option<&str>) -> Vec<Job> {
        let mut jobs: Vec<Job> = self
            .jobs
            .lock()
            .unwrap()
            .values()
            .map(RunContext::snapshot)
            .filter(|j| project.is_none_or(|p| j.project == p))
            .collect();
        jobs.sort_by_key(|j| j.created_at);
        jobs
    }

    /// Asks a job to stop. The in-flight LLM call, if any, completes first.
    pub fn cancel(&self, job_id: Uuid) -> Result<Job, JobError> {
        let ctx = self.context(job_id)?;
        if ctx.snapshot().status.is_terminal() {
            return Err(JobError::AlreadyTerminal(job_id));
        }
        ctx.request_cancel();
        Ok(ctx.snapshot())
    }

    /// Waits until the job reaches a terminal status.
    pub async fn wait(&self, job_id: Uuid) -> Result<Job, JobError> {
        let ctx = self.context(job_id)?;
        let mut rx = ctx.shared.terminal.subscribe();
        while !*rx.borrow_and_update() {
            if rx.changed().await.is_err() {
                break;
            }
        }
        Ok(ctx.snapshot())
    }

    fn context(&self, job_id: Uuid) -> Result<RunContext, JobError> {
        self.jobs
            .lock()
            .unwrap()
            .get(&job_id)
            .cloned()
            .ok_or(JobError::UnknownJob(job_id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    #[tokio::test]
    async fn lifecycle_completed() {
        let mgr = JobManager::new(2);
        let job = mgr
            .start("p", Phase::InitialCoding, |ctx| async move {
                ctx.set_total(2);
                ctx.advance();
                ctx.advance();
                JobEnd::Finished(serde_json::json!({"ok": true}))
            })
            .unwrap();
        assert_eq!(job.status, JobStatus::Queued);
        let done = mgr.wait(job.job_id).await.unwrap();
        assert_eq!(done.status, JobStatus::Completed);
        assert_eq!(done.progress, Progress { done: 2, total: 2 });
        assert!(done.ended_at.is_some());
    }

    #[tokio::test]
    async fn item_errors_mark_completed_with_errors() {
        let mgr = JobManager::new(1);
        let job = mgr
            .start("p", Phase::InitialCoding, |ctx| async move {
                ctx.error("doc-1 failed");
                JobEnd::Finished(serde_json::Value::Null)
            })
            .unwrap();
        assert_eq!(mgr.wait(job.job_id).await.unwrap().status, JobStatus::CompletedWithErrors);
    }

    #[tokio::test]
    async fn second_job_same_phase_conflicts() {
        let mgr = JobManager::new(4);
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let first = mgr
            .start("p", Phase::Reduction, |_| async move {
                let _ = rx.await;
                JobEnd::Finished(serde_json::Value::Null)
            })
            .unwrap();
        assert!(matches!(
            mgr.start("p", Phase::Reduction, |_| async { JobEnd::Cancelled }),
            Err(JobError::Conflict { .. })
        ));
        // other phase and other project are independent
        let other = mgr.start("p", Phase::Themes, |_| async { JobEnd::Finished(serde_json::Value::Null) }).unwrap();
        let other_project = mgr.start("q", Phase::Reduction, |_| async { JobEnd::Finished(serde_json::Value::Null) }).unwrap();
        mgr.wait(other.job_id).await.unwrap();
        mgr.wait(other_project.job_id).await.unwrap();
        tx.send(()).unwrap();
        mgr.wait(first.job_id).await.unwrap();
        assert!(mgr.start("p", Phase::Reduction, |_| async { JobEnd::Finished(serde_json::Value::Null) }).is_ok());
    }

    #[tokio::test]
    async fn cancel_semantics() {
        let mgr = JobManager::new(1);
        let job = mgr
            .start("p", Phase::InitialCoding, |ctx| async move {
                loop {
                    if ctx.check_cancelled().is_err() {
                        return JobEnd::Cancelled;
                    }
                    tokio::time::sleep(Duration::from_millis(5)).await;
                }
            })
            .unwrap();
        mgr.cancel(job.job_id).unwrap();
        let done = mgr.wait(job.job_id).await.unwrap();
        assert_eq!(done.status, JobStatus::Cancelled);
        assert_eq!(mgr.cancel(job.job_id), Err(JobError::AlreadyTerminal(job.job_id)));
        let unknown = Uuid::new_v4();
        assert_eq!(mgr.cancel(unknown), Err(JobError::UnknownJob(unknown)));
    }

    #[tokio::test]
    async fn failure_is_logged() {
        let mgr = JobManager::new(1);
        let job = mgr
            .start("p", Phase::Themes, |_| async { JobEnd::Failed("provider unreachable".into()) })
            .unwrap();
        let done = mgr.wait(job.job_id).await.unwrap();
        assert_eq!(done.status, JobStatus::Failed);
        assert!(done.messages.last().unwrap().message.contains("provider unreachable"));
    }

    #[test]
    fn progress_is_monotonic_and_bounded() {
        let ctx = RunContext::detached("p", Phase::Reduction);
        ctx.set_total(3);
        ctx.set_done(2);
        ctx.set_done(1);
        assert_eq!(ctx.snapshot().progress.done, 2);
        ctx.set_done(10);
        assert_eq!(ctx.snapshot().progress.done, 3);
        ctx.advance();
        assert_eq!(ctx.snapshot().progress, Progress { done: 3, total: 3 });
    }

    #[test]
    fn terminal_status_never_changes() {
        let ctx = RunContext::detached("p", Phase::Reduction);
        ctx.transition(JobStatus::Completed);
        ctx.transition(JobStatus::Failed);
        assert_eq!(ctx.snapshot().status, JobStatus::Completed);
    }
}
