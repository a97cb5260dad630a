//! Job submission, bounded concurrent execution and cancellation.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use mimir_core::pipeline::{
    run_dialogues, run_trajectories, run_verification, GenerateConfig, GenerateKind, PipelineError, RunControl,
};
use mimir_core::tuning::{
    emit_finetune_script, export_dialogues, export_trajectories, launch_finetune, read_dialogues, write_atomic,
    FineTuneConfig, LaunchOptions, TuningError, CONFIG_FILE, ENV_TRAINER_CMD,
};
use mimir_core::types::{FieldError, GenerationConfig};
use mimir_core::verify::TurnSelection;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tokio::sync::{watch, Semaphore};
use tokio_util::sync::CancellationToken;
use tracing::{info, warn};

use crate::app::App;
use crate::job::{Job, JobKind, JobState, ProcessInfo};
use crate::store::StoreError;

pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const CHAT_ROOMS_FILE: &str = "chat_rooms.jsonl";
pub const VERDICTS_FILE: &str = "verdicts.jsonl";
pub const REPORT_FILE: &str = "report.json";
const HEARTBEAT: Duration = Duration::from_secs(1);
const CANCEL_WAIT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("invalid config: {}", describe(.0))]
    InvalidConfig(Vec<FieldError>),
    #[error("job {0} not found")]
    NotFound(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

fn describe(errors: &[FieldError]) -> String {
    errors
        .iter()
        .map(|e| format!("{}: {}", e.field, e.message))
        .collect::<Vec<_>>()
        .join("; ")
}

fn invalid(field: &str, message: impl Into<String>) -> SchedulerError {
    SchedulerError::InvalidConfig(vec![FieldError::new(field, message)])
}

/// Config of a verify job: which dialogue job to check, and which turns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyJobConfig {
    pub job_id: String,
    #[serde(default)]
    pub turns: TurnSelection,
}

#[derive(Debug, Error)]
enum ExecError {
    #[error("canceled")]
    Canceled,
    #[error(transparent)]
    Pipeline(PipelineError),
    #[error(transparent)]
    Tuning(#[from] TuningError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{0}")]
    Other(String),
}

impl From<PipelineError> for ExecError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Canceled => ExecError::Canceled,
            other => ExecError::Pipeline(other),
        }
    }
}

struct Handle {
    cancel: CancellationToken,
    done: watch::Receiver<bool>,
}

pub struct Scheduler {
    app: Arc<App>,
    permits: Arc<Semaphore>,
    handles: Mutex<HashMap<String, Handle>>,
}

impl Scheduler {
    pub fn new(app: Arc<App>) -> Arc<Self> {
        let cap = app.config.max_jobs.max(1);
        Arc::new(Self {
            app,
            permits: Arc::new(Semaphore::new(cap)),
            handles: Mutex::new(HashMap::new()),
        })
    }

    pub fn app(&self) -> &Arc<App> {
        &self.app
    }

    /// Re-queues jobs that survived a restart, oldest first.
    pub fn resume(self: &Arc<Self>, queued: &[String]) {
        for id in queued {
            if let Some(job) = self.app.jobs.get(id) {
                self.spawn(job);
            }
        }
    }

    /// Validates and normalizes a submission, persists it as queued and
    /// hands it to a worker.
    pub fn submit(self: &Arc<Self>, kind: JobKind, config: Value) -> Result<Job, SchedulerError> {
        let normalized = self.normalize(kind, config)?;
        let job = self.app.jobs.create(kind, normalized)?;
        info!(job = %job.id, kind = kind.as_str(), "submitted");
        self.spawn(job.clone());
        Ok(job)
    }

    fn normalize(&self, kind: JobKind, config: Value) -> Result<Value, SchedulerError> {
        let parse_err = |e: serde_json::Error| invalid("config", e.to_string());
        match kind {
            JobKind::GenerateDialogue | JobKind::GenerateTrajectory => {
                let parsed: GenerateConfig = serde_json::from_value(config).map_err(parse_err)?;
                let gen_kind = if kind == JobKind::GenerateDialogue {
                    GenerateKind::Dialogue
                } else {
                    GenerateKind::Trajectory
                };
                parsed
                    .validate(gen_kind, &self.app.pipeline)
                    .map_err(SchedulerError::InvalidConfig)?;
                let topics = self
                    .app
                    .topics
                    .select(parsed.topic_ids.as_deref())
                    .map_err(|e| invalid("topic_ids", e.to_string()))?;
                if parsed.datasets.is_empty() && topics.is_empty() {
                    return Err(invalid("datasets", "select at least one dataset or upload topics"));
                }
                Ok(serde_json::to_value(parsed).expect("config serializes"))
            }
            JobKind::Verify => {
                let parsed: VerifyJobConfig = serde_json::from_value(config).map_err(parse_err)?;
                let source = self
                    .app
                    .jobs
                    .get(&parsed.job_id)
                    .ok_or_else(|| invalid("job_id", format!("unknown job {:?}", parsed.job_id)))?;
                if source.kind != JobKind::GenerateDialogue || source.state != JobState::Succeeded {
                    return Err(invalid("job_id", "must name a succeeded generate_dialogue job"));
                }
                if let TurnSelection::Indices(list) = &parsed.turns {
                    if list.is_empty() {
                        return Err(invalid("turns", "select at least one turn"));
                    }
                }
                Ok(serde_json::to_value(parsed).expect("config serializes"))
            }
            JobKind::Finetune => {
                let parsed: FineTuneConfig = serde_json::from_value(config).map_err(parse_err)?;
                parsed.validate().map_err(SchedulerError::InvalidConfig)?;
                if !parsed.dataset_path.exists() {
                    return Err(invalid("dataset_path", "file does not exist"));
                }
                Ok(serde_json::to_value(parsed).expect("config serializes"))
            }
        }
    }

    fn spawn(self: &Arc<Self>, job: Job) {
        let cancel = CancellationToken::new();
        let (done_tx, done_rx) = watch::channel(false);
        self.handles.lock().expect("handles lock").insert(
            job.id.clone(),
            Handle {
                cancel: cancel.clone(),
                done: done_rx,
            },
        );
        let this = Arc::clone(self);
        tokio::spawn(async move {
            this.drive(job, cancel).await;
            let _ = done_tx.send(true);
        });
    }

    async fn drive(self: Arc<Self>, job: Job, cancel: CancellationToken) {
        let store = &self.app.jobs;
        let permit = tokio::select! {
            permit = Arc::clone(&self.permits).acquire_owned() => permit.expect("semaphore open"),
            _ = cancel.cancelled() => {
                let _ = store.transition_from(&job.id, JobState::Queued, JobState::Canceled, None);
                return;
            }
        };
        match store.transition_from(&job.id, JobState::Queued, JobState::Running, None) {
            Ok(Some(_)) => {}
            Ok(None) => return,
            Err(e) => {
                warn!(job = %job.id, error = %e, "could not start job");
                return;
            }
        }
        let result = self.execute(&job, &cancel).await;
        let outcome = match result {
            Ok(()) => store.transition(&job.id, JobState::Succeeded, None),
            Err(ExecError::Canceled) => store.transition(&job.id, JobState::Canceled, None),
            Err(e) => store.transition(&job.id, JobState::Failed, Some(e.to_string())),
        };
        if let Err(e) = outcome {
            warn!(job = %job.id, error = %e, "could not record job outcome");
        }
        drop(permit);
    }

    async fn execute(&self, job: &Job, cancel: &CancellationToken) -> Result<(), ExecError> {
        let out = self.app.jobs.out_dir(&job.id);
        let work = async {
            match job.kind {
                JobKind::GenerateDialogue => self.exec_dialogue(job, &out, cancel).await,
                JobKind::GenerateTrajectory => self.exec_trajectory(job, &out, cancel).await,
                JobKind::Verify => self.exec_verify(job, &out, cancel).await,
                JobKind::Finetune => self.exec_finetune(job, &out, cancel).await,
            }
        };
        if job.kind == JobKind::Finetune {
            return work.await;
        }
        tokio::select! {
            result = work => result,
            _ = cancel.cancelled() => Err(ExecError::Canceled),
        }
    }

    fn control<'a>(&'a self, id: &'a str, cancel: &'a CancellationToken) -> RunControl<'a> {
        let store = Arc::clone(&self.app.jobs);
        RunControl::new(
            move |done, total| {
                let _ = store.progress(id, done as u64, total as u64);
            },
            move || cancel.is_cancelled(),
        )
    }

    fn parse<T: serde::de::DeserializeOwned>(job: &Job) -> Result<T, ExecError> {
        serde_json::from_value(job.config.clone()).map_err(|e| ExecError::Other(format!("stored config: {e}")))
    }

    async fn exec_dialogue(&self, job: &Job, out: &Path, cancel: &CancellationToken) -> Result<(), ExecError> {
        let config: GenerateConfig = Self::parse(job)?;
        let topics = self
            .app
            .topics
            .select(config.topic_ids.as_deref())
            .map_err(|e| ExecError::Other(e.to_string()))?;
        let run = run_dialogues(&self.app.pipeline, &config, &topics, &self.control(&job.id, cancel)).await?;
        let samples = out.join(SAMPLES_FILE);
        export_dialogues(&run.samples, &samples)?;
        self.app.jobs.add_artifact(&job.id, &samples)?;
        if !run.chat_rooms.is_empty() {
            let path = out.join(CHAT_ROOMS_FILE);
            let mut body = String::new();
            for record in &run.chat_rooms {
                body.push_str(&serde_json::to_string(record).expect("record serializes"));
                body.push('\n');
            }
            write_atomic(&path, body.as_bytes())?;
            self.app.jobs.add_artifact(&job.id, &path)?;
        }
        Ok(())
    }

    async fn exec_trajectory(&self, job: &Job, out: &Path, cancel: &CancellationToken) -> Result<(), ExecError> {
        let config: GenerateConfig = Self::parse(job)?;
        let topics = self
            .app
            .topics
            .select(config.topic_ids.as_deref())
            .map_err(|e| ExecError::Other(e.to_string()))?;
        let trajectories =
            run_trajectories(&self.app.pipeline, &config, &topics, &self.control(&job.id, cancel)).await?;
        let samples = out.join(SAMPLES_FILE);
        match export_trajectories(&trajectories, &samples, config.include_incomplete) {
            Ok(_) => {
                self.app.jobs.add_artifact(&job.id, &samples)?;
                Ok(())
            }
            Err(TuningError::EmptyExport) => Err(ExecError::Other(format!(
                "none of the {} trajectories reached a final answer",
                trajectories.len()
            ))),
            Err(e) => Err(e.into()),
        }
    }

    async fn exec_verify(&self, job: &Job, out: &Path, cancel: &CancellationToken) -> Result<(), ExecError> {
        let config: VerifyJobConfig = Self::parse(job)?;
        let source = self.app.jobs.out_dir(&config.job_id).join(SAMPLES_FILE);
        let samples = read_dialogues(&source)?;
        let run = run_verification(
            &samples,
            &config.turns,
            &*self.app.verifier,
            &GenerationConfig::default(),
            &self.control(&job.id, cancel),
        )
        .await?;
        let verdicts = out.join(VERDICTS_FILE);
        let mut body = String::new();
        for v in &run.verdicts {
            body.push_str(&serde_json::to_string(v).expect("verdict serializes"));
            body.push('\n');
        }
        write_atomic(&verdicts, body.as_bytes())?;
        let report = out.join(REPORT_FILE);
        let mut json = serde_json::to_string_pretty(&run.report).expect("report serializes");
        json.push('\n');
        write_atomic(&report, json.as_bytes())?;
        self.app.jobs.add_artifact(&job.id, &verdicts)?;
        self.app.jobs.add_artifact(&job.id, &report)?;
        Ok(())
    }

    async fn exec_finetune(&self, job: &Job, out: &Path, cancel: &CancellationToken) -> Result<(), ExecError> {
        let config: FineTuneConfig = Self::parse(job)?;
        let script = emit_finetune_script(&config, out)?;
        let store = &self.app.jobs;
        store.add_artifact(&job.id, &out.join(CONFIG_FILE))?;
        store.add_artifact(&job.id, &script)?;
        store.progress(&job.id, 0, 1)?;
        let process = launch_finetune(
            &script,
            &LaunchOptions {
                tail_lines: self.app.config.tail_lines,
                env: self
                    .app
                    .config
                    .trainer_cmd
                    .iter()
                    .map(|cmd| (ENV_TRAINER_CMD.to_owned(), cmd.clone()))
                    .collect(),
                ..LaunchOptions::default()
            },
        )?;
        let tail = process.tail();
        let started_at = process.started_at();
        store.set_process(
            &job.id,
            ProcessInfo {
                started_at: Some(started_at),
                ..ProcessInfo::default()
            },
            true,
        )?;
        let heartbeat = {
            let store = Arc::clone(store);
            let id = job.id.clone();
            let tail = tail.clone();
            tokio::spawn(async move {
                let mut ticker = tokio::time::interval(HEARTBEAT);
                ticker.tick().await;
                loop {
                    ticker.tick().await;
                    let info = ProcessInfo {
                        started_at: Some(started_at),
                        exit_code: None,
                        output_tail: tail.snapshot(),
                        total_lines: tail.total_lines(),
                    };
                    if store.set_process(&id, info, false).is_err() {
                        break;
                    }
                }
            })
        };
        let outcome = process.wait_or_cancel(cancel.cancelled()).await;
        heartbeat.abort();
        let outcome = outcome?;
        store.set_process(
            &job.id,
            ProcessInfo {
                started_at: Some(outcome.started_at),
                exit_code: outcome.exit_code,
                output_tail: outcome.tail.clone(),
                total_lines: outcome.total_lines,
            },
            true,
        )?;
        if outcome.canceled {
            return Err(ExecError::Canceled);
        }
        outcome.into_result()?;
        store.progress(&job.id, 1, 1)?;
        Ok(())
    }

    /// Cancels a job. Queued jobs stop at once; running jobs are signalled
    /// and awaited. Terminal jobs are returned unchanged.
    pub async fn cancel(&self, id: &str) -> Result<Job, SchedulerError> {
        let job = self.app.jobs.get(id).ok_or_else(|| SchedulerError::NotFound(id.to_owned()))?;
        if job.state.is_terminal() {
            return Ok(job);
        }
        let handle = {
            let handles = self.handles.lock().expect("handles lock");
            handles.get(id).map(|h| (h.cancel.clone(), h.done.clone()))
        };
        if job.state == JobState::Queued {
            self.app
                .jobs
                .transition_from(id, JobState::Queued, JobState::Canceled, None)?;
        }
        if let Some((token, mut done)) = handle {
            token.cancel();
            let _ = tokio::time::timeout(CANCEL_WAIT, done.wait_for(|d| *d)).await;
        }
        self.app.jobs.get(id).ok_or_else(|| SchedulerError::NotFound(id.to_owned()))
    }

    /// Waits until the job's worker has finished.
    pub async fn wait(&self, id: &str) -> Option<Job> {
        let done = {
            let handles = self.handles.lock().expect("handles lock");
            handles.get(id).map(|h| h.done.clone())
        };
        if let Some(mut done) = done {
            let _ = done.wait_for(|d| *d).await;
        }
        self.app.jobs.get(id)
    }

    /// Lines of a job's browsable output file, for paging.
    pub fn sample_file(&self, job: &Job) -> Option<PathBuf> {
        let name = match job.kind {
            JobKind::GenerateDialogue | JobKind::GenerateTrajectory => SAMPLES_FILE,
            JobKind::Verify => VERDICTS_FILE,
            JobKind::Finetune => return None,
        };
        Some(self.app.jobs.out_dir(&job.id).join(name))
    }
}
