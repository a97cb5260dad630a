//! Directory-backed job persistence: `jobs/<id>/state.json`, an append-only
//! `jobs/<id>/events.log` and artifacts under `jobs/<id>/out/`.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::Utc;
use serde_json::Value;
use thiserror::Error;
use tracing::warn;

use crate::job::{EventBody, Job, JobEvent, JobKind, JobState, ProcessInfo, TransitionError};

pub const STATE_FILE: &str = "state.json";
pub const EVENTS_FILE: &str = "events.log";
pub const OUT_DIR: &str = "out";
pub const INTERRUPTED: &str = "interrupted";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("job {0} not found")]
    NotFound(String),
    #[error(transparent)]
    Transition(#[from] TransitionError),
    #[error("artifact {0} does not exist")]
    MissingArtifact(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_owned(),
        source,
    }
}

struct Entry {
    job: Job,
    next_seq: u64,
}

/// What [`JobStore::open`] found on disk.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct Recovery {
    /// Still-queued jobs, oldest first.
    pub queued: Vec<String>,
    /// Jobs that were running and are now failed.
    pub interrupted: Vec<String>,
    /// Job directories whose history could not be replayed.
    pub unreadable: Vec<(String, String)>,
}

/// Single-writer store: every mutation goes through one lock, readers get
/// snapshots.
pub struct JobStore {
    root: PathBuf,
    jobs: Mutex<BTreeMap<String, Entry>>,
}

impl std::fmt::Debug for JobStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("JobStore").field("root", &self.root).finish()
    }
}

impl JobStore {
    /// Opens (or creates) the store, replaying every job's event log.
    /// Running jobs from a previous process are failed as interrupted.
    pub fn open(root: impl Into<PathBuf>) -> Result<(Self, Recovery), StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        let store = Self {
            root: root.clone(),
            jobs: Mutex::new(BTreeMap::new()),
        };
        let mut recovery = Recovery::default();
        let mut ids: Vec<String> = fs::read_dir(&root)
            .map_err(io_err(&root))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join(EVENTS_FILE).is_file())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        ids.sort();
        let mut loaded = Vec::new();
        for id in ids {
            match store.load(&id) {
                Ok(entry) => loaded.push(entry),
                Err(message) => {
                    warn!(job = %id, %message, "skipping unreadable job");
                    recovery.unreadable.push((id, message));
                }
            }
        }
        loaded.sort_by(|a, b| (a.job.created_at, &a.job.id).cmp(&(b.job.created_at, &b.job.id)));
        {
            let mut jobs = store.jobs.lock().expect("store lock");
            for entry in loaded {
                jobs.insert(entry.job.id.clone(), entry);
            }
        }
        let snapshot = store.list();
        for job in snapshot {
            match job.state {
                JobState::Queued => recovery.queued.push(job.id.clone()),
                JobState::Running => {
                    store.transition(&job.id, JobState::Failed, Some(INTERRUPTED.into()))?;
                    recovery.interrupted.push(job.id.clone());
                }
                _ => {}
            }
        }
        Ok((store, recovery))
    }

    fn load(&self, id: &str) -> Result<Entry, String> {
        let dir = self.root.join(id);
        let log = dir.join(EVENTS_FILE);
        let mut text = fs::read_to_string(&log).map_err(|e| e.to_string())?;
        if !text.is_empty() && !text.ends_with('\n') {
            // A torn final line from a crash mid-append.
            text.truncate(text.rfind('\n').map_or(0, |i| i + 1));
            fs::write(&log, &text).map_err(|e| e.to_string())?;
        }
        let mut events = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let event = serde_json::from_str::<JobEvent>(line)
                .map_err(|e| format!("events.log line {}: {e}", i + 1))?;
            events.push(event);
        }
        let mut job = Job::replay(id, &events).map_err(|e| e.to_string())?;
        // Heartbeat details live only in state.json.
        if let Ok(state) = fs::read(dir.join(STATE_FILE)) {
            if let Ok(saved) = serde_json::from_slice::<Job>(&state) {
                if saved.state == job.state && saved.process.is_some() {
                    job.process = saved.process;
                }
            }
        }
        job.artifacts.retain(|p| Path::new(p).exists());
        let next_seq = events.last().map_or(0, |e| e.seq + 1);
        Ok(Entry { job, next_seq })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn job_dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    pub fn out_dir(&self, id: &str) -> PathBuf {
        self.root.join(id).join(OUT_DIR)
    }

    pub fn create(&self, kind: JobKind, config: Value) -> Result<Job, StoreError> {
        let id = uuid::Uuid::now_v7().simple().to_string();
        let dir = self.job_dir(&id);
        let out = dir.join(OUT_DIR);
        fs::create_dir_all(&out).map_err(io_err(&out))?;
        let at = Utc::now();
        let job = Job::new(id.clone(), kind, config.clone(), at);
        let event = JobEvent {
            seq: 0,
            at,
            body: EventBody::Created { kind, config },
        };
        let mut jobs = self.jobs.lock().expect("store lock");
        append_event(&dir, &event)?;
        write_state(&dir, &job)?;
        jobs.insert(id, Entry { job: job.clone(), next_seq: 1 });
        Ok(job)
    }

    fn record(&self, id: &str, body: EventBody) -> Result<Job, StoreError> {
        let mut jobs = self.jobs.lock().expect("store lock");
        let entry = jobs.get_mut(id).ok_or_else(|| StoreError::NotFound(id.to_owned()))?;
        let event = JobEvent {
            seq: entry.next_seq,
            at: Utc::now(),
            body,
        };
        let mut next = entry.job.clone();
        next.apply(&event)?;
        let dir = self.root.join(id);
        append_event(&dir, &event)?;
        write_state(&dir, &next)?;
        entry.job = next;
        entry.next_seq += 1;
        Ok(entry.job.clone())
    }

    pub fn transition(&self, id: &str, to: JobState, error: Option<String>) -> Result<Job, StoreError> {
        let from = self.get(id).ok_or_else(|| StoreError::NotFound(id.to_owned()))?.state;
        self.record(id, EventBody::State { from, to, error })
    }

    /// Moves `id` to `to` only if it is currently in `from`; `Ok(None)` when
    /// the job was elsewhere.
    pub fn transition_from(
        &self,
        id: &str,
        from: JobState,
        to: JobState,
        error: Option<String>,
    ) -> Result<Option<Job>, StoreError> {
        let mut jobs = self.jobs.lock().expect("store lock");
        let entry = jobs.get_mut(id).ok_or_else(|| StoreError::NotFound(id.to_owned()))?;
        if entry.job.state != from {
            return Ok(None);
        }
        let event = JobEvent {
            seq: entry.next_seq,
            at: Utc::now(),
            body: EventBody::State { from, to, error },
        };
        let mut next = entry.job.clone();
        next.apply(&event)?;
        let dir = self.root.join(id);
        append_event(&dir, &event)?;
        write_state(&dir, &next)?;
        entry.job = next;
        entry.next_seq += 1;
        Ok(Some(entry.job.clone()))
    }

    pub fn progress(&self, id: &str, done: u64, total: u64) -> Result<Job, StoreError> {
        self.record(id, EventBody::Progress { done, total })
    }

    /// Records an existing file as an artifact.
    pub fn add_artifact(&self, id: &str, path: &Path) -> Result<Job, StoreError> {
        if !path.exists() {
            return Err(StoreError::MissingArtifact(path.to_owned()));
        }
        self.record(
            id,
            EventBody::Artifact {
                path: path.to_string_lossy().into_owned(),
            },
        )
    }

    /// Durable updates go to the event log; heartbeats only refresh
    /// `state.json`.
    pub fn set_process(&self, id: &str, info: ProcessInfo, durable: bool) -> Result<Job, StoreError> {
        if durable {
            return self.record(id, EventBody::Process { info });
        }
        let mut jobs = self.jobs.lock().expect("store lock");
        let entry = jobs.get_mut(id).ok_or_else(|| StoreError::NotFound(id.to_owned()))?;
        if entry.job.state.is_terminal() {
            return Err(TransitionError::Terminal { id: id.to_owned() }.into());
        }
        entry.job.process = Some(info);
        entry.job.updated_at = Utc::now();
        write_state(&self.root.join(id), &entry.job)?;
        Ok(entry.job.clone())
    }

    pub fn get(&self, id: &str) -> Option<Job> {
        let jobs = self.jobs.lock().expect("store lock");
        jobs.get(id).map(|e| {
            let mut job = e.job.clone();
            job.artifacts.retain(|p| Path::new(p).exists());
            job
        })
    }

    /// All jobs, oldest first.
    pub fn list(&self) -> Vec<Job> {
        let jobs = self.jobs.lock().expect("store lock");
        let mut all: Vec<Job> = jobs.values().map(|e| e.job.clone()).collect();
        all.sort_by(|a, b| (a.created_at, &a.id).cmp(&(b.created_at, &b.id)));
        all
    }

    /// The persisted history of one job.
    pub fn events(&self, id: &str) -> Result<Vec<JobEvent>, StoreError> {
        let path = self.job_dir(id).join(EVENTS_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        Ok(text
            .lines()
            .filter_map(|l| serde_json::from_str(l).ok())
            .collect())
    }
}

fn append_event(dir: &Path, event: &JobEvent) -> Result<(), StoreError> {
    let path = dir.join(EVENTS_FILE);
    let mut line = serde_json::to_string(event).expect("event serializes");
    line.push('\n');
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(io_err(&path))?;
    file.write_all(line.as_bytes()).map_err(io_err(&path))?;
    file.flush().map_err(io_err(&path))
}

fn write_state(dir: &Path, job: &Job) -> Result<(), StoreError> {
    let path = dir.join(STATE_FILE);
    let tmp = dir.join(".state.json.tmp");
    let bytes = serde_json::to_vec_pretty(job).expect("job serializes");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, &path).map_err(io_err(&path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn create_transition_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let (store, rec) = JobStore::open(dir.path()).unwrap();
        assert_eq!(rec, Recovery::default());
        let a = store.create(JobKind::Verify, Value::Null).unwrap();
        let b = store.create(JobKind::Finetune, Value::Null).unwrap();
        let c = store.create(JobKind::GenerateDialogue, Value::Null).unwrap();
        assert_ne!(a.id, b.id);
        store.transition(&b.id, JobState::Running, None).unwrap();
        store.progress(&b.id, 1, 2).unwrap();
        store.transition(&c.id, JobState::Running, None).unwrap();
        store.transition(&c.id, JobState::Succeeded, None).unwrap();
        assert!(matches!(
            store.transition(&c.id, JobState::Running, None),
            Err(StoreError::Transition(_))
        ));
        drop(store);

        let (store, rec) = JobStore::open(dir.path()).unwrap();
        assert_eq!(rec.queued, vec![a.id.clone()]);
        assert_eq!(rec.interrupted, vec![b.id.clone()]);
        let b2 = store.get(&b.id).unwrap();
        assert_eq!(b2.state, JobState::Failed);
        assert_eq!(b2.error.as_deref(), Some(INTERRUPTED));
        assert_eq!(b2.progress.done, 1);
        assert_eq!(store.get(&c.id).unwrap().state, JobState::Succeeded);
        let on_disk: Job =
            serde_json::from_slice(&fs::read(store.job_dir(&b.id).join(STATE_FILE)).unwrap()).unwrap();
        assert_eq!(on_disk, b2);
    }

    #[test]
    fn torn_last_line_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let (store, _) = JobStore::open(dir.path()).unwrap();
        let a = store.create(JobKind::Verify, Value::Null).unwrap();
        drop(store);
        let log = dir.path().join(&a.id).join(EVENTS_FILE);
        let mut f = OpenOptions::new().append(true).open(&log).unwrap();
        f.write_all(b"{\"seq\":1,\"at\":").unwrap();
        let (store, rec) = JobStore::open(dir.path()).unwrap();
        assert_eq!(rec.queued, vec![a.id.clone()]);
        assert!(store.get(&a.id).is_some());
    }

    #[test]
    fn artifacts_must_exist() {
        let dir = tempfile::tempdir().unwrap();
        let (store, _) = JobStore::open(dir.path()).unwrap();
        let a = store.create(JobKind::Verify, Value::Null).unwrap();
        store.transition(&a.id, JobState::Running, None).unwrap();
        let missing = store.out_dir(&a.id).join("nope");
        assert!(matches!(store.add_artifact(&a.id, &missing), Err(StoreError::MissingArtifact(_))));
        let present = store.out_dir(&a.id).join("report.json");
        fs::write(&present, "{}").unwrap();
        assert_eq!(store.add_artifact(&a.id, &present).unwrap().artifacts.len(), 1);
        fs::remove_file(&present).unwrap();
        assert!(store.get(&a.id).unwrap().artifacts.is_empty());
    }
}
