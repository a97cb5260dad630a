//! Job records and their state machine.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    GenerateDialogue,
    GenerateTrajectory,
    Verify,
    Finetune,
}

impl JobKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            JobKind::GenerateDialogue => "generate_dialogue",
            JobKind::GenerateTrajectory => "generate_trajectory",
            JobKind::Verify => "verify",
            JobKind::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Succeeded,
    Failed,
    Canceled,
}

impl JobState {
    pub const ALL: [JobState; 5] = [
        JobState::Queued,
        JobState::Running,
        JobState::Succeeded,
        JobState::Failed,
        JobState::Canceled,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Succeeded | JobState::Failed | JobState::Canceled)
    }

    pub fn can_transition(self, to: JobState) -> bool {
        use JobState::*;
        matches!(
            (self, to),
            (Queued, Running) | (Queued, Canceled) | (Running, Succeeded) | (Running, Failed) | (Running, Canceled)
        )
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            JobState::Queued => "queued",
            JobState::Running => "running",
            JobState::Succeeded => "succeeded",
            JobState::Failed => "failed",
            JobState::Canceled => "canceled",
        }
    }
}

impl std::fmt::Display for JobState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub done: u64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransitionError {
    #[error("job {id}: illegal transition {from} -> {to}")]
    Illegal { id: String, from: JobState, to: JobState },
    #[error("job {id}: progress {done}/{total} is out of range")]
    Progress { id: String, done: u64, total: u64 },
    #[error("job {id}: progress went backwards")]
    Regressed { id: String },
    #[error("job {id}: event applied to a terminal job")]
    Terminal { id: String },
    #[error("job {id}: first event must be creation")]
    NotCreated { id: String },
}

/// Live trainer details for fine-tune jobs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessInfo {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub started_at: Option<DateTime<Utc>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<i32>,
    pub output_tail: Vec<String>,
    pub total_lines: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub kind: JobKind,
    pub state: JobState,
    pub progress: Progress,
    pub config: Value,
    pub artifacts: Vec<String>,
    pub error: Option<String>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub process: Option<ProcessInfo>,
}

/// Compact listing entry for `GET /api/jobs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSummary {
    pub id: String,
    pub kind: JobKind,
    pub state: JobState,
    pub progress: Progress,
    pub error: Option<String>,
    pub created_at: DateTime<Utc>,
}

impl From<&Job> for JobSummary {
    fn from(job: &Job) -> Self {
        Self {
            id: job.id.clone(),
            kind: job.kind,
            state: job.state,
            progress: job.progress,
            error: job.error.clone(),
            created_at: job.created_at,
        }
    }
}

/// One line of `events.log`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobEvent {
    pub seq: u64,
    pub at: DateTime<Utc>,
    #[serde(flatten)]
    pub body: EventBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventBody {
    Created { kind: JobKind, config: Value },
    State {
        from: JobState,
        to: JobState,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    Progress { done: u64, total: u64 },
    Artifact { path: String },
    Process { info: ProcessInfo },
}

impl Job {
    pub fn new(id: String, kind: JobKind, config: Value, at: DateTime<Utc>) -> Self {
        Self {
            id,
            kind,
            state: JobState::Queued,
            progress: Progress::default(),
            config,
            artifacts: Vec::new(),
            error: None,
            created_at: at,
            updated_at: at,
            process: None,
        }
    }

    /// Applies one event, refusing anything the state machine forbids.
    pub fn apply(&mut self, event: &JobEvent) -> Result<(), TransitionError> {
        let id = || self.id.clone();
        match &event.body {
            EventBody::Created { .. } => return Err(TransitionError::NotCreated { id: id() }),
            EventBody::State { from, to, error } => {
                if *from != self.state || !self.state.can_transition(*to) {
                    return Err(TransitionError::Illegal {
                        id: id(),
                        from: self.state,
                        to: *to,
                    });
                }
                self.state = *to;
                if error.is_some() {
                    self.error = error.clone();
                }
            }
            EventBody::Progress { done, total } => {
                if self.state.is_terminal() {
                    return Err(TransitionError::Terminal { id: id() });
                }
                if done > total {
                    return Err(TransitionError::Progress {
                        id: id(),
                        done: *done,
                        total: *total,
                    });
                }
                if *done < self.progress.done {
                    return Err(TransitionError::Regressed { id: id() });
                }
                self.progress = Progress {
                    done: *done,
                    total: *total,
                };
            }
            EventBody::Artifact { path } => {
                if self.state.is_terminal() {
                    return Err(TransitionError::Terminal { id: id() });
                }
                if !self.artifacts.contains(path) {
                    self.artifacts.push(path.clone());
                }
            }
            EventBody::Process { info } => {
                if self.state.is_terminal() {
                    return Err(TransitionError::Terminal { id: id() });
                }
                self.process = Some(info.clone());
            }
        }
        self.updated_at = event.at;
        Ok(())
    }

    /// Rebuilds a job from its full event history.
    pub fn replay(id: &str, events: &[JobEvent]) -> Result<Job, TransitionError> {
        let (first, rest) = events
            .split_first()
            .ok_or_else(|| TransitionError::NotCreated { id: id.to_owned() })?;
        let EventBody::Created { kind, config } = &first.body else {
            return Err(TransitionError::NotCreated { id: id.to_owned() });
        };
        let mut job = Job::new(id.to_owned(), *kind, config.clone(), first.at);
        for event in rest {
            job.apply(event)?;
        }
        Ok(job)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transition_table() {
        use JobState::*;
        let legal: Vec<(JobState, JobState)> = JobState::ALL
            .iter()
            .flat_map(|&a| JobState::ALL.iter().map(move |&b| (a, b)))
            .filter(|&(a, b)| a.can_transition(b))
            .collect();
        assert_eq!(
            legal,
            [(Queued, Running), (Queued, Canceled), (Running, Succeeded), (Running, Failed), (Running, Canceled)]
        );
        for s in [Succeeded, Failed, Canceled] {
            assert!(JobState::ALL.iter().all(|&t| !s.can_transition(t)));
        }
    }

    fn ev(seq: u64, body: EventBody) -> JobEvent {
        JobEvent { seq, at: Utc::now(), body }
    }

    #[test]
    fn replay_and_rejections() {
        let events = vec![
            ev(0, EventBody::Created { kind: JobKind::Verify, config: Value::Null }),
            ev(1, EventBody::State { from: JobState::Queued, to: JobState::Running, error: None }),
            ev(2, EventBody::Progress { done: 1, total: 3 }),
            ev(3, EventBody::Artifact { path: "out/x".into() }),
            ev(4, EventBody::State { from: JobState::Running, to: JobState::Failed, error: Some("boom".into()) }),
        ];
        let job = Job::replay("j", &events).unwrap();
        assert_eq!(job.state, JobState::Failed);
        assert_eq!(job.error.as_deref(), Some("boom"));
        assert_eq!(job.progress, Progress { done: 1, total: 3 });

        let mut bad = events.clone();
        bad.push(ev(5, EventBody::State { from: JobState::Failed, to: JobState::Running, error: None }));
        assert!(matches!(Job::replay("j", &bad), Err(TransitionError::Illegal { .. })));

        let mut over = events[..2].to_vec();
        over.push(ev(2, EventBody::Progress { done: 4, total: 3 }));
        assert!(matches!(Job::replay("j", &over), Err(TransitionError::Progress { .. })));
        assert!(Job::replay("j", &events[1..]).is_err());
    }

    #[test]
    fn event_wire_format() {
        let e = JobEvent {
            seq: 3,
            at: DateTime::parse_from_rfc3339("2024-01-01T00:00:00Z").unwrap().with_timezone(&Utc),
            body: EventBody::State { from: JobState::Queued, to: JobState::Canceled, error: None },
        };
        assert_eq!(
            serde_json::to_string(&e).unwrap(),
            r#"{"seq":3,"at":"2024-01-01T00:00:00Z","event":"state","from":"queued","to":"canceled"}"#
        );
    }
}
