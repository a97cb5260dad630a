//! Dataset export, fine-tune configuration, training-script emission and
//! external trainer launch.

use std::collections::VecDeque;
use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};
use std::process::Stdio;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::io::{AsyncBufReadExt, AsyncRead, BufReader};
use tokio::process::{Child, Command};
use tokio::task::JoinHandle;

use crate::roleplay::{DialogueTurn, InstructionSample, SampleMeta, Speaker};
use crate::trajectory::{Action, ReasoningStep, ToolCall, Trajectory, TrajectoryMeta};
use crate::types::{FieldError, Framework};

pub const ENV_TRAINER_CMD: &str = "MIMIR_TRAINER_CMD";
pub const DEFAULT_TRAINER_CMD: &str = "./trainer";
pub const DEFAULT_TAIL_LINES: usize = 200;
pub const CONFIG_FILE: &str = "train_config.json";
pub const SCRIPT_FILE: &str = "train.sh";

#[derive(Debug, Error)]
pub enum TuningError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("nothing to export")]
    EmptyExport,
    #[error("sample {id}: {message}")]
    SchemaViolation { id: String, message: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid fine-tune config: {}", summarize(.0))]
    InvalidConfig(Vec<FieldError>),
    #[error("dataset {0} does not exist")]
    MissingDataset(PathBuf),
    #[error("could not start {script}: {source}")]
    SpawnFailure {
        script: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("trainer exited with {}", .code.map_or_else(|| "a signal".to_string(), |c| format!("code {c}")))]
    NonZeroExit { code: Option<i32> },
}

fn summarize(errors: &[FieldError]) -> String {
    errors
        .iter()
        .map(|e| format!("{}: {}", e.field, e.message))
        .collect::<Vec<_>>()
        .join("; ")
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TuningError + '_ {
    move |source| TuningError::Io {
        path: path.to_owned(),
        source,
    }
}

// ---------------------------------------------------------------------------
// export

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportKind {
    Dialogue,
    Trajectory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub count: usize,
    pub bytes: u64,
    /// Hex SHA-256 of the written file.
    pub digest: String,
}

#[derive(Debug, Clone, Copy)]
pub enum ExportBatch<'a> {
    Dialogues(&'a [InstructionSample]),
    Trajectories {
        items: &'a [Trajectory],
        include_incomplete: bool,
    },
}

impl ExportBatch<'_> {
    pub fn kind(&self) -> ExportKind {
        match self {
            ExportBatch::Dialogues(_) => ExportKind::Dialogue,
            ExportBatch::Trajectories { .. } => ExportKind::Trajectory,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TurnLine {
    speaker: Speaker,
    text: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DialogueLine {
    id: String,
    seed: String,
    roles: Vec<String>,
    turns: Vec<TurnLine>,
    meta: SampleMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepLine {
    thought: String,
    action: Option<Action>,
    observation: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryLineMeta {
    model: String,
    temperature: f64,
    max_tokens: u32,
    rng_seed: u64,
    framework: Framework,
    max_steps: usize,
    complete: bool,
    reflections: Vec<String>,
    tool_transcript: Vec<ToolCall>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryLine {
    id: String,
    question: String,
    steps: Vec<StepLine>,
    final_answer: Option<String>,
    meta: TrajectoryLineMeta,
}

/// One JSONL line (without the newline) for a dialogue sample.
pub fn dialogue_line(sample: &InstructionSample) -> Result<String, TuningError> {
    sample.validate().map_err(|message| TuningError::SchemaViolation {
        id: sample.id.clone(),
        message,
    })?;
    let line = DialogueLine {
        id: sample.id.clone(),
        seed: sample.seed.clone(),
        roles: sample.roles.clone(),
        turns: sample
            .turns
            .iter()
            .map(|t| TurnLine {
                speaker: t.speaker,
                text: t.text.clone(),
            })
            .collect(),
        meta: sample.meta.clone(),
    };
    Ok(serde_json::to_string(&line).expect("dialogue line serializes"))
}

/// One JSONL line (without the newline) for a trajectory.
pub fn trajectory_line(trajectory: &Trajectory) -> Result<String, TuningError> {
    trajectory
        .validate()
        .map_err(|message| TuningError::SchemaViolation {
            id: trajectory.id.clone(),
            message,
        })?;
    let meta = &trajectory.meta;
    let line = TrajectoryLine {
        id: trajectory.id.clone(),
        question: trajectory.question.clone(),
        steps: trajectory
            .steps
            .iter()
            .map(|s| StepLine {
                thought: s.thought.clone(),
                action: s.action.clone(),
                observation: s.observation.clone(),
            })
            .collect(),
        final_answer: trajectory.final_answer.clone(),
        meta: TrajectoryLineMeta {
            model: meta.model.clone(),
            temperature: meta.temperature,
            max_tokens: meta.max_tokens,
            rng_seed: meta.rng_seed,
            framework: meta.framework,
            max_steps: meta.max_steps,
            complete: meta.complete,
            reflections: meta.reflections.clone(),
            tool_transcript: trajectory.tool_transcript.clone(),
        },
    };
    Ok(serde_json::to_string(&line).expect("trajectory line serializes"))
}

/// Renders the whole batch to JSONL bytes without touching disk.
pub fn render_export(batch: ExportBatch<'_>) -> Result<(Vec<u8>, usize), TuningError> {
    let lines: Vec<String> = match batch {
        ExportBatch::Dialogues(samples) => samples.iter().map(dialogue_line).collect::<Result<_, _>>()?,
        ExportBatch::Trajectories {
            items,
            include_incomplete,
        } => items
            .iter()
            .filter(|t| include_incomplete || t.is_complete())
            .map(trajectory_line)
            .collect::<Result<_, _>>()?,
    };
    if lines.is_empty() {
        return Err(TuningError::EmptyExport);
    }
    let mut out = Vec::new();
    for line in &lines {
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    Ok((out, lines.len()))
}

/// Writes the batch as JSON Lines to `destination`, atomically.
pub fn export_dataset(batch: ExportBatch<'_>, destination: &Path) -> Result<ExportSummary, TuningError> {
    let (bytes, count) = render_export(batch)?;
    write_atomic(destination, &bytes)?;
    Ok(ExportSummary {
        count,
        bytes: bytes.len() as u64,
        digest: hex::encode(Sha256::digest(&bytes)),
    })
}

pub fn export_dialogues(samples: &[InstructionSample], destination: &Path) -> Result<ExportSummary, TuningError> {
    export_dataset(ExportBatch::Dialogues(samples), destination)
}

/// Incomplete trajectories are skipped unless `include_incomplete` is set.
pub fn export_trajectories(
    trajectories: &[Trajectory],
    destination: &Path,
    include_incomplete: bool,
) -> Result<ExportSummary, TuningError> {
    export_dataset(
        ExportBatch::Trajectories {
            items: trajectories,
            include_incomplete,
        },
        destination,
    )
}

pub fn write_atomic(destination: &Path, bytes: &[u8]) -> Result<(), TuningError> {
    if let Some(parent) = destination.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let file_name = destination
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "export".into());
    let tmp = destination.with_file_name(format!(".{file_name}.tmp-{}", std::process::id()));
    let result = (|| {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
        fs::rename(&tmp, destination)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io_err(destination))
}

fn parse_lines<T, W, F>(text: &str, convert: F) -> Result<Vec<T>, TuningError>
where
    W: serde::de::DeserializeOwned,
    F: Fn(W) -> Result<T, TuningError>,
{
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let wire: W = serde_json::from_str(l).map_err(|e| TuningError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            convert(wire).map_err(|e| match e {
                TuningError::SchemaViolation { id, message } => TuningError::Parse {
                    line: i + 1,
                    message: format!("sample {id}: {message}"),
                },
                other => other,
            })
        })
        .collect()
}

pub fn parse_dialogues(text: &str) -> Result<Vec<InstructionSample>, TuningError> {
    parse_lines(text, |line: DialogueLine| {
        let sample = InstructionSample {
            id: line.id,
            seed: line.seed,
            roles: line.roles,
            turns: line
                .turns
                .into_iter()
                .enumerate()
                .map(|(i, t)| DialogueTurn {
                    index: i + 1,
                    speaker: t.speaker,
                    text: t.text,
                })
                .collect(),
            meta: line.meta,
        };
        sample.validate().map_err(|message| TuningError::SchemaViolation {
            id: sample.id.clone(),
            message,
        })?;
        Ok(sample)
    })
}

pub fn parse_trajectories(text: &str) -> Result<Vec<Trajectory>, TuningError> {
    parse_lines(text, |line: TrajectoryLine| {
        let last = line.steps.len().saturating_sub(1);
        let steps = line
            .steps
            .into_iter()
            .enumerate()
            .map(|(i, s)| ReasoningStep {
                index: i + 1,
                final_answer: if i == last && s.action.is_none() {
                    line.final_answer.clone()
                } else {
                    None
                },
                thought: s.thought,
                action: s.action,
                observation: s.observation,
            })
            .collect();
        let m = line.meta;
        let trajectory = Trajectory {
            id: line.id,
            question: line.question,
            steps,
            final_answer: line.final_answer,
            tool_transcript: m.tool_transcript,
            meta: TrajectoryMeta {
                model: m.model,
                temperature: m.temperature,
                max_tokens: m.max_tokens,
                rng_seed: m.rng_seed,
                framework: m.framework,
                max_steps: m.max_steps,
                complete: m.complete,
                reflections: m.reflections,
            },
        };
        trajectory.validate().map_err(|message| TuningError::SchemaViolation {
            id: trajectory.id.clone(),
            message,
        })?;
        Ok(trajectory)
    })
}

pub fn read_dialogues(path: &Path) -> Result<Vec<InstructionSample>, TuningError> {
    parse_dialogues(&fs::read_to_string(path).map_err(io_err(path))?)
}

pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>, TuningError> {
    parse_trajectories(&fs::read_to_string(path).map_err(io_err(path))?)
}

// ---------------------------------------------------------------------------
// fine-tune config and script

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FineTuneMethod {
    Full,
    #[default]
    Lora,
}

impl FineTuneMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            FineTuneMethod::Full => "full",
            FineTuneMethod::Lora => "lora",
        }
    }
}

fn default_lora_rank() -> u32 {
    8
}
fn default_lora_alpha() -> u32 {
    16
}
fn default_lora_dropout() -> f64 {
    0.05
}
fn default_learning_rate() -> f64 {
    2e-5
}
fn default_epochs() -> u32 {
    3
}
fn default_batch_size() -> u32 {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub base_model: String,
    #[serde(default)]
    pub method: FineTuneMethod,
    #[serde(default = "default_lora_rank")]
    pub lora_rank: u32,
    #[serde(default = "default_lora_alpha")]
    pub lora_alpha: u32,
    #[serde(default = "default_lora_dropout")]
    pub lora_dropout: f64,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: u32,
    #[serde(default = "default_batch_size")]
    pub batch_size: u32,
    pub dataset_path: PathBuf,
    pub output_dir: PathBuf,
}

impl FineTuneConfig {
    pub fn new(base_model: impl Into<String>, dataset_path: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            base_model: base_model.into(),
            method: FineTuneMethod::default(),
            lora_rank: default_lora_rank(),
            lora_alpha: default_lora_alpha(),
            lora_dropout: default_lora_dropout(),
            learning_rate: default_learning_rate(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            dataset_path: dataset_path.into(),
            output_dir: output_dir.into(),
        }
    }

    pub fn validate(&self) -> Result<(), Vec<FieldError>> {
        let mut errors = Vec::new();
        let mut check = |ok: bool, field: &str, message: &str| {
            if !ok {
                errors.push(FieldError {
                    field: field.into(),
                    message: message.into(),
                });
            }
        };
        check(!self.base_model.trim().is_empty(), "base_model", "must not be empty");
        check(!self.dataset_path.as_os_str().is_empty(), "dataset_path", "must not be empty");
        check(!self.output_dir.as_os_str().is_empty(), "output_dir", "must not be empty");
        check(self.learning_rate.is_finite() && self.learning_rate > 0.0, "learning_rate", "must be positive");
        check(self.epochs > 0, "epochs", "must be positive");
        check(self.batch_size > 0, "batch_size", "must be positive");
        if self.method == FineTuneMethod::Lora {
            check(self.lora_rank > 0, "lora_rank", "must be positive");
            check(self.lora_alpha > 0, "lora_alpha", "must be positive");
            check((0.0..1.0).contains(&self.lora_dropout), "lora_dropout", "must be in [0, 1)");
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }

    /// Trainer arguments as (flag, value) pairs, in emission order.
    pub fn trainer_flags(&self) -> Vec<(&'static str, String)> {
        let mut flags = vec![
            ("--base-model", self.base_model.clone()),
            ("--method", self.method.as_str().to_owned()),
            ("--dataset", self.dataset_path.to_string_lossy().into_owned()),
            ("--output-dir", self.output_dir.to_string_lossy().into_owned()),
            ("--lr", format_number(self.learning_rate)),
            ("--epochs", self.epochs.to_string()),
            ("--batch-size", self.batch_size.to_string()),
        ];
        if self.method == FineTuneMethod::Lora {
            flags.push(("--lora-rank", self.lora_rank.to_string()));
            flags.push(("--lora-alpha", self.lora_alpha.to_string()));
            flags.push(("--lora-dropout", format_number(self.lora_dropout)));
        }
        flags
    }
}

/// Shortest round-tripping decimal, as written in `train_config.json`.
fn format_number(value: f64) -> String {
    serde_json::to_string(&value).expect("finite float")
}

/// The command file body. The trainer command comes from the environment at
/// run time and is word-split by the shell, so it may carry its own arguments.
pub fn render_script(config: &FineTuneConfig) -> String {
    let mut script = String::from("#!/bin/sh\n");
    script.push_str(&format!("exec ${{{ENV_TRAINER_CMD}:-{DEFAULT_TRAINER_CMD}}}"));
    for (flag, value) in config.trainer_flags() {
        script.push_str(" \\\n  ");
        script.push_str(flag);
        script.push(' ');
        script.push_str(&shell_words::quote(&value));
    }
    script.push('\n');
    script
}

/// Writes `train_config.json` and an executable `train.sh` into `destination`
/// and returns the script path.
pub fn emit_finetune_script(config: &FineTuneConfig, destination: &Path) -> Result<PathBuf, TuningError> {
    config.validate().map_err(TuningError::InvalidConfig)?;
    if !config.dataset_path.exists() {
        return Err(TuningError::MissingDataset(config.dataset_path.clone()));
    }
    fs::create_dir_all(destination).map_err(io_err(destination))?;
    let mut config_json = serde_json::to_string_pretty(config).expect("config serializes");
    config_json.push('\n');
    write_atomic(&destination.join(CONFIG_FILE), config_json.as_bytes())?;
    let script_path = destination.join(SCRIPT_FILE);
    write_atomic(&script_path, render_script(config).as_bytes())?;
    make_executable(&script_path)?;
    Ok(script_path)
}

#[cfg(unix)]
fn make_executable(path: &Path) -> Result<(), TuningError> {
    use std::os::unix::fs::PermissionsExt;
    fs::set_permissions(path, fs::Permissions::from_mode(0o755)).map_err(io_err(path))
}

#[cfg(not(unix))]
fn make_executable(_path: &Path) -> Result<(), TuningError> {
    Ok(())
}

pub fn read_finetune_config(path: &Path) -> Result<FineTuneConfig, TuningError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| TuningError::Parse {
        line: e.line(),
        message: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// launch

/// Bounded buffer of the most recent output lines, shared with readers.
#[derive(Debug, Clone)]
pub struct OutputTail {
    lines: Arc<Mutex<VecDeque<String>>>,
    seen: Arc<AtomicU64>,
    capacity: usize,
}

impl OutputTail {
    pub fn new(capacity: usize) -> Self {
        Self {
            lines: Arc::new(Mutex::new(VecDeque::with_capacity(capacity.min(4096)))),
            seen: Arc::new(AtomicU64::new(0)),
            capacity,
        }
    }

    pub fn push(&self, line: String) {
        self.seen.fetch_add(1, Ordering::Relaxed);
        if self.capacity == 0 {
            return;
        }
        let mut lines = self.lines.lock().expect("tail lock");
        if lines.len() == self.capacity {
            lines.pop_front();
        }
        lines.push_back(line);
    }

    pub fn snapshot(&self) -> Vec<String> {
        self.lines.lock().expect("tail lock").iter().cloned().collect()
    }

    /// Lines observed so far, including the ones already evicted.
    pub fn total_lines(&self) -> u64 {
        self.seen.load(Ordering::Relaxed)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}

#[derive(Debug, Clone)]
pub struct LaunchOptions {
    pub tail_lines: usize,
    pub current_dir: Option<PathBuf>,
    pub env: Vec<(String, String)>,
}

impl Default for LaunchOptions {
    fn default() -> Self {
        Self {
            tail_lines: DEFAULT_TAIL_LINES,
            current_dir: None,
            env: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneOutcome {
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub exit_code: Option<i32>,
    pub canceled: bool,
    pub tail: Vec<String>,
    pub total_lines: u64,
}

impl FinetuneOutcome {
    pub fn succeeded(&self) -> bool {
        !self.canceled && self.exit_code == Some(0)
    }

    pub fn into_result(self) -> Result<Self, TuningError> {
        if self.canceled || self.exit_code == Some(0) {
            Ok(self)
        } else {
            Err(TuningError::NonZeroExit { code: self.exit_code })
        }
    }
}

/// A running trainer process.
#[derive(Debug)]
pub struct FinetuneProcess {
    child: Child,
    tail: OutputTail,
    started_at: DateTime<Utc>,
    readers: Vec<JoinHandle<()>>,
}

pub fn launch_finetune(script: &Path, options: &LaunchOptions) -> Result<FinetuneProcess, TuningError> {
    let mut command = Command::new(script);
    command
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .kill_on_drop(true);
    if let Some(dir) = &options.current_dir {
        command.current_dir(dir);
    }
    for (k, v) in &options.env {
        command.env(k, v);
    }
    let mut child = command.spawn().map_err(|source| TuningError::SpawnFailure {
        script: script.to_owned(),
        source,
    })?;
    let tail = OutputTail::new(options.tail_lines);
    let mut readers = Vec::new();
    if let Some(out) = child.stdout.take() {
        readers.push(tokio::spawn(pump(out, tail.clone())));
    }
    if let Some(err) = child.stderr.take() {
        readers.push(tokio::spawn(pump(err, tail.clone())));
    }
    Ok(FinetuneProcess {
        child,
        tail,
        started_at: Utc::now(),
        readers,
    })
}

async fn pump<R: AsyncRead + Unpin>(stream: R, tail: OutputTail) {
    let mut reader = BufReader::new(stream);
    let mut buf = Vec::new();
    loop {
        buf.clear();
        match reader.read_until(b'\n', &mut buf).await {
            Ok(0) | Err(_) => break,
            Ok(_) => {
                let line = String::from_utf8_lossy(&buf);
                tail.push(line.trim_end_matches(['\n', '\r']).to_owned());
            }
        }
    }
}

impl FinetuneProcess {
    pub fn tail(&self) -> OutputTail {
        self.tail.clone()
    }

    pub fn started_at(&self) -> DateTime<Utc> {
        self.started_at
    }

    pub fn id(&self) -> Option<u32> {
        self.child.id()
    }

    /// Waits for exit. A non-zero exit is reported as
    /// [`TuningError::NonZeroExit`].
    pub async fn wait(self) -> Result<FinetuneOutcome, TuningError> {
        self.wait_or_cancel(std::future::pending::<()>()).await?.into_result()
    }

    /// Waits for exit, killing the process if `cancel` resolves first. The
    /// outcome is returned as-is, with the exit code left for the caller to
    /// judge.
    pub async fn wait_or_cancel<F>(mut self, cancel: F) -> Result<FinetuneOutcome, TuningError>
    where
        F: std::future::Future<Output = ()>,
    {
        let io_error = |source| TuningError::Io {
            path: PathBuf::from("<trainer>"),
            source,
        };
        let waited = tokio::select! {
            status = self.child.wait() => Some(status),
            _ = cancel => None,
        };
        let (status, canceled) = match waited {
            Some(status) => (status.map_err(io_error)?, false),
            None => {
                let _ = self.child.start_kill();
                (self.child.wait().await.map_err(io_error)?, true)
            }
        };
        for reader in self.readers.drain(..) {
            let _ = reader.await;
        }
        Ok(FinetuneOutcome {
            started_at: self.started_at,
            finished_at: Utc::now(),
            exit_code: status.code(),
            canceled,
            tail: self.tail.snapshot(),
            total_lines: self.tail.total_lines(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roleplay::SampleMeta;

    fn dialogue(id: &str, rounds: usize) -> InstructionSample {
        InstructionSample {
            id: id.into(),
            seed: "sore throat".into(),
            roles: vec!["Doctor".into()],
            turns: (0..rounds * 2)
                .map(|i| DialogueTurn {
                    index: i + 1,
                    speaker: if i % 2 == 0 { Speaker::Human } else { Speaker::Assistant },
                    text: format!("turn \"{i}\"\nline"),
                })
                .collect(),
            meta: SampleMeta {
                model: "gpt-4".into(),
                temperature: 0.1,
                max_tokens: 1000,
                rng_seed: 0,
            },
        }
    }

    #[test]
    fn dialogue_line_schema() {
        let line = dialogue_line(&dialogue("a", 1)).unwrap();
        assert_eq!(
            line,
            r#"{"id":"a","seed":"sore throat","roles":["Doctor"],"turns":[{"speaker":"human","text":"turn \"0\"\nline"},{"speaker":"assistant","text":"turn \"1\"\nline"}],"meta":{"model":"gpt-4","temperature":0.1,"max_tokens":1000,"rng_seed":0}}"#
        );
    }

    #[test]
    fn dialogue_round_trip_and_digest() {
        let dir = tempfile::tempdir().unwrap();
        let samples = vec![dialogue("a", 1), dialogue("b", 3)];
        let p1 = dir.path().join("one.jsonl");
        let p2 = dir.path().join("nested/two.jsonl");
        let s1 = export_dialogues(&samples, &p1).unwrap();
        let s2 = export_dialogues(&samples, &p2).unwrap();
        assert_eq!(s1.count, 2);
        assert_eq!(s1.digest, s2.digest);
        let bytes = fs::read(&p1).unwrap();
        assert_eq!(s1.bytes, bytes.len() as u64);
        assert_eq!(s1.digest, hex::encode(Sha256::digest(&bytes)));
        assert_eq!(bytes.iter().filter(|&&b| b == b'\n').count(), 2);
        assert_eq!(read_dialogues(&p1).unwrap(), samples);
    }

    #[test]
    fn non_alternating_turns_are_refused() {
        let mut bad = dialogue("bad", 2);
        bad.turns[1].speaker = Speaker::Human;
        let dir = tempfile::tempdir().unwrap();
        let dest = dir.path().join("x.jsonl");
        assert!(matches!(
            export_dialogues(&[dialogue("ok", 1), bad], &dest),
            Err(TuningError::SchemaViolation { id, .. }) if id == "bad"
        ));
        assert!(!dest.exists());
        assert!(matches!(export_dialogues(&[], &dest), Err(TuningError::EmptyExport)));
    }

    fn trajectory(id: &str, complete: bool) -> Trajectory {
        let mut steps = vec![ReasoningStep {
            index: 1,
            thought: "look it up".into(),
            action: Some(Action {
                tool: "google_search".into(),
                input: "cataract surgery".into(),
            }),
            observation: Some("phacoemulsification".into()),
            final_answer: None,
        }];
        if complete {
            steps.push(ReasoningStep {
                index: 2,
                thought: "done".into(),
                action: None,
                observation: None,
                final_answer: Some("phaco".into()),
            });
        }
        Trajectory {
            id: id.into(),
            question: "How are cataracts treated?".into(),
            steps,
            final_answer: complete.then(|| "phaco".into()),
            tool_transcript: vec![ToolCall {
                tool: "google_search".into(),
                input: "cataract surgery".into(),
                raw: "{}".into(),
            }],
            meta: TrajectoryMeta {
                model: "gpt-4".into(),
                temperature: 0.1,
                max_tokens: 1000,
                rng_seed: 7,
                framework: Framework::React,
                max_steps: 8,
                complete,
                reflections: vec![],
            },
        }
    }

    #[test]
    fn trajectory_schema_and_round_trip() {
        let t = trajectory("t", true);
        let value: serde_json::Value = serde_json::from_str(&trajectory_line(&t).unwrap()).unwrap();
        assert_eq!(value["steps"][1]["action"], serde_json::Value::Null);
        assert_eq!(value["steps"][1]["observation"], serde_json::Value::Null);
        assert_eq!(value["steps"][0]["action"]["tool"], "google_search");
        assert_eq!(value["final_answer"], "phaco");
        assert_eq!(value["meta"]["framework"], "react");
        let keys: Vec<_> = value["steps"][0].as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys.len(), 3);

        let dir = tempfile::tempdir().unwrap();
        let dest = dir.path().join("t.jsonl");
        let all = vec![t.clone(), trajectory("partial", false)];
        assert_eq!(export_trajectories(&all, &dest, false).unwrap().count, 1);
        assert_eq!(read_trajectories(&dest).unwrap(), vec![t]);
        assert_eq!(export_trajectories(&all, &dest, true).unwrap().count, 2);
        assert_eq!(read_trajectories(&dest).unwrap(), all);
    }

    #[test]
    fn parse_reports_line_numbers() {
        let good = dialogue_line(&dialogue("a", 1)).unwrap();
        let text = format!("{good}\n{{\"id\":1}}\n");
        assert!(matches!(parse_dialogues(&text), Err(TuningError::Parse { line: 2, .. })));
    }

    fn config(dir: &Path) -> FineTuneConfig {
        let dataset = dir.join("data set.jsonl");
        fs::write(&dataset, "").unwrap();
        FineTuneConfig::new("llama-2-7b", dataset, dir.join("out"))
    }

    #[test]
    fn defaults() {
        let c: FineTuneConfig =
            serde_json::from_str(r#"{"base_model":"m","dataset_path":"d","output_dir":"o"}"#).unwrap();
        assert_eq!(c.method, FineTuneMethod::Lora);
        assert_eq!((c.lora_rank, c.lora_alpha, c.epochs, c.batch_size), (8, 16, 3, 8));
        assert_eq!(c.lora_dropout, 0.05);
        assert_eq!(c.learning_rate, 2e-5);
        assert_eq!(c, FineTuneConfig::new("m", "d", "o"));
    }

    #[test]
    fn lora_flags_only_for_lora() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = config(dir.path());
        let script = render_script(&c);
        assert!(script.contains("--lora-rank 8"));
        assert!(script.contains("--lr 0.00002"), "{script}");
        assert!(script.starts_with("#!/bin/sh\nexec ${MIMIR_TRAINER_CMD:-./trainer}"));
        assert!(script.contains("'"), "path with a space is quoted");
        c.method = FineTuneMethod::Full;
        assert!(!render_script(&c).contains("--lora"));
    }

    #[test]
    fn emit_writes_config_and_executable_script() {
        let dir = tempfile::tempdir().unwrap();
        let c = config(dir.path());
        let out = dir.path().join("emit");
        let script = emit_finetune_script(&c, &out).unwrap();
        assert_eq!(read_finetune_config(&out.join(CONFIG_FILE)).unwrap(), c);
        assert_eq!(fs::read_to_string(&script).unwrap(), render_script(&c));
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            assert_eq!(fs::metadata(&script).unwrap().permissions().mode() & 0o777, 0o755);
        }
        let missing = FineTuneConfig::new("m", dir.path().join("nope"), "o");
        assert!(matches!(emit_finetune_script(&missing, &out), Err(TuningError::MissingDataset(_))));
    }

    #[test]
    fn invalid_config_rejected() {
        let mut c = FineTuneConfig::new("", "d", "o");
        c.lora_dropout = 1.0;
        let errs = c.validate().unwrap_err();
        let fields: Vec<_> = errs.iter().map(|e| e.field.as_str()).collect();
        assert_eq!(fields, ["base_model", "lora_dropout"]);
        c.method = FineTuneMethod::Full;
        assert_eq!(c.validate().unwrap_err().len(), 1);
    }

    #[test]
    fn tail_keeps_last_lines() {
        let tail = OutputTail::new(3);
        for i in 0..10 {
            tail.push(i.to_string());
        }
        assert_eq!(tail.snapshot(), ["7", "8", "9"]);
        assert_eq!(tail.total_lines(), 10);
        let none = OutputTail::new(0);
        none.push("x".into());
        assert!(none.snapshot().is_empty());
    }

    #[cfg(unix)]
    fn stub(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("stub.sh");
        fs::write(&p, format!("#!/bin/sh\n{body}\n")).unwrap();
        make_executable(&p).unwrap();
        p
    }

    #[cfg(unix)]
    #[tokio::test]
    async fn launch_exit_codes() {
        let dir = tempfile::tempdir().unwrap();
        let ok = launch_finetune(&stub(dir.path(), "echo hi; echo err >&2; exit 0"), &LaunchOptions::default())
            .unwrap()
            .wait()
            .await
            .unwrap();
        assert!(ok.succeeded());
        let mut tail = ok.tail.clone();
        tail.sort();
        assert_eq!(tail, ["err", "hi"]);

        let fail = launch_finetune(&stub(dir.path(), "exit 3"), &LaunchOptions::default())
            .unwrap()
            .wait()
            .await;
        assert!(matches!(fail, Err(TuningError::NonZeroExit { code: Some(3) })));

        assert!(matches!(
            launch_finetune(&dir.path().join("absent"), &LaunchOptions::default()),
            Err(TuningError::SpawnFailure { .. })
        ));
    }

    #[cfg(unix)]
    #[tokio::test]
    async fn launch_can_be_canceled() {
        let dir = tempfile::tempdir().unwrap();
        let proc = launch_finetune(&stub(dir.path(), "echo started; exec sleep 30"), &LaunchOptions::default()).unwrap();
        let outcome = proc
            .wait_or_cancel(tokio::time::sleep(std::time::Duration::from_millis(200)))
            .await
            .unwrap();
        assert!(outcome.canceled);
        assert!(!outcome.succeeded());
    }
}
