//! Shared service state: registry, roles, prompts, tools, providers and stores.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use async_trait::async_trait;
use mimir_core::ingest::{IngestError, Registry};
use mimir_core::pipeline::PipelineContext;
use mimir_core::prompt::PromptTemplates;
use mimir_core::provider::{
    CompletionProvider, CompletionRequest, CompletionResult, HttpProvider, HttpProviderConfig, ProviderError,
    ScriptEntry, ScriptedProvider,
};
use mimir_core::roleplay::RoleCatalog;
use mimir_core::trajectory::{ToolRegistry, TrajectoryError};
use mimir_core::tuning::DEFAULT_TAIL_LINES;
use serde::Deserialize;
use thiserror::Error;

use crate::store::{JobStore, Recovery, StoreError};
use crate::topics::{TopicStore, TopicStoreError};

pub const DEFAULT_MAX_JOBS: usize = 2;

#[derive(Debug, Error)]
pub enum AppError {
    #[error(transparent)]
    Registry(#[from] IngestError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Topics(#[from] TopicStoreError),
    #[error("tool config: {0}")]
    Tools(#[from] TrajectoryError),
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("provider: {0}")]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone)]
pub struct AppConfig {
    /// Holds `jobs/` and `topics.json`.
    pub data_dir: PathBuf,
    pub registry_dir: PathBuf,
    pub roles_dir: Option<PathBuf>,
    pub prompts_dir: Option<PathBuf>,
    pub tools_config: Option<PathBuf>,
    /// Replaces the HTTP provider with a scripted one.
    pub mock_script: Option<PathBuf>,
    /// Model name for the verifier; defaults to the generation model.
    pub verify_model: Option<String>,
    /// Overrides `MIMIR_TRAINER_CMD` for launched fine-tune scripts.
    pub trainer_cmd: Option<String>,
    pub max_jobs: usize,
    pub tail_lines: usize,
}

impl AppConfig {
    pub fn new(data_dir: impl Into<PathBuf>, registry_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            registry_dir: registry_dir.into(),
            roles_dir: None,
            prompts_dir: None,
            tools_config: None,
            mock_script: None,
            verify_model: None,
            trainer_cmd: None,
            max_jobs: DEFAULT_MAX_JOBS,
            tail_lines: DEFAULT_TAIL_LINES,
        }
    }

    pub fn jobs_dir(&self) -> PathBuf {
        self.data_dir.join("jobs")
    }

    pub fn topics_path(&self) -> PathBuf {
        self.data_dir.join("topics.json")
    }
}

/// Stand-in used when no endpoint is configured; every call fails with the
/// configuration problem.
#[derive(Debug, Clone)]
pub struct UnconfiguredProvider {
    reason: String,
}

impl UnconfiguredProvider {
    pub fn new(reason: impl Into<String>) -> Self {
        Self { reason: reason.into() }
    }
}

#[async_trait]
impl CompletionProvider for UnconfiguredProvider {
    fn name(&self) -> &str {
        "unconfigured"
    }

    async fn complete(&self, _request: &CompletionRequest) -> Result<CompletionResult, ProviderError> {
        Err(ProviderError::Transport(self.reason.clone()))
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ScriptLine {
    Entry(ScriptEntry),
    Pair(String, String),
    Text(String),
}

/// Reads a mock script: a JSON array whose items are `{"matcher", "text"}`
/// objects, `[matcher, text]` pairs or bare reply strings.
pub fn load_mock_script(path: &Path) -> Result<ScriptedProvider, AppError> {
    let file_err = |message: String| AppError::File {
        path: path.to_owned(),
        message,
    };
    let text = fs::read_to_string(path).map_err(|e| file_err(e.to_string()))?;
    let lines: Vec<ScriptLine> = serde_json::from_str(&text).map_err(|e| file_err(e.to_string()))?;
    Ok(ScriptedProvider::new(lines.into_iter().map(|line| match line {
        ScriptLine::Entry(e) => e,
        ScriptLine::Pair(m, t) => ScriptEntry { matcher: m, text: t },
        ScriptLine::Text(t) => ScriptEntry {
            matcher: String::new(),
            text: t,
        },
    })))
}

/// Providers from the mock script or the environment: (generator, verifier).
pub fn build_providers(
    config: &AppConfig,
) -> Result<(Arc<dyn CompletionProvider>, Arc<dyn CompletionProvider>), AppError> {
    if let Some(path) = &config.mock_script {
        let mock = Arc::new(load_mock_script(path)?);
        return Ok((mock.clone(), mock));
    }
    Ok(match HttpProviderConfig::from_env() {
        Ok(http) => {
            let mut verify = http.clone();
            if let Some(model) = &config.verify_model {
                verify.model = model.clone();
            }
            (Arc::new(HttpProvider::new(http)?), Arc::new(HttpProvider::new(verify)?))
        }
        Err(e) => {
            let reason = match e {
                ProviderError::Transport(m) => m,
                other => other.to_string(),
            };
            let p = Arc::new(UnconfiguredProvider::new(reason));
            (p.clone(), p)
        }
    })
}

/// Everything but the stores: registry, roles, prompts, tools and providers.
pub fn build_pipeline(config: &AppConfig) -> Result<(PipelineContext, Arc<dyn CompletionProvider>), AppError> {
    let (provider, verifier) = build_providers(config)?;
    let registry = Arc::new(Registry::open(&config.registry_dir)?);
    let roles = match &config.roles_dir {
        Some(dir) => RoleCatalog::with_dir(dir),
        None => RoleCatalog::builtin(),
    };
    let templates = match &config.prompts_dir {
        Some(dir) => PromptTemplates::load_overrides(dir).map_err(|e| AppError::File {
            path: dir.clone(),
            message: e.to_string(),
        })?,
        None => PromptTemplates::default(),
    };
    let mut tools = ToolRegistry::builtin();
    if let Some(path) = &config.tools_config {
        let text = fs::read_to_string(path).map_err(|e| AppError::File {
            path: path.clone(),
            message: e.to_string(),
        })?;
        tools.apply_config(&text)?;
    }
    Ok((
        PipelineContext {
            registry,
            roles,
            templates,
            tools,
            provider,
        },
        verifier,
    ))
}

pub struct App {
    pub config: AppConfig,
    pub pipeline: PipelineContext,
    pub verifier: Arc<dyn CompletionProvider>,
    pub topics: TopicStore,
    pub jobs: Arc<JobStore>,
}

impl App {
    /// Builds the service from configuration and the environment.
    pub fn build(config: AppConfig) -> Result<(Self, Recovery), AppError> {
        let (pipeline, verifier) = build_pipeline(&config)?;
        Self::from_parts(config, pipeline, verifier)
    }

    pub fn from_parts(
        config: AppConfig,
        pipeline: PipelineContext,
        verifier: Arc<dyn CompletionProvider>,
    ) -> Result<(Self, Recovery), AppError> {
        let topics = TopicStore::open(config.topics_path())?;
        let (jobs, recovery) = JobStore::open(config.jobs_dir())?;
        Ok((
            Self {
                config,
                pipeline,
                verifier,
                topics,
                jobs: Arc::new(jobs),
            },
            recovery,
        ))
    }
}
