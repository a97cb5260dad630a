//! End-to-end runs: data pool to dialogues or trajectories, and dialogue
//! verification. Shared by the command line and the job service.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{IngestError, PoolSelection, Registry};
use crate::prompt::{has_placeholder, PromptTemplates};
use crate::provider::CompletionProvider;
use crate::roleplay::{
    filter_memories, generate_dialogue, rate_memories, seed_ideas, InstructionSample, MemoryItem, RoleCatalog,
    RoleplayError,
};
use crate::trajectory::{
    run_cot, run_react, run_reflexion, seed_question, ToolRegistry, Trajectory, TrajectoryError,
    DEFAULT_COT_TEMPLATE,
};
use crate::types::{FieldError, Framework, GenerationConfig, Role, Topic};
use crate::verify::{
    aggregate_hallucination, extract_qa_pairs, verify_pair, HallucinationReport, TurnSelection, VerificationVerdict,
    VerifyError,
};

pub const DEFAULT_DOMAIN: &str = "medical";
pub const DEFAULT_MAX_TRIALS: u32 = 3;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {}", describe(.0))]
    InvalidConfig(Vec<FieldError>),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("sample {index}: {source}")]
    Roleplay {
        index: usize,
        #[source]
        source: RoleplayError,
    },
    #[error("sample {index}: {source}")]
    Trajectory {
        index: usize,
        #[source]
        source: TrajectoryError,
    },
    #[error("sample {sample_id}: {source}")]
    Verify {
        sample_id: String,
        #[source]
        source: VerifyError,
    },
    #[error("the selection produced an empty data pool")]
    EmptyPool,
    #[error("canceled")]
    Canceled,
}

fn describe(errors: &[FieldError]) -> String {
    errors
        .iter()
        .map(|e| format!("{}: {}", e.field, e.message))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Everything a run needs besides its own configuration.
#[derive(Clone)]
pub struct PipelineContext {
    pub registry: Arc<Registry>,
    pub roles: RoleCatalog,
    pub templates: PromptTemplates,
    pub tools: ToolRegistry,
    pub provider: Arc<dyn CompletionProvider>,
}

/// Progress reporting and cooperative cancellation for long runs.
pub struct RunControl<'a> {
    progress: Box<dyn Fn(usize, usize) + Send + Sync + 'a>,
    canceled: Box<dyn Fn() -> bool + Send + Sync + 'a>,
}

impl<'a> RunControl<'a> {
    pub fn new(
        progress: impl Fn(usize, usize) + Send + Sync + 'a,
        canceled: impl Fn() -> bool + Send + Sync + 'a,
    ) -> Self {
        Self {
            progress: Box::new(progress),
            canceled: Box::new(canceled),
        }
    }

    pub fn none() -> Self {
        Self::new(|_, _| {}, || false)
    }

    fn report(&self, done: usize, total: usize) {
        (self.progress)(done, total)
    }

    fn check(&self) -> Result<(), PipelineError> {
        if (self.canceled)() {
            Err(PipelineError::Canceled)
        } else {
            Ok(())
        }
    }
}

impl Default for RunControl<'_> {
    fn default() -> Self {
        Self::none()
    }
}

/// Configuration of a dialogue or trajectory generation run. The generation
/// parameters sit at the top level next to the selection fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    #[serde(flatten)]
    pub generation: GenerationConfig,
    pub datasets: Vec<String>,
    /// Uploaded topic ids to include; absent means every uploaded topic.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub topic_ids: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_dataset_cap: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_samples: Option<usize>,
    pub domain: String,
    /// Run the idea and memory-rating loop for each sample.
    pub chat_room: bool,
    pub memory_threshold: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cot_template: Option<String>,
    pub demonstrations: Vec<String>,
    pub max_trials: u32,
    pub include_incomplete: bool,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            generation: GenerationConfig::default(),
            datasets: Vec::new(),
            topic_ids: None,
            per_dataset_cap: None,
            max_samples: None,
            domain: DEFAULT_DOMAIN.to_owned(),
            chat_room: false,
            memory_threshold: 0,
            cot_template: None,
            demonstrations: Vec::new(),
            max_trials: DEFAULT_MAX_TRIALS,
            include_incomplete: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenerateKind {
    Dialogue,
    Trajectory,
}

impl GenerateConfig {
    /// Field-level checks against the context (datasets, roles, tools).
    pub fn validate(&self, kind: GenerateKind, ctx: &PipelineContext) -> Result<(), Vec<FieldError>> {
        let mut errors = self.generation.validate().err().unwrap_or_default();
        for id in &self.datasets {
            if ctx.registry.descriptor(id).is_none() {
                errors.push(FieldError::new("datasets", format!("unknown dataset {id:?}")));
            }
        }
        if self.per_dataset_cap == Some(0) {
            errors.push(FieldError::new("per_dataset_cap", "must be positive"));
        }
        if self.max_samples == Some(0) {
            errors.push(FieldError::new("max_samples", "must be positive"));
        }
        if self.memory_threshold > 5 {
            errors.push(FieldError::new("memory_threshold", "must lie in [0, 5]"));
        }
        if let Err(e) = ctx.roles.pick(&self.domain, &self.generation.picked_roles) {
            let field = match e {
                RoleplayError::Catalogue { .. } => "picked_roles",
                _ => "domain",
            };
            errors.push(FieldError::new(field, e.to_string()));
        }
        if kind == GenerateKind::Trajectory {
            let framework = self.generation.framework;
            if framework != Framework::Cot {
                if self.generation.tools.is_empty() {
                    errors.push(FieldError::new("tools", "select at least one tool"));
                }
                let known = ctx.tools.names();
                for tool in &self.generation.tools {
                    if !known.contains(tool) {
                        errors.push(FieldError::new("tools", format!("unknown tool {tool:?}")));
                    }
                }
            }
            if let Some(template) = &self.cot_template {
                if !has_placeholder(template, "question") {
                    errors.push(FieldError::new("cot_template", "must contain {question}"));
                }
            }
            if framework == Framework::Reflexion && self.max_trials < 1 {
                errors.push(FieldError::new("max_trials", "must be at least 1"));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }

    fn picked_roles(&self, ctx: &PipelineContext) -> Result<Vec<Role>, PipelineError> {
        ctx.roles
            .pick(&self.domain, &self.generation.picked_roles)
            .map_err(|e| PipelineError::InvalidConfig(vec![FieldError::new("picked_roles", e.to_string())]))
    }
}

fn seeds(
    ctx: &PipelineContext,
    config: &GenerateConfig,
    topics: &[Topic],
) -> Result<Vec<crate::types::DataPoolEntry>, PipelineError> {
    let pool = ctx.registry.build_data_pool(&PoolSelection {
        topics,
        dataset_ids: &config.datasets,
        per_dataset_cap: config.per_dataset_cap,
        rng_seed: config.generation.rng_seed,
    })?;
    let mut entries = pool.entries;
    if let Some(max) = config.max_samples {
        entries.truncate(max);
    }
    if entries.is_empty() {
        return Err(PipelineError::EmptyPool);
    }
    Ok(entries)
}

/// Idea and memory ratings gathered for one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatRoomRecord {
    pub sample_id: String,
    pub ideas: BTreeMap<String, String>,
    pub memories: BTreeMap<String, Vec<MemoryItem>>,
}

#[derive(Debug, Clone, Default)]
pub struct DialogueRun {
    pub samples: Vec<InstructionSample>,
    pub chat_rooms: Vec<ChatRoomRecord>,
}

/// The picked roles with the lead for sample `index` moved to the front.
pub fn rotate_roles(roles: &[Role], index: usize) -> Vec<Role> {
    if roles.is_empty() {
        return Vec::new();
    }
    let mut rotated = roles.to_vec();
    rotated.rotate_left(index % roles.len());
    rotated
}

async fn chat_room(
    ctx: &PipelineContext,
    config: &GenerateConfig,
    roles: &[Role],
    query: &str,
    index: usize,
) -> Result<(BTreeMap<String, String>, BTreeMap<String, Vec<MemoryItem>>), PipelineError> {
    let wrap = |source| PipelineError::Roleplay { index, source };
    let ideas = seed_ideas(roles, query, &*ctx.provider, &config.generation, &ctx.templates)
        .await
        .map_err(wrap)?;
    let mut memories = BTreeMap::new();
    for role in roles {
        let observed: Vec<MemoryItem> = roles
            .iter()
            .filter(|other| other.name != role.name)
            .map(|other| MemoryItem::new(&role.name, format!("{}: {}", other.name, ideas[&other.name])))
            .collect();
        let rated = rate_memories(
            role,
            &ideas[&role.name],
            query,
            &observed,
            &*ctx.provider,
            &config.generation,
            &ctx.templates,
        )
        .await
        .map_err(wrap)?;
        memories.insert(role.name.clone(), filter_memories(rated, config.memory_threshold));
    }
    Ok((ideas, memories))
}

/// Generates one dialogue per pool entry. The lead role rotates across samples.
pub async fn run_dialogues(
    ctx: &PipelineContext,
    config: &GenerateConfig,
    topics: &[Topic],
    control: &RunControl<'_>,
) -> Result<DialogueRun, PipelineError> {
    config
        .validate(GenerateKind::Dialogue, ctx)
        .map_err(PipelineError::InvalidConfig)?;
    let roles = config.picked_roles(ctx)?;
    let entries = seeds(ctx, config, topics)?;
    let total = entries.len();
    control.report(0, total);
    let mut run = DialogueRun::default();
    for (index, entry) in entries.iter().enumerate() {
        control.check()?;
        let lineup = rotate_roles(&roles, index);
        let sample = generate_dialogue(entry, &lineup, &config.generation, &*ctx.provider, &ctx.templates)
            .await
            .map_err(|source| PipelineError::Roleplay { index, source })?;
        if config.chat_room && !lineup.is_empty() {
            let (ideas, memories) = chat_room(ctx, config, &lineup, entry.seed_text(), index).await?;
            run.chat_rooms.push(ChatRoomRecord {
                sample_id: sample.id.clone(),
                ideas,
                memories,
            });
        }
        run.samples.push(sample);
        control.report(index + 1, total);
    }
    Ok(run)
}

/// Produces one trajectory per pool entry with the configured framework.
pub async fn run_trajectories(
    ctx: &PipelineContext,
    config: &GenerateConfig,
    topics: &[Topic],
    control: &RunControl<'_>,
) -> Result<Vec<Trajectory>, PipelineError> {
    config
        .validate(GenerateKind::Trajectory, ctx)
        .map_err(PipelineError::InvalidConfig)?;
    let entries = seeds(ctx, config, topics)?;
    let total = entries.len();
    control.report(0, total);
    let generation = &config.generation;
    let provider = &*ctx.provider;
    let mut out = Vec::with_capacity(total);
    for (index, entry) in entries.iter().enumerate() {
        control.check()?;
        let wrap = |source| PipelineError::Trajectory { index, source };
        let question = seed_question(entry, provider, generation).await.map_err(wrap)?;
        let trajectory = match generation.framework {
            Framework::React => run_react(&question, &generation.tools, &ctx.tools, provider, generation).await,
            Framework::Cot => {
                let template = config.cot_template.as_deref().unwrap_or(DEFAULT_COT_TEMPLATE);
                run_cot(&question, template, &config.demonstrations, provider, generation).await
            }
            Framework::Reflexion => {
                run_reflexion(
                    &question,
                    &generation.tools,
                    &ctx.tools,
                    provider,
                    generation,
                    config.max_trials,
                )
                .await
            }
        }
        .map_err(wrap)?;
        out.push(trajectory);
        control.report(index + 1, total);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationRun {
    pub verdicts: Vec<VerificationVerdict>,
    pub report: HallucinationReport,
}

/// Verifies the selected assistant turns of every sample and aggregates the
/// ratios by conversation length in rounds.
pub async fn run_verification(
    samples: &[InstructionSample],
    selection: &TurnSelection,
    verifier: &dyn CompletionProvider,
    config: &GenerationConfig,
    control: &RunControl<'_>,
) -> Result<VerificationRun, PipelineError> {
    let mut work = Vec::new();
    for sample in samples {
        let pairs = extract_qa_pairs(sample, selection).map_err(|source| PipelineError::Verify {
            sample_id: sample.id.clone(),
            source,
        })?;
        work.extend(pairs.into_iter().map(|p| (sample.id.as_str(), p)));
    }
    let total = work.len();
    control.report(0, total);
    let mut verdicts = Vec::with_capacity(total);
    for (done, (sample_id, pair)) in work.iter().enumerate() {
        control.check()?;
        let verdict = verify_pair(sample_id, pair, verifier, config)
            .await
            .map_err(|source| PipelineError::Verify {
                sample_id: sample_id.to_string(),
                source,
            })?;
        verdicts.push(verdict);
        control.report(done + 1, total);
    }
    let turn_counts: HashMap<String, usize> = samples.iter().map(|s| (s.id.clone(), s.rounds())).collect();
    let report = aggregate_hallucination(&verdicts, &turn_counts).map_err(|source| PipelineError::Verify {
        sample_id: String::new(),
        source,
    })?;
    Ok(VerificationRun { verdicts, report })
}
