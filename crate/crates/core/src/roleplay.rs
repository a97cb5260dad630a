//! Role catalogue, chat-room idea seeding, memory rating and self-chat
//! dialogue generation.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompt::{render, PromptTemplates};
use crate::provider::{CompletionProvider, CompletionRequest, ProviderError};
use crate::types::{DataPoolEntry, GenerationConfig, Role, SeedFormat};

const MEDICAL_ROLES: &str = include_str!("../assets/roles/medical.json");

const GENERIC_NAME: &str = "an AI assistant";
const GENERIC_PROMPT: &str = "You give accurate, helpful and safe answers.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    Human,
    Assistant,
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Speaker::Human => "human",
            Speaker::Assistant => "assistant",
        })
    }
}

#[derive(Debug, Error)]
pub enum RoleplayError {
    #[error("no role catalogue for domain {0:?}")]
    UnknownDomain(String),
    #[error("role catalogue {path}: {message}")]
    Catalogue { path: PathBuf, message: String },
    #[error("role {0:?} appears more than once in the catalogue")]
    DuplicateRole(String),
    #[error("no roles were picked")]
    NoRoles,
    #[error("idea generation failed for role {role:?}: {source}")]
    Idea {
        role: String,
        /// Ideas gathered before the failure.
        partial: BTreeMap<String, String>,
        #[source]
        source: ProviderError,
    },
    #[error("memory {index} is owned by {owner:?}, not the rating role")]
    ForeignMemory { index: usize, owner: String },
    #[error("rating memory {index} failed: {source}")]
    Rating {
        index: usize,
        #[source]
        source: ProviderError,
    },
    #[error("dialogue needs at least one round")]
    ZeroRounds,
    #[error("round {round} {side} turn failed: {source}")]
    Dialogue {
        round: u32,
        side: Speaker,
        #[source]
        source: ProviderError,
    },
    #[error("round {round} {side} turn came back empty")]
    EmptyTurn { round: u32, side: Speaker },
}

/// Loads role catalogues, preferring `<dir>/<domain>.json` over the
/// compiled-in catalogues.
#[derive(Debug, Clone, Default)]
pub struct RoleCatalog {
    dir: Option<PathBuf>,
}

#[derive(Deserialize)]
struct CatalogueEntry {
    name: String,
    role_prompt: String,
}

impl RoleCatalog {
    pub fn builtin() -> Self {
        Self { dir: None }
    }

    pub fn with_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
        }
    }

    pub fn load_roles(&self, domain: &str) -> Result<Vec<Role>, RoleplayError> {
        let safe = !domain.is_empty()
            && domain
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_'));
        if !safe {
            return Err(RoleplayError::UnknownDomain(domain.to_owned()));
        }
        if let Some(dir) = &self.dir {
            let path = dir.join(format!("{domain}.json"));
            if path.exists() {
                let text = fs::read_to_string(&path).map_err(|e| RoleplayError::Catalogue {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
                return parse_catalogue(&text, domain, &path);
            }
        }
        match domain {
            "medical" => parse_catalogue(MEDICAL_ROLES, domain, Path::new("<builtin medical>")),
            _ => Err(RoleplayError::UnknownDomain(domain.to_owned())),
        }
    }

    /// Resolves picked role names against a domain catalogue, keeping the
    /// picked order.
    pub fn pick(&self, domain: &str, names: &[String]) -> Result<Vec<Role>, RoleplayError> {
        let roles = self.load_roles(domain)?;
        names
            .iter()
            .map(|name| {
                roles
                    .iter()
                    .find(|r| &r.name == name)
                    .cloned()
                    .ok_or_else(|| RoleplayError::Catalogue {
                        path: PathBuf::from(domain),
                        message: format!("no role named {name:?}"),
                    })
            })
            .collect()
    }
}

/// Loads the compiled-in catalogue for `domain`.
pub fn load_roles(domain: &str) -> Result<Vec<Role>, RoleplayError> {
    RoleCatalog::builtin().load_roles(domain)
}

fn parse_catalogue(text: &str, domain: &str, path: &Path) -> Result<Vec<Role>, RoleplayError> {
    let entries: Vec<CatalogueEntry> =
        serde_json::from_str(text).map_err(|e| RoleplayError::Catalogue {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
    let mut seen = HashSet::new();
    entries
        .into_iter()
        .map(|entry| {
            if !seen.insert(entry.name.clone()) {
                return Err(RoleplayError::DuplicateRole(entry.name));
            }
            Ok(Role {
                name: entry.name,
                role_prompt: entry.role_prompt,
                domain: domain.to_owned(),
            })
        })
        .collect()
}

fn joined_names(roles: &[Role]) -> String {
    roles.iter().map(|r| r.name.as_str()).collect::<Vec<_>>().join(", ")
}

/// Asks every picked role for its main point on `query`, one call per role.
pub async fn seed_ideas<P: CompletionProvider + ?Sized>(
    picked_roles: &[Role],
    query: &str,
    provider: &P,
    config: &GenerationConfig,
    templates: &PromptTemplates,
) -> Result<BTreeMap<String, String>, RoleplayError> {
    if picked_roles.is_empty() {
        return Err(RoleplayError::NoRoles);
    }
    let everyone = joined_names(picked_roles);
    let mut ideas = BTreeMap::new();
    for role in picked_roles {
        let prompt = render(
            &templates.idea,
            &[
                ("name", &role.name),
                ("role_prompt", &role.role_prompt),
                ("query", query),
                ("roles", &everyone),
            ],
        );
        match provider.complete(&CompletionRequest::new(prompt, config)).await {
            Ok(result) => {
                ideas.insert(role.name.clone(), result.text);
            }
            Err(source) => {
                return Err(RoleplayError::Idea {
                    role: role.name.clone(),
                    partial: ideas,
                    source,
                })
            }
        }
    }
    Ok(ideas)
}

/// A relevance score in `0..=5`; 0 means no rating could be extracted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Rating(u8);

impl Rating {
    pub const MAX: u8 = 5;
    pub const FALLBACK: Rating = Rating(0);

    pub fn new(value: u8) -> Option<Self> {
        (value <= Self::MAX).then_some(Self(value))
    }

    pub fn clamped(value: u64) -> Self {
        Self(value.min(u64::from(Self::MAX)) as u8)
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

impl TryFrom<u8> for Rating {
    type Error = String;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        Rating::new(value).ok_or_else(|| format!("rating {value} outside 0..=5"))
    }
}

impl From<Rating> for u8 {
    fn from(r: Rating) -> u8 {
        r.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryItem {
    pub owner_role: String,
    pub content: String,
    #[serde(default)]
    pub rating: Option<Rating>,
    /// Last rater reply, kept alongside the parsed rating.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
}

impl MemoryItem {
    pub fn new(owner_role: impl Into<String>, content: impl Into<String>) -> Self {
        Self {
            owner_role: owner_role.into(),
            content: content.into(),
            rating: None,
            response: None,
        }
    }
}

/// Minimum value among the maximal runs of ASCII digits in `text`.
///
/// Values too large for `u64` saturate; the comparison itself is exact.
pub fn extract_rating(text: &str) -> Option<u64> {
    let bytes = text.as_bytes();
    let mut best: Option<&str> = None;
    let mut i = 0;
    while i < bytes.len() {
        if !bytes[i].is_ascii_digit() {
            i += 1;
            continue;
        }
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        let run = significant_digits(&text[start..i]);
        if best.is_none_or(|b| numeric_less(run, b)) {
            best = Some(run);
        }
    }
    best.map(|digits| digits.parse::<u64>().unwrap_or(u64::MAX))
}

fn significant_digits(run: &str) -> &str {
    let trimmed = run.trim_start_matches('0');
    if trimmed.is_empty() {
        "0"
    } else {
        trimmed
    }
}

fn numeric_less(a: &str, b: &str) -> bool {
    (a.len(), a) < (b.len(), b)
}

/// Rates each memory from `role`'s point of view.
///
/// A reply without digits is regenerated up to `config.max_attempts` more
/// times before falling back to a rating of 0; values above 5 clamp to 5.
pub async fn rate_memories<P: CompletionProvider + ?Sized>(
    role: &Role,
    idea: &str,
    query: &str,
    memories: &[MemoryItem],
    provider: &P,
    config: &GenerationConfig,
    templates: &PromptTemplates,
) -> Result<Vec<MemoryItem>, RoleplayError> {
    if let Some((index, memory)) = memories
        .iter()
        .enumerate()
        .find(|(_, m)| m.owner_role != role.name)
    {
        return Err(RoleplayError::ForeignMemory {
            index,
            owner: memory.owner_role.clone(),
        });
    }

    let mut rated = Vec::with_capacity(memories.len());
    for (index, memory) in memories.iter().enumerate() {
        let prompt = render(
            &templates.rate,
            &[
                ("name", &role.name),
                ("idea", idea),
                ("query", query),
                ("memory", &memory.content),
            ],
        );
        let request = CompletionRequest::new(prompt, config);
        let mut rating = None;
        let mut response = String::new();
        for _ in 0..=config.max_attempts {
            response = provider
                .complete(&request)
                .await
                .map_err(|source| RoleplayError::Rating { index, source })?
                .text;
            rating = extract_rating(&response);
            if rating.is_some() {
                break;
            }
        }
        rated.push(MemoryItem {
            rating: Some(rating.map_or(Rating::FALLBACK, Rating::clamped)),
            response: Some(response),
            ..memory.clone()
        });
    }
    Ok(rated)
}

/// Drops memories rated below `threshold`. Unrated memories are kept.
pub fn filter_memories(memories: Vec<MemoryItem>, threshold: u8) -> Vec<MemoryItem> {
    memories
        .into_iter()
        .filter(|m| m.rating.is_none_or(|r| r.value() >= threshold))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub index: usize,
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub rng_seed: u64,
}

/// A multi-turn dialogue ready for instruction tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionSample {
    pub id: String,
    pub seed: String,
    pub roles: Vec<String>,
    pub turns: Vec<DialogueTurn>,
    pub meta: SampleMeta,
}

impl InstructionSample {
    /// Checks turn numbering, non-empty text and strict human/assistant
    /// alternation starting with the human side.
    pub fn validate(&self) -> Result<(), String> {
        if self.turns.is_empty() {
            return Err("sample has no turns".into());
        }
        if self.turns.len() % 2 != 0 {
            return Err(format!("odd turn count {}", self.turns.len()));
        }
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.index != i + 1 {
                return Err(format!("turn {} carries index {}", i + 1, turn.index));
            }
            let expected = if i % 2 == 0 {
                Speaker::Human
            } else {
                Speaker::Assistant
            };
            if turn.speaker != expected {
                return Err(format!("turn {} is {} but should be {expected}", i + 1, turn.speaker));
            }
            if turn.text.trim().is_empty() {
                return Err(format!("turn {} is empty", i + 1));
            }
        }
        Ok(())
    }

    /// Number of human/assistant pairs.
    pub fn rounds(&self) -> usize {
        self.turns.len() / 2
    }
}

fn render_transcript(turns: &[DialogueTurn]) -> String {
    let mut out = String::new();
    for turn in turns {
        let label = match turn.speaker {
            Speaker::Human => "Human",
            Speaker::Assistant => "Assistant",
        };
        out.push_str(label);
        out.push_str(": ");
        out.push_str(&turn.text);
        out.push('\n');
    }
    out
}

fn sample_id(seed: &DataPoolEntry, roles: &[Role], config: &GenerationConfig) -> String {
    let canonical = serde_json::json!({
        "provenance": seed.provenance(),
        "roles": roles.iter().map(|r| &r.name).collect::<Vec<_>>(),
        "rounds": config.rounds,
        "rng_seed": config.rng_seed,
    });
    let digest = Sha256::digest(canonical.to_string().as_bytes());
    hex::encode(&digest[..8])
}

/// Self-chat: the provider alternately plays an inquirer and the first
/// role in `roles` (or a generic assistant) for `config.rounds` rounds.
///
/// Instruction-formatted seeds open the dialogue verbatim; other seeds have
/// the opening question generated too. Every prompt embeds the transcript
/// so far.
pub async fn generate_dialogue<P: CompletionProvider + ?Sized>(
    seed: &DataPoolEntry,
    roles: &[Role],
    config: &GenerationConfig,
    provider: &P,
    templates: &PromptTemplates,
) -> Result<InstructionSample, RoleplayError> {
    if config.rounds < 1 {
        return Err(RoleplayError::ZeroRounds);
    }
    let (name, role_prompt) = roles
        .first()
        .map_or((GENERIC_NAME, GENERIC_PROMPT), |r| (r.name.as_str(), r.role_prompt.as_str()));
    let everyone = if roles.is_empty() {
        GENERIC_NAME.to_owned()
    } else {
        joined_names(roles)
    };
    let query = seed.seed_text();

    let mut turns: Vec<DialogueTurn> = Vec::with_capacity(2 * config.rounds as usize);
    for round in 1..=config.rounds {
        let human_text = if round == 1 && seed.format() == SeedFormat::Instruction {
            query.to_owned()
        } else {
            let prompt = render(
                &templates.human_side,
                &[("query", query), ("transcript", &render_transcript(&turns))],
            );
            ask(provider, prompt, config, round, Speaker::Human).await?
        };
        turns.push(DialogueTurn {
            index: turns.len() + 1,
            speaker: Speaker::Human,
            text: human_text,
        });

        let prompt = render(
            &templates.assistant_side,
            &[
                ("name", name),
                ("role_prompt", role_prompt),
                ("roles", &everyone),
                ("query", query),
                ("transcript", &render_transcript(&turns)),
            ],
        );
        let reply = ask(provider, prompt, config, round, Speaker::Assistant).await?;
        turns.push(DialogueTurn {
            index: turns.len() + 1,
            speaker: Speaker::Assistant,
            text: reply,
        });
    }

    Ok(InstructionSample {
        id: sample_id(seed, roles, config),
        seed: query.to_owned(),
        roles: roles.iter().map(|r| r.name.clone()).collect(),
        turns,
        meta: SampleMeta {
            model: provider.name().to_owned(),
            temperature: config.temperature,
            max_tokens: config.max_tokens,
            rng_seed: config.rng_seed,
        },
    })
}

async fn ask<P: CompletionProvider + ?Sized>(
    provider: &P,
    prompt: String,
    config: &GenerationConfig,
    round: u32,
    side: Speaker,
) -> Result<String, RoleplayError> {
    let result = provider
        .complete(&CompletionRequest::new(prompt, config))
        .await
        .map_err(|source| RoleplayError::Dialogue { round, side, source })?;
    let text = result.text.trim();
    if text.is_empty() {
        return Err(RoleplayError::EmptyTurn { round, side });
    }
    Ok(text.to_owned())
}
