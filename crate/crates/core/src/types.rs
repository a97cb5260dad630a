//! Domain values shared across the pipeline.
//!
//! Everything here is an immutable value once constructed. Constructors
//! validate their inputs, so holding a `Topic` or a `GenerationConfig`
//! means its invariants already hold.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Errors raised while validating raw topic input.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopicError {
    #[error("topic text is empty")]
    EmptyTopic,
    #[error("keyword topic contains sentence punctuation: {0:?}")]
    MalformedKeyword(String),
}

/// Whether a topic is a bare keyword or a full key sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopicKind {
    Keyword,
    Sentence,
}

impl TopicKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TopicKind::Keyword => "keyword",
            TopicKind::Sentence => "sentence",
        }
    }
}

impl fmt::Display for TopicKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TopicKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "keyword" => Ok(TopicKind::Keyword),
            "sentence" => Ok(TopicKind::Sentence),
            other => Err(format!("unknown topic kind {other:?} (expected keyword|sentence)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopicSource {
    UserUpload,
    Dataset,
}

/// A validated user topic. Build one with [`validate_topic`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawTopic")]
pub struct Topic {
    id: String,
    kind: TopicKind,
    text: String,
    source: TopicSource,
}

#[derive(Deserialize)]
struct RawTopic {
    kind: TopicKind,
    text: String,
    #[serde(default = "default_source")]
    source: TopicSource,
}

fn default_source() -> TopicSource {
    TopicSource::UserUpload
}

impl TryFrom<RawTopic> for Topic {
    type Error = TopicError;

    fn try_from(raw: RawTopic) -> Result<Self, Self::Error> {
        let mut topic = validate_topic(&raw.text, raw.kind)?;
        topic.source = raw.source;
        Ok(topic)
    }
}

impl Topic {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn kind(&self) -> TopicKind {
        self.kind
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn source(&self) -> TopicSource {
        self.source
    }

    pub fn with_source(mut self, source: TopicSource) -> Self {
        self.source = source;
        self
    }
}

/// Validates raw topic text of the given kind.
///
/// The returned topic carries trimmed text and a content-hash id over
/// `(kind, normalize_seed(text))`, so re-uploading the same topic yields the
/// same id.
pub fn validate_topic(raw_text: &str, kind: TopicKind) -> Result<Topic, TopicError> {
    let text = raw_text.trim();
    if text.is_empty() {
        return Err(TopicError::EmptyTopic);
    }
    if kind == TopicKind::Keyword && !keyword_punctuation_ok(text) {
        return Err(TopicError::MalformedKeyword(text.to_owned()));
    }
    Ok(Topic {
        id: topic_id(kind, text),
        kind,
        text: text.to_owned(),
        source: TopicSource::UserUpload,
    })
}

fn is_sentence_end(c: char) -> bool {
    matches!(c, '.' | '?' | '!')
}

// At most one sentence terminator, and only as the final character.
fn keyword_punctuation_ok(text: &str) -> bool {
    let count = text.chars().filter(|&c| is_sentence_end(c)).count();
    match count {
        0 => true,
        1 => text.chars().last().is_some_and(is_sentence_end),
        _ => false,
    }
}

fn topic_id(kind: TopicKind, text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(kind.as_str().as_bytes());
    hasher.update([0u8]);
    hasher.update(normalize_seed(text).as_bytes());
    hex::encode(&hasher.finalize()[..8])
}

/// Collapses whitespace runs to single spaces and trims both ends.
pub fn normalize_seed(entry_text: &str) -> String {
    entry_text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    Instruction,
    Raw,
}

/// Catalogue entry for one curated dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub id: String,
    pub name: String,
    pub domain: String,
    pub format: DatasetFormat,
    pub record_count: usize,
    #[serde(default)]
    pub license_note: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Topic,
    Dataset,
}

/// Where a data-pool entry came from: a topic id or `dataset_id/record_id`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Provenance {
    pub kind: SourceKind,
    pub id: String,
}

/// Shape of the text a pool entry carries. Instruction seeds are already
/// phrased as a question and are used verbatim as the opening turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedFormat {
    Instruction,
    Raw,
    Keyword,
    Sentence,
}

impl From<TopicKind> for SeedFormat {
    fn from(kind: TopicKind) -> Self {
        match kind {
            TopicKind::Keyword => SeedFormat::Keyword,
            TopicKind::Sentence => SeedFormat::Sentence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("data pool entry has empty seed text")]
pub struct EmptySeedText;

/// One generation seed in the intermediate data pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataPoolEntry {
    seed_text: String,
    provenance: Provenance,
    domain: String,
    format: SeedFormat,
}

impl DataPoolEntry {
    pub fn new(
        seed_text: impl Into<String>,
        provenance: Provenance,
        domain: impl Into<String>,
        format: SeedFormat,
    ) -> Result<Self, EmptySeedText> {
        let seed_text = seed_text.into();
        if seed_text.trim().is_empty() {
            return Err(EmptySeedText);
        }
        Ok(Self {
            seed_text,
            provenance,
            domain: domain.into(),
            format,
        })
    }

    pub fn seed_text(&self) -> &str {
        &self.seed_text
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    pub fn format(&self) -> SeedFormat {
        self.format
    }
}

/// A persona the generator can speak as.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Role {
    pub name: String,
    pub role_prompt: String,
    #[serde(default)]
    pub domain: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Framework {
    #[default]
    React,
    Cot,
    Reflexion,
}

impl fmt::Display for Framework {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Framework::React => "react",
            Framework::Cot => "cot",
            Framework::Reflexion => "reflexion",
        })
    }
}

impl std::str::FromStr for Framework {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "react" => Ok(Framework::React),
            "cot" => Ok(Framework::Cot),
            "reflexion" => Ok(Framework::Reflexion),
            other => Err(format!("unknown framework {other:?} (expected react|cot|reflexion)")),
        }
    }
}

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_MAX_TOKENS: u32 = 1000;
pub const DEFAULT_MAX_STEPS: usize = 8;
pub const DEFAULT_MAX_ATTEMPTS: u32 = 2;

/// A single field-level validation failure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Run parameters for dialogue and trajectory generation.
///
/// Missing fields deserialize to their defaults; call [`GenerationConfig::validate`]
/// before use on untrusted input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub rounds: u32,
    pub temperature: f64,
    pub max_tokens: u32,
    pub framework: Framework,
    pub picked_roles: Vec<String>,
    pub tools: Vec<String>,
    pub rng_seed: u64,
    pub max_steps: usize,
    pub max_attempts: u32,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            rounds: 1,
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            framework: Framework::React,
            picked_roles: Vec::new(),
            tools: Vec::new(),
            rng_seed: 0,
            max_steps: DEFAULT_MAX_STEPS,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), Vec<FieldError>> {
        let mut errors = Vec::new();
        if self.rounds < 1 {
            errors.push(FieldError::new("rounds", "must be at least 1"));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            errors.push(FieldError::new("temperature", "must lie in [0, 2]"));
        }
        if self.max_tokens < 1 {
            errors.push(FieldError::new("max_tokens", "must be positive"));
        }
        if self.max_steps < 1 {
            errors.push(FieldError::new("max_steps", "must be at least 1"));
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }
}
