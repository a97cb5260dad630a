//! Agent-tuning trajectories: seed questions, the ReAct
//! thought/action/observation loop, CoT templates, Reflexion retries and the
//! search tools the loop can call.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ingest::{DatasetRecord, RecordPayload};
use crate::prompt::{has_placeholder, render};
use crate::provider::{CompletionProvider, CompletionRequest, ProviderError};
use crate::types::{DataPoolEntry, Framework, GenerationConfig, SeedFormat};

pub const ENV_SERP_API_KEY: &str = "MIMIR_SERP_API_KEY";
pub const ENV_TAVILY_API_KEY: &str = "MIMIR_TAVILY_API_KEY";

/// Observation recorded when a search returns nothing.
pub const NO_RESULTS: &str = "No results found.";

const CONTEXTUALIZE: &str = "The following notes come from a medical or domain record: {text}\n\
Rewrite them as a natural first-person message from someone describing their situation and asking for advice. \
Keep every detail from the notes, add nothing that is not implied, and end with a question. \
Write only the message.";

const REACT_SCAFFOLD: &str = "Answer the following question as best you can. You have access to the following tools:\n\
\n\
{tools}\n\
\n\
Use this format:\n\
\n\
Thought: reason about what to do next\n\
Action: tool_name[tool input]\n\
Observation: the result of the action\n\
... (Thought, Action and Observation may repeat)\n\
Thought: I now know the final answer\n\
Final Answer: the answer to the original question\n\
\n\
{reflections}Question: {question}\n\
{transcript}";

const FORMAT_REMINDER: &str = "\n\nYour previous reply did not follow the format. Reply with \"Thought: ...\" \
followed by exactly one of \"Action: tool_name[tool input]\" or \"Final Answer: ...\".";

const REFLECTION: &str = "You tried to answer the question below but did not reach a final answer within the step limit.\n\
\n\
Question: {question}\n\
\n\
Your attempt:\n\
{transcript}\n\
In two or three sentences, explain what went wrong and give a concrete plan for the next attempt.";

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("seed record has no text")]
    EmptySeed,
    #[error("tool {0:?} is not registered")]
    UnknownTool(String),
    #[error("template lacks the {{{0}}} placeholder")]
    MissingPlaceholder(String),
    #[error("reflexion needs at least one trial")]
    ZeroTrials,
    #[error("step {step}: provider failed: {source}")]
    Provider {
        step: usize,
        #[source]
        source: ProviderError,
    },
    #[error("step {step}: could not parse model output after a format reminder: {text:?}")]
    UnparseableStep { step: usize, text: String },
    #[error("tool config: {0}")]
    ToolConfig(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchResult {
    pub rank: usize,
    pub title: String,
    pub snippet: String,
    #[serde(default)]
    pub highlighted: Vec<String>,
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ToolError {
    #[error("tool unavailable: {0}")]
    Unavailable(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SearchError {
    #[error("tool {0:?} is not registered")]
    UnknownTool(String),
    #[error("tool unavailable: {0}")]
    ToolUnavailable(String),
    #[error("search returned no results")]
    EmptyResults,
}

impl SearchError {
    /// Text the ReAct loop records as the observation for this failure.
    pub fn observation(&self) -> String {
        match self {
            SearchError::EmptyResults => NO_RESULTS.to_owned(),
            SearchError::ToolUnavailable(msg) => format!("Tool error: {msg}"),
            SearchError::UnknownTool(name) => format!("Tool error: tool {name} is not available"),
        }
    }
}

#[async_trait]
pub trait SearchTool: Send + Sync {
    fn name(&self) -> &str;

    fn description(&self) -> &str {
        "search the web and return the most relevant result"
    }

    /// Results with consecutive ranks from 1.
    async fn search(&self, query: &str) -> Result<Vec<SearchResult>, ToolError>;
}

/// Observation for the rank-1 result: its highlighted terms joined by spaces,
/// else its snippet, else its title.
pub fn observation_for(results: &[SearchResult]) -> Option<String> {
    let top = results.iter().find(|r| r.rank == 1).or_else(|| results.first())?;
    let highlights: Vec<&str> = top
        .highlighted
        .iter()
        .map(|h| h.trim())
        .filter(|h| !h.is_empty())
        .collect();
    let observation = if !highlights.is_empty() {
        highlights.join(" ")
    } else if !top.snippet.trim().is_empty() {
        top.snippet.clone()
    } else {
        top.title.clone()
    };
    Some(observation)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchOutcome {
    pub results: Vec<SearchResult>,
    pub observation: String,
}

fn rerank(mut results: Vec<SearchResult>) -> Vec<SearchResult> {
    for (i, r) in results.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    results
}

/// Deterministic offline search backed by fixtures. Queries without a
/// fixture get a single echo result.
#[derive(Debug, Clone, Default)]
pub struct MockSearch {
    fixtures: BTreeMap<String, Vec<SearchResult>>,
}

impl MockSearch {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fixture(mut self, query: impl Into<String>, results: Vec<SearchResult>) -> Self {
        self.fixtures.insert(query.into(), rerank(results));
        self
    }
}

#[async_trait]
impl SearchTool for MockSearch {
    fn name(&self) -> &str {
        "mock_search"
    }

    fn description(&self) -> &str {
        "offline search over fixed fixtures"
    }

    async fn search(&self, query: &str) -> Result<Vec<SearchResult>, ToolError> {
        if let Some(results) = self.fixtures.get(query) {
            return Ok(results.clone());
        }
        Ok(vec![SearchResult {
            rank: 1,
            title: format!("Mock result for {query}"),
            snippet: format!("No live search was performed for \"{query}\"."),
            highlighted: Vec::new(),
            url: format!("mock://search/{}", query.replace(' ', "+")),
        }])
    }
}

/// Upstream JSON field names read by the SerpAPI adapter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SerpFields {
    pub results: String,
    pub title: String,
    pub snippet: String,
    pub url: String,
    pub highlighted: String,
}

impl Default for SerpFields {
    fn default() -> Self {
        Self {
            results: "organic_results".into(),
            title: "title".into(),
            snippet: "snippet".into(),
            url: "link".into(),
            highlighted: "snippet_highlighted_words".into(),
        }
    }
}

/// Maps a SerpAPI Google response onto ranked results.
pub fn parse_serp(value: &Value, fields: &SerpFields) -> Vec<SearchResult> {
    let items = value.get(&fields.results).and_then(Value::as_array);
    let results = items
        .into_iter()
        .flatten()
        .map(|item| SearchResult {
            rank: 0,
            title: str_field(item, &fields.title),
            snippet: str_field(item, &fields.snippet),
            highlighted: item
                .get(&fields.highlighted)
                .and_then(Value::as_array)
                .map(|words| words.iter().filter_map(Value::as_str).map(str::to_owned).collect())
                .unwrap_or_default(),
            url: str_field(item, &fields.url),
        })
        .collect();
    rerank(results)
}

fn str_field(item: &Value, key: &str) -> String {
    item.get(key).and_then(Value::as_str).unwrap_or_default().to_owned()
}

fn http_client() -> reqwest::Client {
    reqwest::Client::builder()
        .timeout(Duration::from_secs(30))
        .build()
        .unwrap_or_default()
}

fn tool_unavailable(err: reqwest::Error) -> ToolError {
    ToolError::Unavailable(err.to_string())
}

/// Google search through SerpAPI (`google_search`).
#[derive(Debug, Clone)]
pub struct SerpApiSearch {
    name: String,
    endpoint: String,
    api_key: Option<String>,
    fields: SerpFields,
    client: reqwest::Client,
}

impl SerpApiSearch {
    pub const DEFAULT_ENDPOINT: &'static str = "https://serpapi.com/search.json";

    pub fn new(api_key: Option<String>) -> Self {
        Self {
            name: "google_search".into(),
            endpoint: Self::DEFAULT_ENDPOINT.into(),
            api_key,
            fields: SerpFields::default(),
            client: http_client(),
        }
    }

    pub fn from_env() -> Self {
        Self::new(std::env::var(ENV_SERP_API_KEY).ok().filter(|k| !k.is_empty()))
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_endpoint(mut self, endpoint: impl Into<String>) -> Self {
        self.endpoint = endpoint.into();
        self
    }

    pub fn with_fields(mut self, fields: SerpFields) -> Self {
        self.fields = fields;
        self
    }
}

#[async_trait]
impl SearchTool for SerpApiSearch {
    fn name(&self) -> &str {
        &self.name
    }

    fn description(&self) -> &str {
        "Google search; returns the highlighted words of the top result"
    }

    async fn search(&self, query: &str) -> Result<Vec<SearchResult>, ToolError> {
        let key = self
            .api_key
            .as_deref()
            .ok_or_else(|| ToolError::Unavailable(format!("{ENV_SERP_API_KEY} is not set")))?;
        let response = self
            .client
            .get(&self.endpoint)
            .query(&[("engine", "google"), ("q", query), ("api_key", key)])
            .send()
            .await
            .map_err(tool_unavailable)?;
        if !response.status().is_success() {
            return Err(ToolError::Unavailable(format!("SerpAPI returned {}", response.status())));
        }
        let body: Value = response.json().await.map_err(tool_unavailable)?;
        Ok(parse_serp(&body, &self.fields))
    }
}

/// Upstream JSON field names read by the Tavily adapter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TavilyFields {
    pub results: String,
    pub title: String,
    pub snippet: String,
    pub url: String,
    pub answer: String,
}

impl Default for TavilyFields {
    fn default() -> Self {
        Self {
            results: "results".into(),
            title: "title".into(),
            snippet: "content".into(),
            url: "url".into(),
            answer: "answer".into(),
        }
    }
}

/// Maps a Tavily response onto ranked results. Tavily's generated answer,
/// when present, becomes the highlighted text of the top result.
pub fn parse_tavily(value: &Value, fields: &TavilyFields) -> Vec<SearchResult> {
    let mut results: Vec<SearchResult> = value
        .get(&fields.results)
        .and_then(Value::as_array)
        .into_iter()
        .flatten()
        .map(|item| SearchResult {
            rank: 0,
            title: str_field(item, &fields.title),
            snippet: str_field(item, &fields.snippet),
            highlighted: Vec::new(),
            url: str_field(item, &fields.url),
        })
        .collect();
    let answer = value
        .get(&fields.answer)
        .and_then(Value::as_str)
        .filter(|a| !a.trim().is_empty());
    if let (Some(answer), Some(top)) = (answer, results.first_mut()) {
        top.highlighted = vec![answer.to_owned()];
    }
    rerank(results)
}

/// Tavily search API (`tavily_search`).
#[derive(Debug, Clone)]
pub struct TavilySearch {
    name: String,
    endpoint: String,
    api_key: Option<String>,
    fields: TavilyFields,
    client: reqwest::Client,
}

impl TavilySearch {
    pub const DEFAULT_ENDPOINT: &'static str = "https://api.tavily.com/search";

    pub fn new(api_key: Option<String>) -> Self {
        Self {
            name: "tavily_search".into(),
            endpoint: Self::DEFAULT_ENDPOINT.into(),
            api_key,
            fields: TavilyFields::default(),
            client: http_client(),
        }
    }

    pub fn from_env() -> Self {
        Self::new(std::env::var(ENV_TAVILY_API_KEY).ok().filter(|k| !k.is_empty()))
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_endpoint(mut self, endpoint: impl Into<String>) -> Self {
        self.endpoint = endpoint.into();
        self
    }

    pub fn with_fields(mut self, fields: TavilyFields) -> Self {
        self.fields = fields;
        self
    }
}

#[async_trait]
impl SearchTool for TavilySearch {
    fn name(&self) -> &str {
        &self.name
    }

    fn description(&self) -> &str {
        "Tavily web search; returns a short answer or the top snippet"
    }

    async fn search(&self, query: &str) -> Result<Vec<SearchResult>, ToolError> {
        let key = self
            .api_key
            .as_deref()
            .ok_or_else(|| ToolError::Unavailable(format!("{ENV_TAVILY_API_KEY} is not set")))?;
        let body = serde_json::json!({
            "api_key": key,
            "query": query,
            "max_results": 5,
            "include_answer": true,
        });
        let response = self
            .client
            .post(&self.endpoint)
            .json(&body)
            .send()
            .await
            .map_err(tool_unavailable)?;
        if !response.status().is_success() {
            return Err(ToolError::Unavailable(format!("Tavily returned {}", response.status())));
        }
        let body: Value = response.json().await.map_err(tool_unavailable)?;
        Ok(parse_tavily(&body, &self.fields))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolKind {
    Serp,
    Tavily,
    Mock,
}

/// One entry of `tools.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub kind: ToolKind,
    #[serde(default)]
    pub endpoint: Option<String>,
}

/// Named search tools available to the reasoning loops.
#[derive(Clone, Default)]
pub struct ToolRegistry {
    tools: BTreeMap<String, Arc<dyn SearchTool>>,
}

impl std::fmt::Debug for ToolRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToolRegistry")
            .field("tools", &self.tools.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// `google_search`, `tavily_search` (keys from the environment) and `mock_search`.
    pub fn builtin() -> Self {
        let mut registry = Self::new();
        registry.register(Arc::new(SerpApiSearch::from_env()));
        registry.register(Arc::new(TavilySearch::from_env()));
        registry.register(Arc::new(MockSearch::new()));
        registry
    }

    pub fn register(&mut self, tool: Arc<dyn SearchTool>) {
        self.tools.insert(tool.name().to_owned(), tool);
    }

    /// Adds or replaces tools described by a `tools.json` document.
    pub fn apply_config(&mut self, json: &str) -> Result<(), TrajectoryError> {
        let specs: Vec<ToolSpec> =
            serde_json::from_str(json).map_err(|e| TrajectoryError::ToolConfig(e.to_string()))?;
        for spec in specs {
            let tool: Arc<dyn SearchTool> = match spec.kind {
                ToolKind::Serp => {
                    let mut t = SerpApiSearch::from_env().named(&spec.name);
                    if let Some(endpoint) = spec.endpoint {
                        t = t.with_endpoint(endpoint);
                    }
                    Arc::new(t)
                }
                ToolKind::Tavily => {
                    let mut t = TavilySearch::from_env().named(&spec.name);
                    if let Some(endpoint) = spec.endpoint {
                        t = t.with_endpoint(endpoint);
                    }
                    Arc::new(t)
                }
                ToolKind::Mock => Arc::new(NamedMock {
                    name: spec.name.clone(),
                    inner: MockSearch::new(),
                }),
            };
            self.tools.insert(spec.name, tool);
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Arc<dyn SearchTool>> {
        self.tools.get(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.tools.keys().cloned().collect()
    }

    /// Runs one search and derives its observation.
    pub async fn execute_search(&self, tool_name: &str, query: &str) -> Result<SearchOutcome, SearchError> {
        let tool = self
            .get(tool_name)
            .ok_or_else(|| SearchError::UnknownTool(tool_name.to_owned()))?;
        let results = tool.search(query).await.map_err(|ToolError::Unavailable(msg)| {
            SearchError::ToolUnavailable(msg)
        })?;
        let observation = observation_for(&results).ok_or(SearchError::EmptyResults)?;
        Ok(SearchOutcome {
            results,
            observation,
        })
    }
}

struct NamedMock {
    name: String,
    inner: MockSearch,
}

#[async_trait]
impl SearchTool for NamedMock {
    fn name(&self) -> &str {
        &self.name
    }

    async fn search(&self, query: &str) -> Result<Vec<SearchResult>, ToolError> {
        self.inner.search(query).await
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub tool: String,
    pub input: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningStep {
    pub index: usize,
    pub thought: String,
    pub action: Option<Action>,
    pub observation: Option<String>,
    pub final_answer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCall {
    pub tool: String,
    pub input: String,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub rng_seed: u64,
    pub framework: Framework,
    pub max_steps: usize,
    pub complete: bool,
    #[serde(default)]
    pub reflections: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub question: String,
    pub steps: Vec<ReasoningStep>,
    pub final_answer: Option<String>,
    pub tool_transcript: Vec<ToolCall>,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn is_complete(&self) -> bool {
        self.final_answer.is_some()
    }

    /// Checks the step invariants.
    pub fn validate(&self) -> Result<(), String> {
        if self.question.trim().is_empty() {
            return Err("empty question".into());
        }
        if self.steps.len() > self.meta.max_steps {
            return Err(format!("{} steps exceed max_steps {}", self.steps.len(), self.meta.max_steps));
        }
        let last = self.steps.len().saturating_sub(1);
        for (i, step) in self.steps.iter().enumerate() {
            if step.index != i + 1 {
                return Err(format!("step {} carries index {}", i + 1, step.index));
            }
            if step.action.is_some() != step.observation.is_some() {
                return Err(format!("step {} has an action without observation or vice versa", i + 1));
            }
            if step.final_answer.is_some() {
                if step.action.is_some() {
                    return Err(format!("step {} has both an action and a final answer", i + 1));
                }
                if i != last {
                    return Err(format!("step {} carries a final answer but is not last", i + 1));
                }
            }
        }
        let last_answer = self.steps.last().and_then(|s| s.final_answer.as_ref());
        if last_answer != self.final_answer.as_ref() {
            return Err("final_answer disagrees with the last step".into());
        }
        if self.meta.complete != self.final_answer.is_some() {
            return Err("completion flag disagrees with final_answer".into());
        }
        Ok(())
    }
}

/// Seed question for a dataset record: instruction records pass through;
/// raw records are rewritten by the provider into a contextualized question.
pub async fn synthesize_seed_instruction<P: CompletionProvider + ?Sized>(
    record: &DatasetRecord,
    provider: &P,
    config: &GenerationConfig,
) -> Result<String, TrajectoryError> {
    match &record.payload {
        RecordPayload::Instruction { question, .. } => {
            if question.trim().is_empty() {
                return Err(TrajectoryError::EmptySeed);
            }
            Ok(question.clone())
        }
        RecordPayload::Raw { text } => contextualize(text, provider, config).await,
    }
}

/// Same rule for data-pool entries. Topics are contextualized like raw text.
pub async fn seed_question<P: CompletionProvider + ?Sized>(
    entry: &DataPoolEntry,
    provider: &P,
    config: &GenerationConfig,
) -> Result<String, TrajectoryError> {
    match entry.format() {
        SeedFormat::Instruction => Ok(entry.seed_text().to_owned()),
        _ => contextualize(entry.seed_text(), provider, config).await,
    }
}

async fn contextualize<P: CompletionProvider + ?Sized>(
    text: &str,
    provider: &P,
    config: &GenerationConfig,
) -> Result<String, TrajectoryError> {
    if text.trim().is_empty() {
        return Err(TrajectoryError::EmptySeed);
    }
    let prompt = render(CONTEXTUALIZE, &[("text", text.trim())]);
    let result = provider
        .complete(&CompletionRequest::new(prompt, config))
        .await
        .map_err(|source| TrajectoryError::Provider { step: 0, source })?;
    let seed = result.text.trim();
    if seed.is_empty() {
        return Err(TrajectoryError::EmptySeed);
    }
    Ok(seed.to_owned())
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum StepKind {
    Act(Action),
    Finish(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ParsedStep {
    thought: String,
    kind: StepKind,
}

/// Parses one model turn. Thought text is optional; exactly one of
/// `Action: tool[input]` or `Final Answer: ...` must follow it, and whichever
/// appears first wins. Anything from a hallucinated `Observation:` on is ignored.
fn parse_step(text: &str) -> Option<ParsedStep> {
    let text = match text.find("Observation:") {
        Some(cut) => &text[..cut],
        None => text,
    };
    let action_at = text.find("Action:");
    let final_at = text.find("Final Answer:");
    let (at, is_action) = match (action_at, final_at) {
        (Some(a), Some(f)) if a < f => (a, true),
        (Some(_), Some(f)) => (f, false),
        (Some(a), None) => (a, true),
        (None, Some(f)) => (f, false),
        (None, None) => return None,
    };

    let head = &text[..at];
    let thought = match head.find("Thought:") {
        Some(t) => &head[t + "Thought:".len()..],
        None => head,
    }
    .trim()
    .to_owned();

    if is_action {
        let rest = &text[at + "Action:".len()..];
        let line = rest.lines().next().unwrap_or("").trim();
        let open = line.find('[')?;
        if !line.ends_with(']') || open + 1 > line.len() - 1 {
            return None;
        }
        let tool = line[..open].trim();
        if tool.is_empty() || tool.contains(char::is_whitespace) {
            return None;
        }
        let input = line[open + 1..line.len() - 1].trim();
        Some(ParsedStep {
            thought,
            kind: StepKind::Act(Action {
                tool: tool.to_owned(),
                input: input.to_owned(),
            }),
        })
    } else {
        let answer = text[at + "Final Answer:".len()..].trim();
        if answer.is_empty() {
            return None;
        }
        Some(ParsedStep {
            thought,
            kind: StepKind::Finish(answer.to_owned()),
        })
    }
}

fn render_steps(steps: &[ReasoningStep]) -> String {
    let mut out = String::new();
    for step in steps {
        out.push_str("Thought: ");
        out.push_str(&step.thought);
        out.push('\n');
        if let (Some(action), Some(observation)) = (&step.action, &step.observation) {
            out.push_str(&format!("Action: {}[{}]\n", action.tool, action.input));
            out.push_str(&format!("Observation: {observation}\n"));
        }
        if let Some(answer) = &step.final_answer {
            out.push_str(&format!("Final Answer: {answer}\n"));
        }
    }
    out
}

fn trajectory_id(question: &str, framework: Framework, rng_seed: u64) -> String {
    let canonical = serde_json::json!({
        "question": question,
        "framework": framework,
        "rng_seed": rng_seed,
    });
    hex::encode(&Sha256::digest(canonical.to_string().as_bytes())[..8])
}

fn check_tools(tools: &[String], registry: &ToolRegistry) -> Result<(), TrajectoryError> {
    match tools.iter().find(|t| registry.get(t).is_none()) {
        Some(missing) => Err(TrajectoryError::UnknownTool(missing.clone())),
        None => Ok(()),
    }
}

/// ReAct: think, act with a tool, observe, until a final answer or
/// `config.max_steps`. Each step costs one completion plus at most one
/// reprompt when the reply does not parse.
pub async fn run_react<P: CompletionProvider + ?Sized>(
    question: &str,
    tools: &[String],
    registry: &ToolRegistry,
    provider: &P,
    config: &GenerationConfig,
) -> Result<Trajectory, TrajectoryError> {
    react_trial(question, tools, registry, provider, config, &[], Framework::React).await
}

async fn react_trial<P: CompletionProvider + ?Sized>(
    question: &str,
    tools: &[String],
    registry: &ToolRegistry,
    provider: &P,
    config: &GenerationConfig,
    reflections: &[String],
    framework: Framework,
) -> Result<Trajectory, TrajectoryError> {
    if question.trim().is_empty() {
        return Err(TrajectoryError::EmptyQuestion);
    }
    check_tools(tools, registry)?;

    let tool_list = if tools.is_empty() {
        "(no tools; answer from your own knowledge)".to_owned()
    } else {
        tools
            .iter()
            .map(|name| {
                let description = registry.get(name).map_or("", |t| t.description());
                format!("{name}: {description}")
            })
            .collect::<Vec<_>>()
            .join("\n")
    };
    let reflection_block = if reflections.is_empty() {
        String::new()
    } else {
        let mut block = "Lessons from your earlier attempts at this question:\n".to_owned();
        for r in reflections {
            block.push_str("- ");
            block.push_str(r);
            block.push('\n');
        }
        block.push('\n');
        block
    };

    let mut steps: Vec<ReasoningStep> = Vec::new();
    let mut tool_transcript = Vec::new();
    let mut final_answer = None;

    while steps.len() < config.max_steps {
        let index = steps.len() + 1;
        let prompt = render(
            REACT_SCAFFOLD,
            &[
                ("tools", &tool_list),
                ("reflections", &reflection_block),
                ("question", question),
                ("transcript", &render_steps(&steps)),
            ],
        );
        let parsed = next_step(provider, config, &prompt, index).await?;

        match parsed.kind {
            StepKind::Finish(answer) => {
                steps.push(ReasoningStep {
                    index,
                    thought: parsed.thought,
                    action: None,
                    observation: None,
                    final_answer: Some(answer.clone()),
                });
                final_answer = Some(answer);
                break;
            }
            StepKind::Act(action) => {
                let (observation, raw) = if tools.contains(&action.tool) {
                    match registry.execute_search(&action.tool, &action.input).await {
                        Ok(outcome) => {
                            let raw = serde_json::to_string(&outcome.results).expect("results serialize");
                            (outcome.observation, raw)
                        }
                        Err(err) => {
                            let text = err.observation();
                            (text.clone(), text)
                        }
                    }
                } else {
                    let text = SearchError::UnknownTool(action.tool.clone()).observation();
                    (text.clone(), text)
                };
                tool_transcript.push(ToolCall {
                    tool: action.tool.clone(),
                    input: action.input.clone(),
                    raw,
                });
                steps.push(ReasoningStep {
                    index,
                    thought: parsed.thought,
                    action: Some(action),
                    observation: Some(observation),
                    final_answer: None,
                });
            }
        }
    }

    Ok(build_trajectory(question, steps, final_answer, tool_transcript, provider.name(), config, framework))
}

fn build_trajectory(
    question: &str,
    steps: Vec<ReasoningStep>,
    final_answer: Option<String>,
    tool_transcript: Vec<ToolCall>,
    model: &str,
    config: &GenerationConfig,
    framework: Framework,
) -> Trajectory {
    Trajectory {
        id: trajectory_id(question, framework, config.rng_seed),
        question: question.to_owned(),
        steps,
        meta: TrajectoryMeta {
            model: model.to_owned(),
            temperature: config.temperature,
            max_tokens: config.max_tokens,
            rng_seed: config.rng_seed,
            framework,
            max_steps: config.max_steps,
            complete: final_answer.is_some(),
            reflections: Vec::new(),
        },
        final_answer,
        tool_transcript,
    }
}

async fn next_step<P: CompletionProvider + ?Sized>(
    provider: &P,
    config: &GenerationConfig,
    prompt: &str,
    step: usize,
) -> Result<ParsedStep, TrajectoryError> {
    let request = CompletionRequest::new(prompt, config).with_stop(["\nObservation:"]);
    let reply = provider
        .complete(&request)
        .await
        .map_err(|source| TrajectoryError::Provider { step, source })?
        .text;
    if let Some(parsed) = parse_step(&reply) {
        return Ok(parsed);
    }
    let retry = CompletionRequest::new(format!("{prompt}{FORMAT_REMINDER}"), config)
        .with_stop(["\nObservation:"]);
    let reply = provider
        .complete(&retry)
        .await
        .map_err(|source| TrajectoryError::Provider { step, source })?
        .text;
    parse_step(&reply).ok_or(TrajectoryError::UnparseableStep { step, text: reply })
}

/// Fills a CoT template. Demonstrations, joined by blank lines, replace
/// `{demonstrations}`; without that placeholder they are placed before the
/// question block, separated from it by a blank line.
pub fn render_cot_prompt(
    template_text: &str,
    question: &str,
    demonstrations: &[String],
) -> Result<String, TrajectoryError> {
    if !has_placeholder(template_text, "question") {
        return Err(TrajectoryError::MissingPlaceholder("question".into()));
    }
    let joined = demonstrations.join("\n\n");
    if has_placeholder(template_text, "demonstrations") {
        return Ok(render(
            template_text,
            &[("question", question), ("demonstrations", &joined)],
        ));
    }
    let body = render(template_text, &[("question", question)]);
    if demonstrations.is_empty() {
        Ok(body)
    } else {
        Ok(format!("{joined}\n\n{body}"))
    }
}

pub const DEFAULT_COT_TEMPLATE: &str = "{demonstrations}\n\nQ: {question}\nA: Let's think step by step.";

/// Single-completion chain of thought. The reply becomes one reasoning step;
/// text after `Final Answer:` (if present) is the answer, otherwise the whole
/// reply is.
pub async fn run_cot<P: CompletionProvider + ?Sized>(
    question: &str,
    template_text: &str,
    demonstrations: &[String],
    provider: &P,
    config: &GenerationConfig,
) -> Result<Trajectory, TrajectoryError> {
    if question.trim().is_empty() {
        return Err(TrajectoryError::EmptyQuestion);
    }
    let prompt = render_cot_prompt(template_text, question, demonstrations)?;
    let reply = provider
        .complete(&CompletionRequest::new(prompt, config))
        .await
        .map_err(|source| TrajectoryError::Provider { step: 1, source })?
        .text;
    let reply = reply.trim();
    if reply.is_empty() {
        return Err(TrajectoryError::UnparseableStep {
            step: 1,
            text: String::new(),
        });
    }
    let (thought, answer) = match reply.find("Final Answer:") {
        Some(at) => {
            let answer = reply[at + "Final Answer:".len()..].trim();
            let answer = if answer.is_empty() { reply } else { answer };
            (reply[..at].trim().to_owned(), answer.to_owned())
        }
        None => (reply.to_owned(), reply.to_owned()),
    };
    let steps = vec![ReasoningStep {
        index: 1,
        thought,
        action: None,
        observation: None,
        final_answer: Some(answer.clone()),
    }];
    Ok(build_trajectory(question, steps, Some(answer), Vec::new(), provider.name(), config, Framework::Cot))
}

/// Reflexion: rerun ReAct after each incomplete trial, feeding the model's
/// own critique of the failed attempt into the next scaffold.
pub async fn run_reflexion<P: CompletionProvider + ?Sized>(
    question: &str,
    tools: &[String],
    registry: &ToolRegistry,
    provider: &P,
    config: &GenerationConfig,
    max_trials: u32,
) -> Result<Trajectory, TrajectoryError> {
    if max_trials < 1 {
        return Err(TrajectoryError::ZeroTrials);
    }
    let mut reflections: Vec<String> = Vec::new();
    let mut trial = 1;
    loop {
        let mut trajectory =
            react_trial(question, tools, registry, provider, config, &reflections, Framework::Reflexion).await?;
        trajectory.meta.reflections = reflections.clone();
        if trajectory.is_complete() || trial == max_trials {
            return Ok(trajectory);
        }
        let prompt = render(
            REFLECTION,
            &[("question", question), ("transcript", &render_steps(&trajectory.steps))],
        );
        let reflection = provider
            .complete(&CompletionRequest::new(prompt, config))
            .await
            .map_err(|source| TrajectoryError::Provider {
                step: trajectory.steps.len(),
                source,
            })?
            .text;
        reflections.push(reflection.trim().to_owned());
        trial += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::ScriptedProvider;

    fn result(rank: usize, title: &str, snippet: &str, highlighted: &[&str]) -> SearchResult {
        SearchResult {
            rank,
            title: title.into(),
            snippet: snippet.into(),
            highlighted: highlighted.iter().map(|s| s.to_string()).collect(),
            url: format!("https://example.org/{rank}"),
        }
    }

    fn registry_with(query: &str, results: Vec<SearchResult>) -> ToolRegistry {
        let mut registry = ToolRegistry::new();
        registry.register(Arc::new(MockSearch::new().with_fixture(query, results)));
        registry
    }

    struct Broken;

    #[async_trait]
    impl SearchTool for Broken {
        fn name(&self) -> &str {
            "broken"
        }

        async fn search(&self, _query: &str) -> Result<Vec<SearchResult>, ToolError> {
            Err(ToolError::Unavailable("connection refused".into()))
        }
    }

    #[test]
    fn parse_step_variants() {
        let act = parse_step("Thought: need facts\nAction: mock_search[cataract]").unwrap();
        assert_eq!(act.thought, "need facts");
        assert_eq!(
            act.kind,
            StepKind::Act(Action { tool: "mock_search".into(), input: "cataract".into() })
        );

        let fin = parse_step("Thought: enough\nFinal Answer: Surgery replaces the lens.").unwrap();
        assert_eq!(fin.kind, StepKind::Finish("Surgery replaces the lens.".into()));

        let bare = parse_step("Final Answer: X").unwrap();
        assert_eq!(bare.thought, "");
        assert_eq!(bare.kind, StepKind::Finish("X".into()));

        let nested = parse_step("Thought: t\nAction: google_search[a [b] c]\nObservation: fake").unwrap();
        assert_eq!(
            nested.kind,
            StepKind::Act(Action { tool: "google_search".into(), input: "a [b] c".into() })
        );

        let first_wins = parse_step("Action: s[q]\nFinal Answer: no").unwrap();
        assert!(matches!(first_wins.kind, StepKind::Act(_)));

        assert!(parse_step("I am thinking").is_none());
        assert!(parse_step("Thought: x\nAction: search for stuff").is_none());
        assert!(parse_step("Action: two words[q]").is_none());
        assert!(parse_step("Final Answer:   ").is_none());
        assert!(parse_step("Observation: x\nFinal Answer: y").is_none());
    }

    #[tokio::test]
    async fn observation_highlight_priority() {
        let registry = registry_with("a", vec![result(1, "T", "S", &["cataract", "surgery"]), result(2, "T2", "S2", &["x"])]);
        let out = registry.execute_search("mock_search", "a").await.unwrap();
        assert_eq!(out.observation, "cataract surgery");

        let registry = registry_with("a", vec![result(1, "T", "Lens clouding is…", &[])]);
        let out = registry.execute_search("mock_search", "a").await.unwrap();
        assert_eq!(out.observation, "Lens clouding is…");

        let registry = registry_with("a", vec![result(1, "Only title", "", &[])]);
        let out = registry.execute_search("mock_search", "a").await.unwrap();
        assert_eq!(out.observation, "Only title");

        let registry = registry_with("a", vec![]);
        let err = registry.execute_search("mock_search", "a").await.unwrap_err();
        assert_eq!(err, SearchError::EmptyResults);
        assert_eq!(err.observation(), "No results found.");
    }

    #[tokio::test]
    async fn unknown_and_broken_tools() {
        let mut registry = ToolRegistry::new();
        registry.register(Arc::new(Broken));
        assert!(matches!(
            registry.execute_search("nope", "q").await,
            Err(SearchError::UnknownTool(_))
        ));
        let err = registry.execute_search("broken", "q").await.unwrap_err();
        assert_eq!(err.observation(), "Tool error: connection refused");
    }

    #[tokio::test]
    async fn missing_keys_make_live_tools_unavailable() {
        let serp = SerpApiSearch::new(None);
        assert!(matches!(serp.search("q").await, Err(ToolError::Unavailable(_))));
        let tavily = TavilySearch::new(None);
        assert!(matches!(tavily.search("q").await, Err(ToolError::Unavailable(_))));
    }

    #[test]
    fn serp_mapping() {
        let body = serde_json::json!({
            "organic_results": [
                {"position": 1, "title": "Cataract", "link": "https://a", "snippet": "Clouding of the lens",
                 "snippet_highlighted_words": ["clouding", "lens"]},
                {"position": 2, "title": "Other", "link": "https://b"}
            ]
        });
        let results = parse_serp(&body, &SerpFields::default());
        assert_eq!(results.len(), 2);
        assert_eq!(results[0].rank, 1);
        assert_eq!(results[0].highlighted, ["clouding", "lens"]);
        assert_eq!(results[1].rank, 2);
        assert_eq!(results[1].snippet, "");
        assert_eq!(observation_for(&results).unwrap(), "clouding lens");
        assert!(parse_serp(&serde_json::json!({}), &SerpFields::default()).is_empty());
    }

    #[test]
    fn tavily_mapping() {
        let body = serde_json::json!({
            "answer": "Surgery is the usual treatment.",
            "results": [{"title": "T", "url": "https://t", "content": "C"}, {"title": "U", "url": "https://u", "content": "D"}]
        });
        let results = parse_tavily(&body, &TavilyFields::default());
        assert_eq!(observation_for(&results).unwrap(), "Surgery is the usual treatment.");
        let no_answer = serde_json::json!({"results": [{"title": "T", "url": "https://t", "content": "C"}]});
        assert_eq!(observation_for(&parse_tavily(&no_answer, &TavilyFields::default())).unwrap(), "C");
    }

    #[test]
    fn tool_config_registers_named_tools() {
        let mut registry = ToolRegistry::builtin();
        registry
            .apply_config(r#"[{"name":"pubmed","kind":"serp","endpoint":"http://localhost:1/x"},{"name":"offline","kind":"mock"}]"#)
            .unwrap();
        let names = registry.names();
        for name in ["google_search", "tavily_search", "mock_search", "pubmed", "offline"] {
            assert!(names.contains(&name.to_string()), "{name}");
        }
        assert!(registry.apply_config("{not json").is_err());
    }

    fn tools(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[tokio::test]
    async fn react_two_step_fixture() {
        let registry = registry_with("cataract", vec![result(1, "Cataract", "Lens clouding", &["lens", "clouding"])]);
        let mock = ScriptedProvider::sequence([
            "Thought: need facts\nAction: mock_search[cataract]",
            "Thought: enough\nFinal Answer: Surgery replaces the lens.",
        ]);
        let config = GenerationConfig::default();
        let t = run_react("How are cataracts treated?", &tools(&["mock_search"]), &registry, &mock, &config)
            .await
            .unwrap();
        assert_eq!(t.steps.len(), 2);
        assert_eq!(t.final_answer.as_deref(), Some("Surgery replaces the lens."));
        assert_eq!(t.tool_transcript.len(), 1);
        assert_eq!(t.steps[0].observation.as_deref(), Some("lens clouding"));
        assert!(t.validate().is_ok());
        assert!(t.meta.complete);
        let second = &mock.requests()[1].prompt;
        assert!(second.ends_with("Question: How are cataracts treated?\nThought: need facts\nAction: mock_search[cataract]\nObservation: lens clouding\n"));
    }

    #[tokio::test]
    async fn react_immediate_answer() {
        let registry = ToolRegistry::new();
        let mock = ScriptedProvider::sequence(["Final Answer: X"]);
        let t = run_react("Q?", &[], &registry, &mock, &GenerationConfig::default()).await.unwrap();
        assert_eq!(t.steps.len(), 1);
        assert!(t.tool_transcript.is_empty());
        assert_eq!(t.final_answer.as_deref(), Some("X"));
    }

    #[tokio::test]
    async fn react_bounded_by_max_steps() {
        let registry = registry_with("x", vec![result(1, "t", "s", &[])]);
        let config = GenerationConfig { max_steps: 3, ..Default::default() };
        let mock = ScriptedProvider::sequence(std::iter::repeat_n("Thought: more\nAction: mock_search[x]", 10));
        let t = run_react("Q?", &tools(&["mock_search"]), &registry, &mock, &config).await.unwrap();
        assert_eq!(t.steps.len(), 3);
        assert!(t.final_answer.is_none());
        assert!(!t.meta.complete);
        assert!(t.validate().is_ok());
        assert_eq!(mock.call_count(), 3);
    }

    #[tokio::test]
    async fn react_reprompts_once_then_fails() {
        let registry = ToolRegistry::new();
        let mock = ScriptedProvider::sequence(["rambling", "Final Answer: ok"]);
        let t = run_react("Q?", &[], &registry, &mock, &GenerationConfig::default()).await.unwrap();
        assert_eq!(t.final_answer.as_deref(), Some("ok"));
        assert!(mock.requests()[1].prompt.ends_with(FORMAT_REMINDER));

        let mock = ScriptedProvider::sequence(["rambling", "still rambling"]);
        let err = run_react("Q?", &[], &registry, &mock, &GenerationConfig::default()).await.unwrap_err();
        assert!(matches!(err, TrajectoryError::UnparseableStep { step: 1, .. }));
    }

    #[tokio::test]
    async fn react_tool_errors_become_observations() {
        let mut registry = ToolRegistry::new();
        registry.register(Arc::new(Broken));
        let mock = ScriptedProvider::sequence([
            "Thought: a\nAction: broken[q]",
            "Thought: b\nAction: not_allowed[q]",
            "Final Answer: done",
        ]);
        let t = run_react("Q?", &tools(&["broken"]), &registry, &mock, &GenerationConfig::default())
            .await
            .unwrap();
        assert_eq!(t.steps[0].observation.as_deref(), Some("Tool error: connection refused"));
        assert_eq!(t.steps[1].observation.as_deref(), Some("Tool error: tool not_allowed is not available"));
        assert_eq!(t.tool_transcript.len(), 2);
        assert!(t.validate().is_ok());
    }

    #[tokio::test]
    async fn react_rejects_unregistered_tools_and_empty_questions() {
        let registry = ToolRegistry::new();
        let mock = ScriptedProvider::sequence(["Final Answer: x"]);
        assert!(matches!(
            run_react("Q?", &tools(&["ghost"]), &registry, &mock, &GenerationConfig::default()).await,
            Err(TrajectoryError::UnknownTool(_))
        ));
        assert!(matches!(
            run_react("  ", &[], &registry, &mock, &GenerationConfig::default()).await,
            Err(TrajectoryError::EmptyQuestion)
        ));
    }

    #[test]
    fn cot_rendering() {
        let plain = render_cot_prompt("Q: {question}\nA: Let's think step by step.", "Why?", &[]).unwrap();
        assert_eq!(plain, "Q: Why?\nA: Let's think step by step.");

        assert!(matches!(
            render_cot_prompt("no placeholder", "Why?", &[]),
            Err(TrajectoryError::MissingPlaceholder(_))
        ));

        let demos = vec!["Q: a\nA: 1".to_string(), "Q: b\nA: 2".to_string()];
        let prefixed = render_cot_prompt("Q: {question}\nA:", "c", &demos).unwrap();
        assert_eq!(prefixed, "Q: a\nA: 1\n\nQ: b\nA: 2\n\nQ: c\nA:");

        let slotted = render_cot_prompt("{demonstrations}\n---\nQ: {question}", "c", &demos).unwrap();
        assert_eq!(slotted, "Q: a\nA: 1\n\nQ: b\nA: 2\n---\nQ: c");

        let literal = render_cot_prompt("Q: {question}", "{demonstrations}", &demos).unwrap();
        assert!(literal.ends_with("Q: {demonstrations}"));
    }

    #[tokio::test]
    async fn cot_trajectory() {
        let mock = ScriptedProvider::sequence(["The lens clouds.\nFinal Answer: surgery"]);
        let t = run_cot("How to treat cataracts?", DEFAULT_COT_TEMPLATE, &[], &mock, &GenerationConfig::default())
            .await
            .unwrap();
        assert_eq!(t.steps.len(), 1);
        assert_eq!(t.steps[0].thought, "The lens clouds.");
        assert_eq!(t.final_answer.as_deref(), Some("surgery"));
        assert_eq!(t.meta.framework, Framework::Cot);
        assert!(t.validate().is_ok());
    }

    #[tokio::test]
    async fn reflexion_second_trial_completes() {
        let registry = registry_with("x", vec![result(1, "t", "s", &[])]);
        let config = GenerationConfig { max_steps: 1, ..Default::default() };
        let mock = ScriptedProvider::sequence([
            "Thought: search\nAction: mock_search[x]",
            "I searched but never answered; answer directly next time.",
            "Final Answer: done",
        ]);
        let t = run_reflexion("Q?", &tools(&["mock_search"]), &registry, &mock, &config, 3)
            .await
            .unwrap();
        assert!(t.is_complete());
        assert_eq!(t.meta.reflections.len(), 1);
        assert_eq!(t.meta.framework, Framework::Reflexion);
        assert!(mock.requests()[2].prompt.contains("- I searched but never answered; answer directly next time.\n"));
    }

    #[tokio::test]
    async fn reflexion_first_trial_completes_without_reflection() {
        let registry = ToolRegistry::new();
        let mock = ScriptedProvider::sequence(["Final Answer: x"]);
        let t = run_reflexion("Q?", &[], &registry, &mock, &GenerationConfig::default(), 3)
            .await
            .unwrap();
        assert!(t.meta.reflections.is_empty());
        assert_eq!(mock.call_count(), 1);
    }

    #[tokio::test]
    async fn reflexion_all_trials_fail() {
        let registry = registry_with("x", vec![result(1, "t", "s", &[])]);
        let config = GenerationConfig { max_steps: 1, ..Default::default() };
        let act = || ("Action:".to_string(), "Thought: s\nAction: mock_search[x]".to_string());
        let reflect = || ("did not reach".to_string(), "try harder".to_string());
        let script = vec![act(), reflect(), act(), reflect(), act()];
        let mock = ScriptedProvider::new(script);
        let t = run_reflexion("Q?", &tools(&["mock_search"]), &registry, &mock, &config, 3)
            .await
            .unwrap();
        assert!(!t.is_complete());
        assert_eq!(t.meta.reflections.len(), 2);
        assert!(matches!(
            run_reflexion("Q?", &[], &registry, &mock, &config, 0).await,
            Err(TrajectoryError::ZeroTrials)
        ));
    }

    #[tokio::test]
    async fn seed_instruction_passthrough_and_rewrite() {
        let config = GenerationConfig::default();
        let record = DatasetRecord::instruction("d", "1", "What is the capital of France?", "Paris");
        let mock = ScriptedProvider::sequence(Vec::<String>::new());
        let seed = synthesize_seed_instruction(&record, &mock, &config).await.unwrap();
        assert_eq!(seed, "What is the capital of France?");
        assert_eq!(mock.call_count(), 0);

        let rewrite = "Recently, I’ve been experiencing headaches and a sore throat. In the mornings, I feel nauseous, especially when brushing my teeth, accompanied by dry heaves. What should I do?";
        let raw = DatasetRecord::raw("d", "2", "headaches, sore throat, dry heaves");
        let mock = ScriptedProvider::new([("headaches, sore throat, dry heaves", rewrite)]);
        let seed = synthesize_seed_instruction(&raw, &mock, &config).await.unwrap();
        assert_eq!(seed, rewrite);
        assert_eq!(mock.call_count(), 1);

        let empty = DatasetRecord::raw("d", "3", "   ");
        assert!(matches!(
            synthesize_seed_instruction(&empty, &mock, &config).await,
            Err(TrajectoryError::EmptySeed)
        ));
    }
}
