//! Knowledge verification of generated dialogues and hallucination-ratio
//! aggregation.

use std::collections::{BTreeMap, HashMap};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::render;
use crate::provider::{CompletionProvider, CompletionRequest, ProviderError};
use crate::roleplay::{InstructionSample, Speaker};
use crate::types::GenerationConfig;

const VERIFY_PROMPT: &str = "You are a domain expert checking a generated answer for factual accuracy.\n\
\n\
Question: {question}\n\
Answer: {answer}\n\
\n\
Reply with exactly one of SUPPORTED, HALLUCINATED or UNKNOWN, followed by a one-line rationale. \
Use HALLUCINATED if the answer states anything false or unsupported, and UNKNOWN if you cannot judge.";

static VERDICT_KEYWORD: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(supported|hallucinated|unknown)\b").expect("static regex"));

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("turn {0} is not an assistant turn of the sample")]
    InvalidTurnIndex(usize),
    #[error("no verdicts to aggregate")]
    EmptyInput,
    #[error("verdict references unknown sample {0:?}")]
    UnknownSample(String),
    #[error("verifying turn {turn_index}: {source}")]
    Provider {
        turn_index: usize,
        #[source]
        source: ProviderError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Supported,
    Hallucinated,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationVerdict {
    pub sample_id: String,
    pub turn_index: usize,
    pub question: String,
    pub answer: String,
    pub verdict: Verdict,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
    pub turn_index: usize,
}

/// Which assistant turns to verify: `"all"` or a list of 1-based turn indices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum TurnSelection {
    #[default]
    All,
    Indices(Vec<usize>),
}

impl Serialize for TurnSelection {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            TurnSelection::All => serializer.serialize_str("all"),
            TurnSelection::Indices(indices) => indices.serialize(serializer),
        }
    }
}

impl<'de> Deserialize<'de> for TurnSelection {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Wire {
            Word(String),
            List(Vec<usize>),
        }
        match Wire::deserialize(deserializer)? {
            Wire::Word(w) if w == "all" => Ok(TurnSelection::All),
            Wire::Word(w) => Err(serde::de::Error::custom(format!(
                "expected \"all\" or a list of turn indices, got {w:?}"
            ))),
            Wire::List(list) => Ok(TurnSelection::Indices(list)),
        }
    }
}

impl std::str::FromStr for TurnSelection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.trim() == "all" {
            return Ok(TurnSelection::All);
        }
        s.split(',')
            .map(|part| part.trim().parse::<usize>().map_err(|e| format!("bad turn index {part:?}: {e}")))
            .collect::<Result<Vec<_>, _>>()
            .map(TurnSelection::Indices)
    }
}

/// Pairs each selected assistant turn with the human turn right before it.
pub fn extract_qa_pairs(
    sample: &InstructionSample,
    selection: &TurnSelection,
) -> Result<Vec<QaPair>, VerifyError> {
    let pair_at = |turn_index: usize| -> Result<QaPair, VerifyError> {
        let pos = turn_index
            .checked_sub(1)
            .filter(|&p| p >= 1 && p < sample.turns.len())
            .ok_or(VerifyError::InvalidTurnIndex(turn_index))?;
        let answer = &sample.turns[pos];
        let question = &sample.turns[pos - 1];
        if answer.speaker != Speaker::Assistant || question.speaker != Speaker::Human {
            return Err(VerifyError::InvalidTurnIndex(turn_index));
        }
        Ok(QaPair {
            question: question.text.clone(),
            answer: answer.text.clone(),
            turn_index: answer.index,
        })
    };
    match selection {
        TurnSelection::All => sample
            .turns
            .iter()
            .enumerate()
            .filter(|(pos, t)| *pos >= 1 && t.speaker == Speaker::Assistant)
            .map(|(pos, _)| pair_at(pos + 1))
            .collect(),
        TurnSelection::Indices(indices) => indices.iter().map(|&i| pair_at(i)).collect(),
    }
}

/// Maps a verifier reply to a verdict: the earliest of the three keywords
/// (whole word, any case) wins; none means unknown.
pub fn parse_verdict(reply: &str) -> (Verdict, String) {
    match VERDICT_KEYWORD.find(reply) {
        Some(m) => {
            let verdict = match m.as_str().to_ascii_lowercase().as_str() {
                "supported" => Verdict::Supported,
                "hallucinated" => Verdict::Hallucinated,
                _ => Verdict::Unknown,
            };
            let rest = reply[m.end()..]
                .trim_start_matches(|c: char| !c.is_alphanumeric())
                .lines()
                .next()
                .unwrap_or("")
                .trim();
            let rationale = if rest.is_empty() { reply.trim() } else { rest };
            (verdict, rationale.to_owned())
        }
        None => (Verdict::Unknown, reply.trim().to_owned()),
    }
}

/// Asks the verifier model about one QA pair.
pub async fn verify_pair<P: CompletionProvider + ?Sized>(
    sample_id: &str,
    pair: &QaPair,
    provider: &P,
    config: &GenerationConfig,
) -> Result<VerificationVerdict, VerifyError> {
    let prompt = render(VERIFY_PROMPT, &[("question", &pair.question), ("answer", &pair.answer)]);
    let reply = provider
        .complete(&CompletionRequest::new(prompt, config))
        .await
        .map_err(|source| VerifyError::Provider {
            turn_index: pair.turn_index,
            source,
        })?
        .text;
    let (verdict, rationale) = parse_verdict(&reply);
    Ok(VerificationVerdict {
        sample_id: sample_id.to_owned(),
        turn_index: pair.turn_index,
        question: pair.question.clone(),
        answer: pair.answer.clone(),
        verdict,
        rationale,
    })
}

/// Aggregated hallucination ratios, in percent with two decimals.
///
/// Serializes as `report.json`: `{"per_turn": {"1": 4.27, ...}, "overall": ...}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HallucinationReport {
    pub per_turn: BTreeMap<usize, f64>,
    pub overall: f64,
}

/// Verdict tallies for one turn-count group.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VerdictCounts {
    pub supported: u64,
    pub hallucinated: u64,
    pub unknown: u64,
}

impl VerdictCounts {
    pub fn total(&self) -> u64 {
        self.supported + self.hallucinated + self.unknown
    }

    fn add(&mut self, verdict: Verdict) {
        match verdict {
            Verdict::Supported => self.supported += 1,
            Verdict::Hallucinated => self.hallucinated += 1,
            Verdict::Unknown => self.unknown += 1,
        }
    }
}

/// `100 * part / whole` as hundredths of a percent, rounded half-up.
pub fn percent_hundredths(part: u64, whole: u64) -> u64 {
    assert!(whole > 0, "percentage of an empty group");
    let scaled = u128::from(part) * 10_000 * 2 + u128::from(whole);
    (scaled / (2 * u128::from(whole))) as u64
}

fn hundredths_to_f64(h: u64) -> f64 {
    // Division by 100 lands on the nearest double to the 2-decimal value.
    h as f64 / 100.0
}

/// Groups verdicts by the turn-count of their sample.
pub fn count_by_turns(
    verdicts: &[VerificationVerdict],
    sample_turn_counts: &HashMap<String, usize>,
) -> Result<BTreeMap<usize, VerdictCounts>, VerifyError> {
    let mut groups: BTreeMap<usize, VerdictCounts> = BTreeMap::new();
    for v in verdicts {
        let turns = *sample_turn_counts
            .get(&v.sample_id)
            .ok_or_else(|| VerifyError::UnknownSample(v.sample_id.clone()))?;
        groups.entry(turns).or_default().add(v.verdict);
    }
    Ok(groups)
}

/// Per turn-count group: hallucinated / all verdicts (unknown included in
/// the denominator). Overall is the mean of the rounded group ratios.
pub fn aggregate_hallucination(
    verdicts: &[VerificationVerdict],
    sample_turn_counts: &HashMap<String, usize>,
) -> Result<HallucinationReport, VerifyError> {
    if verdicts.is_empty() {
        return Err(VerifyError::EmptyInput);
    }
    let groups = count_by_turns(verdicts, sample_turn_counts)?;
    Ok(report_from_counts(&groups))
}

/// Report from pre-tallied groups. Panics on an empty or zero-sized group.
pub fn report_from_counts(groups: &BTreeMap<usize, VerdictCounts>) -> HallucinationReport {
    assert!(!groups.is_empty(), "report needs at least one group");
    let hundredths: BTreeMap<usize, u64> = groups
        .iter()
        .map(|(&turns, c)| (turns, percent_hundredths(c.hallucinated, c.total())))
        .collect();
    let sum: u64 = hundredths.values().sum();
    let n = hundredths.len() as u64;
    // Mean of 2-decimal values, rounded half-up back to 2 decimals.
    let overall = (2 * sum + n) / (2 * n);
    HallucinationReport {
        per_turn: hundredths
            .into_iter()
            .map(|(t, h)| (t, hundredths_to_f64(h)))
            .collect(),
        overall: hundredths_to_f64(overall),
    }
}
