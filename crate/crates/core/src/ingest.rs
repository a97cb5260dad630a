//! Topic uploads, the on-disk dataset registry, and data-pool assembly.
//!
//! A registry directory holds `datasets.json` (an array of descriptors) and
//! one `<id>.jsonl` file of records per dataset.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::types::{
    normalize_seed, validate_topic, DataPoolEntry, DatasetDescriptor, DatasetFormat, Provenance,
    SeedFormat, SourceKind, Topic, TopicError, TopicKind,
};

/// Domain tag given to pool entries that come from user topics.
pub const TOPIC_DOMAIN: &str = "custom";

const CATALOGUE_FILE: &str = "datasets.json";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("topic file is not valid UTF-8 (byte offset {offset})")]
    InvalidEncoding { offset: usize },
    #[error("line {line}: {source}")]
    Topic {
        line: usize,
        #[source]
        source: TopicError,
    },
    #[error("dataset {id:?} declares {declared} records but {actual} were supplied")]
    CountMismatch {
        id: String,
        declared: usize,
        actual: usize,
    },
    #[error("record {record_id:?} belongs to dataset {found:?}, not {expected:?}")]
    ForeignRecord {
        record_id: String,
        expected: String,
        found: String,
    },
    #[error("record id {0:?} appears more than once")]
    DuplicateRecord(String),
    #[error("dataset id {0:?} is not usable as a file name")]
    InvalidDatasetId(String),
    #[error("record {record_id:?} has an empty payload")]
    EmptyRecord { record_id: String },
    #[error("unknown dataset {0:?}")]
    UnknownDataset(String),
    #[error("registry file {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("registry I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Parses an uploaded topic file: one topic per line, LF or CRLF endings.
///
/// Returns topics in file order with duplicates (same kind and normalized
/// text) dropped after their first occurrence.
pub fn parse_topics(file_bytes: &[u8], kind: TopicKind) -> Result<Vec<Topic>, IngestError> {
    let text = std::str::from_utf8(file_bytes).map_err(|e| IngestError::InvalidEncoding {
        offset: e.valid_up_to(),
    })?;
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);

    let mut seen = HashSet::new();
    let mut topics = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let topic = validate_topic(line, kind).map_err(|source| IngestError::Topic {
            line: i + 1,
            source,
        })?;
        if seen.insert(topic.id().to_owned()) {
            topics.push(topic);
        }
    }
    Ok(topics)
}

/// Record contents: either a question/answer pair or free text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RecordPayload {
    Instruction {
        question: String,
        answer: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        choices: Option<Vec<String>>,
    },
    Raw {
        text: String,
    },
}

impl RecordPayload {
    pub fn format(&self) -> DatasetFormat {
        match self {
            RecordPayload::Instruction { .. } => DatasetFormat::Instruction,
            RecordPayload::Raw { .. } => DatasetFormat::Raw,
        }
    }

    /// Text used to seed generation: the question, or the raw text.
    pub fn seed_text(&self) -> &str {
        match self {
            RecordPayload::Instruction { question, .. } => question,
            RecordPayload::Raw { text } => text,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetRecord {
    pub dataset_id: String,
    pub record_id: String,
    pub payload: RecordPayload,
}

impl DatasetRecord {
    pub fn instruction(
        dataset_id: impl Into<String>,
        record_id: impl Into<String>,
        question: impl Into<String>,
        answer: impl Into<String>,
    ) -> Self {
        Self {
            dataset_id: dataset_id.into(),
            record_id: record_id.into(),
            payload: RecordPayload::Instruction {
                question: question.into(),
                answer: answer.into(),
                choices: None,
            },
        }
    }

    pub fn raw(
        dataset_id: impl Into<String>,
        record_id: impl Into<String>,
        text: impl Into<String>,
    ) -> Self {
        Self {
            dataset_id: dataset_id.into(),
            record_id: record_id.into(),
            payload: RecordPayload::Raw { text: text.into() },
        }
    }
}

/// One line of `<id>.jsonl`. The dataset id is implied by the file name.
#[derive(Serialize, Deserialize)]
struct RecordLine {
    record_id: String,
    #[serde(flatten)]
    payload: RecordPayload,
}

/// Merged, ordered generation seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPool {
    pub entries: Vec<DataPoolEntry>,
    pub created_at: DateTime<Utc>,
    pub config_digest: String,
}

impl DataPool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// What a data pool is built from.
#[derive(Debug, Clone, Default)]
pub struct PoolSelection<'a> {
    pub topics: &'a [Topic],
    pub dataset_ids: &'a [String],
    pub per_dataset_cap: Option<usize>,
    pub rng_seed: u64,
}

/// Directory-backed dataset catalogue.
///
/// Readers share the in-memory catalogue; registration takes the write lock
/// for the whole persist step, so each directory has a single writer.
#[derive(Debug)]
pub struct Registry {
    root: PathBuf,
    catalogue: RwLock<Vec<DatasetDescriptor>>,
}

impl Registry {
    /// Opens (creating if needed) a registry rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, IngestError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        let path = root.join(CATALOGUE_FILE);
        let catalogue = if path.exists() {
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            serde_json::from_slice(&bytes).map_err(|e| IngestError::Corrupt {
                path: path.clone(),
                message: e.to_string(),
            })?
        } else {
            Vec::new()
        };
        Ok(Self {
            root,
            catalogue: RwLock::new(catalogue),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Persists a dataset, replacing any dataset with the same id.
    pub fn register_dataset(
        &self,
        descriptor: DatasetDescriptor,
        records: &[DatasetRecord],
    ) -> Result<String, IngestError> {
        check_dataset_id(&descriptor.id)?;
        if descriptor.record_count != records.len() {
            return Err(IngestError::CountMismatch {
                id: descriptor.id.clone(),
                declared: descriptor.record_count,
                actual: records.len(),
            });
        }
        let mut seen = HashSet::new();
        for record in records {
            if record.dataset_id != descriptor.id {
                return Err(IngestError::ForeignRecord {
                    record_id: record.record_id.clone(),
                    expected: descriptor.id.clone(),
                    found: record.dataset_id.clone(),
                });
            }
            if !seen.insert(record.record_id.as_str()) {
                return Err(IngestError::DuplicateRecord(record.record_id.clone()));
            }
            if record.payload.seed_text().trim().is_empty() {
                return Err(IngestError::EmptyRecord {
                    record_id: record.record_id.clone(),
                });
            }
        }

        let mut catalogue = self.catalogue.write().expect("registry lock poisoned");

        let mut body = Vec::new();
        for record in records {
            let line = RecordLine {
                record_id: record.record_id.clone(),
                payload: record.payload.clone(),
            };
            serde_json::to_writer(&mut body, &line).expect("record serializes");
            body.push(b'\n');
        }
        write_atomic(&self.records_path(&descriptor.id), &body)?;

        let mut next = catalogue.clone();
        next.retain(|d| d.id != descriptor.id);
        let id = descriptor.id.clone();
        next.push(descriptor);
        let json = serde_json::to_vec_pretty(&next).expect("catalogue serializes");
        write_atomic(&self.root.join(CATALOGUE_FILE), &json)?;
        *catalogue = next;
        Ok(id)
    }

    /// Descriptors whose name starts with `prefix`, ignoring case, sorted by name.
    pub fn search_datasets(&self, prefix: &str) -> Vec<DatasetDescriptor> {
        let catalogue = self.catalogue.read().expect("registry lock poisoned");
        let folded = prefix.to_lowercase();
        let mut hits: Vec<_> = catalogue
            .iter()
            .filter(|d| d.name.to_lowercase().starts_with(&folded))
            .cloned()
            .collect();
        hits.sort_by(|a, b| {
            (a.name.to_lowercase(), &a.name, &a.id).cmp(&(b.name.to_lowercase(), &b.name, &b.id))
        });
        hits
    }

    pub fn descriptor(&self, id: &str) -> Option<DatasetDescriptor> {
        let catalogue = self.catalogue.read().expect("registry lock poisoned");
        catalogue.iter().find(|d| d.id == id).cloned()
    }

    /// Loads all records of a dataset in file order.
    pub fn records(&self, id: &str) -> Result<Vec<DatasetRecord>, IngestError> {
        if self.descriptor(id).is_none() {
            return Err(IngestError::UnknownDataset(id.to_owned()));
        }
        let path = self.records_path(id);
        let file = fs::File::open(&path).map_err(io_err(&path))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(&path))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: RecordLine =
                serde_json::from_str(&line).map_err(|e| IngestError::Corrupt {
                    path: path.clone(),
                    message: format!("line {}: {e}", i + 1),
                })?;
            records.push(DatasetRecord {
                dataset_id: id.to_owned(),
                record_id: parsed.record_id,
                payload: parsed.payload,
            });
        }
        Ok(records)
    }

    /// Builds the data pool, stamped with the current time.
    pub fn build_data_pool(&self, selection: &PoolSelection<'_>) -> Result<DataPool, IngestError> {
        self.build_data_pool_at(selection, Utc::now())
    }

    /// Builds the data pool with an explicit timestamp; a pure function of
    /// the selection, the registry contents and `created_at`.
    ///
    /// Topic entries come first in the given order, followed by each selected
    /// dataset in order. A capped dataset contributes a seeded sample without
    /// replacement, kept in file order.
    pub fn build_data_pool_at(
        &self,
        selection: &PoolSelection<'_>,
        created_at: DateTime<Utc>,
    ) -> Result<DataPool, IngestError> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();

        for topic in selection.topics {
            let provenance = Provenance {
                kind: SourceKind::Topic,
                id: topic.id().to_owned(),
            };
            if !seen.insert(provenance.clone()) {
                continue;
            }
            let entry = DataPoolEntry::new(
                normalize_seed(topic.text()),
                provenance,
                TOPIC_DOMAIN,
                topic.kind().into(),
            )
            .expect("validated topics are non-empty");
            entries.push(entry);
        }

        let mut selected = HashSet::new();
        for id in selection.dataset_ids {
            if !selected.insert(id.as_str()) {
                continue;
            }
            let descriptor = self
                .descriptor(id)
                .ok_or_else(|| IngestError::UnknownDataset(id.clone()))?;
            let records = self.records(id)?;
            for index in sample_indices(records.len(), selection.per_dataset_cap, selection.rng_seed, id) {
                let record = &records[index];
                let provenance = Provenance {
                    kind: SourceKind::Dataset,
                    id: format!("{}/{}", record.dataset_id, record.record_id),
                };
                if !seen.insert(provenance.clone()) {
                    continue;
                }
                let format = match record.payload.format() {
                    DatasetFormat::Instruction => SeedFormat::Instruction,
                    DatasetFormat::Raw => SeedFormat::Raw,
                };
                let entry = DataPoolEntry::new(
                    normalize_seed(record.payload.seed_text()),
                    provenance,
                    descriptor.domain.clone(),
                    format,
                )
                .map_err(|_| IngestError::EmptyRecord {
                    record_id: record.record_id.clone(),
                })?;
                entries.push(entry);
            }
        }

        Ok(DataPool {
            entries,
            created_at,
            config_digest: selection_digest(selection),
        })
    }

    fn records_path(&self, id: &str) -> PathBuf {
        self.root.join(format!("{id}.jsonl"))
    }
}

fn check_dataset_id(id: &str) -> Result<(), IngestError> {
    let usable = !id.is_empty()
        && id != "datasets"
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if usable {
        Ok(())
    } else {
        Err(IngestError::InvalidDatasetId(id.to_owned()))
    }
}

/// Indices of the records a dataset contributes. Without a cap, or when the
/// cap covers the whole dataset, every record is used.
fn sample_indices(len: usize, cap: Option<usize>, rng_seed: u64, dataset_id: &str) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..len).collect();
    match cap {
        Some(cap) if cap < len => {
            let mut rng = ChaCha8Rng::seed_from_u64(dataset_seed(rng_seed, dataset_id));
            indices.shuffle(&mut rng);
            indices.truncate(cap);
            indices.sort_unstable();
            indices
        }
        _ => indices,
    }
}

// Each dataset gets its own stream so adding a dataset to the selection
// leaves the samples of the others untouched.
pub(crate) fn dataset_seed(rng_seed: u64, dataset_id: &str) -> u64 {
    let digest = Sha256::digest(dataset_id.as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    rng_seed ^ u64::from_le_bytes(head)
}

fn selection_digest(selection: &PoolSelection<'_>) -> String {
    let topic_ids: Vec<&str> = selection.topics.iter().map(Topic::id).collect();
    let canonical = serde_json::json!({
        "topics": topic_ids,
        "datasets": selection.dataset_ids,
        "cap": selection.per_dataset_cap,
        "seed": selection.rng_seed,
    });
    hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IngestError> {
    let tmp = path.with_extension("tmp");
    {
        let mut file = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        file.write_all(bytes).map_err(io_err(&tmp))?;
        file.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}
