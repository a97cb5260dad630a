//! Uploaded topics, persisted as one JSON array.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use mimir_core::ingest::{parse_topics, IngestError};
use mimir_core::types::{Topic, TopicKind};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TopicStoreError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("unknown topic id {0:?}")]
    UnknownTopic(String),
    #[error("{path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug)]
pub struct TopicStore {
    path: PathBuf,
    topics: Mutex<Vec<Topic>>,
}

impl TopicStore {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, TopicStoreError> {
        let path = path.into();
        let topics = if path.exists() {
            let bytes = fs::read(&path).map_err(|source| TopicStoreError::Io {
                path: path.clone(),
                source,
            })?;
            serde_json::from_slice(&bytes).map_err(|e| TopicStoreError::Corrupt {
                path: path.clone(),
                message: e.to_string(),
            })?
        } else {
            Vec::new()
        };
        Ok(Self {
            path,
            topics: Mutex::new(topics),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Parses one topic per line and stores the ones not seen before.
    /// Returns how many were new.
    pub fn add_lines(&self, kind: TopicKind, lines: &[String]) -> Result<usize, TopicStoreError> {
        let parsed = parse_topics(lines.join("\n").as_bytes(), kind)?;
        self.add(parsed)
    }

    pub fn add(&self, new: Vec<Topic>) -> Result<usize, TopicStoreError> {
        let mut topics = self.topics.lock().expect("topic lock");
        let mut next = topics.clone();
        let mut added = 0;
        for topic in new {
            if !next.iter().any(|t| t.id() == topic.id()) {
                next.push(topic);
                added += 1;
            }
        }
        if added > 0 {
            self.persist(&next)?;
            *topics = next;
        }
        Ok(added)
    }

    fn persist(&self, topics: &[Topic]) -> Result<(), TopicStoreError> {
        let io_err = |source| TopicStoreError::Io {
            path: self.path.clone(),
            source,
        };
        if let Some(parent) = self.path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_err)?;
        }
        let tmp = self.path.with_extension("json.tmp");
        let bytes = serde_json::to_vec_pretty(topics).expect("topics serialize");
        fs::write(&tmp, bytes).map_err(io_err)?;
        fs::rename(&tmp, &self.path).map_err(io_err)
    }

    pub fn all(&self) -> Vec<Topic> {
        self.topics.lock().expect("topic lock").clone()
    }

    /// `None` selects every stored topic; otherwise the listed ids in order.
    pub fn select(&self, ids: Option<&[String]>) -> Result<Vec<Topic>, TopicStoreError> {
        let topics = self.topics.lock().expect("topic lock");
        match ids {
            None => Ok(topics.clone()),
            Some(ids) => ids
                .iter()
                .map(|id| {
                    topics
                        .iter()
                        .find(|t| t.id() == id)
                        .cloned()
                        .ok_or_else(|| TopicStoreError::UnknownTopic(id.clone()))
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_dedupes_and_persists() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("topics.json");
        let store = TopicStore::open(&path).unwrap();
        let lines: Vec<String> = ["Anatomy", "Biochemistry", "Anatomy"].map(String::from).to_vec();
        assert_eq!(store.add_lines(TopicKind::Keyword, &lines).unwrap(), 2);
        assert_eq!(store.add_lines(TopicKind::Keyword, &lines[..1]).unwrap(), 0);
        let reopened = TopicStore::open(&path).unwrap();
        assert_eq!(reopened.all(), store.all());
        let id = store.all()[1].id().to_owned();
        assert_eq!(store.select(Some(&[id])).unwrap()[0].text(), "Biochemistry");
        assert!(matches!(
            store.select(Some(&["nope".to_string()])),
            Err(TopicStoreError::UnknownTopic(_))
        ));
    }

    #[test]
    fn bad_lines_are_rejected_whole() {
        let dir = tempfile::tempdir().unwrap();
        let store = TopicStore::open(dir.path().join("t.json")).unwrap();
        let lines: Vec<String> = ["Anatomy", "Dr. Who"].map(String::from).to_vec();
        assert!(store.add_lines(TopicKind::Keyword, &lines).is_err());
        assert!(store.all().is_empty());
    }
}
