//! Agent memory: the query hub, the exemplar embedding store and the
//! history log, plus few-shot exemplar retrieval.

pub mod corpus;
pub mod history;
pub mod store;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::BackendError;
use crate::container::FormatError;
use crate::planner::QuestionTemplate;
use crate::region::RegionId;

pub use corpus::{build_corpus, encode_findings, CorpusStats, RegionSplitter};
pub use history::{EpisodeKind, HistoryFilter, HistoryLog, HistoryRecord};
pub use store::{cosine_sim, retrieve_topk, ExemplarRecord, ExemplarStore, Retrieved, CTES_MAGIC};

/// Exemplars injected into a report prompt.
pub const DEFAULT_TOP_K: usize = 3;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("cosine similarity of a zero vector")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("expected 10 region statements, got {0}")]
    WrongCount(usize),
    #[error("invalid exemplar: {0}")]
    InvalidRecord(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("history log I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("history log line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, MemoryError>;

/// Fixed per-region questions plus an extensible pool of alternatives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryHub {
    canonical: BTreeMap<RegionId, String>,
    pool: BTreeMap<RegionId, Vec<String>>,
}

impl Default for QueryHub {
    fn default() -> Self {
        let mut hub = Self { canonical: BTreeMap::new(), pool: BTreeMap::new() };
        for r in RegionId::ALL {
            let canonical = format!("Is there any abnormality in the {}?", r.phrase());
            hub.pool.insert(
                r,
                vec![
                    canonical.clone(),
                    QuestionTemplate::Abnormalities.render(r, "abnormality"),
                    QuestionTemplate::Presence.render(r, "abnormality"),
                ],
            );
            hub.canonical.insert(r, canonical);
        }
        hub
    }
}

impl QueryHub {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn canonical(&self, region: RegionId) -> Option<&str> {
        self.canonical.get(&region).map(String::as_str)
    }

    pub fn pool(&self, region: RegionId) -> &[String] {
        self.pool.get(&region).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn add_question(&mut self, region: RegionId, question: impl Into<String>) {
        self.pool.entry(region).or_default().push(question.into());
    }

    pub fn remove_region(&mut self, region: RegionId) {
        self.canonical.remove(&region);
        self.pool.remove(&region);
    }

    pub fn missing_regions(&self) -> Vec<RegionId> {
        RegionId::ALL.into_iter().filter(|r| !self.canonical.contains_key(r)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::{select_query, PlannerError};

    #[test]
    fn hub_covers_all_regions() {
        let hub = QueryHub::default();
        assert!(hub.missing_regions().is_empty());
        assert_eq!(select_query(RegionId::Lung, &hub).unwrap(), "Is there any abnormality in the lung?");
        assert_eq!(select_query(RegionId::Lung, &hub).unwrap(), select_query(RegionId::Lung, &hub).unwrap());
        assert_eq!(hub.pool(RegionId::Heart).len(), 3);
    }

    #[test]
    fn missing_entry_is_error() {
        let mut hub = QueryHub::default();
        hub.remove_region(RegionId::Breast);
        assert_eq!(select_query(RegionId::Breast, &hub), Err(PlannerError::HubMissingRegion(RegionId::Breast)));
    }
}
