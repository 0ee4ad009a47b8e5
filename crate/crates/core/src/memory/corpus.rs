//! Building the exemplar corpus from historical reports.
//!
//! Each report is split into ten region findings, the findings are joined in
//! region order and embedded, and the embedding becomes the record's key.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::store::{ExemplarRecord, ExemplarStore};
use super::{MemoryError, Result};
use crate::backend::EmbeddingClient;
use crate::region::{canonicalize_region, first_mentioned_region, normalize_words, RegionId, NORMAL_TEMPLATE_SENTENCES};
use crate::text::sentences;

/// Separator between region statements in the text that gets embedded.
pub const FINDING_SEPARATOR: &str = "; ";

/// Joins the ten statements in order and embeds the result.
pub fn encode_findings<S: AsRef<str>>(statements: &[S], emb: &dyn EmbeddingClient) -> Result<Vec<f32>> {
    if statements.len() != RegionId::ALL.len() {
        return Err(MemoryError::WrongCount(statements.len()));
    }
    let joined = statements.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(FINDING_SEPARATOR);
    Ok(emb.embed(&joined)?)
}

/// Segments free-text reports into per-region findings.
///
/// Reports with `Region: text` labeled lines are split on the labels
/// (unlabeled lines continue the previous section). Otherwise each sentence
/// goes to the region of the normal description template it matches, else
/// to the first region it mentions, else to the preceding sentence's region.
/// Regions left without text receive their normal sentence.
#[derive(Debug, Clone, Default)]
pub struct RegionSplitter {
    anchors: Vec<(String, RegionId)>,
}

impl RegionSplitter {
    pub fn new() -> Self {
        let anchors = NORMAL_TEMPLATE_SENTENCES
            .iter()
            .copied()
            .chain(RegionId::ALL.iter().map(|r| (r.normal_sentence(), *r)))
            .map(|(s, r)| (normalize_words(s), r))
            .collect();
        Self { anchors }
    }

    fn label(line: &str) -> Option<(RegionId, &str)> {
        let (head, rest) = line.split_once(':')?;
        let head = head.trim().trim_start_matches(['#', '*', '-', ' ']).trim_end_matches('*');
        if head.is_empty() || head.split_whitespace().count() > 4 {
            return None;
        }
        canonicalize_region(head).ok().map(|r| (r, rest.trim()))
    }

    fn sentence_region(&self, sentence: &str) -> Option<RegionId> {
        let norm = normalize_words(sentence);
        self.anchors
            .iter()
            .find(|(a, _)| *a == norm)
            .map(|(_, r)| *r)
            .or_else(|| first_mentioned_region(sentence))
    }

    /// Region sections found in `report`, or `None` if no region could be
    /// identified at all.
    pub fn sections(&self, report: &str) -> Option<BTreeMap<RegionId, String>> {
        let mut sections: BTreeMap<RegionId, Vec<String>> = BTreeMap::new();
        let labeled = report.lines().any(|l| Self::label(l).is_some());
        let mut current: Option<RegionId> = None;
        let mut leading: Vec<String> = Vec::new();
        let mut put = |region: Option<RegionId>, text: &str, leading: &mut Vec<String>| match region {
            Some(r) => {
                let entry = sections.entry(r).or_default();
                entry.append(leading);
                entry.push(text.to_string());
            }
            None => leading.push(text.to_string()),
        };
        if labeled {
            for line in report.lines().map(str::trim).filter(|l| !l.is_empty()) {
                match Self::label(line) {
                    Some((r, rest)) => {
                        current = Some(r);
                        if !rest.is_empty() {
                            put(current, rest, &mut leading);
                        }
                    }
                    None => put(current, line, &mut leading),
                }
            }
        } else {
            for s in sentences(report) {
                if let Some(r) = self.sentence_region(s) {
                    current = Some(r);
                }
                put(current, s, &mut leading);
            }
        }
        if sections.is_empty() {
            return None;
        }
        Some(sections.into_iter().map(|(r, parts)| (r, parts.join(" "))).collect())
    }

    /// Ten findings in region order plus the regions that were filled with
    /// their normal sentence.
    pub fn split(&self, report: &str) -> Option<(Vec<String>, Vec<RegionId>)> {
        let mut sections = self.sections(report)?;
        let mut filled = Vec::new();
        let findings = RegionId::ALL
            .iter()
            .map(|r| {
                sections.remove(r).unwrap_or_else(|| {
                    filled.push(*r);
                    r.normal_sentence().to_string()
                })
            })
            .collect();
        Some((findings, filled))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub accepted: usize,
    pub unsplittable: usize,
    pub embedding_failures: usize,
    /// Region sections that were missing and filled with a normal sentence.
    pub filled_regions: usize,
}

/// One record per report that can be split and embedded; failures are
/// skipped and counted.
pub fn build_corpus<S: AsRef<str>>(
    reports: &[S],
    splitter: &RegionSplitter,
    emb: &dyn EmbeddingClient,
    dim: usize,
) -> (ExemplarStore, CorpusStats) {
    let mut store = ExemplarStore::new(dim);
    let mut stats = CorpusStats::default();
    for (i, report) in reports.iter().enumerate() {
        let report = report.as_ref();
        let Some((findings, filled)) = splitter.split(report) else {
            tracing::warn!(index = i, "report has no identifiable region; skipped");
            stats.unsplittable += 1;
            continue;
        };
        let pushed = encode_findings(&findings, emb).and_then(|key| {
            store.push(ExemplarRecord { key, findings, report: report.to_string() })
        });
        match pushed {
            Ok(()) => {
                stats.accepted += 1;
                stats.filled_regions += filled.len();
            }
            Err(e) => {
                tracing::warn!(index = i, error = %e, "embedding failed; report skipped");
                stats.embedding_failures += 1;
            }
        }
    }
    (store, stats)
}
