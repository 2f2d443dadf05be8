//! Reference retrieval: scores states inside the search window against the
//! parent's output and keeps the most similar ones above the relevance floor.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::image::ImageRef;
use crate::ports::{BackendError, ScorerPort};
use crate::topology::{InferenceTopology, StateId};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RetrievalError {
    #[error("scorer unavailable: {0}")]
    ScorerUnavailable(#[from] BackendError),
    #[error("scorer distance {name}={value} outside [0, 1]")]
    DistanceOutOfRange { name: String, value: f64 },
    #[error("scorer returned no distances")]
    NoDistances,
    #[error("unknown parent state {0}")]
    UnknownParent(StateId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEntry {
    pub state_id: StateId,
    pub thought: String,
    pub similarity: u8,
}

/// Ordered by similarity, descending; ties go to the smaller state id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReferenceSet {
    pub entries: Vec<ReferenceEntry>,
}

impl ReferenceSet {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }
}

/// Combines named distances into a 0-100 similarity.
///
/// Channels with a configured weight are used with their weights normalized
/// to sum to one. When none of the returned channels has a weight, all
/// channels are averaged uniformly.
pub fn combine_distances(
    distances: &BTreeMap<String, f64>,
    weights: &BTreeMap<String, f64>,
) -> Result<u8, RetrievalError> {
    if distances.is_empty() {
        return Err(RetrievalError::NoDistances);
    }
    for (name, &value) in distances {
        if !(0.0..=1.0).contains(&value) {
            return Err(RetrievalError::DistanceOutOfRange {
                name: name.clone(),
                value,
            });
        }
    }
    let weighted: Vec<(f64, f64)> = distances
        .iter()
        .filter_map(|(k, d)| weights.get(k).map(|w| (*w, *d)))
        .collect();
    let total: f64 = weighted.iter().map(|(w, _)| w).sum();
    let blended = if weighted.is_empty() || total <= 0.0 {
        distances.values().sum::<f64>() / distances.len() as f64
    } else {
        weighted.iter().map(|(w, d)| w * d).sum::<f64>() / total
    };
    Ok((100.0 * (1.0 - blended)).round().clamp(0.0, 100.0) as u8)
}

pub fn score_similarity(
    a: &ImageRef,
    b: &ImageRef,
    scorer: &dyn ScorerPort,
    weights: &BTreeMap<String, f64>,
) -> Result<u8, RetrievalError> {
    let d = scorer.distances(a, b)?;
    combine_distances(&d, weights)
}

/// Within-run memo of pairwise similarities keyed by image ids.
#[derive(Debug, Default)]
pub struct SimilarityCache {
    scores: HashMap<(String, String), u8>,
}

impl SimilarityCache {
    pub fn score(
        &mut self,
        a: &ImageRef,
        b: &ImageRef,
        scorer: &dyn ScorerPort,
        weights: &BTreeMap<String, f64>,
    ) -> Result<u8, RetrievalError> {
        let key = (a.id.clone(), b.id.clone());
        if let Some(s) = self.scores.get(&key) {
            return Ok(*s);
        }
        let s = score_similarity(a, b, scorer, weights)?;
        self.scores.insert(key, s);
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    pub references: ReferenceSet,
    /// Candidates whose scoring failed, with the reason.
    pub dropped: Vec<(StateId, RetrievalError)>,
    pub candidates: Vec<StateId>,
}

/// Collects references for a new child of `parent_id`. Similarity compares
/// each candidate's input with the parent's output.
pub fn retrieve_references(
    topology: &InferenceTopology,
    parent_id: StateId,
    cfg: &RunConfig,
    scorer: &dyn ScorerPort,
    cache: &mut SimilarityCache,
) -> Result<Retrieval, RetrievalError> {
    let parent = topology
        .state(parent_id)
        .ok_or(RetrievalError::UnknownParent(parent_id))?;
    let candidates = topology.reference_window(parent_id, parent.depth + 1, cfg.search_range);
    let mut scored = Vec::new();
    let mut dropped = Vec::new();
    for &id in &candidates {
        let cand = topology.state(id).expect("window yields known states");
        match cache.score(&cand.input, &parent.output, scorer, &cfg.similarity_weights) {
            Ok(sim) if sim >= cfg.relevance_threshold => scored.push(ReferenceEntry {
                state_id: id,
                thought: cand.thought.clone(),
                similarity: sim,
            }),
            Ok(_) => {}
            Err(e) => dropped.push((id, e)),
        }
    }
    scored.sort_by(|a, b| b.similarity.cmp(&a.similarity).then(a.state_id.cmp(&b.state_id)));
    scored.truncate(cfg.top_k as usize);
    Ok(Retrieval {
        references: ReferenceSet { entries: scored },
        dropped,
        candidates,
    })
}
