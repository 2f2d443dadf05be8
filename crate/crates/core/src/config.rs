//! Search hyperparameters and their complexity-derived presets.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::evaluator::{ratio_string, Score};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("complexity must be at least 1, got {0}")]
    InvalidComplexity(u32),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Settings of the main quantitative study.
    Main,
    /// Best-of-N sampling from the root with the raw instruction.
    ResamplingOnly,
    /// A single chain: one child per state, no retrieval.
    CosOnly,
    /// Full tree search without retrieval.
    TosOnly,
    /// Tree search with reference retrieval, ablation budget.
    Full,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Main,
        Preset::ResamplingOnly,
        Preset::CosOnly,
        Preset::TosOnly,
        Preset::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Main => "main",
            Preset::ResamplingOnly => "resampling_only",
            Preset::CosOnly => "cos_only",
            Preset::TosOnly => "tos_only",
            Preset::Full => "full",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| ConfigError::UnknownPreset(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ranking {
    /// VQA score first, CLIP-I as the tie-breaker.
    #[default]
    LexicographicVqaThenClip,
    /// `w1 * vqa + w2 * clip`.
    WeightedSum,
}

/// Where state thoughts come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThoughtSource {
    #[default]
    Generator,
    /// Hand the root instruction to the actor unchanged.
    Passthrough,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionThreshold {
    #[serde(with = "ratio_string")]
    pub vqa: Score,
    pub clip: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaThreshold {
    #[serde(with = "ratio_string")]
    pub vqa: Score,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub max_steps: u32,
    pub instruction_volume: u32,
    pub max_n_children: u32,
    pub max_depth: u32,
    pub min_depth: u32,
    pub completion_threshold: CompletionThreshold,
    pub degrade_tolerance: VqaThreshold,
    pub stay_threshold: VqaThreshold,
    pub search_range: u32,
    pub top_k: u32,
    pub relevance_threshold: u8,
    pub max_n_try: u32,
    pub n_repeats: u32,
    /// Weights for instruction following, identity preservation and
    /// perceptual quality. The third never enters in-core ranking.
    pub objective_weights: [f64; 3],
    pub ranking: Ranking,
    /// Per-channel weights for scorer distances.
    pub similarity_weights: BTreeMap<String, f64>,
    pub thought_source: ThoughtSource,
}

pub fn default_similarity_weights() -> BTreeMap<String, f64> {
    BTreeMap::from([("dists".to_string(), 0.5), ("lpips".to_string(), 0.5)])
}

/// `((C+1) + (C+1) % 2) / 2`, i.e. half the main-preset depth rounded up.
pub fn min_depth_for(complexity: u32) -> u32 {
    let d = complexity + 1;
    (d + d % 2) / 2
}

/// Hyperparameters for instruction complexity `complexity` under `preset`.
pub fn derive_config(complexity: u32, preset: Preset) -> Result<RunConfig, ConfigError> {
    if complexity < 1 {
        return Err(ConfigError::InvalidComplexity(complexity));
    }
    let c = complexity;
    let mut cfg = RunConfig {
        max_steps: 2 * (c + 1),
        instruction_volume: 2,
        max_n_children: 2,
        max_depth: c + 1,
        min_depth: min_depth_for(c),
        completion_threshold: CompletionThreshold {
            vqa: Ratio::from_integer(1),
            clip: 1.0,
        },
        degrade_tolerance: VqaThreshold {
            vqa: Ratio::from_integer(0),
        },
        stay_threshold: VqaThreshold {
            vqa: Ratio::new(1, 10),
        },
        search_range: 2,
        top_k: 3,
        relevance_threshold: 50,
        max_n_try: 3,
        n_repeats: 3,
        objective_weights: [1.0, 1.0, 0.0],
        ranking: Ranking::LexicographicVqaThenClip,
        similarity_weights: default_similarity_weights(),
        thought_source: ThoughtSource::Generator,
    };
    match preset {
        Preset::Main => {}
        Preset::ResamplingOnly => {
            cfg.search_range = 0;
            cfg.max_n_children = 2 * (c + 1);
            cfg.max_depth = 1;
            cfg.min_depth = 1;
            cfg.thought_source = ThoughtSource::Passthrough;
        }
        Preset::CosOnly => {
            cfg.search_range = 0;
            cfg.max_n_children = 1;
            cfg.max_depth = 2 * (c + 1);
        }
        Preset::TosOnly => {
            cfg.search_range = 0;
            cfg.max_depth = c;
        }
        Preset::Full => {
            cfg.search_range = 2;
            cfg.max_depth = c;
        }
    }
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.max_steps < 1 {
            return bad("max_steps must be >= 1");
        }
        if self.min_depth > self.max_depth {
            return bad("min_depth must not exceed max_depth");
        }
        if self.max_n_children < 1 {
            return bad("max_n_children must be >= 1");
        }
        if self.instruction_volume < 1 {
            return bad("instruction_volume must be >= 1");
        }
        if self.n_repeats.is_multiple_of(2) {
            return bad("n_repeats must be odd");
        }
        if self.max_n_try < 1 {
            return bad("max_n_try must be >= 1");
        }
        if self.relevance_threshold > 100 {
            return bad("relevance_threshold must be within 0..=100");
        }
        let one = Ratio::from_integer(1);
        for (name, v) in [
            ("completion_threshold.vqa", self.completion_threshold.vqa),
            ("degrade_tolerance.vqa", self.degrade_tolerance.vqa),
            ("stay_threshold.vqa", self.stay_threshold.vqa),
        ] {
            if v > one {
                return Err(ConfigError::Invalid(format!("{name} must be within [0, 1]")));
            }
        }
        if !(-1.0..=1.0).contains(&self.completion_threshold.clip) {
            return bad("completion_threshold.clip must be within [-1, 1]");
        }
        if self.similarity_weights.values().any(|w| !w.is_finite() || *w < 0.0) {
            return bad("similarity weights must be non-negative");
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}
