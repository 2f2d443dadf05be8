//! Command-line and service plumbing: configuration files, backend
//! construction, benchmark drivers, analytics and the HTTP service.

pub mod bench;
pub mod serve;
pub mod stats;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use num_rational::Ratio;
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::config::{derive_config, Preset, Ranking, RunConfig, ThoughtSource};
use crate::evaluator::{ratio_string, Score};
use crate::gateway::{
    Cassette, EndpointConfig, Gateway, HttpActor, HttpChat, HttpEmbed, HttpScorer, HttpTransport,
    RecordingTransport, ReplayTransport, Transport,
};
use crate::image::ImageStore;
use crate::perceptual::PerceptualScorer;
use crate::ports::{Backends, ScorerPort};
use crate::sim::{Schema, SimActorParams, SimWorld};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error at {path}: {message}")]
    Config { path: String, message: String },
    #[error("backend error: {0}")]
    Backend(String),
    #[error("{failed} of {total} entries failed")]
    EntriesFailed { failed: usize, total: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        HarnessError::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config { .. } => 2,
            HarnessError::Backend(_) => 3,
            HarnessError::EntriesFailed { .. } | HarnessError::Io { .. } => 1,
        }
    }
}

/// An exact score written as `"n/d"`, an integer, or a finite decimal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ScoreValue(#[serde(with = "ratio_string")] pub Score);

impl FromStr for ScoreValue {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some(r) = ratio_string::parse(s) {
            return Ok(ScoreValue(r));
        }
        let bad = || format!("{s:?} is not a fraction or decimal");
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if int.is_empty() && frac.is_empty()
            || !int.chars().all(|c| c.is_ascii_digit())
            || !frac.chars().all(|c| c.is_ascii_digit())
            || frac.len() > 9
        {
            return Err(bad());
        }
        let denom = 10u32.pow(frac.len() as u32);
        let int: u32 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let frac_v: u32 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        let numer = int
            .checked_mul(denom)
            .and_then(|v| v.checked_add(frac_v))
            .ok_or_else(bad)?;
        Ok(ScoreValue(Ratio::new(numer, denom)))
    }
}

impl<'de> Deserialize<'de> for ScoreValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Number(serde_json::Number),
        }
        let text = match Raw::deserialize(d)? {
            Raw::Text(t) => t,
            Raw::Number(n) => n.to_string(),
        };
        text.parse().map_err(serde::de::Error::custom)
    }
}

fn parse_ranking(s: &str) -> Result<Ranking, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_thought_source(s: &str) -> Result<ThoughtSource, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_weights(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|_| "expected three comma-separated weights".to_string())
}

/// Optional run settings shared by the config file's `run` section and the
/// command-line flags of the same names.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, clap::Args)]
#[serde(deny_unknown_fields)]
pub struct RunOverrides {
    #[arg(long)]
    #[serde(default)]
    pub max_steps: Option<u32>,
    #[arg(long)]
    #[serde(default)]
    pub instruction_volume: Option<u32>,
    #[arg(long)]
    #[serde(default)]
    pub max_n_children: Option<u32>,
    #[arg(long)]
    #[serde(default)]
    pub max_depth: Option<u32>,
    #[arg(long)]
    #[serde(default)]
    pub min_depth: Option<u32>,
    #[arg(long)]
    #[serde(default)]
    pub search_range: Option<u32>,
    #[arg(long)]
    #[serde(default)]
    pub top_k: Option<u32>,
    #[arg(long)]
    #[serde(default)]
    pub relevance_threshold: Option<u8>,
    #[arg(long)]
    #[serde(default)]
    pub max_n_try: Option<u32>,
    #[arg(long)]
    #[serde(default)]
    pub n_repeats: Option<u32>,
    #[arg(long)]
    #[serde(default)]
    pub completion_vqa: Option<ScoreValue>,
    #[arg(long)]
    #[serde(default)]
    pub completion_clip: Option<f64>,
    #[arg(long)]
    #[serde(default)]
    pub degrade_vqa: Option<ScoreValue>,
    #[arg(long)]
    #[serde(default)]
    pub stay_vqa: Option<ScoreValue>,
    #[arg(long, value_parser = parse_ranking)]
    #[serde(default)]
    pub ranking: Option<Ranking>,
    #[arg(long, value_parser = parse_weights)]
    #[serde(default)]
    pub objective_weights: Option<[f64; 3]>,
    #[arg(long, value_parser = parse_thought_source)]
    #[serde(default)]
    pub thought_source: Option<ThoughtSource>,
    #[arg(skip)]
    #[serde(default)]
    pub similarity_weights: Option<BTreeMap<String, f64>>,
}

impl RunOverrides {
    /// `self` with every field set in `over` replaced.
    pub fn overlay(&self, over: &RunOverrides) -> RunOverrides {
        macro_rules! pick {
            ($($f:ident),*) => {
                RunOverrides { $($f: over.$f.clone().or_else(|| self.$f.clone()),)* }
            };
        }
        pick!(
            max_steps, instruction_volume, max_n_children, max_depth, min_depth, search_range,
            top_k, relevance_threshold, max_n_try, n_repeats, completion_vqa, completion_clip,
            degrade_vqa, stay_vqa, ranking, objective_weights, thought_source, similarity_weights
        )
    }

    pub fn apply(&self, cfg: &mut RunConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { cfg.$f = v; })* };
        }
        set!(
            max_steps, instruction_volume, max_n_children, max_depth, min_depth, search_range,
            top_k, relevance_threshold, max_n_try, n_repeats, objective_weights, ranking,
            thought_source
        );
        if let Some(v) = self.completion_vqa {
            cfg.completion_threshold.vqa = v.0;
        }
        if let Some(v) = self.completion_clip {
            cfg.completion_threshold.clip = v;
        }
        if let Some(v) = self.degrade_vqa {
            cfg.degrade_tolerance.vqa = v.0;
        }
        if let Some(v) = self.stay_vqa {
            cfg.stay_threshold.vqa = v.0;
        }
        if let Some(w) = &self.similarity_weights {
            cfg.similarity_weights = w.clone();
        }
    }
}

fn default_p() -> f64 {
    0.85
}

fn default_q() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimBackendConfig {
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_q")]
    pub q: f64,
    /// Edits honored per actor call; defaults to the instruction volume.
    #[serde(default)]
    pub k: Option<u32>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub epsilon: f64,
}

impl Default for SimBackendConfig {
    fn default() -> Self {
        SimBackendConfig {
            p: default_p(),
            q: default_q(),
            k: None,
            seed: 0,
            epsilon: 0.0,
        }
    }
}

impl SimBackendConfig {
    pub fn world(&self, schema: Schema, instruction_volume: u32, seed: u64) -> SimWorld {
        SimWorld {
            schema,
            actor: SimActorParams {
                p: self.p,
                q: self.q,
                k: self.k.unwrap_or(instruction_volume),
                seed,
            },
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpBackendConfig {
    pub chat: EndpointConfig,
    pub actor: EndpointConfig,
    pub embed: EndpointConfig,
    /// Without a scorer endpoint the built-in perceptual scorer is used.
    #[serde(default)]
    pub scorer: Option<EndpointConfig>,
    /// Record every exchange to this cassette file.
    #[serde(default)]
    pub record: Option<PathBuf>,
    /// Serve exchanges from this cassette file instead of the network.
    #[serde(default)]
    pub replay: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendMode {
    #[default]
    Sim,
    Http,
}

/// The `backends` section: `mode` picks which of `sim` or `http` is used.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    #[serde(default)]
    pub mode: BackendMode,
    #[serde(default)]
    pub sim: SimBackendConfig,
    #[serde(default)]
    pub http: Option<HttpBackendConfig>,
}

/// The active backend section.
#[derive(Debug, Clone, Copy)]
pub enum ActiveBackend<'a> {
    Sim(&'a SimBackendConfig),
    Http(&'a HttpBackendConfig),
}

impl BackendConfig {
    pub fn active(&self) -> ActiveBackend<'_> {
        match (self.mode, &self.http) {
            (BackendMode::Http, Some(h)) => ActiveBackend::Http(h),
            _ => ActiveBackend::Sim(&self.sim),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeConfig {
    #[serde(default)]
    pub bind: Option<String>,
    /// Environment variable holding the bearer token clients must present.
    #[serde(default)]
    pub token_env: Option<String>,
}

/// The configuration file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    #[serde(default)]
    pub workspace: Option<PathBuf>,
    #[serde(default)]
    pub preset: Option<Preset>,
    #[serde(default)]
    pub complexity: Option<u32>,
    #[serde(default)]
    pub run: RunOverrides,
    #[serde(default)]
    pub backends: BackendConfig,
    #[serde(default)]
    pub serve: ServeConfig,
}

impl AppConfig {
    pub fn from_slice(bytes: &[u8]) -> Result<Self, HarnessError> {
        let de = &mut serde_json::Deserializer::from_slice(bytes);
        let cfg: AppConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            HarnessError::config(path, e.into_inner().to_string())
        })?;
        if cfg.backends.mode == BackendMode::Http && cfg.backends.http.is_none() {
            return Err(HarnessError::config("backends.http", "http mode needs an http section"));
        }
        if let ActiveBackend::Http(h) = cfg.backends.active() {
            let mut eps = vec![("chat", &h.chat), ("actor", &h.actor), ("embed", &h.embed)];
            if let Some(s) = &h.scorer {
                eps.push(("scorer", s));
            }
            for (name, ep) in eps {
                ep.validate()
                    .map_err(|m| HarnessError::config(format!("backends.http.{name}"), m))?;
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let bytes = std::fs::read(path).map_err(|e| HarnessError::config(path.display().to_string(), e.to_string()))?;
        Self::from_slice(&bytes)
    }

    pub fn workspace(&self) -> PathBuf {
        self.workspace.clone().unwrap_or_else(|| PathBuf::from("editsearch-workspace"))
    }

    /// Derived preset values, then the file's `run` section, then `flags`.
    pub fn resolve_run_config(
        &self,
        flags: &RunOverrides,
        complexity: Option<u32>,
        preset: Option<Preset>,
    ) -> Result<RunConfig, HarnessError> {
        let c = complexity
            .or(self.complexity)
            .ok_or_else(|| HarnessError::config("complexity", "complexity is required"))?;
        let preset = preset.or(self.preset).unwrap_or(Preset::Main);
        let mut cfg = derive_config(c, preset).map_err(|e| HarnessError::config("complexity", e.to_string()))?;
        self.run.overlay(flags).apply(&mut cfg);
        cfg.validate().map_err(|e| HarnessError::config("run", e.to_string()))?;
        Ok(cfg)
    }
}

/// Backends plus the handles needed to persist their transcripts.
pub struct BuiltBackends {
    pub backends: Backends,
    pub gateway: Option<Gateway>,
    pub recorder: Option<(Arc<RecordingTransport>, PathBuf)>,
}

impl BuiltBackends {
    /// Writes the recorded cassette, if recording.
    pub fn finish(&self) -> Result<(), HarnessError> {
        if let Some((rec, path)) = &self.recorder {
            rec.cassette().save(path).map_err(|e| HarnessError::io(path, e))?;
        }
        Ok(())
    }
}

pub fn build_http_backends(h: &HttpBackendConfig, store: &ImageStore) -> Result<BuiltBackends, HarnessError> {
    let (transport, recorder): (Arc<dyn Transport>, _) = if let Some(path) = &h.replay {
        let cassette = Cassette::load(path).map_err(|e| HarnessError::config("backends.replay", e.to_string()))?;
        (Arc::new(ReplayTransport::new(cassette)), None)
    } else {
        let http: Arc<dyn Transport> =
            Arc::new(HttpTransport::new().map_err(|e| HarnessError::Backend(e.to_string()))?);
        match &h.record {
            Some(path) => {
                let rec = Arc::new(RecordingTransport::new(http));
                (rec.clone() as Arc<dyn Transport>, Some((rec, path.clone())))
            }
            None => (http, None),
        }
    };
    let gateway = Gateway::new(transport);
    let store = Some(store.clone());
    let scorer: Arc<dyn ScorerPort> = match &h.scorer {
        Some(ep) => Arc::new(HttpScorer::new(gateway.clone(), ep.clone(), store.clone())),
        None => Arc::new(PerceptualScorer::new(store.clone().expect("store present"))),
    };
    Ok(BuiltBackends {
        backends: Backends {
            actor: Arc::new(HttpActor::new(gateway.clone(), h.actor.clone(), store.clone())),
            chat: Arc::new(HttpChat::new(gateway.clone(), h.chat.clone(), store.clone())),
            embed: Arc::new(HttpEmbed::new(gateway.clone(), h.embed.clone(), store)),
            scorer,
        },
        gateway: Some(gateway),
        recorder,
    })
}
