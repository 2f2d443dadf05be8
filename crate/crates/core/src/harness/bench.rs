//! Single runs, manifest benchmarks and the ablation comparison.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use tracing::warn;

use super::stats::{score_f64, RunRow, RunStats};
use super::{build_http_backends, ActiveBackend, AppConfig, BuiltBackends, HarnessError, RunOverrides};
use crate::config::{Preset, RunConfig};
use crate::controls::{ControlSource, NoControls};
use crate::document;
use crate::evaluator::{cif, ratio_string, Evaluation, Evaluator, Score};
use crate::events::{EventSink, NullSink};
use crate::image::{ImageKind, ImageRef, ImageStore};
use crate::ports::Backends;
use crate::scheduler::{run, RunError, RunOptions, RunResult};
use crate::sim::{Schema, SimTask};
use crate::topology::InferenceTopology;

/// Largest complexity of the reference benchmark; higher values only warn.
pub const MAX_BENCH_COMPLEXITY: u32 = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskSource {
    Inline(SimTask),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    #[serde(default)]
    pub task: Option<TaskSource>,
    #[serde(default)]
    pub image: Option<PathBuf>,
    #[serde(default)]
    pub instruction: Option<String>,
    pub complexity: u32,
    #[serde(default)]
    pub preset: Option<Preset>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkManifest {
    pub entries: Vec<ManifestEntry>,
}

impl BenchmarkManifest {
    /// Parses and validates; relative paths resolve against `base`.
    pub fn from_slice(bytes: &[u8], base: &Path) -> Result<Self, HarnessError> {
        let de = &mut serde_json::Deserializer::from_slice(bytes);
        let mut m: BenchmarkManifest = serde_path_to_error::deserialize(de)
            .map_err(|e| HarnessError::config(format!("manifest.{}", e.path()), e.into_inner().to_string()))?;
        if m.entries.is_empty() {
            return Err(HarnessError::config("manifest.entries", "manifest has no entries"));
        }
        for (i, e) in m.entries.iter_mut().enumerate() {
            let at = |k: &str| format!("manifest.entries[{i}].{k}");
            if e.complexity == 0 {
                return Err(HarnessError::config(at("complexity"), "complexity must be at least 1"));
            }
            if e.complexity > MAX_BENCH_COMPLEXITY {
                warn!(entry = i, complexity = e.complexity, "complexity above the benchmark range");
            }
            match (&e.task, &e.image) {
                (Some(_), Some(_)) => return Err(HarnessError::config(at("image"), "give either task or image")),
                (None, None) => return Err(HarnessError::config(at("task"), "entry needs a task or an image")),
                (None, Some(_)) if e.instruction.is_none() => {
                    return Err(HarnessError::config(at("instruction"), "image entries need an instruction"))
                }
                _ => {}
            }
            if let Some(TaskSource::File(p)) = &mut e.task {
                *p = base.join(&*p);
            }
            if let Some(p) = &mut e.image {
                *p = base.join(&*p);
            }
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let bytes = std::fs::read(path).map_err(|e| HarnessError::config("manifest", e.to_string()))?;
        Self::from_slice(&bytes, path.parent().unwrap_or(Path::new(".")))
    }
}

/// What a run starts from.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskInput {
    Sim(SimTask),
    Image { image: PathBuf, instruction: String },
}

impl TaskInput {
    pub fn from_entry(entry: &ManifestEntry, at: &str) -> Result<TaskInput, HarnessError> {
        match (&entry.task, &entry.image) {
            (Some(TaskSource::Inline(t)), _) => validated(t.clone(), at),
            (Some(TaskSource::File(p)), _) => {
                let bytes = std::fs::read(p).map_err(|e| HarnessError::config(format!("{at}.task"), e.to_string()))?;
                let task: SimTask = serde_json::from_slice(&bytes)
                    .map_err(|e| HarnessError::config(format!("{at}.task"), e.to_string()))?;
                validated(task, at)
            }
            (None, Some(image)) => Ok(TaskInput::Image {
                image: image.clone(),
                instruction: entry.instruction.clone().unwrap_or_default(),
            }),
            (None, None) => Err(HarnessError::config(format!("{at}.task"), "entry needs a task or an image")),
        }
    }
}

fn validated(task: SimTask, at: &str) -> Result<TaskInput, HarnessError> {
    task.validate()
        .map_err(|e| HarnessError::config(format!("{at}.task"), e.to_string()))?;
    Ok(TaskInput::Sim(task))
}

/// Configuration, image workspace and shared HTTP backends for a session.
pub struct Harness {
    pub app: AppConfig,
    pub flags: RunOverrides,
    pub store: ImageStore,
    http: Option<BuiltBackends>,
}

impl Harness {
    pub fn new(app: AppConfig, flags: RunOverrides) -> Result<Self, HarnessError> {
        let dir = app.workspace().join("images");
        let store = ImageStore::open(&dir).map_err(|e| HarnessError::config("workspace", e.to_string()))?;
        let http = match app.backends.active() {
            ActiveBackend::Http(h) => Some(build_http_backends(h, &store)?),
            ActiveBackend::Sim(_) => None,
        };
        Ok(Harness { app, flags, store, http })
    }

    pub fn run_config(&self, complexity: u32, preset: Option<Preset>) -> Result<RunConfig, HarnessError> {
        self.app.resolve_run_config(&self.flags, Some(complexity), preset)
    }

    /// Default seed of the `index`-th entry.
    pub fn entry_seed(&self, index: usize) -> u64 {
        let base = match self.app.backends.active() {
            ActiveBackend::Sim(s) => s.seed,
            ActiveBackend::Http(_) => 0,
        };
        base.wrapping_add(index as u64)
    }

    /// The backends and starting point for one run.
    pub fn prepare(
        &self,
        input: &TaskInput,
        cfg: &RunConfig,
        seed: u64,
    ) -> Result<(Backends, ImageRef, String), HarnessError> {
        match (self.app.backends.active(), input) {
            (ActiveBackend::Sim(sim), TaskInput::Sim(task)) => {
                let world = sim.world(task.schema.clone(), cfg.instruction_volume, seed);
                world
                    .actor
                    .validate()
                    .map_err(|e| HarnessError::config("backends", e.to_string()))?;
                Ok((world.backends(), task.initial.to_ref(), task.instruction()))
            }
            (ActiveBackend::Sim(_), TaskInput::Image { .. }) => Err(HarnessError::config(
                "backends.mode",
                "sim backends need a sim task, not an image",
            )),
            (ActiveBackend::Http(_), input) => {
                let built = self.http.as_ref().expect("http backends built");
                let (image, instruction) = match input {
                    TaskInput::Sim(task) => (task.initial.to_ref(), task.instruction()),
                    TaskInput::Image { image, instruction } => (
                        self.store
                            .import(image)
                            .map_err(|e| HarnessError::config("image", e.to_string()))?,
                        instruction.clone(),
                    ),
                };
                Ok((built.backends.clone(), image, instruction))
            }
        }
    }

    pub fn run(
        &self,
        input: &TaskInput,
        cfg: &RunConfig,
        seed: u64,
        controls: &mut dyn ControlSource,
        sink: &mut dyn EventSink,
        opts: &RunOptions,
    ) -> Result<Result<RunResult, RunError>, HarnessError> {
        let (backends, image, instruction) = self.prepare(input, cfg, seed)?;
        Ok(run(image, &instruction, &backends, cfg, controls, sink, opts))
    }

    /// Persists sim images into the workspace so every ref has a file.
    pub fn materialize(&self, image: &ImageRef) -> Result<PathBuf, HarnessError> {
        let root = self.store.root();
        match image.kind {
            ImageKind::File => Ok(root.join(&image.locator)),
            ImageKind::Sim => {
                let stored = self
                    .store
                    .put(image.locator.as_bytes(), "json")
                    .map_err(|e| HarnessError::Io {
                        path: root.to_path_buf(),
                        source: std::io::Error::other(e.to_string()),
                    })?;
                Ok(root.join(stored.locator))
            }
        }
    }

    pub fn finish(&self) -> Result<(), HarnessError> {
        match &self.http {
            Some(b) => b.finish(),
            None => Ok(()),
        }
    }
}

/// The first final state's evaluation, or `None` when the run has none.
pub fn final_evaluation(result: &RunResult) -> Option<&Evaluation> {
    let id = *result.final_states.first()?;
    result.topology.state(id)?.evaluation.as_ref()
}

pub fn result_row(entry: usize, complexity: u32, preset: Preset, result: &RunResult) -> RunRow {
    let eval = final_evaluation(result);
    RunRow {
        entry,
        complexity,
        preset,
        topology_size: result.topology.size(),
        termination: result.termination,
        final_vqa: eval.map(|e| e.vqa_score).unwrap_or_default(),
        final_clip: eval.map(|e| e.clip_i).unwrap_or(0.0),
        steps_to_best: result.final_states.first().map(|&s| s as usize).unwrap_or(0),
        fallback_used: result.fallback_used,
    }
}

/// Runs `f` over `0..n` on all cores; results keep index order.
pub fn parallel_map<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let workers = std::thread::available_parallelism().map_or(1, |w| w.get()).min(n.max(1));
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let v = f(i);
                out.lock().expect("result slots")[i] = Some(v);
            });
        }
    });
    out.into_inner()
        .expect("result slots")
        .into_iter()
        .map(|v| v.expect("every index ran"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryFailure {
    pub entry: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePair {
    pub entry: usize,
    pub original: PathBuf,
    pub edited: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    /// Results come from the configured backends; sim numbers are analogues
    /// of real-model results only.
    pub backend: String,
    pub stats: RunStats,
    pub failures: Vec<EntryFailure>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("report serializes");
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

fn backend_label(app: &AppConfig) -> String {
    match app.backends.active() {
        ActiveBackend::Sim(_) => "sim".into(),
        ActiveBackend::Http(_) => "http".into(),
    }
}

/// Runs every manifest entry and writes `bench.json`, one topology document
/// per entry under `topologies/`, and `pairs_manifest.json` into `out`.
pub fn bench(
    harness: &Harness,
    manifest: &BenchmarkManifest,
    preset: Option<Preset>,
    out: &Path,
) -> Result<BenchReport, HarnessError> {
    let topo_dir = out.join("topologies");
    std::fs::create_dir_all(&topo_dir).map_err(|e| HarnessError::io(&topo_dir, e))?;
    let mut prepared = Vec::with_capacity(manifest.entries.len());
    for (i, e) in manifest.entries.iter().enumerate() {
        let at = format!("manifest.entries[{i}]");
        let p = e.preset.or(preset);
        let cfg = harness.run_config(e.complexity, p)?;
        let input = TaskInput::from_entry(e, &at)?;
        let seed = e.seed.unwrap_or_else(|| harness.entry_seed(i));
        prepared.push((input, cfg, seed, p.or(harness.app.preset).unwrap_or(Preset::Main)));
    }

    let outcomes = parallel_map(prepared.len(), |i| {
        let (input, cfg, seed, _) = &prepared[i];
        let opts = RunOptions {
            run_id: format!("entry-{i}"),
            ..RunOptions::default()
        };
        harness.run(input, cfg, *seed, &mut NoControls, &mut NullSink, &opts)
    });

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut pairs = Vec::new();
    for (i, outcome) in outcomes.into_iter().enumerate() {
        let (_, _, _, p) = &prepared[i];
        let complexity = manifest.entries[i].complexity;
        match outcome? {
            Ok(result) => {
                let path = topo_dir.join(format!("entry-{i}.json"));
                document::write(&result.topology, &path).map_err(|e| HarnessError::Io {
                    path: path.clone(),
                    source: std::io::Error::other(e.to_string()),
                })?;
                let original = harness.materialize(&result.topology.root.input)?;
                for &f in &result.final_states {
                    let state = result.topology.state(f).expect("final state exists");
                    pairs.push(ImagePair {
                        entry: i,
                        original: original.clone(),
                        edited: harness.materialize(&state.output)?,
                    });
                }
                rows.push(result_row(i, complexity, *p, &result));
            }
            Err(e) => {
                if let RunError::Aborted { partial, .. } = &e {
                    let path = topo_dir.join(format!("entry-{i}.partial.json"));
                    let _ = document::write(partial, &path);
                }
                failures.push(EntryFailure {
                    entry: i,
                    error: e.to_string(),
                });
            }
        }
    }
    harness.finish()?;
    let report = BenchReport {
        backend: backend_label(&harness.app),
        stats: RunStats::from_rows(rows),
        failures,
    };
    write_json(&out.join("bench.json"), &report)?;
    write_json(&out.join("pairs_manifest.json"), &pairs)?;
    Ok(report)
}

/// Strategies compared by the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// One actor call with the full instruction.
    Direct,
    Search(Preset),
}

impl Policy {
    pub const ABLATION: [Policy; 5] = [
        Policy::Direct,
        Policy::Search(Preset::ResamplingOnly),
        Policy::Search(Preset::CosOnly),
        Policy::Search(Preset::TosOnly),
        Policy::Search(Preset::Full),
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Direct => "direct",
            Policy::Search(p) => p.as_str(),
        }
    }
}

/// One actor call with the full instruction, evaluated like a search state.
pub fn direct_edit(
    image: ImageRef,
    instruction: &str,
    backends: &Backends,
    cfg: &RunConfig,
) -> Result<Evaluation, String> {
    let edited = backends.actor.edit(&image, instruction).map_err(|e| e.to_string())?;
    let mut ev = Evaluator::new(
        backends.chat.as_ref(),
        backends.embed.as_ref(),
        image,
        instruction,
        cfg.n_repeats,
        cfg.max_n_try,
    );
    ev.evaluate(&edited).map(|(e, _)| e).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: String,
    pub tasks: usize,
    pub failures: usize,
    pub mean_vqa: f64,
    #[serde(with = "ratio_string")]
    pub cif: Score,
    pub mean_clip: f64,
    pub mean_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub backend: String,
    pub policies: Vec<PolicySummary>,
}

impl AblationReport {
    pub fn policy(&self, name: &str) -> Option<&PolicySummary> {
        self.policies.iter().find(|p| p.policy == name)
    }

    /// Whether mean VQA is non-decreasing along the ablation order.
    pub fn vqa_ordered(&self) -> bool {
        self.policies.windows(2).all(|w| w[0].mean_vqa <= w[1].mean_vqa)
    }
}

/// `n` random sim tasks of complexity `c` on the default schema.
pub fn generate_tasks(n: usize, complexity: u32, seed: u64) -> Result<Vec<SimTask>, HarnessError> {
    let schema = Schema::default();
    (0..n)
        .map(|i| {
            SimTask::generate(&schema, complexity, seed.wrapping_mul(1_000_003).wrapping_add(i as u64))
                .map_err(|e| HarnessError::config("complexity", e.to_string()))
        })
        .collect()
}

struct Outcome {
    eval: Option<Evaluation>,
    size: usize,
}

/// Runs every policy on every task at the task's own complexity; task `i`
/// uses backend seed `seed + i` under every policy.
pub fn ablate(harness: &Harness, tasks: &[SimTask], seed: u64) -> Result<AblationReport, HarnessError> {
    let mut configs = Vec::with_capacity(tasks.len());
    for t in tasks {
        let c = t.complexity();
        let mut per_policy = Vec::new();
        for policy in Policy::ABLATION {
            per_policy.push(match policy {
                Policy::Direct => harness.run_config(c, Some(Preset::Main))?,
                Policy::Search(p) => harness.run_config(c, Some(p))?,
            });
        }
        configs.push(per_policy);
    }
    let inputs: Vec<TaskInput> = tasks.iter().cloned().map(TaskInput::Sim).collect();

    let per_task = parallel_map(inputs.len(), |i| -> Result<Vec<Outcome>, HarnessError> {
        let task_seed = seed.wrapping_add(i as u64);
        Policy::ABLATION
            .iter()
            .zip(&configs[i])
            .map(|(policy, cfg)| {
                let (backends, image, instruction) = harness.prepare(&inputs[i], cfg, task_seed)?;
                Ok(match policy {
                    Policy::Direct => Outcome {
                        eval: direct_edit(image, &instruction, &backends, cfg).ok(),
                        size: 1,
                    },
                    Policy::Search(_) => {
                        let opts = RunOptions::default();
                        match run(image, &instruction, &backends, cfg, &mut NoControls, &mut NullSink, &opts) {
                            Ok(r) => Outcome {
                                eval: final_evaluation(&r).cloned(),
                                size: r.topology.size(),
                            },
                            Err(_) => Outcome { eval: None, size: 0 },
                        }
                    }
                })
            })
            .collect()
    });
    let per_task: Vec<Vec<Outcome>> = per_task.into_iter().collect::<Result<_, _>>()?;
    harness.finish()?;

    let policies = Policy::ABLATION
        .iter()
        .enumerate()
        .map(|(j, policy)| {
            let outs: Vec<&Outcome> = per_task.iter().map(|t| &t[j]).collect();
            let scores: Vec<Score> = outs
                .iter()
                .map(|o| o.eval.as_ref().map(|e| e.vqa_score).unwrap_or_default())
                .collect();
            let n = outs.len().max(1) as f64;
            PolicySummary {
                policy: policy.name().to_string(),
                tasks: outs.len(),
                failures: outs.iter().filter(|o| o.eval.is_none()).count(),
                mean_vqa: scores.iter().map(|s| score_f64(*s)).sum::<f64>() / n,
                cif: cif(&scores).unwrap_or_default(),
                mean_clip: outs
                    .iter()
                    .map(|o| o.eval.as_ref().map_or(0.0, |e| e.clip_i))
                    .sum::<f64>()
                    / n,
                mean_size: outs.iter().map(|o| o.size as f64).sum::<f64>() / n,
            }
        })
        .collect();
    Ok(AblationReport {
        backend: backend_label(&harness.app),
        policies,
    })
}

/// Loads every topology document in `dir`, sorted by file name.
pub fn load_topologies(dir: &Path) -> Result<Vec<InferenceTopology>, HarnessError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| HarnessError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json") && !p.to_string_lossy().ends_with(".partial.json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            document::read(p).map_err(|e| HarnessError::config(p.display().to_string(), e.to_string()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_validation() {
        let base = Path::new("/m");
        let ok = br#"{"entries": [{"image": "a.png", "instruction": "x", "complexity": 9}]}"#;
        let m = BenchmarkManifest::from_slice(ok, base).unwrap();
        assert_eq!(m.entries[0].image.as_deref(), Some(Path::new("/m/a.png")));
        for (bad, path) in [
            (&br#"{"entries": []}"#[..], "manifest.entries"),
            (br#"{"entries": [{"image": "a.png", "complexity": 2}]}"#, "manifest.entries[0].instruction"),
            (br#"{"entries": [{"complexity": 2}]}"#, "manifest.entries[0].task"),
            (br#"{"entries": [{"image": "a", "instruction": "x", "complexity": 0}]}"#, "manifest.entries[0].complexity"),
        ] {
            match BenchmarkManifest::from_slice(bad, base) {
                Err(HarnessError::Config { path: p, .. }) => assert_eq!(p, path),
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn parallel_map_keeps_order() {
        assert_eq!(parallel_map(50, |i| i * 2), (0..50).map(|i| i * 2).collect::<Vec<_>>());
        assert!(parallel_map(0, |i| i).is_empty());
    }
}
