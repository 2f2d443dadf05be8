use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use editsearch::config::Preset;
use editsearch::controls::NoControls;
use editsearch::document;
use editsearch::events::NullSink;
use editsearch::harness::bench::{self, AblationReport, BenchmarkManifest, Harness, TaskInput};
use editsearch::harness::serve::{serve, ServeState};
use editsearch::harness::stats::{self, ScalingMode};
use editsearch::harness::{AppConfig, HarnessError, RunOverrides};
use editsearch::scheduler::{AbortCause, RunError, RunOptions};
use editsearch::sim::SimTask;

#[derive(Parser)]
#[command(name = "editsearch", version, about = "Tree-of-states search for multi-instruction image editing")]
struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one search and write its topology document.
    Run {
        #[arg(long, conflicts_with = "task")]
        image: Option<PathBuf>,
        /// Sim task file.
        #[arg(long)]
        task: Option<PathBuf>,
        #[arg(long)]
        instruction: Option<String>,
        #[arg(long)]
        complexity: Option<u32>,
        #[arg(long)]
        preset: Option<Preset>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output document; defaults to `<workspace>/topology.json`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: RunOverrides,
    },
    /// Run every entry of a manifest.
    Bench {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        preset: Option<Preset>,
        #[arg(long, default_value = "bench-out")]
        out: PathBuf,
        #[command(flatten)]
        overrides: RunOverrides,
    },
    /// Compare direct editing with the four search presets.
    Ablate {
        /// Manifest of sim tasks; without it tasks are generated.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Number of generated tasks, or the first N manifest tasks.
        #[arg(long, default_value_t = 200)]
        seeds: usize,
        #[arg(long, default_value_t = 6)]
        complexity: u32,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Actor success probability.
        #[arg(long)]
        p: Option<f64>,
        /// Actor side-effect probability.
        #[arg(long)]
        q: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: RunOverrides,
    },
    /// Fit mean topology size against complexity.
    Fit {
        /// JSON list of `[complexity, mean_size]` pairs.
        #[arg(long, conflicts_with = "bench")]
        points: Option<PathBuf>,
        /// A `bench.json` report.
        #[arg(long)]
        bench: Option<PathBuf>,
    },
    /// Best-by-prefix or per-depth metrics over stored topologies.
    Scaling {
        /// Directory of topology documents.
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, value_enum, default_value = "steps")]
        mode: ScalingMode,
        /// Complexity used to resolve the ranking configuration.
        #[arg(long, default_value_t = 1)]
        complexity: u32,
        #[command(flatten)]
        overrides: RunOverrides,
    },
    /// Host runs over HTTP.
    Serve {
        #[arg(long)]
        bind: Option<String>,
        #[command(flatten)]
        overrides: RunOverrides,
    },
}

fn load_app(path: Option<&Path>) -> Result<AppConfig, HarnessError> {
    match path {
        Some(p) => AppConfig::load(p),
        None => Ok(AppConfig::default()),
    }
}

/// Prints `value` as pretty JSON; a closed stdout is not an error.
fn print_json<T: Serialize>(value: &T) {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    let mut bytes = serde_json::to_vec_pretty(value).expect("report serializes");
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

fn print_ablation(report: &AblationReport) {
    println!("{:<16} {:>8} {:>8} {:>8} {:>8}", "policy", "vqa", "cif", "clip", "size");
    for p in &report.policies {
        println!(
            "{:<16} {:>8.4} {:>8.4} {:>8.4} {:>8.2}",
            p.policy,
            p.mean_vqa,
            stats::score_f64(p.cif),
            p.mean_clip,
            p.mean_size
        );
    }
    if report.backend == "sim" {
        println!("(simulated backends: sim-world analogues, not model results)");
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    app: AppConfig,
    image: Option<PathBuf>,
    task: Option<PathBuf>,
    instruction: Option<String>,
    complexity: Option<u32>,
    preset: Option<Preset>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    overrides: RunOverrides,
) -> Result<(), HarnessError> {
    let input = match (task, image) {
        (Some(path), _) => {
            let bytes = std::fs::read(&path).map_err(|e| HarnessError::config("task", e.to_string()))?;
            let t: SimTask = serde_json::from_slice(&bytes).map_err(|e| HarnessError::config("task", e.to_string()))?;
            t.validate().map_err(|e| HarnessError::config("task", e.to_string()))?;
            TaskInput::Sim(t)
        }
        (None, Some(image)) => TaskInput::Image {
            image,
            instruction: instruction.ok_or_else(|| HarnessError::config("instruction", "--instruction is required with --image"))?,
        },
        (None, None) => return Err(HarnessError::config("task", "give --task or --image")),
    };
    let complexity = match (&input, complexity.or(app.complexity)) {
        (_, Some(c)) => c,
        (TaskInput::Sim(t), None) => t.complexity(),
        (TaskInput::Image { .. }, None) => return Err(HarnessError::config("complexity", "--complexity is required")),
    };
    let out = out.unwrap_or_else(|| app.workspace().join("topology.json"));
    let harness = Harness::new(app, overrides)?;
    let cfg = harness.run_config(complexity, preset)?;
    let seed = seed.unwrap_or_else(|| harness.entry_seed(0));
    let result = harness.run(&input, &cfg, seed, &mut NoControls, &mut NullSink, &RunOptions::default())?;
    harness.finish()?;
    let result = result.map_err(|e| match e {
        RunError::Config(c) => HarnessError::config("run", c.to_string()),
        RunError::Aborted {
            cause: AbortCause::Actor(b), ..
        } => HarnessError::Backend(b.to_string()),
        other => HarnessError::Backend(other.to_string()),
    })?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    document::write(&result.topology, &out).map_err(|e| HarnessError::Io {
        path: out.clone(),
        source: std::io::Error::other(e.to_string()),
    })?;
    let preset = preset.or(harness.app.preset).unwrap_or(Preset::Main);
    let row = bench::result_row(0, complexity, preset, &result);
    print_json(&serde_json::json!({
        "topology": out,
        "final_states": result.final_states,
        "summary": row,
    }));
    Ok(())
}

fn execute(cli: Cli) -> Result<(), HarnessError> {
    let app = load_app(cli.config.as_deref())?;
    match cli.command {
        Command::Run {
            image,
            task,
            instruction,
            complexity,
            preset,
            seed,
            out,
            overrides,
        } => cmd_run(app, image, task, instruction, complexity, preset, seed, out, overrides),
        Command::Bench {
            manifest,
            preset,
            out,
            overrides,
        } => {
            let manifest = BenchmarkManifest::load(&manifest)?;
            let harness = Harness::new(app, overrides)?;
            let report = bench::bench(&harness, &manifest, preset, &out)?;
            print_json(&report.stats.aggregates);
            if !report.failures.is_empty() {
                return Err(HarnessError::EntriesFailed {
                    failed: report.failures.len(),
                    total: manifest.entries.len(),
                });
            }
            Ok(())
        }
        Command::Ablate {
            manifest,
            seeds,
            complexity,
            seed,
            p,
            q,
            out,
            overrides,
        } => {
            let mut app = app;
            app.backends.sim.p = p.unwrap_or(app.backends.sim.p);
            app.backends.sim.q = q.unwrap_or(app.backends.sim.q);
            let tasks = match manifest {
                Some(path) => {
                    let m = BenchmarkManifest::load(&path)?;
                    let mut tasks = Vec::new();
                    for (i, e) in m.entries.iter().take(seeds).enumerate() {
                        match TaskInput::from_entry(e, &format!("manifest.entries[{i}]"))? {
                            TaskInput::Sim(t) => tasks.push(t),
                            TaskInput::Image { .. } => {
                                return Err(HarnessError::config(
                                    format!("manifest.entries[{i}]"),
                                    "ablation needs sim tasks",
                                ))
                            }
                        }
                    }
                    tasks
                }
                None => bench::generate_tasks(seeds, complexity, seed)?,
            };
            let harness = Harness::new(app, overrides)?;
            let report = bench::ablate(&harness, &tasks, seed)?;
            print_ablation(&report);
            if let Some(out) = out {
                write_json(&out, &report)?;
            }
            Ok(())
        }
        Command::Fit { points, bench } => {
            let pts: Vec<(u32, f64)> = match (points, bench) {
                (Some(p), _) => {
                    let bytes = std::fs::read(&p).map_err(|e| HarnessError::config("points", e.to_string()))?;
                    serde_json::from_slice(&bytes).map_err(|e| HarnessError::config("points", e.to_string()))?
                }
                (None, Some(b)) => {
                    let bytes = std::fs::read(&b).map_err(|e| HarnessError::config("bench", e.to_string()))?;
                    let report: bench::BenchReport =
                        serde_json::from_slice(&bytes).map_err(|e| HarnessError::config("bench", e.to_string()))?;
                    report.stats.size_points()
                }
                (None, None) => return Err(HarnessError::config("points", "give --points or --bench")),
            };
            let fit = stats::fit_topology_sizes(&pts).map_err(|e| HarnessError::config("points", e.to_string()))?;
            print_json(&fit);
            Ok(())
        }
        Command::Scaling {
            dir,
            mode,
            complexity,
            overrides,
        } => {
            let cfg = app.resolve_run_config(&overrides, Some(complexity), None)?;
            let topologies = bench::load_topologies(&dir)?;
            let report = stats::scaling_report(&topologies, mode, &cfg)
                .map_err(|e| HarnessError::config(dir.display().to_string(), e.to_string()))?;
            print_json(&report);
            Ok(())
        }
        Command::Serve { bind, overrides } => {
            let bind = bind
                .or_else(|| app.serve.bind.clone())
                .unwrap_or_else(|| "127.0.0.1:8080".into());
            let token = match &app.serve.token_env {
                Some(var) => Some(std::env::var(var).map_err(|_| {
                    HarnessError::config("serve.token_env", format!("environment variable {var} is not set"))
                })?),
                None => None,
            };
            let harness = Harness::new(app, overrides)?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| HarnessError::Backend(e.to_string()))?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(&bind)
                    .await
                    .map_err(|e| HarnessError::config("serve.bind", e.to_string()))?;
                tracing::info!(%bind, "serving");
                serve(listener, ServeState::new(harness, token))
                    .await
                    .map_err(|e| HarnessError::Backend(e.to_string()))
            })
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
