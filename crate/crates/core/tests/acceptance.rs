//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::collections::{BTreeSet, VecDeque};
use std::time::{Duration, Instant};

use common::*;
use editsearch::config::{derive_config, Preset, RunConfig};
use editsearch::controls::NoControls;
use editsearch::document;
use editsearch::harness::bench::{ablate, bench, generate_tasks, load_topologies, BenchmarkManifest, Harness};
use editsearch::harness::stats::{fit_topology_sizes, scaling_report, ScalingMode};
use editsearch::harness::{AppConfig, RunOverrides};
use editsearch::scheduler::{backtrack, check_stay};
use editsearch::sim::rng::Lcg;
use editsearch::sim::{render_edits, sim_edit, SimActorParams, SimImage, SimTask};
use editsearch::templates::{
    ANALYZER_FORMAT, ANALYZER_PATTERN, CHECKER_FORMAT, CHECKER_PATTERN, GENERATOR_FORMAT, GENERATOR_PATTERN,
};
use editsearch::topology::{InferenceTopology, StateId, ROOT};
use num_rational::Ratio;
use serde_json::{json, Value};

type Check = Result<(), String>;
type Criterion = fn() -> Check;
/// Model name, mean sizes for C = 1..7, (slope, bias), (slope, bias) std errors.
type PrintedFit = (&'static str, [f64; 7], (f64, f64), (f64, f64));

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Check {
    ensure(elapsed < limit, || format!("took {elapsed:.2?}, limit {limit:?}"))
}

fn topology_size_fits() -> Check {
    let started = Instant::now();
    let models: [PrintedFit; 3] = [
        ("QwenImageEdit", [2.39, 3.84, 4.76, 6.51, 7.33, 8.89, 10.04], (1.2721, 1.1629), (0.036, 0.161)),
        ("FluxKontext", [2.17, 3.65, 4.70, 6.24, 7.28, 8.82, 9.71], (1.2693, 1.0043), (0.031, 0.140)),
        ("FluxKlein", [2.12, 3.69, 4.49, 6.32, 7.23, 9.03, 9.95], (1.3182, 0.8457), (0.047, 0.212)),
    ];
    for (name, means, (slope, bias), (slope_se, bias_se)) in models {
        let pts: Vec<(u32, f64)> = (1..=7).zip(means).collect();
        let f = fit_topology_sizes(&pts).map_err(|e| format!("{name}: {e}"))?;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-3;
        ensure(close(f.slope.estimate, slope) && close(f.bias.estimate, bias), || {
            format!("{name}: fit ({:.4}, {:.4}) vs ({slope}, {bias})", f.slope.estimate, f.bias.estimate)
        })?;
        let se = (f.slope.std_err.unwrap_or(f64::NAN), f.bias.std_err.unwrap_or(f64::NAN));
        ensure(close(se.0, slope_se) && close(se.1, bias_se), || format!("{name}: std errors {se:?}"))?;
    }
    within(started.elapsed(), Duration::from_secs(1))
}

fn config_goldens() -> Check {
    const MIN_DEPTH: [u32; 7] = [1, 2, 2, 3, 3, 4, 4];
    for c in 1..=7u32 {
        let i = (c - 1) as usize;
        for preset in Preset::ALL {
            let got = derive_config(c, preset).map_err(|e| e.to_string())?;
            // (max_n_children, max_depth, min_depth, search_range) from the tables.
            let expected = match preset {
                Preset::Main => (2, c + 1, MIN_DEPTH[i], 2),
                Preset::ResamplingOnly => (2 * (c + 1), 1, 1, 0),
                Preset::CosOnly => (1, 2 * (c + 1), MIN_DEPTH[i], 0),
                Preset::TosOnly => (2, c, MIN_DEPTH[i], 0),
                Preset::Full => (2, c, MIN_DEPTH[i], 2),
            };
            let actual = (got.max_n_children, got.max_depth, got.min_depth, got.search_range);
            let shared = got.max_steps == 2 * (c + 1)
                && got.instruction_volume == 2
                && got.top_k == 3
                && got.relevance_threshold == 50
                && got.max_n_try == 3
                && got.stay_threshold.vqa == Ratio::new(1, 10)
                && got.degrade_tolerance.vqa == Ratio::from_integer(0)
                && got.completion_threshold.vqa == Ratio::from_integer(1)
                && got.completion_threshold.clip == 1.0;
            ensure(actual == expected && shared, || {
                format!("C={c} {}: got {actual:?} expected {expected:?}, shared fields ok: {shared}", preset.as_str())
            })?;
        }
    }
    Ok(())
}

fn guided_corpus() -> Check {
    let corpus: Value =
        serde_json::from_str(include_str!("data/guided_corpus.json")).map_err(|e| e.to_string())?;
    let templates = [
        ("generator", GENERATOR_PATTERN, &*GENERATOR_FORMAT),
        ("analyzer", ANALYZER_PATTERN, &*ANALYZER_FORMAT),
        ("checker", CHECKER_PATTERN, &*CHECKER_FORMAT),
    ];
    for (name, pattern, _) in &templates {
        ensure(corpus["patterns"][name] == *pattern, || format!("{name}: stored pattern differs"))?;
    }
    let cases = corpus["cases"].as_array().ok_or("missing cases")?;
    let mut disagreements = Vec::new();
    for (name, _, format) in &templates {
        let mine: Vec<&Value> = cases.iter().filter(|c| c["template"] == *name).collect();
        let valid = mine.iter().filter(|c| c["expected"] == true).count();
        ensure(mine.len() == 10 && valid == 4, || format!("{name}: {} cases, {valid} valid", mine.len()))?;
        for c in mine {
            let text = c["text"].as_str().ok_or("case text")?;
            if format.is_match(text) != c["expected"].as_bool().ok_or("verdict")? {
                disagreements.push(format!("{name}/{}", c["case"]));
            }
        }
    }
    ensure(disagreements.is_empty(), || format!("disagreements {disagreements:?}"))
}

fn parent_eval(t: &InferenceTopology, id: StateId) -> Option<&editsearch::evaluator::Evaluation> {
    let p = t.state(id)?.parent_id?;
    t.state(p)?.evaluation.as_ref()
}

/// Violated laws, plus whether the monotone-chain law applied to this run.
fn law_violations(
    t: &InferenceTopology,
    r: &editsearch::scheduler::RunResult,
    cfg: &RunConfig,
    preset: Preset,
) -> (Vec<String>, bool) {
    let mut v = Vec::new();
    let mut chain_checked = false;
    if t.size() > cfg.max_steps as usize {
        v.push(format!("budget: {} states", t.size()));
    }
    // Tree law by union-find: every state joins a distinct earlier component.
    let n = t.size() + 1;
    let mut uf: Vec<usize> = (0..n).collect();
    fn find(uf: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while uf[r] != r {
            r = uf[r];
        }
        uf[x] = r;
        r
    }
    for s in &t.states {
        match s.parent_id {
            Some(p) if (p as usize) < s.state_id as usize => {
                let (a, b) = (find(&mut uf, p as usize), find(&mut uf, s.state_id as usize));
                if a == b {
                    v.push(format!("tree: cycle at {}", s.state_id));
                }
                uf[b] = a;
            }
            _ => v.push(format!("tree: bad parent for {}", s.state_id)),
        }
    }
    let roots: BTreeSet<usize> = (0..n).map(|i| find(&mut uf, i)).collect();
    if roots.len() != 1 {
        v.push(format!("tree: {} components", roots.len()));
    }
    for s in t.iter() {
        if t.fan_out(s.state_id) > cfg.max_n_children as usize {
            v.push(format!("fan-out at {}", s.state_id));
        }
        if s.depth > cfg.max_depth {
            v.push(format!("depth at {}", s.state_id));
        }
    }
    // DFS law over consecutive creations.
    for s in &t.states {
        let Some(next) = t.state(s.state_id + 1) else { break };
        let stays = check_stay(s, parent_eval(t, s.state_id), cfg);
        let ok = if stays {
            next.parent_id == Some(s.state_id)
        } else {
            let before = t.prefix(s.state_id as usize).expect("prefix");
            let target = backtrack(&before, s.state_id, cfg);
            next.parent_id == target && target.is_some_and(|p| t.is_ancestor(p, s.state_id))
        };
        if !ok {
            v.push(format!("dfs: state {} (stay {stays}) then parent {:?}", s.state_id, next.parent_id));
        }
    }
    // Monotone activated chain when every on-chain state passed the stay check.
    if let Some(&last) = r.final_states.first() {
        let mut chain = vec![last];
        while let Some(p) = t.state(*chain.last().unwrap()).and_then(|s| s.parent_id) {
            if p == ROOT {
                break;
            }
            chain.push(p);
        }
        chain.reverse();
        let all_stay = chain
            .iter()
            .all(|&id| check_stay(t.state(id).unwrap(), parent_eval(t, id), cfg));
        if all_stay {
            chain_checked = true;
            let scores: Vec<_> = chain
                .iter()
                .map(|&id| t.state(id).unwrap().evaluation.as_ref().unwrap().vqa_score)
                .collect();
            if scores.windows(2).any(|w| w[1] < w[0]) {
                v.push(format!("chain monotonicity: {scores:?}"));
            }
        }
    }
    if !r.fallback_used {
        for &f in &r.final_states {
            if t.state(f).is_none_or(|s| s.depth < cfg.min_depth) {
                v.push(format!("final eligibility: {f}"));
            }
        }
    }
    match preset {
        Preset::CosOnly if t.iter().any(|s| t.fan_out(s.state_id) > 1) => v.push("cos_only: not a chain".into()),
        Preset::ResamplingOnly if t.states.iter().any(|s| s.parent_id != Some(ROOT)) => {
            v.push("resampling_only: not a star".into())
        }
        _ => {}
    }
    (v, chain_checked)
}

fn scheduler_laws() -> Check {
    let started = Instant::now();
    let mut violations = Vec::new();
    let mut chains = 0;
    let mut backtracks = 0;
    for i in 0..1000u64 {
        let c = 1 + (i % 7) as u32;
        let preset = Preset::ALL[(i / 7 % 5) as usize];
        let tk = task(c, i);
        let cfg = cfg(c, preset);
        let r = sim_run(&tk, &world(&tk, 0.85, 0.05, 2, i), &cfg, &mut NoControls);
        let (found, chain_checked) = law_violations(&r.topology, &r, &cfg, preset);
        chains += chain_checked as usize;
        backtracks += r.topology.states.windows(2).filter(|w| w[1].parent_id != Some(w[0].state_id)).count();
        for v in found {
            violations.push(format!("run {i} (C={c}, {}): {v}", preset.as_str()));
        }
    }
    ensure(chains > 0 && backtracks > 0, || format!("vacuous suite: {chains} chains, {backtracks} backtracks"))?;
    ensure(violations.is_empty(), || format!("{} violations, first: {:?}", violations.len(), &violations[..violations.len().min(3)]))?;
    within(started.elapsed(), Duration::from_secs(60))
}

/// Fewest actor calls that reach the goal when each call may carry any one
/// or two pending edits.
fn brute_force_depth(tk: &SimTask) -> Option<u32> {
    let params = SimActorParams { p: 1.0, q: 0.0, k: 2, seed: 0 };
    let done = |img: &SimImage| tk.edits.iter().all(|e| img.attributes[&e.attribute] == e.value);
    let key = |img: &SimImage| img.attributes.clone();
    let mut seen = BTreeSet::from([key(&tk.initial)]);
    let mut queue = VecDeque::from([(tk.initial.clone(), 0u32)]);
    while let Some((img, d)) = queue.pop_front() {
        if done(&img) {
            return Some(d);
        }
        let n = tk.edits.len();
        let mut schedules: Vec<Vec<usize>> = (0..n).map(|a| vec![a]).collect();
        for a in 0..n {
            for b in a + 1..n {
                schedules.push(vec![a, b]);
            }
        }
        for s in schedules {
            let edits: Vec<_> = s.iter().map(|&i| tk.edits[i].clone()).collect();
            let next = sim_edit(&tk.schema, &img, &render_edits(&edits), &params, &mut Lcg::new(0)).ok()?;
            if seen.insert(key(&next)) {
                queue.push_back((next, d + 1));
            }
        }
    }
    None
}

fn oracle_equivalence() -> Check {
    for n in 1..=6u32 {
        for seed in 0..8u64 {
            let tk = task(n, 100 + seed);
            let oracle = brute_force_depth(&tk).ok_or_else(|| format!("n={n} seed={seed}: oracle found no schedule"))?;
            let expected = n.div_ceil(2);
            ensure(oracle == expected, || format!("n={n} seed={seed}: oracle depth {oracle}"))?;
            let r = sim_run(&tk, &world(&tk, 1.0, 0.0, 2, seed), &cfg(n, Preset::Main), &mut NoControls);
            let reached = r
                .topology
                .states
                .iter()
                .filter(|s| s.evaluation.as_ref().is_some_and(|e| e.vqa_score == Ratio::from_integer(1)))
                .map(|s| s.depth)
                .min();
            ensure(reached == Some(oracle), || format!("n={n} seed={seed}: run reached vqa 1 at {reached:?}, oracle {oracle}"))?;
        }
    }
    Ok(())
}

fn sim_harness(dir: &std::path::Path, p: f64, q: f64, seed: u64) -> Result<Harness, String> {
    let cfg = json!({
        "workspace": dir,
        "backends": {"mode": "sim", "sim": {"p": p, "q": q, "seed": seed}},
    });
    let app = AppConfig::from_slice(&serde_json::to_vec(&cfg).unwrap()).map_err(|e| e.to_string())?;
    Harness::new(app, RunOverrides::default()).map_err(|e| e.to_string())
}

fn ablation_ordering() -> Check {
    let started = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let harness = sim_harness(dir.path(), 0.85, 0.05, 42)?;
    let tasks = generate_tasks(200, 6, 42).map_err(|e| e.to_string())?;
    let report = ablate(&harness, &tasks, 42).map_err(|e| e.to_string())?;
    let names: Vec<&str> = report.policies.iter().map(|p| p.policy.as_str()).collect();
    ensure(names == ["direct", "resampling_only", "cos_only", "tos_only", "full"], || format!("policies {names:?}"))?;
    let vqa: Vec<f64> = report.policies.iter().map(|p| p.mean_vqa).collect();
    ensure(vqa.windows(2).all(|w| w[0] <= w[1]), || format!("mean vqa not ordered: {vqa:?}"))?;
    let (full, direct) = (report.policy("full").unwrap().cif, report.policy("direct").unwrap().cif);
    ensure(full > direct, || format!("cif full {full} <= direct {direct}"))?;
    within(started.elapsed(), Duration::from_secs(300))
}

fn scaling_properties() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let harness = sim_harness(dir.path(), 0.85, 0.0, 9)?;
    let entries: Vec<Value> = (0..40u64)
        .map(|i| {
            let c = 2 + (i % 5) as u32;
            json!({"task": task(c, 500 + i), "complexity": c})
        })
        .collect();
    let manifest = BenchmarkManifest::from_slice(&serde_json::to_vec(&json!({"entries": entries})).unwrap(), dir.path())
        .map_err(|e| e.to_string())?;
    let out = dir.path().join("bench");
    bench(&harness, &manifest, None, &out).map_err(|e| e.to_string())?;
    let topologies = load_topologies(&out.join("topologies")).map_err(|e| e.to_string())?;
    ensure(topologies.len() == 40, || format!("{} persisted runs", topologies.len()))?;

    let cfg = derive_config(1, Preset::Main).unwrap();
    for (i, t) in topologies.iter().enumerate() {
        let report = scaling_report(std::slice::from_ref(t), ScalingMode::Steps, &cfg).map_err(|e| e.to_string())?;
        let curve: Vec<f64> = report.rows.iter().map(|r| r.mean_vqa).collect();
        let mut running = 0.0f64;
        let oracle: Vec<f64> = t
            .states
            .iter()
            .map(|s| {
                let v = s.evaluation.as_ref().unwrap().vqa_score;
                running = running.max(*v.numer() as f64 / *v.denom() as f64);
                running
            })
            .collect();
        ensure(curve.windows(2).all(|w| w[0] <= w[1]), || format!("run {i}: prefix curve decreases {curve:?}"))?;
        ensure(curve == oracle, || format!("run {i}: curve {curve:?} vs running max {oracle:?}"))?;
    }
    let depth = scaling_report(&topologies, ScalingMode::Depth, &cfg).map_err(|e| e.to_string())?;
    let clips: Vec<f64> = depth.rows.iter().map(|r| r.mean_clip).collect();
    ensure(clips.windows(2).all(|w| w[1] <= w[0] + 1e-9), || format!("per-depth clip means increase: {clips:?}"))
}

fn replay_determinism() -> Check {
    for (i, preset) in Preset::ALL.into_iter().enumerate() {
        let seed = 77 + i as u64;
        let tk = task(5, seed);
        let w = world(&tk, 0.85, 0.05, 2, seed);
        let c = cfg(5, preset);
        let a = document::to_bytes(&sim_run(&tk, &w, &c, &mut NoControls).topology);
        let b = document::to_bytes(&sim_run(&tk, &w, &c, &mut NoControls).topology);
        ensure(a == b, || format!("{}: repeated runs differ", preset.as_str()))?;
        let back = document::from_slice(&a).map_err(|e| e.to_string())?;
        ensure(document::to_bytes(&back) == a, || format!("{}: re-serialization differs", preset.as_str()))?;
    }
    Ok(())
}

fn main() {
    let criteria: [(&str, Criterion); 8] = [
        ("topology size fit reproduction", topology_size_fits),
        ("config goldens", config_goldens),
        ("guided-decoding corpus", guided_corpus),
        ("scheduler law suite", scheduler_laws),
        ("oracle equivalence", oracle_equivalence),
        ("ablation ordering", ablation_ordering),
        ("scaling-report properties", scaling_properties),
        ("replay determinism", replay_determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let started = Instant::now();
        match check() {
            Ok(()) => println!("PASS {name} ({:.2?})", started.elapsed()),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
