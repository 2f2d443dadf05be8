#![allow(dead_code)]

use editsearch::config::{derive_config, Preset, RunConfig};
use editsearch::controls::ControlSource;
use editsearch::evaluator::{AnswerSheet, Checklist, Evaluation};
use editsearch::events::{EventRecord, NullSink};
use editsearch::image::ImageRef;
use editsearch::scheduler::{run, RunOptions, RunResult};
use editsearch::sim::{Schema, SimActorParams, SimTask, SimWorld};
use editsearch::topology::{InferenceTopology, StateId};
use num_rational::Ratio;

pub fn eval(numer: u32, denom: u32, clip: f64) -> Evaluation {
    Evaluation {
        checklist: Checklist {
            image_description: String::new(),
            sub_instructions: Vec::new(),
            questions: Vec::new(),
        },
        answers: AnswerSheet { per_question: Vec::new() },
        vqa_score: Ratio::new(numer, denom),
        clip_i: clip,
        reasoning: String::new(),
    }
}

pub fn root() -> InferenceTopology {
    InferenceTopology::create_root(ImageRef::sim("root".into()), "edit").unwrap()
}

/// Appends a child of `parent` with the given scores.
pub fn child(t: &mut InferenceTopology, parent: StateId, numer: u32, denom: u32, clip: f64) -> StateId {
    let n = t.size() + 1;
    t.append_state(parent, format!("t{n}"), ImageRef::sim(format!("img{n}")), Some(eval(numer, denom, clip)), usize::MAX)
        .unwrap()
}

pub fn task(complexity: u32, seed: u64) -> SimTask {
    SimTask::generate(&Schema::default(), complexity, seed).unwrap()
}

pub fn world(task: &SimTask, p: f64, q: f64, k: u32, seed: u64) -> SimWorld {
    SimWorld {
        schema: task.schema.clone(),
        actor: SimActorParams { p, q, k, seed },
        epsilon: 0.0,
    }
}

pub fn cfg(c: u32, preset: Preset) -> RunConfig {
    derive_config(c, preset).unwrap()
}

pub fn sim_run(task: &SimTask, world: &SimWorld, cfg: &RunConfig, controls: &mut dyn ControlSource) -> RunResult {
    run(
        task.initial.to_ref(),
        &task.instruction(),
        &world.backends(),
        cfg,
        controls,
        &mut NullSink,
        &RunOptions::default(),
    )
    .unwrap()
}

pub fn sim_run_logged(
    task: &SimTask,
    world: &SimWorld,
    cfg: &RunConfig,
    controls: &mut dyn ControlSource,
) -> (RunResult, Vec<EventRecord>) {
    let mut log = Vec::new();
    let r = run(
        task.initial.to_ref(),
        &task.instruction(),
        &world.backends(),
        cfg,
        controls,
        &mut |e: &EventRecord| log.push(e.clone()),
        &RunOptions::default(),
    )
    .unwrap();
    (r, log)
}
