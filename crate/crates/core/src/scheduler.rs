//! The search loop: depth-first expansion of the state tree with stay
//! checks, backtracking, completion and budget termination.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::config::{ConfigError, Ranking, RunConfig, ThoughtSource};
use crate::controls::{Control, ControlSource};
use crate::evaluator::{EvalError, EvalWarning, Evaluation, Evaluator};
use crate::events::{
    Clock, EventKind, EventRecord, EventSink, FinalizedPayload, RunStartedPayload,
    StateCreatedPayload,
};
use crate::generator::{generate_thought, GenError, GenerationContext};
use crate::image::ImageRef;
use crate::ports::{BackendError, Backends};
use crate::retriever::{retrieve_references, ReferenceSet, SimilarityCache};
use crate::topology::{InferenceTopology, ReferenceLink, State, StateId, TopologyError, ROOT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Completed,
    BudgetExhausted,
    BacktrackExhausted,
}

#[derive(Debug, Error)]
pub enum AbortCause {
    #[error("thought generation failed: {0}")]
    Generation(#[from] GenError),
    #[error("evaluation failed: {0}")]
    Evaluation(#[from] EvalError),
    #[error("actor failed: {0}")]
    Actor(#[from] BackendError),
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("run aborted with {} states: {cause}", partial.size())]
    Aborted {
        cause: AbortCause,
        partial: Box<InferenceTopology>,
    },
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub final_states: Vec<StateId>,
    pub topology: InferenceTopology,
    pub termination: Termination,
    pub fallback_used: bool,
}

/// Orders two evaluations; `Greater` means `a` ranks higher.
pub fn rank(a: &Evaluation, b: &Evaluation, cfg: &RunConfig) -> Ordering {
    match cfg.ranking {
        Ranking::LexicographicVqaThenClip => a
            .vqa_score
            .cmp(&b.vqa_score)
            .then_with(|| a.clip_i.total_cmp(&b.clip_i)),
        Ranking::WeightedSum => {
            let [l1, l2, _] = cfg.objective_weights;
            let score = |e: &Evaluation| {
                l1 * (*e.vqa_score.numer() as f64 / *e.vqa_score.denom() as f64) + l2 * e.clip_i
            };
            score(a).total_cmp(&score(b))
        }
    }
}

/// The incumbent final states; all share one selection key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimal {
    pub states: Vec<StateId>,
    /// Whether the incumbents meet the minimum depth.
    pub eligible: bool,
}

/// Selection key order: eligible beats ineligible, then rank, then the
/// shallower state.
fn selection_cmp(a: &State, b: &State, cfg: &RunConfig) -> Ordering {
    let ea = a.depth >= cfg.min_depth;
    let eb = b.depth >= cfg.min_depth;
    let (va, vb) = (a.evaluation.as_ref(), b.evaluation.as_ref());
    ea.cmp(&eb)
        .then_with(|| match (va, vb) {
            (Some(x), Some(y)) => rank(x, y, cfg),
            (Some(_), None) => Ordering::Greater,
            (None, Some(_)) => Ordering::Less,
            (None, None) => Ordering::Equal,
        })
        .then_with(|| b.depth.cmp(&a.depth))
}

/// Folds `new_state` into the incumbent set.
pub fn update_optimal(
    best: Option<&Optimal>,
    topology: &InferenceTopology,
    new_state: StateId,
    cfg: &RunConfig,
) -> Optimal {
    let new = topology.state(new_state).expect("new state exists");
    let eligible = new.depth >= cfg.min_depth;
    let Some(best) = best.filter(|b| !b.states.is_empty()) else {
        return Optimal {
            states: vec![new_state],
            eligible,
        };
    };
    let incumbent = topology.state(best.states[0]).expect("incumbent exists");
    match selection_cmp(new, incumbent, cfg) {
        Ordering::Greater => Optimal {
            states: vec![new_state],
            eligible,
        },
        Ordering::Equal => {
            let mut states = best.states.clone();
            states.push(new_state);
            Optimal {
                states,
                eligible: best.eligible,
            }
        }
        Ordering::Less => best.clone(),
    }
}

pub fn check_completion(best: &State, cfg: &RunConfig) -> bool {
    let Some(e) = &best.evaluation else {
        return false;
    };
    e.vqa_score >= cfg.completion_threshold.vqa
        && e.clip_i >= cfg.completion_threshold.clip
        && best.depth >= cfg.min_depth
}

/// Whether the search continues from `state`. `parent_eval` is `None` when
/// the parent is the root, which makes the degradation test vacuous.
pub fn check_stay(state: &State, parent_eval: Option<&Evaluation>, cfg: &RunConfig) -> bool {
    let Some(e) = &state.evaluation else {
        return false;
    };
    let above_floor = e.vqa_score >= cfg.stay_threshold.vqa;
    let room = state.depth < cfg.max_depth;
    let not_degraded = parent_eval.is_none_or(|p| {
        p.vqa_score <= e.vqa_score || p.vqa_score - e.vqa_score <= cfg.degrade_tolerance.vqa
    });
    let complete = e.vqa_score >= cfg.completion_threshold.vqa
        && e.clip_i >= cfg.completion_threshold.clip;
    above_floor && room && not_degraded && !complete
}

fn is_dead(topology: &InferenceTopology, id: StateId, pruned: &BTreeSet<StateId>) -> bool {
    pruned.contains(&id) || topology.ancestors(id).iter().any(|a| pruned.contains(a))
}

fn backtrack_excluding(
    topology: &InferenceTopology,
    from: StateId,
    cfg: &RunConfig,
    pruned: &BTreeSet<StateId>,
) -> Option<StateId> {
    topology.ancestors(from).into_iter().find(|&a| {
        let s = topology.state(a).expect("ancestor exists");
        topology.fan_out(a) < cfg.max_n_children as usize
            && s.depth < cfg.max_depth
            && !is_dead(topology, a, pruned)
    })
}

/// Nearest strict ancestor of `from` with spare fan-out below `max_depth`.
pub fn backtrack(topology: &InferenceTopology, from: StateId, cfg: &RunConfig) -> Option<StateId> {
    backtrack_excluding(topology, from, cfg, &BTreeSet::new())
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub run_id: String,
    pub clock: Clock,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            run_id: "run".into(),
            clock: Clock::Logical,
        }
    }
}

struct Recorder<'s> {
    run_id: String,
    clock: Clock,
    seq: u64,
    sink: &'s mut dyn EventSink,
}

impl Recorder<'_> {
    fn emit(
        &mut self,
        topology: &mut InferenceTopology,
        kind: EventKind,
        state_id: Option<StateId>,
        payload: serde_json::Value,
    ) {
        let event = EventRecord {
            seq: self.seq,
            run_id: self.run_id.clone(),
            kind,
            state_id,
            payload,
            ts: self.clock.stamp(self.seq),
        };
        self.seq += 1;
        self.sink.emit(&event);
        topology.push_event(event);
    }
}

fn warning_payload(w: &EvalWarning) -> serde_json::Value {
    match w {
        EvalWarning::RepeatDiscarded { repeat, raw } => {
            json!({"warning": "repeat_discarded", "repeat": repeat, "attempts": raw.len()})
        }
        EvalWarning::QuestionUnanswered { question } => {
            json!({"warning": "question_unanswered", "question": question})
        }
    }
}

enum Flow {
    Stop(Termination),
    Accept(StateId),
}

/// Runs one search from `image` under `instruction`.
pub fn run(
    image: ImageRef,
    instruction: &str,
    backends: &Backends,
    cfg: &RunConfig,
    controls: &mut dyn ControlSource,
    sink: &mut dyn EventSink,
    opts: &RunOptions,
) -> Result<RunResult, RunError> {
    cfg.validate()?;
    let mut topo = InferenceTopology::create_root(image.clone(), instruction)?
        .with_config_digest(cfg.digest());
    let mut rec = Recorder {
        run_id: opts.run_id.clone(),
        clock: opts.clock,
        seq: 0,
        sink,
    };
    let start = RunStartedPayload {
        config_digest: topo.config_digest.clone(),
        root: topo.root.clone(),
    };
    rec.emit(
        &mut topo,
        EventKind::RunStarted,
        None,
        serde_json::to_value(start).expect("payload serializes"),
    );

    let mut evaluator = Evaluator::new(
        backends.chat.as_ref(),
        backends.embed.as_ref(),
        image,
        instruction,
        cfg.n_repeats,
        cfg.max_n_try,
    );
    let checklist = match evaluator.checklist() {
        Ok(c) => c.clone(),
        Err(e) => {
            return Err(RunError::Aborted {
                cause: e.into(),
                partial: Box::new(topo),
            })
        }
    };
    rec.emit(
        &mut topo,
        EventKind::Checklist,
        None,
        serde_json::to_value(&checklist).expect("checklist serializes"),
    );

    let mut cache = SimilarityCache::default();
    let mut pruned: BTreeSet<StateId> = BTreeSet::new();
    let mut best: Option<Optimal> = None;
    let mut parent = ROOT;
    let mut paused = false;

    let flow = 'search: loop {
        let step = topo.size();
        let upcoming = step as StateId + 1;

        let mut pending: Vec<Control> = controls.poll(step);
        let mut idx = 0;
        loop {
            if idx == pending.len() {
                if !paused {
                    break;
                }
                match controls.wait() {
                    Some(c) => pending.push(c),
                    None => {
                        paused = false;
                        break;
                    }
                }
            }
            let c = pending[idx];
            idx += 1;
            if !matches!(c, Control::Prune { .. }) {
                rec.emit(
                    &mut topo,
                    EventKind::Control,
                    None,
                    serde_json::to_value(c).expect("control serializes"),
                );
            }
            match c {
                Control::Pause => paused = true,
                Control::Resume => paused = false,
                Control::Accept { state_id } => {
                    if state_id != ROOT && topo.contains(state_id) {
                        break 'search Flow::Accept(state_id);
                    }
                    rec.emit(
                        &mut topo,
                        EventKind::Warning,
                        None,
                        json!({"warning": "accept_ignored", "state_id": state_id}),
                    );
                }
                Control::Prune { state_id } => {
                    if state_id == ROOT || !topo.contains(state_id) {
                        rec.emit(
                            &mut topo,
                            EventKind::Warning,
                            None,
                            json!({"warning": "prune_ignored", "state_id": state_id}),
                        );
                        continue;
                    }
                    pruned.insert(state_id);
                    if state_id == parent || topo.is_ancestor(state_id, parent) {
                        let target = backtrack_excluding(&topo, parent, cfg, &pruned);
                        rec.emit(
                            &mut topo,
                            EventKind::Backtrack,
                            Some(state_id),
                            json!({"from": parent, "to": target, "reason": "prune", "pruned": state_id}),
                        );
                        match target {
                            Some(t) => parent = t,
                            None => break 'search Flow::Stop(Termination::BacktrackExhausted),
                        }
                    } else {
                        rec.emit(&mut topo, EventKind::Prune, Some(state_id), json!({"state_id": state_id}));
                    }
                }
                Control::ForceBacktrack => {
                    let target = backtrack_excluding(&topo, parent, cfg, &pruned);
                    rec.emit(
                        &mut topo,
                        EventKind::Backtrack,
                        None,
                        json!({"from": parent, "to": target, "reason": "control"}),
                    );
                    if let Some(t) = target {
                        parent = t;
                    }
                }
            }
        }

        let references = if cfg.search_range == 0 {
            ReferenceSet::default()
        } else {
            match retrieve_references(&topo, parent, cfg, backends.scorer.as_ref(), &mut cache) {
                Ok(r) => {
                    for (id, err) in &r.dropped {
                        rec.emit(
                            &mut topo,
                            EventKind::Warning,
                            Some(upcoming),
                            json!({"warning": "reference_dropped", "state_id": id, "error": err.to_string()}),
                        );
                    }
                    rec.emit(
                        &mut topo,
                        EventKind::Retrieval,
                        Some(upcoming),
                        json!({"parent": parent, "candidates": r.candidates, "references": r.references}),
                    );
                    r.references
                }
                Err(e) => {
                    rec.emit(
                        &mut topo,
                        EventKind::Warning,
                        Some(upcoming),
                        json!({"warning": "retrieval_failed", "error": e.to_string()}),
                    );
                    ReferenceSet::default()
                }
            }
        };

        let parent_state = topo.state(parent).expect("parent exists").clone();
        let thought = match cfg.thought_source {
            ThoughtSource::Passthrough => instruction.to_string(),
            ThoughtSource::Generator => {
                let ctx = match &parent_state.evaluation {
                    Some(e) => GenerationContext::new(
                        &checklist,
                        &e.answers.finals(),
                        references.clone(),
                        cfg.instruction_volume,
                    ),
                    None => GenerationContext::for_root(&checklist, references.clone(), cfg.instruction_volume),
                };
                match generate_thought(&ctx, &parent_state.output, backends.chat.as_ref(), cfg.max_n_try) {
                    Ok(g) => {
                        rec.emit(
                            &mut topo,
                            EventKind::Thought,
                            Some(upcoming),
                            json!({"thought": g.thought, "attempts": g.attempts}),
                        );
                        g.thought.instruction
                    }
                    Err(e) => {
                        if let GenError::MalformedAfterRetries { attempts } = &e {
                            rec.emit(
                                &mut topo,
                                EventKind::Thought,
                                Some(upcoming),
                                json!({"thought": null, "attempts": attempts}),
                            );
                        }
                        return Err(RunError::Aborted {
                            cause: e.into(),
                            partial: Box::new(topo),
                        });
                    }
                }
            }
        };

        let output = match backends.actor.edit(&parent_state.output, &thought) {
            Ok(o) => o,
            Err(e) => {
                return Err(RunError::Aborted {
                    cause: e.into(),
                    partial: Box::new(topo),
                })
            }
        };
        let (evaluation, warnings) = match evaluator.evaluate(&output) {
            Ok(v) => v,
            Err(e) => {
                return Err(RunError::Aborted {
                    cause: e.into(),
                    partial: Box::new(topo),
                })
            }
        };
        for w in &warnings {
            rec.emit(&mut topo, EventKind::Warning, Some(upcoming), warning_payload(w));
        }

        let id = topo.append_state(parent, thought, output, Some(evaluation), cfg.max_n_children as usize)?;
        let created = topo.state(id).expect("just created").clone();
        rec.emit(
            &mut topo,
            EventKind::StateCreated,
            Some(id),
            serde_json::to_value(StateCreatedPayload { state: created.clone() }).expect("state serializes"),
        );
        for r in &references.entries {
            let link = ReferenceLink {
                at: id,
                reference: r.state_id,
                similarity: r.similarity,
            };
            topo.push_reference(link);
            rec.emit(
                &mut topo,
                EventKind::Reference,
                Some(id),
                serde_json::to_value(link).expect("link serializes"),
            );
        }

        let next = update_optimal(best.as_ref(), &topo, id, cfg);
        if best.as_ref() != Some(&next) {
            rec.emit(
                &mut topo,
                EventKind::Optimal,
                Some(id),
                serde_json::to_value(&next).expect("optimal serializes"),
            );
        }
        best = Some(next);

        if topo.size() >= cfg.max_steps as usize {
            rec.emit(&mut topo, EventKind::Decision, Some(id), json!({"decision": "budget_exhausted"}));
            break Flow::Stop(Termination::BudgetExhausted);
        }
        let best_state = topo
            .state(best.as_ref().unwrap().states[0])
            .expect("incumbent exists");
        if check_completion(best_state, cfg) {
            rec.emit(&mut topo, EventKind::Decision, Some(id), json!({"decision": "completed"}));
            break Flow::Stop(Termination::Completed);
        }
        if check_stay(&created, parent_state.evaluation.as_ref(), cfg) {
            rec.emit(&mut topo, EventKind::Decision, Some(id), json!({"decision": "stay", "next_parent": id}));
            parent = id;
            continue;
        }
        let target = backtrack_excluding(&topo, id, cfg, &pruned);
        rec.emit(
            &mut topo,
            EventKind::Decision,
            Some(id),
            json!({"decision": "backtrack", "next_parent": target}),
        );
        match target {
            Some(t) => {
                rec.emit(
                    &mut topo,
                    EventKind::Backtrack,
                    Some(id),
                    json!({"from": id, "to": t, "reason": "stay_failed"}),
                );
                parent = t;
            }
            None => break Flow::Stop(Termination::BacktrackExhausted),
        }
    };

    let (termination, final_states, fallback_used) = match flow {
        Flow::Accept(id) => (Termination::Completed, vec![id], false),
        Flow::Stop(t) => {
            let b = best.unwrap_or(Optimal {
                states: Vec::new(),
                eligible: false,
            });
            (t, b.states, !b.eligible)
        }
    };
    topo.mark_activated(&final_states);
    let payload = FinalizedPayload {
        termination,
        final_states: final_states.clone(),
        fallback_used,
    };
    rec.emit(
        &mut topo,
        EventKind::Finalized,
        None,
        serde_json::to_value(payload).expect("payload serializes"),
    );
    Ok(RunResult {
        final_states,
        topology: topo,
        termination,
        fallback_used,
    })
}
