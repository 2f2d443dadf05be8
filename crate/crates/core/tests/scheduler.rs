mod common;

use std::cmp::Ordering;

use common::*;
use editsearch::config::{Preset, Ranking};
use editsearch::controls::{Control, ControlScript, NoControls};
use editsearch::events::EventKind;
use editsearch::scheduler::{backtrack, check_completion, check_stay, rank, update_optimal, Optimal, Termination};
use editsearch::topology::{StateId, ROOT};

#[test]
fn rank_examples() {
    let c = cfg(3, Preset::Main);
    assert_eq!(rank(&eval(9, 10, 0.91), &eval(9, 10, 0.95), &c), Ordering::Less);
    assert_eq!(rank(&eval(95, 100, 0.5), &eval(9, 10, 0.99), &c), Ordering::Greater);
    assert_eq!(rank(&eval(1, 2, 0.7), &eval(2, 4, 0.7), &c), Ordering::Equal);
}

#[test]
fn weighted_rank_trades_vqa_for_clip() {
    let mut c = cfg(3, Preset::Main);
    c.ranking = Ranking::WeightedSum;
    c.objective_weights = [1.0, 1.0, 0.0];
    assert_eq!(rank(&eval(95, 100, 0.5), &eval(9, 10, 0.99), &c), Ordering::Less);
    c.objective_weights = [1.0, 0.0, 5.0];
    assert_eq!(rank(&eval(95, 100, 0.5), &eval(9, 10, 0.99), &c), Ordering::Greater);
}

/// Chain root -> 1 -> 2 -> ... with state `i` at depth `i`, all tied.
fn tied_chain(n: u32) -> editsearch::topology::InferenceTopology {
    let mut t = root();
    let mut parent = ROOT;
    for _ in 0..n {
        parent = child(&mut t, parent, 1, 2, 0.5);
    }
    t
}

fn fold_optimal(t: &editsearch::topology::InferenceTopology, order: &[StateId], c: &editsearch::config::RunConfig) -> Optimal {
    let mut best: Option<Optimal> = None;
    for &id in order {
        best = Some(update_optimal(best.as_ref(), t, id, c));
    }
    best.unwrap()
}

#[test]
fn update_optimal_tie_examples() {
    let t = tied_chain(5);
    let mut c = cfg(3, Preset::Main);
    c.min_depth = 3;
    assert_eq!(fold_optimal(&t, &[5, 3], &c).states, vec![3]);
    assert_eq!(fold_optimal(&t, &[3, 5], &c).states, vec![3]);
    let b = fold_optimal(&t, &[2, 5], &c);
    assert_eq!(b.states, vec![5]);
    assert!(b.eligible);
    assert_eq!(fold_optimal(&t, &[5, 2], &c).states, vec![5]);

    let mut t = root();
    let a = child(&mut t, ROOT, 1, 2, 0.5);
    let a = child(&mut t, a, 1, 2, 0.5);
    let a = child(&mut t, a, 1, 2, 0.5);
    let x = child(&mut t, a, 1, 2, 0.5);
    let y = child(&mut t, a, 1, 2, 0.5);
    assert_eq!(t.state(x).unwrap().depth, 4);
    let mut sorted = fold_optimal(&t, &[x, y], &c).states;
    sorted.sort();
    assert_eq!(sorted, vec![x, y]);
}

fn permutations(items: &[StateId]) -> Vec<Vec<StateId>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

#[test]
fn update_optimal_matches_enumeration_oracle() {
    // Every triple of depths and scores, every insertion order: the result is
    // the set of maxima of (eligible, vqa, clip, -depth).
    let scores = [(1u32, 2u32, 0.5f64), (1, 2, 0.7), (1, 1, 0.5)];
    for min_depth in 1..=4u32 {
        for d in 0..125u32 {
            let depths = [d % 5 + 1, (d / 5) % 5 + 1, d / 25 + 1];
            for s in 0..27usize {
                let picks = [scores[s % 3], scores[(s / 3) % 3], scores[s / 9]];
                let mut t = root();
                let mut ids = Vec::new();
                for (depth, (n, den, clip)) in depths.iter().zip(picks) {
                    let mut parent = ROOT;
                    for _ in 1..*depth {
                        parent = child(&mut t, parent, 0, 1, 0.0);
                    }
                    ids.push(child(&mut t, parent, n, den, clip));
                }
                let mut c = cfg(3, Preset::Main);
                c.min_depth = min_depth;
                let key = |id: StateId| {
                    let s = t.state(id).unwrap();
                    let e = s.evaluation.as_ref().unwrap();
                    (s.depth >= min_depth, e.vqa_score, (e.clip_i * 1000.0) as i64, -(s.depth as i64))
                };
                let top = ids.iter().map(|&i| key(i)).max().unwrap();
                let mut expected: Vec<StateId> = ids.iter().copied().filter(|&i| key(i) == top).collect();
                expected.sort();
                for order in permutations(&ids) {
                    let got = fold_optimal(&t, &order, &c);
                    let mut states = got.states.clone();
                    states.sort();
                    assert_eq!(states, expected, "depths {depths:?} scores {picks:?} order {order:?}");
                    assert_eq!(got.eligible, top.0);
                }
            }
        }
    }
}

#[test]
fn completion_examples() {
    let mut t = root();
    let a = child(&mut t, ROOT, 1, 1, 1.0);
    let b = child(&mut t, a, 1, 1, 1.0);
    let c_ = child(&mut t, b, 1, 1, 0.97);
    let mut c = cfg(3, Preset::Main);
    c.min_depth = 2;
    assert!(check_completion(t.state(b).unwrap(), &c));
    assert!(!check_completion(t.state(c_).unwrap(), &c));
    assert!(!check_completion(t.state(a).unwrap(), &c));
}

#[test]
fn stay_examples() {
    let mut c = cfg(3, Preset::Main);
    c.max_depth = 4;
    let mut t = root();
    let a = child(&mut t, ROOT, 1, 20, 0.9);
    assert!(!check_stay(t.state(a).unwrap(), None, &c));

    let p = child(&mut t, ROOT, 6, 10, 0.9);
    let s = child(&mut t, p, 55, 100, 0.9);
    assert!(!check_stay(t.state(s).unwrap(), t.state(p).unwrap().evaluation.as_ref(), &c));

    let d1 = child(&mut t, ROOT, 6, 10, 0.9);
    let d2 = child(&mut t, d1, 6, 10, 0.9);
    let d3 = child(&mut t, d2, 7, 10, 0.9);
    assert_eq!(t.state(d3).unwrap().depth, c.max_depth - 1);
    assert!(check_stay(t.state(d3).unwrap(), t.state(d2).unwrap().evaluation.as_ref(), &c));

    let d4 = child(&mut t, d3, 8, 10, 0.9);
    assert!(!check_stay(t.state(d4).unwrap(), t.state(d3).unwrap().evaluation.as_ref(), &c));
    let done = child(&mut t, d1, 1, 1, 1.0);
    assert!(!check_stay(t.state(done).unwrap(), t.state(d1).unwrap().evaluation.as_ref(), &c));
}

#[test]
fn backtrack_examples() {
    let mut c = cfg(3, Preset::Main);
    c.max_n_children = 2;
    let mut t = root();
    let g = child(&mut t, ROOT, 1, 2, 0.5);
    let p = child(&mut t, g, 1, 2, 0.5);
    let leaf = child(&mut t, p, 1, 2, 0.5);
    child(&mut t, p, 1, 2, 0.5);
    assert_eq!(backtrack(&t, leaf, &c), Some(g));

    child(&mut t, g, 1, 2, 0.5);
    child(&mut t, ROOT, 1, 2, 0.5);
    assert_eq!(backtrack(&t, leaf, &c), None);

    let r = cfg(3, Preset::ResamplingOnly);
    let mut t = root();
    for n in 1..r.max_n_children {
        let s = child(&mut t, ROOT, 1, 2, 0.5);
        assert_eq!(backtrack(&t, s, &r), Some(ROOT), "after {n} children");
    }
    let s = child(&mut t, ROOT, 1, 2, 0.5);
    assert_eq!(backtrack(&t, s, &r), None);
}

#[test]
fn one_step_budget() {
    let tk = task(3, 1);
    let mut c = cfg(3, Preset::Main);
    c.max_steps = 1;
    let r = sim_run(&tk, &world(&tk, 0.85, 0.05, 2, 1), &c, &mut NoControls);
    assert_eq!(r.topology.size(), 1);
    assert_eq!(r.termination, Termination::BudgetExhausted);
    assert_eq!(r.final_states, vec![1]);
}

#[test]
fn accept_control_ends_the_run() {
    let tk = task(4, 2);
    let c = cfg(4, Preset::Main);
    let mut script = ControlScript::default().at(5, Control::Accept { state_id: 5 });
    let r = sim_run(&tk, &world(&tk, 0.85, 0.05, 2, 2), &c, &mut script);
    assert_eq!(r.final_states, vec![5]);
    assert_eq!(r.termination, Termination::Completed);
    assert!(!r.fallback_used);
    assert_eq!(r.topology.size(), 5);
}

#[test]
fn accepting_root_or_unknown_is_ignored() {
    let tk = task(2, 3);
    let c = cfg(2, Preset::Main);
    let mut script = ControlScript::default()
        .at(1, Control::Accept { state_id: ROOT })
        .at(1, Control::Accept { state_id: 40 })
        .at(2, Control::Prune { state_id: ROOT });
    let (r, log) = sim_run_logged(&tk, &world(&tk, 0.85, 0.05, 2, 3), &c, &mut script);
    assert_eq!(r.topology.size(), c.max_steps as usize);
    let warnings = log.iter().filter(|e| e.kind == EventKind::Warning).count();
    assert!(warnings >= 3);
}

#[test]
fn pruning_the_current_parent_backtracks_next() {
    let tk = task(4, 5);
    let c = cfg(4, Preset::Main);
    let w = world(&tk, 1.0, 0.0, 2, 5);
    let (plain, _) = sim_run_logged(&tk, &w, &c, &mut NoControls);
    // With p = 1 the first step always passes the stay check.
    assert_eq!(plain.topology.state(2).unwrap().parent_id, Some(1));

    let mut script = ControlScript::default().at(1, Control::Prune { state_id: 1 });
    let (r, log) = sim_run_logged(&tk, &w, &c, &mut script);
    let at = log
        .iter()
        .position(|e| e.kind == EventKind::Backtrack && e.payload["reason"] == "prune")
        .expect("prune backtrack");
    let prev = &log[at - 1];
    assert_eq!(prev.kind, EventKind::Decision);
    assert_eq!(log[at].payload["from"], 1);
    assert_eq!(log[at].payload["to"], 0);
    assert_eq!(r.topology.state(2).unwrap().parent_id, Some(ROOT));
    for s in r.topology.states.iter().filter(|s| s.state_id >= 2) {
        assert!(!r.topology.is_ancestor(1, s.state_id), "state {} grew under a pruned state", s.state_id);
    }
}

#[test]
fn force_backtrack_moves_to_an_ancestor() {
    let tk = task(4, 6);
    let c = cfg(4, Preset::Main);
    let w = world(&tk, 1.0, 0.0, 2, 6);
    let mut script = ControlScript::default().at(2, Control::ForceBacktrack);
    let r = sim_run(&tk, &w, &c, &mut script);
    assert_eq!(r.topology.state(3).unwrap().parent_id, Some(1));
}

#[test]
fn shape_laws_for_chain_and_star_presets() {
    for seed in 0..10 {
        let tk = task(3, seed);
        let w = world(&tk, 0.85, 0.05, 2, seed);
        let chain = sim_run(&tk, &w, &cfg(3, Preset::CosOnly), &mut NoControls);
        assert!(chain.topology.iter().all(|s| chain.topology.fan_out(s.state_id) <= 1));
        let star = sim_run(&tk, &w, &cfg(3, Preset::ResamplingOnly), &mut NoControls);
        assert!(star.topology.states.iter().all(|s| s.parent_id == Some(ROOT)));
    }
}
