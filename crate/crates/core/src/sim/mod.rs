//! Deterministic simulated editing world implementing every backend port.
//!
//! Images are attribute assignments over a fixed schema, the actor applies
//! canonical-grammar edits stochastically, and the chat backend plays the
//! analyzer, checker and generator roles exactly. Everything is a pure
//! function of the seed and per-port call indices.

pub mod rng;
pub mod world;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::image::ImageRef;
use crate::ports::{ActorPort, BackendError, Backends, ChatPort, ChatRequest, ChatRole, EmbedPort, ScorerPort};
use rng::Lcg;
pub use world::{
    parse_edits, render_edits, Attribute, Edit, Schema, SimError, SimImage, SimTask, DETAIL_DECAY,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimActorParams {
    /// Probability that an honored edit takes effect.
    pub p: f64,
    /// Probability of perturbing one attribute the thought did not mention.
    pub q: f64,
    /// Edits honored per call; longer thoughts get a random subset of `k`.
    pub k: u32,
    pub seed: u64,
}

impl SimActorParams {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(0.0..=1.0).contains(&self.p) || !(0.0..=1.0).contains(&self.q) {
            return Err(SimError::InvalidParams("p and q must lie in [0, 1]".into()));
        }
        if self.k < 1 {
            return Err(SimError::InvalidParams("k must be at least 1".into()));
        }
        Ok(())
    }
}

/// One actor call. `rng` must be fresh for this call.
pub fn sim_edit(
    schema: &Schema,
    image: &SimImage,
    thought: &str,
    params: &SimActorParams,
    rng: &mut Lcg,
) -> Result<SimImage, SimError> {
    let edits = parse_edits(thought)?;
    for e in &edits {
        let ok = schema
            .attribute(&e.attribute)
            .is_some_and(|a| a.values.contains(&e.value));
        if !ok {
            return Err(SimError::UnparseableThought(thought.to_string()));
        }
    }
    let mut honored: Vec<usize> = if edits.len() > params.k as usize {
        rng.sample_indices(edits.len(), params.k as usize)
    } else {
        (0..edits.len()).collect()
    };
    honored.sort_unstable();
    let mut out = image.clone();
    for i in honored {
        if rng.chance(params.p) {
            out.attributes.insert(edits[i].attribute.clone(), edits[i].value.clone());
        }
    }
    if rng.chance(params.q) {
        let free: Vec<&Attribute> = schema
            .attributes
            .iter()
            .filter(|a| !edits.iter().any(|e| e.attribute == a.name))
            .collect();
        if !free.is_empty() {
            let a = free[rng.below(free.len())];
            let current = &out.attributes[&a.name];
            let others: Vec<&String> = a.values.iter().filter(|v| *v != current).collect();
            let v = others[rng.below(others.len())].clone();
            out.attributes.insert(a.name.clone(), v);
        }
    }
    out.detail_budget *= DETAIL_DECAY;
    Ok(out)
}

pub fn question_for(e: &Edit) -> String {
    format!("Is {} set to {}?", e.attribute, e.value)
}

/// Analyzer completion for a canonical-grammar instruction.
pub fn sim_analyze(image: &SimImage, instruction: &str) -> Result<String, SimError> {
    let edits = parse_edits(instruction)?;
    let description = image
        .attributes
        .iter()
        .map(|(k, v)| format!("{k} {v}"))
        .collect::<Vec<_>>()
        .join(", ");
    let subs: String = edits
        .iter()
        .enumerate()
        .map(|(i, e)| format!("{}.Set {} to {}.\n", i + 1, e.attribute, e.value))
        .collect();
    let questions: String = edits
        .iter()
        .enumerate()
        .map(|(i, e)| format!("{}.{}\n", i + 1, question_for(e)))
        .collect();
    Ok(format!(
        "<think></think>\n{{\"ImageDescription\":\"The image shows {description}.\", \"SubInstructions\":\"{subs}\", \"Questions\":\"{questions}\"}}"
    ))
}

static QUESTION: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"Is ([A-Za-z0-9_-]+) set to ([A-Za-z0-9_-]+)\?").unwrap());

/// Exact answers for the questions in `questions`, each flipped with
/// probability `epsilon`.
pub fn sim_answer(edited: &SimImage, questions: &str, epsilon: f64, rng: &mut Lcg) -> Vec<(String, bool)> {
    QUESTION
        .captures_iter(questions)
        .map(|c| {
            let truth = edited.attributes.get(&c[1]).is_some_and(|v| v == &c[2]);
            let flip = epsilon > 0.0 && rng.chance(epsilon);
            (c[0].to_string(), truth != flip)
        })
        .collect()
}

fn render_answers(answers: &[(String, bool)]) -> String {
    let body: String = answers
        .iter()
        .enumerate()
        .map(|(i, (q, y))| format!("{}. {} ({})\n", i + 1, q, if *y { "Y" } else { "N" }))
        .collect();
    format!("<think></think>\n{{\"Checklist\":\"{body}\"}}")
}

static ITEM: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"\d+\. Is ([A-Za-z0-9_-]+) set to ([A-Za-z0-9_-]+)\? \((Y|N)\)").unwrap()
});
static REFERENCE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r#"'Reference_\d+': ("(?:[^"\\]|\\.)*")"#).unwrap());
static VOLUME: Lazy<Regex> = Lazy::new(|| Regex::new(r"up to (\d+) modifications").unwrap());

/// Generator policy: the first `iv` unmet items no reference targets, topped
/// up with referenced unmet items; re-asserts the first item once all are met.
pub fn sim_generate(system: &str, user: &str) -> Result<String, SimError> {
    let iv: usize = VOLUME
        .captures(system)
        .and_then(|c| c[1].parse().ok())
        .ok_or_else(|| SimError::UnparseableThought("generator prompt lacks a volume".into()))?;
    let items: Vec<(Edit, bool)> = ITEM
        .captures_iter(user)
        .map(|c| {
            (
                Edit {
                    attribute: c[1].to_string(),
                    value: c[2].to_string(),
                },
                &c[3] == "Y",
            )
        })
        .collect();
    if items.is_empty() {
        return Err(SimError::UnparseableThought("generator prompt lacks a checklist".into()));
    }
    let referenced: BTreeSet<String> = REFERENCE
        .captures_iter(user)
        .filter_map(|c| serde_json::from_str::<String>(&c[1]).ok())
        .filter_map(|t| parse_edits(&t).ok())
        .flatten()
        .map(|e| e.attribute)
        .collect();
    let unmet: Vec<&Edit> = items.iter().filter(|(_, met)| !met).map(|(e, _)| e).collect();
    let mut chosen: Vec<&Edit> = unmet
        .iter()
        .copied()
        .filter(|e| !referenced.contains(&e.attribute))
        .take(iv)
        .collect();
    for e in &unmet {
        if chosen.len() >= iv {
            break;
        }
        if !chosen.iter().any(|c| c.attribute == e.attribute) {
            chosen.push(e);
        }
    }
    if chosen.is_empty() {
        chosen.push(&items[0].0);
    }
    let names = |es: &[&Edit]| es.iter().map(|e| e.attribute.as_str()).collect::<Vec<_>>().join(",");
    let covered: Vec<&str> = referenced.iter().map(String::as_str).collect();
    let instruction = render_edits(&chosen.iter().map(|e| (*e).clone()).collect::<Vec<_>>());
    Ok(format!(
        "<think></think>\n{{\"reasoning\":\"Step1: {} requirements unmet. Step2: references cover [{}]. Step3: address [{}].\", \"instruction\":\"{instruction}\"}}",
        unmet.len(),
        covered.join(","),
        names(&chosen)
    ))
}

/// One-hot encoding per attribute in schema order, scaled by detail.
pub fn sim_embed(schema: &Schema, image: &SimImage) -> Result<Vec<f64>, SimError> {
    schema.check(image)?;
    let mut v = Vec::new();
    for a in &schema.attributes {
        let current = &image.attributes[&a.name];
        v.extend(a.values.iter().map(|x| if x == current { image.detail_budget } else { 0.0 }));
    }
    Ok(v)
}

/// Normalized Hamming distance over schema attributes.
pub fn sim_distance(schema: &Schema, a: &SimImage, b: &SimImage) -> Result<f64, SimError> {
    schema.check(a)?;
    schema.check(b)?;
    let differing = schema
        .attributes
        .iter()
        .filter(|x| a.attributes[&x.name] != b.attributes[&x.name])
        .count();
    Ok(differing as f64 / schema.attributes.len() as f64)
}

fn rejected(e: SimError) -> BackendError {
    BackendError::Rejected(e.to_string())
}

fn decode(image: &ImageRef) -> Result<SimImage, BackendError> {
    SimImage::from_ref(image).map_err(|e| BackendError::InvalidImagePayload(e.to_string()))
}

const ACTOR_STREAM: u64 = 0x0041_4354_4f52;
const CHECKER_STREAM: u64 = 0x0043_4845_434b;

pub struct SimActor {
    schema: Schema,
    params: SimActorParams,
    calls: AtomicU64,
}

impl SimActor {
    pub fn new(schema: Schema, params: SimActorParams) -> Self {
        SimActor {
            schema,
            params,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ActorPort for SimActor {
    fn edit(&self, image: &ImageRef, instruction: &str) -> Result<ImageRef, BackendError> {
        let img = decode(image)?;
        let index = self.calls.fetch_add(1, Ordering::SeqCst);
        let mut rng = Lcg::for_call(self.params.seed ^ ACTOR_STREAM, index);
        let out = sim_edit(&self.schema, &img, instruction, &self.params, &mut rng).map_err(rejected)?;
        Ok(out.to_ref())
    }
}

pub struct SimChat {
    epsilon: f64,
    seed: u64,
    checker_calls: AtomicU64,
}

impl SimChat {
    pub fn new(epsilon: f64, seed: u64) -> Self {
        SimChat {
            epsilon,
            seed,
            checker_calls: AtomicU64::new(0),
        }
    }
}

impl ChatPort for SimChat {
    fn chat(&self, request: &ChatRequest<'_>) -> Result<String, BackendError> {
        match request.role {
            ChatRole::Analyzer => {
                let origin = request
                    .images
                    .first()
                    .ok_or_else(|| BackendError::Rejected("analyzer needs the origin image".into()))?;
                sim_analyze(&decode(origin)?, request.user).map_err(rejected)
            }
            ChatRole::Checker => {
                let edited = request
                    .images
                    .get(1)
                    .ok_or_else(|| BackendError::Rejected("checker needs two images".into()))?;
                let index = self.checker_calls.fetch_add(1, Ordering::SeqCst);
                let mut rng = Lcg::for_call(self.seed ^ CHECKER_STREAM, index);
                let answers = sim_answer(&decode(edited)?, request.user, self.epsilon, &mut rng);
                if answers.is_empty() {
                    return Err(BackendError::Rejected("no questions found".into()));
                }
                Ok(render_answers(&answers))
            }
            ChatRole::Generator => sim_generate(request.system, request.user).map_err(rejected),
        }
    }
}

pub struct SimEmbed {
    schema: Schema,
}

impl EmbedPort for SimEmbed {
    fn embed(&self, image: &ImageRef) -> Result<Vec<f64>, BackendError> {
        sim_embed(&self.schema, &decode(image)?).map_err(rejected)
    }
}

pub struct SimScorer {
    schema: Schema,
}

impl ScorerPort for SimScorer {
    fn distances(&self, a: &ImageRef, b: &ImageRef) -> Result<BTreeMap<String, f64>, BackendError> {
        let d = sim_distance(&self.schema, &decode(a)?, &decode(b)?).map_err(rejected)?;
        Ok(BTreeMap::from([("dists".to_string(), d), ("lpips".to_string(), d)]))
    }
}

/// Parameters for a whole simulated backend set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimWorld {
    #[serde(default)]
    pub schema: Schema,
    pub actor: SimActorParams,
    /// Checker answer flip probability.
    #[serde(default)]
    pub epsilon: f64,
}

impl SimWorld {
    pub fn new(actor: SimActorParams) -> Self {
        SimWorld {
            schema: Schema::default(),
            actor,
            epsilon: 0.0,
        }
    }

    /// Fresh backends with zeroed call counters.
    pub fn backends(&self) -> Backends {
        Backends {
            actor: Arc::new(SimActor::new(self.schema.clone(), self.actor)),
            chat: Arc::new(SimChat::new(self.epsilon, self.actor.seed)),
            embed: Arc::new(SimEmbed {
                schema: self.schema.clone(),
            }),
            scorer: Arc::new(SimScorer {
                schema: self.schema.clone(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::{cosine, parse_answers, parse_checklist};
    use crate::generator::validate_thought;

    fn image(pairs: &[(&str, &str)]) -> SimImage {
        SimImage {
            attributes: pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
            detail_budget: 1.0,
        }
    }

    fn task() -> SimTask {
        SimTask::generate(&Schema::default(), 4, 11).unwrap()
    }

    fn params(p: f64, q: f64, k: u32) -> SimActorParams {
        SimActorParams { p, q, k, seed: 1 }
    }

    #[test]
    fn certain_edit_applies_and_decays() {
        let t = task();
        let e = &t.edits[0];
        let out = sim_edit(&t.schema, &t.initial, &render_edits(&t.edits[..1]), &params(1.0, 0.0, 2), &mut Lcg::new(0)).unwrap();
        assert_eq!(out.attributes[&e.attribute], e.value);
        assert_eq!(out.detail_budget, 1.0 * 0.98);
    }

    #[test]
    fn impossible_edit_only_decays() {
        let t = task();
        let out = sim_edit(&t.schema, &t.initial, &t.instruction(), &params(0.0, 0.0, 4), &mut Lcg::new(0)).unwrap();
        assert_eq!(out.attributes, t.initial.attributes);
        assert_eq!(out.detail_budget, 0.98);
    }

    #[test]
    fn long_thoughts_are_truncated_to_k() {
        let t = task();
        for s in 0..20 {
            let out = sim_edit(&t.schema, &t.initial, &t.instruction(), &params(1.0, 0.0, 2), &mut Lcg::new(s)).unwrap();
            let changed = t.edits.iter().filter(|e| out.attributes[&e.attribute] == e.value).count();
            assert_eq!(changed, 2);
        }
        assert!(sim_edit(&t.schema, &t.initial, "paint it", &params(1.0, 0.0, 2), &mut Lcg::new(0)).is_err());
        assert!(sim_edit(&t.schema, &t.initial, "set sky=plaid", &params(1.0, 0.0, 2), &mut Lcg::new(0)).is_err());
    }

    #[test]
    fn analyzer_and_checker_round_trip() {
        let t = task();
        let raw = sim_analyze(&t.initial, &t.instruction()).unwrap();
        let c = parse_checklist(&raw).expect("analyzer output parses");
        assert_eq!(c.len(), 4);
        let mut edited = t.initial.clone();
        for e in &t.edits[..3] {
            edited.attributes.insert(e.attribute.clone(), e.value.clone());
        }
        let answers = sim_answer(&edited, &c.render_questions(), 0.0, &mut Lcg::new(0));
        let parsed = parse_answers(&render_answers(&answers), 4).unwrap();
        use crate::evaluator::Answer::{N, Y};
        assert_eq!(parsed, vec![Y, Y, Y, N]);
    }

    #[test]
    fn generator_skips_referenced_items() {
        let system = crate::templates::generator_system_prompt(2);
        let user = "{'Requirement Checklist': \"1. Is sky set to night? (N), 2. Is hat set to cap? (Y), 3. Is shirt set to red? (N), 4. Is style set to oil? (N)\",\n'References': {\n{'Reference_0': \"set sky=night\", 'CaseSimilarity': 90},\n}\n}";
        let t = validate_thought(&sim_generate(&system, user).unwrap()).unwrap();
        assert_eq!(t.instruction, "set shirt=red; set style=oil");
        let user = user.replace("set sky=night", "set sky=night; set style=oil");
        let t = validate_thought(&sim_generate(&system, &user).unwrap()).unwrap();
        assert_eq!(t.instruction, "set shirt=red; set sky=night");
        let all_met = "{'Requirement Checklist': \"1. Is sky set to night? (Y)\",\n'References': {\n}\n}";
        let t = validate_thought(&sim_generate(&system, all_met).unwrap()).unwrap();
        assert_eq!(t.instruction, "set sky=night");
    }

    #[test]
    fn embedding_cosine_is_match_fraction() {
        let schema = Schema {
            attributes: (0..8)
                .map(|i| Attribute {
                    name: format!("a{i}"),
                    values: vec!["x".into(), "y".into()],
                })
                .collect(),
        };
        let pairs: Vec<(String, String)> = (0..8).map(|i| (format!("a{i}"), "x".to_string())).collect();
        let a = SimImage {
            attributes: pairs.iter().cloned().collect(),
            detail_budget: 1.0,
        };
        let mut b = a.clone();
        b.attributes.insert("a0".into(), "y".into());
        b.detail_budget = 0.5;
        let c = cosine(&sim_embed(&schema, &a).unwrap(), &sim_embed(&schema, &b).unwrap()).unwrap();
        assert!((c - 0.875).abs() < 1e-12);
        assert_eq!(sim_distance(&schema, &a, &b).unwrap(), 0.125);
        let mut d = a.clone();
        for v in d.attributes.values_mut() {
            *v = "y".into();
        }
        assert_eq!(cosine(&sim_embed(&schema, &a).unwrap(), &sim_embed(&schema, &d).unwrap()).unwrap(), 0.0);
        assert!(sim_embed(&schema, &image(&[("a0", "x")])).is_err());
    }
}
