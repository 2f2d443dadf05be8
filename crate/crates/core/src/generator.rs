//! Instruction generation: turns the parent's checklist answers and the
//! retrieved reference thoughts into the next thought for the actor.

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::{Answer, Checklist};
use crate::image::ImageRef;
use crate::ports::{BackendError, ChatPort, ChatRequest, ChatRole};
use crate::retriever::ReferenceSet;
use crate::templates::{generator_system_prompt, FormatViolation, GENERATOR_FORMAT, GENERATOR_PATTERN};

#[derive(Debug, Error)]
pub enum GenError {
    #[error("generator output malformed after {} attempts", attempts.len())]
    MalformedAfterRetries { attempts: Vec<GenerationAttempt> },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Thought {
    pub reasoning: String,
    pub instruction: String,
    /// Advisory count of numbered clauses in the instruction, at least 1.
    pub declared_edit_count: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationContext {
    pub checklist_with_answers: String,
    pub references: ReferenceSet,
    pub iv: u32,
}

impl GenerationContext {
    pub fn new(checklist: &Checklist, answers: &[Answer], references: ReferenceSet, iv: u32) -> Self {
        GenerationContext {
            checklist_with_answers: checklist.render_with_answers(answers),
            references,
            iv,
        }
    }

    /// Context for the root's first child: every requirement unmet.
    pub fn for_root(checklist: &Checklist, references: ReferenceSet, iv: u32) -> Self {
        Self::new(checklist, &vec![Answer::N; checklist.len()], references, iv)
    }
}

fn quoted(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

/// System and user prompt for the generator. Pure in `ctx`.
pub fn assemble_prompts(ctx: &GenerationContext) -> (String, String) {
    let mut user = format!(
        "{{'Requirement Checklist': {},\n'References': {{\n",
        quoted(&ctx.checklist_with_answers)
    );
    for (i, r) in ctx.references.entries.iter().enumerate() {
        user.push_str(&format!(
            "{{'Reference_{i}': {}, 'CaseSimilarity': {}}},\n",
            quoted(&r.thought),
            r.similarity
        ));
    }
    user.push_str("}\n}");
    (generator_system_prompt(ctx.iv), user)
}

static THOUGHT_FIELDS: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r#"(?s)\A<think></think>\n?\{"reasoning":"(.*?)", ?"instruction":"(.*)"\}\z"#).unwrap()
});
static NUMBERED_CLAUSE: Lazy<Regex> = Lazy::new(|| Regex::new(r"(?:^|\s)\d+[.)]\s").unwrap());

/// Parses a generator completion. The whole string must match the guided
/// pattern; an empty instruction is reported at the offset where it starts.
pub fn validate_thought(raw: &str) -> Result<Thought, FormatViolation> {
    GENERATOR_FORMAT.validate(raw)?;
    let caps = THOUGHT_FIELDS.captures(raw).ok_or(FormatViolation {
        format: GENERATOR_FORMAT.name,
        offset: 0,
    })?;
    let instruction = caps.get(2).unwrap();
    if instruction.as_str().trim().is_empty() {
        return Err(FormatViolation {
            format: GENERATOR_FORMAT.name,
            offset: instruction.start(),
        });
    }
    let declared = NUMBERED_CLAUSE.find_iter(instruction.as_str()).count().max(1) as u32;
    Ok(Thought {
        reasoning: caps[1].to_string(),
        instruction: instruction.as_str().to_string(),
        declared_edit_count: declared,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationAttempt {
    pub attempt: u32,
    pub raw: String,
    /// Mismatch offset when the completion was rejected.
    pub violation: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub thought: Thought,
    pub attempts: Vec<GenerationAttempt>,
}

/// Requests thoughts until one validates or `max_n_try` attempts are spent.
/// `latest_image` is attached to the request.
pub fn generate_thought(
    ctx: &GenerationContext,
    latest_image: &ImageRef,
    chat: &dyn ChatPort,
    max_n_try: u32,
) -> Result<Generated, GenError> {
    let (system, user) = assemble_prompts(ctx);
    let images = [latest_image.clone()];
    let mut attempts = Vec::new();
    for attempt in 1..=max_n_try.max(1) {
        let raw = chat.chat(&ChatRequest {
            role: ChatRole::Generator,
            system: &system,
            user: &user,
            images: &images,
            guided_regex: Some(GENERATOR_PATTERN),
        })?;
        match validate_thought(&raw) {
            Ok(thought) => {
                attempts.push(GenerationAttempt {
                    attempt,
                    raw,
                    violation: None,
                });
                return Ok(Generated { thought, attempts });
            }
            Err(v) => attempts.push(GenerationAttempt {
                attempt,
                raw,
                violation: Some(v.offset),
            }),
        }
    }
    Err(GenError::MalformedAfterRetries { attempts })
}
