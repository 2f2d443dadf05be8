//! State evaluation: checklist decomposition of the root instruction,
//! repeated yes/no checking with majority aggregation, and the scores derived
//! from it.
//!
//! VQA scores and CIF are exact rationals so "score equal to one" is never a
//! floating-point judgement.

use std::fmt;

use num_rational::Ratio;
use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::ImageRef;
use crate::ports::{BackendError, ChatPort, ChatRequest, ChatRole, EmbedPort};
use crate::templates::{
    ANALYZER_FORMAT, ANALYZER_PATTERN, ANALYZER_SYSTEM_PROMPT, CHECKER_FORMAT, CHECKER_PATTERN,
    CHECKER_SYSTEM_PROMPT,
};

pub type Score = Ratio<u32>;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("instruction must not be empty")]
    EmptyInstruction,
    #[error("{format} output malformed after {} attempts", raw.len())]
    MalformedAfterRetries { format: &'static str, raw: Vec<String> },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("checklist has no questions")]
    EmptyChecklist,
    #[error("no scores to aggregate")]
    EmptyInput,
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("embedding has zero norm")]
    DegenerateEmbedding,
    #[error("n_repeats must be odd and at least 1, got {0}")]
    InvalidRepeats(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Answer {
    Y,
    N,
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Answer::Y => "Y",
            Answer::N => "N",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checklist {
    pub image_description: String,
    pub sub_instructions: Vec<String>,
    pub questions: Vec<String>,
}

impl Checklist {
    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    /// "1. Q? 2. Q? " as sent to the checker.
    pub fn render_questions(&self) -> String {
        self.questions
            .iter()
            .enumerate()
            .map(|(i, q)| format!("{}. {} ", i + 1, q))
            .collect()
    }

    /// "1. Q? (Y), 2. Q? (N)" as shown to the instruction generator.
    pub fn render_with_answers(&self, answers: &[Answer]) -> String {
        self.questions
            .iter()
            .zip(answers)
            .enumerate()
            .map(|(i, (q, a))| format!("{}. {} ({})", i + 1, q, a))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionAnswer {
    pub repeats: Vec<Answer>,
    #[serde(rename = "final")]
    pub final_answer: Answer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerSheet {
    pub per_question: Vec<QuestionAnswer>,
}

impl AnswerSheet {
    pub fn finals(&self) -> Vec<Answer> {
        self.per_question.iter().map(|q| q.final_answer).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub checklist: Checklist,
    pub answers: AnswerSheet,
    #[serde(with = "ratio_string")]
    pub vqa_score: Score,
    pub clip_i: f64,
    pub reasoning: String,
}

pub(crate) mod ratio_string {
    use num_rational::Ratio;
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(r: &Ratio<u32>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{}/{}", r.numer(), r.denom()))
    }

    pub fn parse(text: &str) -> Option<Ratio<u32>> {
        let (n, d) = text.split_once('/')?;
        let n: u32 = n.trim().parse().ok()?;
        let d: u32 = d.trim().parse().ok()?;
        (d != 0).then(|| Ratio::new(n, d))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Ratio<u32>, D::Error> {
        let text = String::deserialize(d)?;
        parse(&text).ok_or_else(|| de::Error::custom(format!("expected \"n/d\", got {text:?}")))
    }
}

/// Non-fatal evaluation incidents surfaced to the run log.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalWarning {
    RepeatDiscarded { repeat: u32, raw: Vec<String> },
    QuestionUnanswered { question: usize },
}

static ANALYZER_FIELDS: Lazy<Regex> = Lazy::new(|| {
    Regex::new(
        r#"(?s)\A<think></think>\n?\{"ImageDescription":"(.*?)", "SubInstructions":"(.*?)", "Questions":"(.*)"\}\z"#,
    )
    .unwrap()
});
static CHECKER_FIELDS: Lazy<Regex> =
    Lazy::new(|| Regex::new(r#"(?s)\A<think></think>\n?\{"Checklist":"(.*)"\}\z"#).unwrap());
static NUMBERED: Lazy<Regex> = Lazy::new(|| Regex::new(r"\A(\d+)\.\s*(.*?)\s*\z").unwrap());
static ANSWER_LINE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"\A(\d+)\.(.*?)\s\((Y|N)\)\z").unwrap());

fn numbered_lines(block: &str) -> Option<Vec<String>> {
    let mut out = Vec::new();
    for line in block.split('\n').map(str::trim).filter(|l| !l.is_empty()) {
        let caps = NUMBERED.captures(line)?;
        let index: usize = caps[1].parse().ok()?;
        if index != out.len() + 1 || caps[2].is_empty() {
            return None;
        }
        out.push(caps[2].to_string());
    }
    (!out.is_empty()).then_some(out)
}

/// Parses an analyzer completion; `None` if it violates the pattern or the
/// checklist invariants (equal, non-empty, contiguous lists; questions end in
/// `?`).
pub fn parse_checklist(raw: &str) -> Option<Checklist> {
    ANALYZER_FORMAT.validate(raw).ok()?;
    let caps = ANALYZER_FIELDS.captures(raw)?;
    let sub_instructions = numbered_lines(&caps[2])?;
    let questions = numbered_lines(&caps[3])?;
    if questions.len() != sub_instructions.len() || !questions.iter().all(|q| q.ends_with('?')) {
        return None;
    }
    Some(Checklist {
        image_description: caps[1].to_string(),
        sub_instructions,
        questions,
    })
}

/// Parses a checker completion into one answer per question; `None` on any
/// pattern or count mismatch.
pub fn parse_answers(raw: &str, n_questions: usize) -> Option<Vec<Answer>> {
    CHECKER_FORMAT.validate(raw).ok()?;
    let caps = CHECKER_FIELDS.captures(raw)?;
    let mut out = Vec::new();
    for line in caps[1].split('\n').filter(|l| !l.trim().is_empty()) {
        let c = ANSWER_LINE.captures(line.trim())?;
        let index: usize = c[1].parse().ok()?;
        if index != out.len() + 1 {
            return None;
        }
        out.push(if &c[3] == "Y" { Answer::Y } else { Answer::N });
    }
    (out.len() == n_questions).then_some(out)
}

/// Decomposes `instruction` into a checklist, retrying malformed completions
/// up to `max_n_try` times.
pub fn build_checklist(
    instruction: &str,
    origin: &ImageRef,
    analyzer: &dyn ChatPort,
    max_n_try: u32,
) -> Result<Checklist, EvalError> {
    if instruction.trim().is_empty() {
        return Err(EvalError::EmptyInstruction);
    }
    let images = [origin.clone()];
    let mut raws = Vec::new();
    for _ in 0..max_n_try.max(1) {
        let raw = analyzer.chat(&ChatRequest {
            role: ChatRole::Analyzer,
            system: ANALYZER_SYSTEM_PROMPT,
            user: instruction,
            images: &images,
            guided_regex: Some(ANALYZER_PATTERN),
        })?;
        if let Some(checklist) = parse_checklist(&raw) {
            return Ok(checklist);
        }
        raws.push(raw);
    }
    Err(EvalError::MalformedAfterRetries {
        format: ANALYZER_FORMAT.name,
        raw: raws,
    })
}

/// Strict majority; ties and empty input resolve to N.
pub fn majority(repeats: &[Answer]) -> Answer {
    let yes = repeats.iter().filter(|a| **a == Answer::Y).count();
    if 2 * yes > repeats.len() {
        Answer::Y
    } else {
        Answer::N
    }
}

/// Asks the checker `n_repeats` times and aggregates per question. A repeat
/// whose completion stays malformed after `max_n_try` attempts is discarded.
pub fn answer_checklist(
    origin: &ImageRef,
    edited: &ImageRef,
    checklist: &Checklist,
    checker: &dyn ChatPort,
    n_repeats: u32,
    max_n_try: u32,
) -> Result<(AnswerSheet, String, Vec<EvalWarning>), EvalError> {
    if n_repeats == 0 || n_repeats.is_multiple_of(2) {
        return Err(EvalError::InvalidRepeats(n_repeats));
    }
    if checklist.is_empty() {
        return Err(EvalError::EmptyChecklist);
    }
    let user = checklist.render_questions();
    let images = [origin.clone(), edited.clone()];
    let n = checklist.len();
    let mut per_question: Vec<Vec<Answer>> = vec![Vec::new(); n];
    let mut warnings = Vec::new();
    let mut reasoning = String::new();
    for repeat in 0..n_repeats {
        let mut raws = Vec::new();
        let mut parsed = None;
        for _ in 0..max_n_try.max(1) {
            let raw = checker.chat(&ChatRequest {
                role: ChatRole::Checker,
                system: CHECKER_SYSTEM_PROMPT,
                user: &user,
                images: &images,
                guided_regex: Some(CHECKER_PATTERN),
            })?;
            if let Some(answers) = parse_answers(&raw, n) {
                if reasoning.is_empty() {
                    reasoning = raw;
                }
                parsed = Some(answers);
                break;
            }
            raws.push(raw);
        }
        match parsed {
            Some(answers) => {
                for (slot, a) in per_question.iter_mut().zip(answers) {
                    slot.push(a);
                }
            }
            None => warnings.push(EvalWarning::RepeatDiscarded { repeat, raw: raws }),
        }
    }
    let per_question = per_question
        .into_iter()
        .enumerate()
        .map(|(i, repeats)| {
            if repeats.is_empty() {
                warnings.push(EvalWarning::QuestionUnanswered { question: i + 1 });
            }
            let final_answer = majority(&repeats);
            QuestionAnswer {
                repeats,
                final_answer,
            }
        })
        .collect();
    Ok((AnswerSheet { per_question }, reasoning, warnings))
}

/// Fraction of affirmative final answers.
pub fn vqa_score(answers: &[Answer]) -> Result<Score, EvalError> {
    if answers.is_empty() {
        return Err(EvalError::EmptyChecklist);
    }
    let yes = answers.iter().filter(|a| **a == Answer::Y).count();
    Ok(Ratio::new(yes as u32, answers.len() as u32))
}

/// Fraction of samples whose score is exactly one.
pub fn cif(scores: &[Score]) -> Result<Score, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let one = Ratio::from_integer(1);
    let hits = scores.iter().filter(|s| **s == one).count();
    Ok(Ratio::new(hits as u32, scores.len() as u32))
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::DimensionMismatch(a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(EvalError::DegenerateEmbedding);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn clip_i(origin: &ImageRef, edited: &ImageRef, embedder: &dyn EmbedPort) -> Result<f64, EvalError> {
    let a = embedder.embed(origin)?;
    let b = embedder.embed(edited)?;
    cosine(&a, &b)
}

/// Per-run evaluator. The checklist comes from the root instruction and is
/// built once; the origin embedding is cached alongside it.
pub struct Evaluator<'a> {
    chat: &'a dyn ChatPort,
    embedder: &'a dyn EmbedPort,
    origin: ImageRef,
    instruction: String,
    n_repeats: u32,
    max_n_try: u32,
    checklist: Option<Checklist>,
    origin_embedding: Option<Vec<f64>>,
}

impl<'a> Evaluator<'a> {
    pub fn new(
        chat: &'a dyn ChatPort,
        embedder: &'a dyn EmbedPort,
        origin: ImageRef,
        instruction: impl Into<String>,
        n_repeats: u32,
        max_n_try: u32,
    ) -> Self {
        Evaluator {
            chat,
            embedder,
            origin,
            instruction: instruction.into(),
            n_repeats,
            max_n_try,
            checklist: None,
            origin_embedding: None,
        }
    }

    pub fn checklist(&mut self) -> Result<&Checklist, EvalError> {
        if self.checklist.is_none() {
            let c = build_checklist(&self.instruction, &self.origin, self.chat, self.max_n_try)?;
            self.checklist = Some(c);
        }
        Ok(self.checklist.as_ref().unwrap())
    }

    pub fn evaluate(&mut self, edited: &ImageRef) -> Result<(Evaluation, Vec<EvalWarning>), EvalError> {
        let checklist = self.checklist()?.clone();
        let (answers, reasoning, warnings) = answer_checklist(
            &self.origin,
            edited,
            &checklist,
            self.chat,
            self.n_repeats,
            self.max_n_try,
        )?;
        let vqa = vqa_score(&answers.finals())?;
        if self.origin_embedding.is_none() {
            self.origin_embedding = Some(self.embedder.embed(&self.origin)?);
        }
        let edited_embedding = self.embedder.embed(edited)?;
        let clip = cosine(self.origin_embedding.as_ref().unwrap(), &edited_embedding)?;
        Ok((
            Evaluation {
                checklist,
                answers,
                vqa_score: vqa,
                clip_i: clip,
                reasoning,
            },
            warnings,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    use Answer::{N, Y};

    struct Scripted {
        replies: Mutex<Vec<String>>,
        calls: Mutex<u32>,
    }

    impl Scripted {
        fn new(replies: &[&str]) -> Self {
            Scripted {
                replies: Mutex::new(replies.iter().rev().map(|s| s.to_string()).collect()),
                calls: Mutex::new(0),
            }
        }
    }

    impl ChatPort for Scripted {
        fn chat(&self, _r: &ChatRequest<'_>) -> Result<String, BackendError> {
            *self.calls.lock().unwrap() += 1;
            let mut r = self.replies.lock().unwrap();
            Ok(r.pop().unwrap_or_default())
        }
    }

    const ONE: &str = "<think></think>\n{\"ImageDescription\":\"The image shows a man.\", \"SubInstructions\":\"1.Add a hat to the man.\n\", \"Questions\":\"1.Is the man wearing a hat?\n\"}";

    #[test]
    fn single_item_checklist() {
        let chat = Scripted::new(&[ONE]);
        let c = build_checklist("add a hat", &ImageRef::sim("x".into()), &chat, 3).unwrap();
        assert_eq!(c.questions, vec!["Is the man wearing a hat?"]);
        assert_eq!(c.sub_instructions.len(), 1);
    }

    #[test]
    fn missing_questions_key_exhausts_retries() {
        let bad = "<think></think>{\"ImageDescription\":\"The x\", \"SubInstructions\":\"1.a\n\"}";
        let chat = Scripted::new(&[bad, bad, bad, ONE]);
        let err = build_checklist("add a hat", &ImageRef::sim("x".into()), &chat, 3).unwrap_err();
        match err {
            EvalError::MalformedAfterRetries { raw, .. } => assert_eq!(raw.len(), 3),
            e => panic!("unexpected {e}"),
        }
        assert_eq!(*chat.calls.lock().unwrap(), 3);
    }

    #[test]
    fn majority_rule() {
        assert_eq!(majority(&[Y, N, Y]), Y);
        assert_eq!(majority(&[N, N, Y]), N);
        assert_eq!(majority(&[Y]), Y);
        assert_eq!(majority(&[Y, N]), N);
        assert_eq!(majority(&[]), N);
    }

    #[test]
    fn scores_are_exact() {
        assert_eq!(vqa_score(&[Y, Y, Y, N]).unwrap(), Ratio::new(3, 4));
        assert_eq!(vqa_score(&[Y, Y]).unwrap(), Ratio::from_integer(1));
        assert_eq!(vqa_score(&[N, N]).unwrap(), Ratio::from_integer(0));
        assert!(matches!(vqa_score(&[]), Err(EvalError::EmptyChecklist)));
        let s = [Ratio::from_integer(1), Ratio::new(3, 4), Ratio::new(4, 4), Ratio::new(1, 2)];
        assert_eq!(cif(&s).unwrap(), Ratio::new(1, 2));
        assert_eq!(cif(&[Ratio::new(4, 4); 3]).unwrap(), Ratio::from_integer(1));
        assert!(matches!(cif(&[]), Err(EvalError::EmptyInput)));
        // 0.999... in floating point is not one; the rational 999/1000 isn't either.
        assert_eq!(cif(&[Ratio::new(999, 1000)]).unwrap(), Ratio::from_integer(0));
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(cosine(&[1.0], &[1.0, 0.0]), Err(EvalError::DimensionMismatch(1, 2))));
    }

    #[test]
    fn answers_need_matching_count() {
        let raw = "<think></think>{\"Checklist\":\"1.Is it? (Y)\n2.Is that? (N)\n\"}";
        assert_eq!(parse_answers(raw, 2), Some(vec![Y, N]));
        assert_eq!(parse_answers(raw, 3), None);
    }

    #[test]
    fn malformed_repeats_are_discarded() {
        let c = Checklist {
            image_description: "The x".into(),
            sub_instructions: vec!["a".into()],
            questions: vec!["Is a?".into()],
        };
        let good = "<think></think>{\"Checklist\":\"1.Is a? (Y)\n\"}";
        // Repeat 0: good. Repeat 1: three bad attempts. Repeat 2: good.
        let chat = Scripted::new(&[good, "x", "y", "z", good]);
        let img = ImageRef::sim("x".into());
        let (sheet, _, warnings) = answer_checklist(&img, &img, &c, &chat, 3, 3).unwrap();
        assert_eq!(sheet.per_question[0].repeats, vec![Y, Y]);
        assert_eq!(sheet.per_question[0].final_answer, Y);
        assert!(matches!(warnings[0], EvalWarning::RepeatDiscarded { repeat: 1, .. }));

        let chat = Scripted::new(&[]);
        let (sheet, _, warnings) = answer_checklist(&img, &img, &c, &chat, 1, 2).unwrap();
        assert_eq!(sheet.per_question[0].final_answer, N);
        assert!(warnings.contains(&EvalWarning::QuestionUnanswered { question: 1 }));
    }
}
