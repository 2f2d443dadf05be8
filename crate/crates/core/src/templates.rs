//! Fixed prompt templates and guided-decoding patterns for the instructor's
//! language-model calls.
//!
//! The three `*_PATTERN` constants are kept byte-for-byte as published. They
//! are matched against the whole completion with `.` also matching newlines:
//! the analyzer pattern can only accept checklists longer than two items
//! under that reading.

use once_cell::sync::Lazy;
use regex::Regex;
use regex_automata::dfa::{dense, Automaton, StartKind};
use regex_automata::{Anchored, Input, MatchKind};
use thiserror::Error;

pub const GENERATOR_PATTERN: &str =
    r#"<think></think>\n?\{"reasoning":"Step1:.*?Step2:.*?Step3:.*?", ?"instruction":".*?"\}"#;

pub const ANALYZER_PATTERN: &str = r#"<think></think>\n?\{"ImageDescription":"The.*?", "SubInstructions":"1\..*\n.*?"\, "Questions":"1\..*\?\n.*?"\}"#;

pub const CHECKER_PATTERN: &str = r#"<think></think>\n?\{"Checklist":"(?:\d+\..*?\s\((?:Y|N)\)\n)+"\}"#;

/// `(*IV*)` is replaced by the decimal instruction volume.
pub const GENERATOR_SYSTEM_TEMPLATE: &str = "You are an image-editing work instructor. The user wishes to edit an image to meet some editing requirements. A requirement checklist is provided. Your task is to generate an instruction that only do up to (*IV*) modifications to the \"latest_image\". Even it cannot fullfill all the requirements.";

pub const ANALYZER_SYSTEM_PROMPT: &str = r#"You are an image editing task assistant. The user will provide you with an image and an editing instruction.
Three tasks: 1.Describe the image 2.Analyze the editing instruction. Based on the original image content, decompose the instruction into smaller sub instructions. 3.Transform each sub instruction into a question to check whether they are done or not.
Strictly provide your evaluation in a dict format. For example: {"ImageDescription":"Description here.", "SubInstructions": "List sub instructions here.", "Questions": "List questions here."}.
IMPORTANT: Provide the sub instructions one by one, indexed by numbers, split by line break. e.g. 1.xxx\n 2.xxx\n ...
IMPORTANT: Provide the questions one by one, end with question mark, indexed by numbers, split by line break. e.g. 1.xxx?\n 2.xxx?\n ...
IMPORTANT: If the instruction is simple enough and cannot be decomposed even further, give "SubInstructions" that have only one item."#;

pub const CHECKER_SYSTEM_PROMPT: &str = r#"You are an image editing task assistant. The user will provide you with an original image, an edited image and a checklist of editing questions.
Your tasks: Compare the content of the two images, answer each question in the checklist.
Strictly provide your evaluation in a dict format. For example: {"Checklist":"Output here."}.
IMPORTANT: Answer Y or N for each question, do not include extra output. e.g. 1.xxx (Y), 2.xxx (N), 3.xxx (Y), ..."#;

pub fn generator_system_prompt(instruction_volume: u32) -> String {
    GENERATOR_SYSTEM_TEMPLATE.replace("(*IV*)", &instruction_volume.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{format} output does not match its guided-decoding pattern (first mismatch at byte {offset})")]
pub struct FormatViolation {
    pub format: &'static str,
    pub offset: usize,
}

type Dfa = dense::DFA<Vec<u32>>;

/// A guided-decoding pattern compiled for whole-string acceptance.
pub struct GuidedFormat {
    pub name: &'static str,
    pub pattern: &'static str,
    full: Regex,
    dfa: Lazy<Dfa, Box<dyn Fn() -> Dfa + Send + Sync>>,
}

impl GuidedFormat {
    fn new(name: &'static str, pattern: &'static str) -> Self {
        let full = Regex::new(&format!(r"(?s)\A(?:{pattern})\z")).expect("guided pattern compiles");
        let dfa: Box<dyn Fn() -> dense::DFA<Vec<u32>> + Send + Sync> = Box::new(move || {
            dense::Builder::new()
                .configure(
                    dense::Config::new()
                        .start_kind(StartKind::Anchored)
                        .match_kind(MatchKind::All),
                )
                .build(&format!(r"(?s)(?:{pattern})\z"))
                .expect("guided pattern compiles to a DFA")
        });
        GuidedFormat {
            name,
            pattern,
            full,
            dfa: Lazy::new(dfa),
        }
    }

    pub fn is_match(&self, text: &str) -> bool {
        self.full.is_match(text)
    }

    pub fn validate(&self, text: &str) -> Result<(), FormatViolation> {
        if self.is_match(text) {
            return Ok(());
        }
        Err(FormatViolation {
            format: self.name,
            offset: self.first_mismatch(text),
        })
    }

    /// Byte offset of the first byte after which no completion of the text
    /// can match; the text length if the text is a proper prefix of a match.
    pub fn first_mismatch(&self, text: &str) -> usize {
        let dfa = &*self.dfa;
        let input = Input::new(text).anchored(Anchored::Yes);
        let Ok(mut state) = dfa.start_state_forward(&input) else {
            return 0;
        };
        for (i, &b) in text.as_bytes().iter().enumerate() {
            state = dfa.next_state(state, b);
            if dfa.is_dead_state(state) {
                return i;
            }
        }
        text.len()
    }
}

pub static GENERATOR_FORMAT: Lazy<GuidedFormat> =
    Lazy::new(|| GuidedFormat::new("instruction-generator", GENERATOR_PATTERN));
pub static ANALYZER_FORMAT: Lazy<GuidedFormat> =
    Lazy::new(|| GuidedFormat::new("instruction-analyzer", ANALYZER_PATTERN));
pub static CHECKER_FORMAT: Lazy<GuidedFormat> =
    Lazy::new(|| GuidedFormat::new("vqa-checker", CHECKER_PATTERN));

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iv_substitution() {
        let p = generator_system_prompt(2);
        assert!(p.contains("up to 2 modifications"));
        assert!(!p.contains("(*IV*)"));
    }

    #[test]
    fn mismatch_offsets() {
        let ok = "<think></think>{\"reasoning\":\"Step1:a Step2:b Step3:c\", \"instruction\":\"add a hat\"}";
        assert!(GENERATOR_FORMAT.validate(ok).is_ok());
        let err = GENERATOR_FORMAT.validate("<think></think>{\"reasoning\":\"Step1:a Step3:c\"}").unwrap_err();
        // Everything up to the final brace can still be completed into a match.
        assert!(err.offset > 20);
        let err = GENERATOR_FORMAT.validate("<thonk>").unwrap_err();
        assert_eq!(err.offset, 3);
        let trailing = format!("{ok} junk");
        // Junk after the brace is still a viable prefix (".*?" may absorb it).
        assert_eq!(GENERATOR_FORMAT.validate(&trailing).unwrap_err().offset, trailing.len());
        // Proper prefix: no dead byte, mismatch reported at the end.
        let prefix = &ok[..10];
        assert_eq!(GENERATOR_FORMAT.first_mismatch(prefix), 10);
    }

    #[test]
    fn multi_line_checklists_need_dotall() {
        let three = "<think></think>\n{\"ImageDescription\":\"The image.\", \"SubInstructions\":\"1.a\n2.b\n3.c\n\", \"Questions\":\"1.a?\n2.b?\n3.c?\n\"}";
        assert!(ANALYZER_FORMAT.is_match(three));
    }
}
