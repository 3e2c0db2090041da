use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::{TokenSequence, Vocabulary};
use crate::error::{Error, Result};

/// Placeholder replaced by the candidate answer in declarative VQA sentences.
pub const ANSWER_SLOT: &str = "[answer]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Retrieval,
    Vqa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuestionType {
    Other,
    YesNo,
    Number,
}

impl QuestionType {
    pub fn prefix(self) -> &'static str {
        match self {
            QuestionType::Other => "The question is asking about others",
            QuestionType::YesNo => "The question is asking about yes or no",
            QuestionType::Number => "The question is asking about numbers",
        }
    }
}

impl FromStr for QuestionType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['_', '-', '/', ' '], "").as_str() {
            "other" | "others" => Ok(QuestionType::Other),
            "yesno" => Ok(QuestionType::YesNo),
            "number" | "numbers" => Ok(QuestionType::Number),
            _ => Err(Error::Input(format!("unknown question type {s:?}"))),
        }
    }
}

/// Source of one task-relevant prompt text.
#[derive(Debug, Clone, PartialEq)]
pub enum PromptSpec {
    /// Bare class name, no template.
    ClassName(String),
    /// Caption used verbatim.
    Caption(String),
    /// Declarative sentence; `ANSWER_SLOT`, if present, is filled with `answer`.
    Vqa {
        question_type: QuestionType,
        declarative: String,
        answer: String,
    },
}

impl PromptSpec {
    pub fn text(&self) -> Result<String> {
        let text = match self {
            PromptSpec::ClassName(t) | PromptSpec::Caption(t) => t.trim().to_string(),
            PromptSpec::Vqa {
                question_type,
                declarative,
                answer,
            } => {
                let sentence = if declarative.contains(ANSWER_SLOT) {
                    if answer.trim().is_empty() {
                        return Err(Error::Input(format!(
                            "empty answer for slot in {declarative:?}"
                        )));
                    }
                    declarative.replace(ANSWER_SLOT, answer.trim())
                } else {
                    declarative.clone()
                };
                let sentence = sentence.trim();
                if sentence.is_empty() {
                    return Err(Error::Input("empty declarative sentence".into()));
                }
                format!("{} {}", question_type.prefix(), sentence)
            }
        };
        if text.is_empty() {
            return Err(Error::Input("empty prompt text".into()));
        }
        Ok(text)
    }
}

/// `h_c`: the text of one label mapped into the prompt space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskRelevantPrompt {
    pub class_id: u32,
    pub text: String,
    pub tokens: TokenSequence,
}

/// Tokenizes one prompt per label; `max_tokens` bounds `BOT..EOT`.
pub fn build_task_prompts(
    specs: &[(u32, PromptSpec)],
    vocab: &Vocabulary,
    max_tokens: usize,
) -> Result<Vec<TaskRelevantPrompt>> {
    if specs.is_empty() {
        return Err(Error::Input("empty label space".into()));
    }
    specs
        .iter()
        .map(|(class_id, spec)| {
            let text = spec.text()?;
            let tokens = vocab.tokenize(&text, max_tokens)?;
            Ok(TaskRelevantPrompt {
                class_id: *class_id,
                text,
                tokens,
            })
        })
        .collect()
}

/// One line of a prompt corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptRecord {
    pub id: u64,
    pub class_id: u32,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_type: Option<String>,
}

pub fn read_corpus(reader: impl BufRead) -> Result<Vec<PromptRecord>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Input(format!("corpus line {}: {e}", n + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PromptRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Input(format!("corpus line {}: {e}", n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_corpus(mut writer: impl Write, records: &[PromptRecord]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Input(e.to_string()))?;
        writeln!(writer, "{line}").map_err(|e| Error::Input(e.to_string()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vqa_prefixes_are_exact() {
        let spec = PromptSpec::Vqa {
            question_type: QuestionType::YesNo,
            declarative: "the plate is empty".into(),
            answer: String::new(),
        };
        assert_eq!(
            spec.text().unwrap(),
            "The question is asking about yes or no the plate is empty"
        );
        assert_eq!(QuestionType::Other.prefix(), "The question is asking about others");
        assert_eq!(QuestionType::Number.prefix(), "The question is asking about numbers");
    }

    #[test]
    fn answer_slot_is_filled() {
        let spec = PromptSpec::Vqa {
            question_type: QuestionType::Number,
            declarative: "there are [answer] dogs".into(),
            answer: "two".into(),
        };
        assert_eq!(
            spec.text().unwrap(),
            "The question is asking about numbers there are two dogs"
        );
        let empty = PromptSpec::Vqa {
            question_type: QuestionType::Number,
            declarative: "there are [answer] dogs".into(),
            answer: " ".into(),
        };
        assert!(matches!(empty.text(), Err(Error::Input(_))));
    }

    #[test]
    fn unknown_question_type_rejected() {
        assert!("colour".parse::<QuestionType>().is_err());
        assert_eq!("yes/no".parse::<QuestionType>().unwrap(), QuestionType::YesNo);
    }

    #[test]
    fn names_and_captions_are_verbatim() {
        assert_eq!(PromptSpec::ClassName("barn".into()).text().unwrap(), "barn");
        assert_eq!(
            PromptSpec::Caption("a dog on grass".into()).text().unwrap(),
            "a dog on grass"
        );
    }

    #[test]
    fn corpus_round_trip() {
        let recs = vec![
            PromptRecord {
                id: 1,
                class_id: 0,
                text: "red cat".into(),
                question_type: None,
            },
            PromptRecord {
                id: 2,
                class_id: 3,
                text: "the cup is [answer]".into(),
                question_type: Some("other".into()),
            },
        ];
        let mut buf = Vec::new();
        write_corpus(&mut buf, &recs).unwrap();
        assert_eq!(read_corpus(&buf[..]).unwrap(), recs);
        assert!(read_corpus(&b"{\"id\":1,\"class_id\":0,\"text\":\"x\",\"extra\":1}\n"[..]).is_err());
    }
}
