use std::fs;
use std::path::Path;

use super::tokenize;
use crate::error::{Error, Result};
use crate::task_heads::{validate_bio, BioTag};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SequenceTask {
    Ner,
    Re,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Ner { tags: Vec<BioTag> },
    Re { head: (usize, usize), tail: (usize, usize), relation: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceExample {
    pub tokens: Vec<String>,
    pub payload: Payload,
    /// Image path relative to the corpus file; may be empty.
    pub image: String,
}

impl SequenceExample {
    pub fn tags(&self) -> Option<&[BioTag]> {
        match &self.payload {
            Payload::Ner { tags } => Some(tags),
            Payload::Re { .. } => None,
        }
    }

    pub fn relation(&self) -> Option<&str> {
        match &self.payload {
            Payload::Re { relation, .. } => Some(relation),
            Payload::Ner { .. } => None,
        }
    }

    /// Class used for per-class sampling: the relation for RE, the first
    /// entity type (or `O`) for NER.
    pub fn class_label(&self) -> String {
        match &self.payload {
            Payload::Re { relation, .. } => relation.clone(),
            Payload::Ner { tags } => tags
                .iter()
                .find_map(|t| t.entity_type().map(str::to_string))
                .unwrap_or_else(|| "O".into()),
        }
    }

    pub fn to_line(&self) -> String {
        let toks = self.tokens.join(" ");
        match &self.payload {
            Payload::Ner { tags } => {
                let tags: Vec<String> = tags.iter().map(|t| t.to_string()).collect();
                format!("{toks}\t{}\t{}", tags.join(" "), self.image)
            }
            Payload::Re { head, tail, relation } => format!(
                "{toks}\t{}:{}\t{}:{}\t{relation}\t{}",
                head.0, head.1, tail.0, tail.1, self.image
            ),
        }
    }
}

fn parse_span(s: &str) -> Option<(usize, usize)> {
    let (a, b) = s.split_once(':')?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

/// Parses one record; `enforce_bio` rejects ill-formed tag sequences.
pub fn parse_sequence_line(line: &str, task: SequenceTask, enforce_bio: bool) -> std::result::Result<SequenceExample, (bool, String)> {
    let fields: Vec<&str> = line.split('\t').collect();
    let tokens = tokenize(fields[0]);
    if tokens.is_empty() {
        return Err((false, "empty token list".into()));
    }
    match task {
        SequenceTask::Ner => {
            if fields.len() != 3 {
                return Err((false, "expected tokens<TAB>tags<TAB>image".into()));
            }
            let tags = fields[1]
                .split_whitespace()
                .map(BioTag::parse)
                .collect::<Result<Vec<_>>>()
                .map_err(|e| (false, e.to_string()))?;
            if tags.len() != tokens.len() {
                return Err((false, format!("{} tags for {} tokens", tags.len(), tokens.len())));
            }
            if enforce_bio {
                validate_bio(&tags).map_err(|e| (true, e.to_string()))?;
            }
            Ok(SequenceExample {
                tokens,
                payload: Payload::Ner { tags },
                image: fields[2].trim().to_string(),
            })
        }
        SequenceTask::Re => {
            if fields.len() != 5 {
                return Err((false, "expected tokens<TAB>head<TAB>tail<TAB>relation<TAB>image".into()));
            }
            let n = tokens.len();
            let head = parse_span(fields[1]).ok_or((false, format!("bad head span `{}`", fields[1])))?;
            let tail = parse_span(fields[2]).ok_or((false, format!("bad tail span `{}`", fields[2])))?;
            for (s, e) in [head, tail] {
                if s >= e || e > n {
                    return Err((false, format!("span {s}:{e} outside {n} tokens")));
                }
            }
            if head.0 < tail.1 && tail.0 < head.1 {
                return Err((false, "head and tail spans overlap".into()));
            }
            let relation = fields[3].trim();
            if relation.is_empty() {
                return Err((false, "empty relation".into()));
            }
            Ok(SequenceExample {
                tokens,
                payload: Payload::Re {
                    head,
                    tail,
                    relation: relation.to_string(),
                },
                image: fields[4].trim().to_string(),
            })
        }
    }
}

pub fn parse_sequence_corpus(text: &str, path: &Path, task: SequenceTask, enforce_bio: bool) -> Result<Vec<SequenceExample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        match parse_sequence_line(line, task, enforce_bio) {
            Ok(ex) => out.push(ex),
            Err((true, msg)) => return Err(Error::Label(format!("{}:{}: {msg}", path.display(), i + 1))),
            Err((false, msg)) => return Err(Error::parse(path, i + 1, msg)),
        }
    }
    Ok(out)
}

pub fn load_sequence_corpus(path: &Path, task: SequenceTask, enforce_bio: bool) -> Result<Vec<SequenceExample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_sequence_corpus(&text, path, task, enforce_bio)
}

pub fn save_sequence_corpus(examples: &[SequenceExample], path: &Path) -> Result<()> {
    let mut text = String::new();
    for ex in examples {
        text.push_str(&ex.to_line());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
