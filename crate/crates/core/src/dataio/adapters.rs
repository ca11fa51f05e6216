//! Field mappings from public dataset layouts to canonical sessions.
//!
//! | format           | input                                                     | session per        |
//! |------------------|-----------------------------------------------------------|--------------------|
//! | `CANARD`         | JSON array of `{History, Question, Rewrite, QuAC_dialog_id, Question_no}` | record |
//! | `TREC_CAST`      | JSON array of `{number, turn: [{number, raw_utterance, manual_rewritten_utterance?}]}` | topic |
//! | `QUAC`           | `{data: [{paragraphs: [{id, qas: [{question, orig_answer: {text}}]}]}]}` | paragraph |
//! | `MARCO_SESSIONS` | TSV lines `session_id <TAB> query <TAB> query ...`        | line               |
//!
//! CANARD histories start with the article title and section title, followed
//! by alternating question/answer strings. Unknown fields are ignored;
//! missing required fields fail with the record's position.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::Deserialize;
use serde_json::Value;

use crate::domain::{Session, Turn};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceFormat {
    Canard,
    TrecCast,
    Quac,
    MarcoSessions,
}

impl SourceFormat {
    pub const ALL: [SourceFormat; 4] = [
        SourceFormat::Canard,
        SourceFormat::TrecCast,
        SourceFormat::Quac,
        SourceFormat::MarcoSessions,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SourceFormat::Canard => "CANARD",
            SourceFormat::TrecCast => "TREC_CAST",
            SourceFormat::Quac => "QUAC",
            SourceFormat::MarcoSessions => "MARCO_SESSIONS",
        }
    }
}

impl fmt::Display for SourceFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SourceFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_uppercase().replace('-', "_");
        SourceFormat::ALL
            .into_iter()
            .find(|f| f.name() == key)
            .ok_or_else(|| Error::invalid(format!("unknown dataset format `{s}`")))
    }
}

fn id_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn record_err(format: SourceFormat, index: usize, reason: impl fmt::Display) -> Error {
    Error::invalid(format!("{format} record {index}: {reason}"))
}

#[derive(Deserialize)]
struct CanardRecord {
    #[serde(rename = "History")]
    history: Vec<String>,
    #[serde(rename = "Question")]
    question: String,
    #[serde(rename = "Rewrite")]
    rewrite: String,
    #[serde(rename = "QuAC_dialog_id")]
    dialog_id: Value,
    #[serde(rename = "Question_no")]
    question_no: Value,
}

fn canard(text: &str) -> Result<Vec<Session>> {
    let fmt = SourceFormat::Canard;
    let records: Vec<Value> = serde_json::from_str(text)?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let r: CanardRecord = serde_json::from_value(v).map_err(|e| record_err(fmt, i, e))?;
            let dialog = id_string(&r.dialog_id)
                .ok_or_else(|| record_err(fmt, i, "QuAC_dialog_id is not a string or number"))?;
            let no = id_string(&r.question_no)
                .ok_or_else(|| record_err(fmt, i, "Question_no is not a string or number"))?;
            let qa = r.history.get(2..).unwrap_or_default();
            let mut turns = Vec::with_capacity(qa.len() / 2 + 1);
            for pair in qa.chunks(2) {
                turns.push(
                    Turn::new(&pair[0], None, pair.get(1).map(String::as_str))
                        .map_err(|e| record_err(fmt, i, e))?,
                );
            }
            turns.push(
                Turn::new(&r.question, Some(&r.rewrite), None)
                    .map_err(|e| record_err(fmt, i, e))?,
            );
            Session::new(format!("{dialog}#{no}"), turns).map_err(|e| record_err(fmt, i, e))
        })
        .collect()
}

#[derive(Deserialize)]
struct CastTurn {
    raw_utterance: String,
    #[serde(default)]
    manual_rewritten_utterance: Option<String>,
}

#[derive(Deserialize)]
struct CastTopic {
    number: Value,
    turn: Vec<CastTurn>,
}

fn trec_cast(text: &str) -> Result<Vec<Session>> {
    let fmt = SourceFormat::TrecCast;
    let topics: Vec<Value> = serde_json::from_str(text)?;
    topics
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let t: CastTopic = serde_json::from_value(v).map_err(|e| record_err(fmt, i, e))?;
            let id = id_string(&t.number)
                .ok_or_else(|| record_err(fmt, i, "number is not a string or number"))?;
            let turns = t
                .turn
                .iter()
                .map(|u| {
                    Turn::new(
                        &u.raw_utterance,
                        u.manual_rewritten_utterance.as_deref(),
                        None,
                    )
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| record_err(fmt, i, e))?;
            Session::new(id, turns).map_err(|e| record_err(fmt, i, e))
        })
        .collect()
}

#[derive(Deserialize)]
struct QuacAnswer {
    text: String,
}

#[derive(Deserialize)]
struct QuacQa {
    question: String,
    #[serde(default)]
    orig_answer: Option<QuacAnswer>,
}

#[derive(Deserialize)]
struct QuacParagraph {
    id: Value,
    qas: Vec<QuacQa>,
}

#[derive(Deserialize)]
struct QuacArticle {
    paragraphs: Vec<Value>,
}

#[derive(Deserialize)]
struct QuacFile {
    data: Vec<QuacArticle>,
}

fn quac(text: &str) -> Result<Vec<Session>> {
    let fmt = SourceFormat::Quac;
    let file: QuacFile = serde_json::from_str(text)?;
    let mut out = Vec::new();
    for article in file.data {
        for v in article.paragraphs {
            let i = out.len();
            let p: QuacParagraph = serde_json::from_value(v).map_err(|e| record_err(fmt, i, e))?;
            let id = id_string(&p.id)
                .ok_or_else(|| record_err(fmt, i, "id is not a string or number"))?;
            let turns = p
                .qas
                .iter()
                .map(|qa| {
                    Turn::new(
                        &qa.question,
                        None,
                        qa.orig_answer.as_ref().map(|a| a.text.as_str()),
                    )
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| record_err(fmt, i, e))?;
            out.push(Session::new(id, turns).map_err(|e| record_err(fmt, i, e))?);
        }
    }
    Ok(out)
}

fn marco_sessions(text: &str) -> Result<Vec<Session>> {
    let fmt = SourceFormat::MarcoSessions;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let id = fields.next().unwrap_or_default().trim();
        if id.is_empty() {
            return Err(record_err(fmt, i + 1, "missing session id"));
        }
        let turns = fields
            .filter(|q| !q.trim().is_empty())
            .map(Turn::query)
            .collect::<Result<Vec<_>>>()
            .map_err(|e| record_err(fmt, i + 1, e))?;
        if turns.is_empty() {
            return Err(record_err(
                fmt,
                i + 1,
                format!("session `{id}` has no queries"),
            ));
        }
        out.push(Session::new(id, turns)?);
    }
    Ok(out)
}

/// Parse a dataset in `format` into canonical sessions. Duplicate session ids
/// are rejected.
pub fn adapt_str(format: SourceFormat, text: &str) -> Result<Vec<Session>> {
    let sessions = match format {
        SourceFormat::Canard => canard(text)?,
        SourceFormat::TrecCast => trec_cast(text)?,
        SourceFormat::Quac => quac(text)?,
        SourceFormat::MarcoSessions => marco_sessions(text)?,
    };
    let mut seen = std::collections::HashSet::new();
    for s in &sessions {
        if !seen.insert(s.session_id.as_str()) {
            return Err(Error::invalid(format!(
                "{format}: duplicate session id `{}`",
                s.session_id
            )));
        }
    }
    Ok(sessions)
}

pub fn adapt(format: SourceFormat, path: &Path) -> Result<Vec<Session>> {
    adapt_str(format, &fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{parse_sessions, sessions_to_jsonl};

    #[test]
    fn canard_final_turn_carries_rewrite() {
        let text = r#"[{"History": ["Beyoncé", "Vocal ability", "what is beyoncé's vocal range ?", "three octaves", "what else ?"],
            "Question": "what genre does she sing ?", "Rewrite": "what genre does beyoncé sing ?",
            "QuAC_dialog_id": "C_1", "Question_no": 3, "extra": true}]"#;
        let s = adapt_str(SourceFormat::Canard, text).unwrap();
        assert_eq!(s[0].session_id, "C_1#3");
        assert_eq!(s[0].turns.len(), 3);
        assert_eq!(s[0].turns[0].answer.as_deref(), Some("three octaves"));
        assert_eq!(s[0].turns[1].answer, None);
        assert_eq!(
            s[0].turns[2].rewrite.as_deref(),
            Some("what genre does beyoncé sing ?")
        );
        assert!(s[0].turns[..2].iter().all(|t| t.rewrite.is_none()));
    }

    #[test]
    fn missing_field_names_the_record() {
        let text = r#"[{"History": [], "Question": "q", "Rewrite": "r", "QuAC_dialog_id": "a", "Question_no": 1},
                       {"History": [], "Question": "q", "QuAC_dialog_id": "b", "Question_no": 1}]"#;
        let err = adapt_str(SourceFormat::Canard, text)
            .unwrap_err()
            .to_string();
        assert!(
            err.contains("CANARD record 1") && err.contains("Rewrite"),
            "{err}"
        );
    }

    #[test]
    fn trec_quac_and_marco() {
        let cast = r#"[{"number": 31, "description": "x", "turn": [
            {"number": 1, "raw_utterance": "what is throat cancer ?", "manual_rewritten_utterance": "what is throat cancer ?"},
            {"number": 2, "raw_utterance": "is it treatable ?", "manual_rewritten_utterance": "is throat cancer treatable ?"}]}]"#;
        let s = adapt_str(SourceFormat::TrecCast, cast).unwrap();
        assert_eq!(s[0].session_id, "31");
        assert_eq!(
            s[0].turns[1].rewrite.as_deref(),
            Some("is throat cancer treatable ?")
        );

        let quac = r#"{"data": [{"title": "t", "paragraphs": [{"id": "C_9", "context": "...", "qas": [
            {"question": "who is she ?", "id": "q0", "orig_answer": {"text": "a singer", "answer_start": 0}},
            {"question": "what else ?", "id": "q1", "orig_answer": {"text": "CANNOTANSWER"}}]}]}]}"#;
        let s = adapt_str(SourceFormat::Quac, quac).unwrap();
        assert_eq!(s[0].turns.len(), 2);
        assert!(s[0].turns.iter().all(|t| t.rewrite.is_none()));
        assert_eq!(s[0].turns[0].answer.as_deref(), Some("a singer"));

        let marco = "m1\twhat is the australian flag ?\twhat is the population of australia ?\n\nm2\thello\n";
        let s = adapt_str(SourceFormat::MarcoSessions, marco).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].turns.len(), 2);
        assert!(s[0].turns.iter().all(|t| t.rewrite.is_none()));
        let back = parse_sessions(&sessions_to_jsonl(&s).unwrap(), "mem").unwrap();
        assert_eq!(back, s);
        assert!(adapt_str(SourceFormat::MarcoSessions, "only-id\n").is_err());
    }

    #[test]
    fn format_names_parse() {
        for f in SourceFormat::ALL {
            assert_eq!(f.name().parse::<SourceFormat>().unwrap(), f);
        }
        assert_eq!(
            "trec-cast".parse::<SourceFormat>().unwrap(),
            SourceFormat::TrecCast
        );
        assert!("squad".parse::<SourceFormat>().is_err());
    }
}
