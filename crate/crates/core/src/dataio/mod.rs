//! Canonical session files, labeled-example extraction, session-level k-fold
//! splits and adapters from public dataset layouts.
//!
//! The canonical format is JSON Lines, one session per line:
//!
//! ```text
//! {"session_id":"s1","turns":[{"query":"...","rewrite":null,"answer":null}]}
//! ```

mod adapters;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

pub use adapters::{adapt, adapt_str, SourceFormat};

use crate::domain::{LabeledExample, Session, Turn};
use crate::error::{Error, Result};

#[derive(Deserialize)]
struct RawTurn {
    query: String,
    #[serde(default)]
    rewrite: Option<String>,
    #[serde(default)]
    answer: Option<String>,
}

#[derive(Deserialize)]
struct RawSession {
    session_id: String,
    turns: Vec<RawTurn>,
}

fn parse_line(line: &str) -> std::result::Result<Session, String> {
    let raw: RawSession = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let turns = raw
        .turns
        .iter()
        .map(|t| Turn::new(&t.query, t.rewrite.as_deref(), t.answer.as_deref()))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    Session::new(raw.session_id, turns).map_err(|e| e.to_string())
}

/// Sessions parsed from a canonical JSONL string; `origin` names the source in errors.
pub fn parse_sessions(text: &str, origin: &str) -> Result<Vec<Session>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| Error::Parse {
            path: origin.to_string(),
            line: i + 1,
            reason,
        };
        let s = parse_line(line).map_err(err)?;
        if !seen.insert(s.session_id.clone()) {
            return Err(err(format!("duplicate session_id `{}`", s.session_id)));
        }
        out.push(s);
    }
    Ok(out)
}

pub fn load_sessions(path: &Path) -> Result<Vec<Session>> {
    let text = fs::read_to_string(path)?;
    parse_sessions(&text, &path.display().to_string())
}

pub fn sessions_to_jsonl(sessions: &[Session]) -> Result<String> {
    let mut out = String::new();
    for s in sessions {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_sessions(path: &Path, sessions: &[Session]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(sessions_to_jsonl(sessions)?.as_bytes())?;
    Ok(())
}

/// One example per turn that carries a rewrite; history is the session's
/// earlier queries.
pub fn to_labeled(sessions: &[Session]) -> Vec<LabeledExample> {
    let mut out = Vec::new();
    for s in sessions {
        for (t, turn) in s.turns.iter().enumerate() {
            if let Some(rewrite) = &turn.rewrite {
                out.push(LabeledExample {
                    history: s.history(t),
                    source: turn.query.clone(),
                    target: rewrite.clone(),
                });
            }
        }
    }
    out
}

/// Session id to fold index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSpec {
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
}

fn fold_of(sessions: &[Session], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::config("k", "must be at least 2"));
    }
    if sessions.len() < k {
        return Err(Error::invalid(format!(
            "{} sessions cannot be split into {k} folds",
            sessions.len()
        )));
    }
    let mut order: Vec<usize> = (0..sessions.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; sessions.len()];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % k;
    }
    Ok(fold)
}

pub fn fold_spec(sessions: &[Session], k: usize, seed: u64) -> Result<FoldSpec> {
    let fold = fold_of(sessions, k, seed)?;
    Ok(FoldSpec {
        k,
        assignments: sessions
            .iter()
            .zip(fold)
            .map(|(s, f)| (s.session_id.clone(), f))
            .collect(),
    })
}

/// `k` (train, test) splits at session level. Both halves keep file order.
pub fn kfold_split(
    sessions: &[Session],
    k: usize,
    seed: u64,
) -> Result<Vec<(Vec<Session>, Vec<Session>)>> {
    let fold = fold_of(sessions, k, seed)?;
    Ok((0..k)
        .map(|f| {
            let (test, train): (Vec<_>, Vec<_>) =
                sessions.iter().zip(&fold).partition(|(_, &g)| g == f);
            (
                train.into_iter().map(|(s, _)| s.clone()).collect(),
                test.into_iter().map(|(s, _)| s.clone()).collect(),
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sessions(n: usize) -> Vec<Session> {
        (0..n)
            .map(|i| {
                Session::new(
                    format!("s{i}"),
                    vec![Turn::query(&format!("q {i}")).unwrap()],
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn canonical_round_trip_is_byte_identical() {
        let text = concat!(
            r#"{"session_id":"a","turns":[{"query":"what is x ?","rewrite":null,"answer":"x is y"},"#,
            r#"{"query":"and z ?","rewrite":"what is z ?","answer":null}]}"#,
            "\n",
            r#"{"session_id":"b","turns":[{"query":"hi","rewrite":null,"answer":null}]}"#,
            "\n"
        );
        let s = parse_sessions(text, "mem").unwrap();
        assert_eq!(sessions_to_jsonl(&s).unwrap(), text);
    }

    #[test]
    fn normalizes_and_accepts_missing_optional_fields() {
        let s = parse_sessions(
            "{\"session_id\":\"a\",\"turns\":[{\"query\":\"  what   is\\tx ?\"}]}\n\n",
            "mem",
        )
        .unwrap();
        assert_eq!(s[0].turns[0].query, "what is x ?");
        assert!(parse_sessions("", "mem").unwrap().is_empty());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "{\"session_id\":\"a\",\"turns\":[{\"query\":\"q\"}]}\nnot json\n";
        match parse_sessions(text, "f.jsonl") {
            Err(Error::Parse { path, line, .. }) => {
                assert_eq!((path.as_str(), line), ("f.jsonl", 2))
            }
            other => panic!("{other:?}"),
        }
        let dup = "{\"session_id\":\"a\",\"turns\":[{\"query\":\"q\"}]}\n{\"session_id\":\"a\",\"turns\":[{\"query\":\"r\"}]}\n";
        assert!(matches!(
            parse_sessions(dup, "f"),
            Err(Error::Parse { line: 2, .. })
        ));
        let empty = "{\"session_id\":\"a\",\"turns\":[{\"query\":\"  \"}]}\n";
        assert!(matches!(
            parse_sessions(empty, "f"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn labeled_examples_follow_rewrites() {
        let s = Session::new(
            "t",
            vec![
                Turn::new("q1", Some("q1 full"), None).unwrap(),
                Turn::query("q2").unwrap(),
                Turn::new("q3", Some("q3 full"), None).unwrap(),
            ],
        )
        .unwrap();
        let ex = to_labeled(&[s]);
        assert_eq!(ex.len(), 2);
        assert!(ex[0].history.is_empty());
        assert_eq!(ex[1].history, vec!["q1".to_string(), "q2".to_string()]);
        assert_eq!(ex[1].target, "q3 full");
    }

    #[test]
    fn kfold_partitions_sessions() {
        let s = sessions(50);
        let folds = kfold_split(&s, 5, 9).unwrap();
        assert_eq!(folds, kfold_split(&s, 5, 9).unwrap());
        let mut seen = Vec::new();
        for (train, test) in &folds {
            assert_eq!(test.len(), 10);
            assert_eq!(train.len() + test.len(), 50);
            assert!(test.iter().all(|t| !train.contains(t)));
            seen.extend(test.iter().map(|x| x.session_id.clone()));
        }
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 50);
        let two = kfold_split(&sessions(2), 2, 0).unwrap();
        assert!(two.iter().all(|(tr, te)| tr.len() == 1 && te.len() == 1));
        assert!(kfold_split(&sessions(3), 4, 0).is_err());
        assert!(kfold_split(&sessions(3), 1, 0).is_err());
        let spec = fold_spec(&sessions(11), 3, 1).unwrap();
        let mut sizes = [0; 3];
        for f in spec.assignments.values() {
            sizes[*f] += 1;
        }
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }
}
