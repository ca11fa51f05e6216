//! Conversation data, unlabeled pools, confidence selection and fusion of
//! pseudo-labeled data into training pairs.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// NFC, collapse whitespace runs to one space, trim. Case is preserved.
pub fn normalize_text(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub query: String,
    pub rewrite: Option<String>,
    pub answer: Option<String>,
}

impl Turn {
    pub fn new(query: &str, rewrite: Option<&str>, answer: Option<&str>) -> Result<Self> {
        let query = normalize_text(query);
        if query.is_empty() {
            return Err(Error::invalid("turn query is empty"));
        }
        let rewrite = match rewrite.map(normalize_text) {
            Some(r) if r.is_empty() => return Err(Error::invalid("turn rewrite is empty")),
            r => r,
        };
        let answer = answer.map(normalize_text);
        Ok(Turn {
            query,
            rewrite,
            answer,
        })
    }

    pub fn query(query: &str) -> Result<Self> {
        Turn::new(query, None, None)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub turns: Vec<Turn>,
}

impl Session {
    pub fn new(id: impl Into<String>, turns: Vec<Turn>) -> Result<Self> {
        let session_id = id.into();
        if turns.is_empty() {
            return Err(Error::invalid(format!(
                "session `{session_id}` has no turns"
            )));
        }
        Ok(Session { session_id, turns })
    }

    /// Queries of all turns before `turn`.
    pub fn history(&self, turn: usize) -> Vec<String> {
        self.turns[..turn].iter().map(|t| t.query.clone()).collect()
    }
}

/// (H, q, q*): history, in-context query, fully specified rewrite.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub history: Vec<String>,
    pub source: String,
    pub target: String,
}

impl LabeledExample {
    pub fn new(history: Vec<String>, source: &str, target: &str) -> Result<Self> {
        let source = normalize_text(source);
        let target = normalize_text(target);
        if source.is_empty() || target.is_empty() {
            return Err(Error::invalid(
                "labeled example with empty source or target",
            ));
        }
        Ok(LabeledExample {
            history,
            source,
            target,
        })
    }
}

/// Swap source and target, keeping the history.
pub fn reverse(ex: &LabeledExample) -> LabeledExample {
    LabeledExample {
        history: ex.history.clone(),
        source: ex.target.clone(),
        target: ex.source.clone(),
    }
}

/// Position of a query inside a dataset: (session id, 0-based turn index).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ExampleId {
    pub session: String,
    pub turn: usize,
}

impl ExampleId {
    pub fn new(session: impl Into<String>, turn: usize) -> Self {
        ExampleId {
            session: session.into(),
            turn,
        }
    }
}

impl fmt::Display for ExampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.session, self.turn)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Direction {
    /// Produced by the Simplifier from a fully specified query; trains the Rewriter.
    Simplify,
    /// Produced by the Rewriter from a contextual query; trains the Simplifier.
    Rewrite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoExample {
    pub id: ExampleId,
    pub history: Vec<String>,
    pub source: String,
    pub generated: String,
    pub confidence: f64,
    pub direction: Direction,
}

/// Keep candidates whose confidence is strictly above `threshold`.
///
/// Both halves preserve input order. NaN confidences are always rejected.
pub fn select(
    candidates: Vec<PseudoExample>,
    threshold: f64,
) -> (Vec<PseudoExample>, Vec<PseudoExample>) {
    candidates
        .into_iter()
        .partition(|c| c.confidence > threshold)
}

/// Which way a training pair points. Provenance tag checked by the trainer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// contextual -> fully specified (Rewriter).
    ToFull,
    /// fully specified -> contextual (Simplifier).
    ToReduced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPair {
    pub history: Vec<String>,
    pub source: String,
    pub target: String,
    pub orientation: Orientation,
    /// Selector score for pseudo pairs, `None` for gold pairs.
    pub confidence: Option<f64>,
}

impl TrainPair {
    pub fn gold(ex: &LabeledExample, orientation: Orientation) -> Self {
        TrainPair {
            history: ex.history.clone(),
            source: ex.source.clone(),
            target: ex.target.clone(),
            orientation,
            confidence: None,
        }
    }
}

/// Rewriter pairs from the Simplifier's output and Simplifier pairs from the
/// Rewriter's output.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SyntheticDataset {
    rewriter: Vec<TrainPair>,
    simplifier: Vec<TrainPair>,
}

impl SyntheticDataset {
    pub fn for_rewriter(&self) -> &[TrainPair] {
        &self.rewriter
    }

    pub fn for_simplifier(&self) -> &[TrainPair] {
        &self.simplifier
    }

    pub fn len(&self) -> usize {
        self.rewriter.len() + self.simplifier.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn flip(p: &PseudoExample, orientation: Orientation) -> TrainPair {
    // The generated text becomes the model input; the real pool query is the target.
    TrainPair {
        history: p.history.clone(),
        source: p.generated.clone(),
        target: p.source.clone(),
        orientation,
        confidence: Some(p.confidence),
    }
}

pub fn fuse(p_s: &[PseudoExample], p_r: &[PseudoExample]) -> Result<SyntheticDataset> {
    if let Some(bad) = p_s.iter().find(|p| p.direction != Direction::Simplify) {
        return Err(Error::contract(format!(
            "simplifier output {} is tagged {:?}",
            bad.id, bad.direction
        )));
    }
    if let Some(bad) = p_r.iter().find(|p| p.direction != Direction::Rewrite) {
        return Err(Error::contract(format!(
            "rewriter output {} is tagged {:?}",
            bad.id, bad.direction
        )));
    }
    Ok(SyntheticDataset {
        rewriter: p_s.iter().map(|p| flip(p, Orientation::ToFull)).collect(),
        simplifier: p_r
            .iter()
            .map(|p| flip(p, Orientation::ToReduced))
            .collect(),
    })
}

/// One unconsumed query of a pool together with its conversational context.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolItem {
    pub id: ExampleId,
    pub history: Vec<String>,
    pub query: String,
}

/// An unlabeled session collection that only ever shrinks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DataPool {
    sessions: Vec<Session>,
    consumed: BTreeSet<ExampleId>,
}

impl DataPool {
    pub fn new(sessions: Vec<Session>) -> Result<Self> {
        let mut ids = BTreeSet::new();
        for s in &sessions {
            if !ids.insert(s.session_id.as_str()) {
                return Err(Error::invalid(format!(
                    "duplicate session id `{}`",
                    s.session_id
                )));
            }
        }
        Ok(DataPool {
            sessions,
            consumed: BTreeSet::new(),
        })
    }

    pub fn sessions(&self) -> &[Session] {
        &self.sessions
    }

    /// Total number of queries, consumed or not.
    pub fn capacity(&self) -> usize {
        self.sessions.iter().map(|s| s.turns.len()).sum()
    }

    /// Number of queries still available for pseudo-labeling.
    pub fn len(&self) -> usize {
        self.capacity() - self.consumed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn lookup(&self, id: &ExampleId) -> Option<&Session> {
        self.sessions
            .iter()
            .find(|s| s.session_id == id.session)
            .filter(|s| id.turn < s.turns.len())
    }

    pub fn is_available(&self, id: &ExampleId) -> bool {
        self.lookup(id).is_some() && !self.consumed.contains(id)
    }

    /// Unconsumed queries in pool order (session order, then turn order).
    pub fn pending(&self) -> Vec<PoolItem> {
        let mut out = Vec::with_capacity(self.len());
        for s in &self.sessions {
            for (t, turn) in s.turns.iter().enumerate() {
                let id = ExampleId::new(s.session_id.clone(), t);
                if !self.consumed.contains(&id) {
                    out.push(PoolItem {
                        history: s.history(t),
                        query: turn.query.clone(),
                        id,
                    });
                }
            }
        }
        out
    }

    /// Mark the given examples as consumed. All-or-nothing: on error the pool
    /// is unchanged.
    pub fn remove_consumed(&mut self, taken: &[PseudoExample]) -> Result<()> {
        let ids: BTreeSet<&ExampleId> = taken.iter().map(|p| &p.id).collect();
        for id in &ids {
            if self.lookup(id).is_none() {
                return Err(Error::contract(format!("example {id} is not in the pool")));
            }
            if self.consumed.contains(*id) {
                return Err(Error::contract(format!(
                    "example {id} was already consumed"
                )));
            }
        }
        self.consumed.extend(ids.into_iter().cloned());
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pseudo(session: &str, turn: usize, confidence: f64, direction: Direction) -> PseudoExample {
        PseudoExample {
            id: ExampleId::new(session, turn),
            history: vec![],
            source: format!("source {session} {turn}"),
            generated: format!("generated {session} {turn}"),
            confidence,
            direction,
        }
    }

    fn pool(n_sessions: usize, turns: usize) -> DataPool {
        let sessions = (0..n_sessions)
            .map(|s| {
                let turns = (0..turns)
                    .map(|t| Turn::query(&format!("query {s} {t}")).unwrap())
                    .collect();
                Session::new(format!("s{s}"), turns).unwrap()
            })
            .collect();
        DataPool::new(sessions).unwrap()
    }

    #[test]
    fn normalization_collapses_whitespace_and_composes() {
        assert_eq!(normalize_text("  what   is\tit ?\n"), "what is it ?");
        // e + combining acute -> precomposed é
        assert_eq!(normalize_text("beyonce\u{301}"), "beyoncé");
        assert_eq!(normalize_text("Keep Case"), "Keep Case");
    }

    #[test]
    fn turn_rejects_empty_fields() {
        assert!(Turn::query("   ").is_err());
        assert!(Turn::new("q", Some("  "), None).is_err());
    }

    #[test]
    fn select_is_strict() {
        let c = vec![
            pseudo("a", 0, -5.0, Direction::Simplify),
            pseudo("a", 1, -1.0, Direction::Simplify),
            pseudo("a", 2, -9.0, Direction::Simplify),
        ];
        let (kept, rejected) = select(c.clone(), -4.0);
        assert_eq!(kept, vec![c[1].clone()]);
        assert_eq!(rejected, vec![c[0].clone(), c[2].clone()]);
        let (kept, _) = select(c.clone(), -1.0);
        assert!(kept.is_empty());
        let (kept, rejected) = select(c, f64::INFINITY);
        assert!(kept.is_empty());
        assert_eq!(rejected.len(), 3);
        let (kept, rejected) = select(vec![], 0.0);
        assert!(kept.is_empty() && rejected.is_empty());
    }

    #[test]
    fn select_accepts_positive_thresholds() {
        // Thresholds on another backend's score scale are just numbers here.
        let c = [
            pseudo("a", 0, 95.0, Direction::Simplify),
            pseudo("a", 1, 105.0, Direction::Rewrite),
        ];
        for (s_s, s_r) in [(90.0, 110.0), (70.0, 90.0)] {
            let (ks, _) = select(vec![c[0].clone()], s_s);
            let (kr, _) = select(vec![c[1].clone()], s_r);
            assert_eq!(ks.len(), 1);
            assert_eq!(kr.len(), usize::from(s_r < 105.0));
        }
    }

    #[test]
    fn fuse_routes_by_direction() {
        let empty = fuse(&[], &[]).unwrap();
        assert!(empty.for_rewriter().is_empty() && empty.for_simplifier().is_empty());

        let ps = vec![pseudo("a", 0, 1.0, Direction::Simplify)];
        let pr = vec![
            pseudo("b", 0, 1.0, Direction::Rewrite),
            pseudo("b", 1, 1.0, Direction::Rewrite),
        ];
        let d = fuse(&ps, &pr).unwrap();
        assert_eq!(d.for_rewriter().len(), 1);
        assert_eq!(d.for_simplifier().len(), 2);
        assert_eq!(d.len(), 3);
        assert!(d
            .for_rewriter()
            .iter()
            .all(|p| p.orientation == Orientation::ToFull));
        assert!(d
            .for_simplifier()
            .iter()
            .all(|p| p.orientation == Orientation::ToReduced));

        let err = fuse(&pr, &[]).unwrap_err();
        assert!(err.to_string().contains("b#0"), "{err}");
    }

    #[test]
    fn fuse_simplified_text_becomes_rewriter_input() {
        let p = PseudoExample {
            id: ExampleId::new("m", 0),
            history: vec![],
            source: "what empires survived the bronze age collapse?".into(),
            generated: "what empires survived?".into(),
            confidence: -0.5,
            direction: Direction::Simplify,
        };
        let d = fuse(&[p], &[]).unwrap();
        let pair = &d.for_rewriter()[0];
        assert_eq!(pair.source, "what empires survived?");
        assert_eq!(
            pair.target,
            "what empires survived the bronze age collapse?"
        );
    }

    #[test]
    fn remove_consumed_shrinks_and_refuses_repeats() {
        let mut p = pool(5, 2);
        assert_eq!(p.len(), 10);
        let taken = vec![
            pseudo("s0", 0, 0.0, Direction::Simplify),
            pseudo("s1", 1, 0.0, Direction::Simplify),
            pseudo("s4", 0, 0.0, Direction::Simplify),
        ];
        p.remove_consumed(&taken).unwrap();
        assert_eq!(p.len(), 7);
        assert!(p
            .pending()
            .iter()
            .all(|i| taken.iter().all(|t| t.id != i.id)));

        let before = p.clone();
        p.remove_consumed(&[]).unwrap();
        assert_eq!(p, before);

        assert!(p.remove_consumed(&taken[..1]).is_err());
        assert!(p
            .remove_consumed(&[pseudo("nope", 0, 0.0, Direction::Simplify)])
            .is_err());
        assert!(p
            .remove_consumed(&[pseudo("s0", 9, 0.0, Direction::Simplify)])
            .is_err());
        assert_eq!(p, before);
    }

    #[test]
    fn pending_history_is_prior_queries() {
        let p = pool(1, 3);
        let items = p.pending();
        assert_eq!(items.len(), 3);
        assert!(items[0].history.is_empty());
        assert_eq!(items[2].history, vec!["query 0 0", "query 0 1"]);
    }

    #[test]
    fn reverse_swaps_table_one_row() {
        let ex = LabeledExample::new(
            vec!["What can you tell me about Beyoncé's voice ?".into()],
            "What are some other facts about her voice ?",
            "What are some other facts about Beyoncé's voice ?",
        )
        .unwrap();
        let r = reverse(&ex);
        assert_eq!(r.source, ex.target);
        assert_eq!(r.target, ex.source);
        assert_eq!(r.history, ex.history);
        assert_eq!(reverse(&r), ex);
    }

    proptest! {
        #[test]
        fn select_partitions_and_is_monotone(
            confs in proptest::collection::vec(-50.0f64..50.0, 0..40),
            t1 in -60.0f64..60.0,
            dt in 0.0f64..30.0,
        ) {
            let c: Vec<_> = confs.iter().enumerate()
                .map(|(i, &x)| pseudo("s", i, x, Direction::Rewrite)).collect();
            let (kept, rejected) = select(c.clone(), t1);
            prop_assert_eq!(kept.len() + rejected.len(), c.len());
            let mut merged: Vec<_> = kept.iter().chain(&rejected).map(|p| p.id.turn).collect();
            merged.sort();
            prop_assert_eq!(merged, (0..c.len()).collect::<Vec<_>>());
            prop_assert!(kept.windows(2).all(|w| w[0].id.turn < w[1].id.turn));
            prop_assert!(rejected.windows(2).all(|w| w[0].id.turn < w[1].id.turn));
            let (kept2, _) = select(c, t1 + dt);
            prop_assert!(kept2.iter().all(|k| kept.contains(k)));
        }

        #[test]
        fn reverse_is_involution(h in proptest::collection::vec("[a-z ]{1,10}", 0..3), s in "[a-z]{1,8}", t in "[a-z]{1,8}") {
            let ex = LabeledExample { history: h, source: s, target: t };
            prop_assert_eq!(reverse(&reverse(&ex)), ex);
        }
    }
}
