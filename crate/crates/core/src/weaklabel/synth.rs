use std::sync::OnceLock;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::lexicon::{EntityTag, Lexicon};
use crate::domain::{LabeledExample, Session, Turn};
use crate::error::{Error, Result};
use crate::metrics::tokenize;

pub const ATTRIBUTES: [&str; 5] = ["color", "size", "age", "history", "origin"];

const ENTITIES: [(&str, EntityTag); 20] = [
    ("the sun", EntityTag::Other),
    ("the moon", EntityTag::Other),
    ("mars", EntityTag::Other),
    ("australia", EntityTag::Other),
    ("japan", EntityTag::Other),
    ("the amazon river", EntityTag::Other),
    ("mount everest", EntityTag::Other),
    ("the eiffel tower", EntityTag::Other),
    ("beyoncé", EntityTag::PersonF),
    ("marie curie", EntityTag::PersonF),
    ("serena williams", EntityTag::PersonF),
    ("frida kahlo", EntityTag::PersonF),
    ("albert einstein", EntityTag::PersonM),
    ("isaac newton", EntityTag::PersonM),
    ("pablo picasso", EntityTag::PersonM),
    ("nelson mandela", EntityTag::PersonM),
    ("the beatles", EntityTag::Plural),
    ("the romans", EntityTag::Plural),
    ("the vikings", EntityTag::Plural),
    ("the incas", EntityTag::Plural),
];

/// (prefix, suffix) around "{attribute} of {entity}".
const TEMPLATES: [(&str, &str); 3] = [
    ("what is the", "?"),
    ("tell me about the", "."),
    ("what do we know about the", "?"),
];

const ELLIPSIS_PREFIX: &str = "what about the";

/// Probability that a reduced turn uses a pronoun rather than ellipsis.
const PRONOUN_RATE: f64 = 0.7;

/// Entities with pronoun classes and the question templates over them.
///
/// Full form: `<prefix> <attribute> of <entity> <suffix>`. Reduced forms put
/// the entity's object pronoun in the entity slot, or use the ellipsis
/// `what about the <attribute> ?` whose full form is the first template.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    entities: Vec<(String, EntityTag)>,
}

impl SyntheticWorld {
    pub fn standard() -> &'static SyntheticWorld {
        static WORLD: OnceLock<SyntheticWorld> = OnceLock::new();
        WORLD.get_or_init(|| SyntheticWorld {
            entities: ENTITIES.iter().map(|(n, t)| (n.to_string(), *t)).collect(),
        })
    }

    pub fn entities(&self) -> &[(String, EntityTag)] {
        &self.entities
    }

    pub fn lexicon(&self) -> Lexicon {
        self.entities
            .iter()
            .map(|(n, t)| (n.as_str(), *t))
            .collect()
    }

    pub fn full(&self, template: usize, attribute: &str, entity: &str) -> String {
        let (pre, suf) = TEMPLATES[template];
        format!("{pre} {attribute} of {entity} {suf}")
    }

    pub fn pronoun(&self, template: usize, attribute: &str, tag: EntityTag) -> String {
        self.full(template, attribute, tag.object())
    }

    pub fn ellipsis(&self, attribute: &str) -> String {
        format!("{ELLIPSIS_PREFIX} {attribute} ?")
    }

    /// Number of distinct first turns times ordered attribute choices for the
    /// following turns; a lower bound on distinct sessions of `turns` turns.
    pub fn session_capacity(&self, turns: usize) -> usize {
        let first = self.entities.len() * ATTRIBUTES.len() * TEMPLATES.len();
        let later: usize = (1..turns.min(ATTRIBUTES.len()))
            .map(|k| ATTRIBUTES.len() - k)
            .product();
        first * later
    }
}

/// (template, attribute, entity slot) of a full or pronoun-form question.
fn parse_templated(tokens: &[String]) -> Option<(usize, String, Vec<String>)> {
    for (t, (pre, suf)) in TEMPLATES.iter().enumerate() {
        let pre = tokenize(pre);
        let suf = tokenize(suf);
        if tokens.len() < pre.len() + suf.len() + 3
            || !tokens.starts_with(&pre)
            || !tokens.ends_with(&suf)
        {
            continue;
        }
        let mid = &tokens[pre.len()..tokens.len() - suf.len()];
        if mid.len() >= 3 && ATTRIBUTES.contains(&mid[0].as_str()) && mid[1] == "of" {
            return Some((t, mid[0].clone(), mid[2..].to_vec()));
        }
    }
    None
}

fn parse_ellipsis(tokens: &[String]) -> Option<String> {
    let pre = tokenize(ELLIPSIS_PREFIX);
    (tokens.len() == pre.len() + 2
        && tokens.starts_with(&pre)
        && tokens[pre.len() + 1] == "?"
        && ATTRIBUTES.contains(&tokens[pre.len()].as_str()))
    .then(|| tokens[pre.len()].clone())
}

/// Latest entity named in the history (latest query first, then latest position).
fn antecedent(world: &SyntheticWorld, history: &[String]) -> Option<String> {
    for h in history.iter().rev() {
        let toks = tokenize(h);
        let mut best: Option<(usize, usize, &str)> = None;
        for (name, _) in &world.entities {
            let n = tokenize(name);
            if let Some(pos) = toks.windows(n.len()).rposition(|w| w == n.as_slice()) {
                let cand = (pos + n.len(), n.len(), name.as_str());
                if best.is_none_or(|b| (cand.0, cand.1) > (b.0, b.1)) {
                    best = Some(cand);
                }
            }
        }
        if let Some((_, _, name)) = best {
            return Some(name.to_string());
        }
    }
    None
}

/// Exact inverse of the synthetic reduction.
///
/// Pronoun and ellipsis forms resolve to the latest entity mentioned in the
/// history; full forms come back unchanged (tokenized and re-joined).
pub fn oracle_rewrite(history: &[String], reduced: &str) -> Result<String> {
    let world = SyntheticWorld::standard();
    let toks = tokenize(reduced);
    let resolve = || {
        antecedent(world, history)
            .ok_or_else(|| Error::invalid(format!("no antecedent in history for `{reduced}`")))
    };
    if let Some(attr) = parse_ellipsis(&toks) {
        return Ok(world.full(0, &attr, &resolve()?));
    }
    if let Some((t, attr, slot)) = parse_templated(&toks) {
        let pronouns = ["it", "her", "him", "them"];
        if slot.len() == 1 && pronouns.contains(&slot[0].as_str()) {
            return Ok(world.full(t, &attr, &resolve()?));
        }
        return Ok(toks.join(" "));
    }
    Err(Error::invalid(format!(
        "`{reduced}` is not a synthetic question"
    )))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthSpec {
    /// Sessions in each unlabeled pool.
    pub n_sessions: usize,
    pub turns: usize,
    pub labeled_sessions: usize,
    pub test_sessions: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(n_sessions: usize, turns: usize, seed: u64) -> Self {
        SynthSpec {
            n_sessions,
            turns,
            labeled_sessions: 16,
            test_sessions: 100,
            seed,
        }
    }
}

/// One reduced query with its history and full form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthTriple {
    pub history: Vec<String>,
    pub reduced: String,
    pub full: String,
}

/// The four splits as canonical sessions. Labeled and test sessions carry the
/// full form as the rewrite of every turn after the first.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub labeled: Vec<Session>,
    pub pool_s: Vec<Session>,
    pub pool_r: Vec<Session>,
    pub test: Vec<Session>,
}

impl SyntheticData {
    pub fn labeled_examples(&self) -> Vec<LabeledExample> {
        crate::dataio::to_labeled(&self.labeled)
    }

    pub fn test_examples(&self) -> Vec<LabeledExample> {
        crate::dataio::to_labeled(&self.test)
    }
}

struct Draft {
    full: Vec<String>,
    reduced: Vec<String>,
}

fn draft(world: &SyntheticWorld, turns: usize, rng: &mut ChaCha8Rng) -> Draft {
    let (entity, tag) = world.entities.choose(rng).expect("world has entities");
    let mut attrs = ATTRIBUTES.to_vec();
    attrs.shuffle(rng);
    let mut full = Vec::with_capacity(turns);
    let mut reduced = Vec::with_capacity(turns);
    for (k, attr) in attrs.iter().take(turns).enumerate() {
        let t = rng.random_range(0..TEMPLATES.len());
        if k == 0 {
            let f = world.full(t, attr, entity);
            full.push(f.clone());
            reduced.push(f);
        } else if rng.random_bool(PRONOUN_RATE) {
            full.push(world.full(t, attr, entity));
            reduced.push(world.pronoun(t, attr, *tag));
        } else {
            full.push(world.full(0, attr, entity));
            reduced.push(world.ellipsis(attr));
        }
    }
    Draft { full, reduced }
}

fn labeled_session(id: String, d: &Draft) -> Result<Session> {
    let turns = d
        .reduced
        .iter()
        .zip(&d.full)
        .enumerate()
        .map(|(k, (r, f))| Turn::new(r, (k > 0).then_some(f.as_str()), None))
        .collect::<Result<Vec<_>>>()?;
    Session::new(id, turns)
}

fn query_session(id: String, queries: &[String]) -> Result<Session> {
    Session::new(
        id,
        queries
            .iter()
            .map(|q| Turn::query(q))
            .collect::<Result<Vec<_>>>()?,
    )
}

pub fn synth_generate(n_sessions: usize, turns: usize, seed: u64) -> Result<SyntheticData> {
    synth_generate_with(&SynthSpec::new(n_sessions, turns, seed))
}

/// Deterministic synthetic splits. The Simplifier pool holds full forms only;
/// the Rewriter pool holds reduced forms after the first turn. Session ids are
/// disjoint across splits by prefix.
pub fn synth_generate_with(spec: &SynthSpec) -> Result<SyntheticData> {
    if spec.n_sessions == 0 {
        return Err(Error::config("n_sessions", "must be at least 1"));
    }
    if !(1..=ATTRIBUTES.len()).contains(&spec.turns) {
        return Err(Error::config(
            "turns",
            format!("must lie in 1..={}", ATTRIBUTES.len()),
        ));
    }
    let world = SyntheticWorld::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut split = |prefix: &str, count: usize, f: &dyn Fn(String, &Draft) -> Result<Session>| {
        (0..count)
            .map(|i| {
                f(
                    format!("synth-{prefix}-{i:05}"),
                    &draft(world, spec.turns, &mut rng),
                )
            })
            .collect::<Result<Vec<_>>>()
    };
    let labeled = split("d", spec.labeled_sessions, &labeled_session)?;
    let pool_s = split("s", spec.n_sessions, &|id, d| query_session(id, &d.full))?;
    let pool_r = split("r", spec.n_sessions, &|id, d| query_session(id, &d.reduced))?;
    let test = split("t", spec.test_sessions, &labeled_session)?;
    Ok(SyntheticData {
        labeled,
        pool_s,
        pool_r,
        test,
    })
}

/// Stream of (history, reduced, full) triples for round-trip checks.
pub fn synth_triples(count: usize, turns: usize, seed: u64) -> Vec<SynthTriple> {
    let world = SyntheticWorld::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let d = draft(world, turns.max(2), &mut rng);
        for k in 1..d.full.len() {
            if out.len() == count {
                break;
            }
            out.push(SynthTriple {
                history: d.reduced[..k].to_vec(),
                reduced: d.reduced[k].clone(),
                full: d.full[k].clone(),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn h(qs: &[&str]) -> Vec<String> {
        qs.iter().map(|q| q.to_string()).collect()
    }

    #[test]
    fn oracle_inverts_pronoun_and_ellipsis() {
        assert_eq!(
            oracle_rewrite(
                &h(&["what is the color of the sun ?"]),
                "what is the size of it ?"
            )
            .unwrap(),
            "what is the size of the sun ?"
        );
        assert_eq!(
            oracle_rewrite(
                &h(&["what is the color of the moon ?"]),
                "what about the size ?"
            )
            .unwrap(),
            "what is the size of the moon ?"
        );
        assert_eq!(
            oracle_rewrite(&[], "tell me about the age of marie curie .").unwrap(),
            "tell me about the age of marie curie ."
        );
    }

    #[test]
    fn oracle_rejects_missing_antecedent_and_foreign_text() {
        assert!(oracle_rewrite(&[], "what is the size of it ?").is_err());
        assert!(oracle_rewrite(&h(&["hello there"]), "what about the age ?").is_err());
        assert!(oracle_rewrite(&[], "how do magnets work ?").is_err());
    }

    #[test]
    fn generation_is_deterministic_and_disjoint() {
        let a = synth_generate(10, 3, 1).unwrap();
        assert_eq!(a, synth_generate(10, 3, 1).unwrap());
        assert_ne!(a, synth_generate(10, 3, 2).unwrap());
        assert_eq!((a.pool_s.len(), a.pool_r.len()), (10, 10));
        let mut ids: Vec<&str> = [&a.labeled, &a.pool_s, &a.pool_r, &a.test]
            .iter()
            .flat_map(|s| s.iter().map(|x| x.session_id.as_str()))
            .collect();
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), n);
    }

    #[test]
    fn pools_have_the_right_forms() {
        let a = synth_generate(30, 3, 5).unwrap();
        let world = SyntheticWorld::standard();
        for s in &a.pool_s {
            for t in &s.turns {
                let (_, _, slot) = parse_templated(&tokenize(&t.query)).unwrap();
                assert!(world.entities.iter().any(|(n, _)| tokenize(n) == slot));
                assert!(t.rewrite.is_none());
            }
        }
        for s in &a.pool_r {
            for (k, t) in s.turns.iter().enumerate() {
                let full = oracle_rewrite(&s.history(k), &t.query).unwrap();
                assert_eq!(full == t.query, k == 0, "{}", t.query);
            }
        }
        assert_eq!(a.labeled_examples().len(), 32);
    }

    #[test]
    fn world_supports_many_distinct_sessions() {
        let world = SyntheticWorld::standard();
        assert!(world.session_capacity(3) >= 500);
        let a = synth_generate(500, 3, 1).unwrap();
        for s in a.pool_s.iter().chain(&a.pool_r) {
            let mut q: Vec<&str> = s.turns.iter().map(|t| t.query.as_str()).collect();
            q.sort_unstable();
            q.dedup();
            assert_eq!(q.len(), s.turns.len());
        }
    }

    #[test]
    fn round_trip_on_triples() {
        for t in synth_triples(2000, 4, 3) {
            assert_eq!(oracle_rewrite(&t.history, &t.reduced).unwrap(), t.full);
        }
    }
}
