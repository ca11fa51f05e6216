use std::sync::OnceLock;

use super::lexicon::{EntityTag, Lexicon};
use super::synth::SyntheticWorld;
use crate::domain::{LabeledExample, Session};
use crate::metrics::tokenize;

/// A deterministic rewrite of a fully specified query into an in-context form.
pub trait SimplifyRule: Send + Sync {
    fn name(&self) -> &'static str;

    /// The simplified query, or `None` when the rule does not apply. A
    /// returned value always differs from `query`.
    fn apply(&self, history: &[String], query: &str) -> Option<String>;

    fn applies(&self, history: &[String], query: &str) -> bool {
        self.apply(history, query).is_some()
    }
}

const STOPWORDS: &[&str] = &[
    "a", "about", "an", "and", "are", "as", "at", "be", "by", "can", "did", "do", "does", "for",
    "from", "how", "i", "in", "is", "it", "me", "of", "on", "or", "some", "tell", "that", "the",
    "to", "was", "were", "what", "when", "where", "which", "who", "why", "with", "you", "?", ".",
    ",", "!", "'", "s",
];

fn is_stop(tok: &str) -> bool {
    STOPWORDS.contains(&tok)
}

fn is_word(tok: &str) -> bool {
    tok.chars().any(char::is_alphanumeric)
}

/// Same split as [`tokenize`] but with the original letter case.
fn raw_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_whitespace() || c.is_ascii_punctuation() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        } else {
            cur.push(c);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Ellipsis: "what is the color of the moon ?" after "what is the size of the
/// moon ?" becomes "what about the color ?".
///
/// Fires when the query and a history query share a prefix of at least three
/// tokens and a suffix with at least one word, and differ in between.
#[derive(Debug, Clone, Copy, Default)]
pub struct EllipsisRule;

impl EllipsisRule {
    fn against(q: &[String], h: &[String]) -> Option<String> {
        let prefix = q.iter().zip(h).take_while(|(a, b)| a == b).count();
        if prefix < 3 {
            return None;
        }
        let room = q.len().min(h.len()) - prefix;
        let suffix = q
            .iter()
            .rev()
            .zip(h.iter().rev())
            .take(room)
            .take_while(|(a, b)| a == b)
            .count();
        if !q[q.len() - suffix..].iter().any(|t| is_word(t)) {
            return None;
        }
        let middle = &q[prefix..q.len() - suffix];
        let other = &h[prefix..h.len() - suffix];
        if middle.is_empty() || other.is_empty() || middle == other {
            return None;
        }
        let mut out = vec!["what".to_string(), "about".to_string()];
        if matches!(q[prefix - 1].as_str(), "the" | "a" | "an") {
            out.push(q[prefix - 1].clone());
        }
        out.extend(middle.iter().cloned());
        out.push("?".to_string());
        Some(out.join(" "))
    }
}

impl SimplifyRule for EllipsisRule {
    fn name(&self) -> &'static str {
        "ellipsis"
    }

    fn apply(&self, history: &[String], query: &str) -> Option<String> {
        let q = tokenize(query);
        history
            .iter()
            .rev()
            .find_map(|h| Self::against(&q, &tokenize(h)))
            .filter(|out| *out != q.join(" "))
    }
}

/// Pronoun substitution: the latest mention in the query of an entity that
/// already appeared in the history is replaced by a pronoun.
///
/// Entities come from a lexicon first (with gendered and plural pronouns,
/// possessive mentions such as "beyoncé's" becoming "her"); otherwise the
/// longest content n-gram (n >= 2) shared with the history, or a single
/// capitalized non-initial token, becomes "it".
#[derive(Debug, Clone)]
pub struct PronounRule {
    lexicon: Lexicon,
}

struct Mention {
    start: usize,
    /// Tokens replaced, including a trailing "' s".
    len: usize,
    pronoun: &'static str,
}

impl PronounRule {
    pub fn new(lexicon: Lexicon) -> Self {
        PronounRule { lexicon }
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    fn in_history(name: &[String], history: &[Vec<String>]) -> bool {
        let n = name.len();
        let (head, last) = (&name[..n - 1], &name[n - 1]);
        history.iter().any(|h| {
            h.len() >= n
                && h.windows(n)
                    .any(|w| w[..n - 1] == *head && w[n - 1].starts_with(last.as_str()))
        })
    }

    fn lexicon_mention(&self, q: &[String], history: &[Vec<String>]) -> Option<Mention> {
        let mut best: Option<Mention> = None;
        for (name, tag) in self.lexicon.entries() {
            let n = name.len();
            if q.len() < n || !Self::in_history(name, history) {
                continue;
            }
            let curly = format!("{}\u{2019}s", name[n - 1]);
            for start in (0..=q.len() - n).rev() {
                let w = &q[start..start + n];
                if w[..n - 1] != name[..n - 1] {
                    continue;
                }
                let (len, possessive) = if w[n - 1] == name[n - 1] {
                    let apostrophe = q.get(start + n).map(String::as_str) == Some("'")
                        && q.get(start + n + 1).map(String::as_str) == Some("s");
                    if apostrophe {
                        (n + 2, true)
                    } else {
                        (n, false)
                    }
                } else if w[n - 1] == curly {
                    (n, true)
                } else {
                    continue;
                };
                let pronoun = if possessive {
                    tag.possessive()
                } else {
                    tag.object()
                };
                let better = match &best {
                    None => true,
                    Some(b) => start > b.start || (start == b.start && len > b.len),
                };
                if better {
                    best = Some(Mention {
                        start,
                        len,
                        pronoun,
                    });
                }
                break;
            }
        }
        best
    }

    fn ngram_mention(q: &[String], raw: &[String], history: &[Vec<String>]) -> Option<Mention> {
        for n in (2..=q.len()).rev() {
            for start in (0..=q.len() - n).rev() {
                let g = &q[start..start + n];
                if is_stop(&g[0]) || is_stop(&g[n - 1]) || !g.iter().all(|t| is_word(t)) {
                    continue;
                }
                if history.iter().any(|h| h.windows(n).any(|w| w == g)) {
                    let article = start > 0 && matches!(q[start - 1].as_str(), "the" | "a" | "an");
                    let a = usize::from(article);
                    return Some(Mention {
                        start: start - a,
                        len: n + a,
                        pronoun: EntityTag::Other.object(),
                    });
                }
            }
        }
        // a lone capitalized token, skipping the sentence-initial one
        (1..q.len()).rev().find_map(|i| {
            let capital = raw[i].chars().next().is_some_and(char::is_uppercase);
            let seen = history.iter().any(|h| h.contains(&q[i]));
            (capital && seen && !is_stop(&q[i])).then_some(Mention {
                start: i,
                len: 1,
                pronoun: EntityTag::Other.object(),
            })
        })
    }
}

impl SimplifyRule for PronounRule {
    fn name(&self) -> &'static str {
        "pronoun"
    }

    fn apply(&self, history: &[String], query: &str) -> Option<String> {
        let q = tokenize(query);
        let raw = raw_tokens(query);
        let hist: Vec<Vec<String>> = history.iter().map(|h| tokenize(h)).collect();
        let m = self
            .lexicon_mention(&q, &hist)
            .or_else(|| Self::ngram_mention(&q, &raw, &hist))?;
        let mut out: Vec<&str> = q[..m.start].iter().map(String::as_str).collect();
        out.push(m.pronoun);
        out.extend(q[m.start + m.len..].iter().map(String::as_str));
        let out = out.join(" ");
        (out != q.join(" ")).then_some(out)
    }
}

/// Lexicon of the synthetic world plus a few well-known names.
fn default_lexicon() -> Lexicon {
    let mut lex = SyntheticWorld::standard().lexicon();
    for (name, tag) in [
        ("beyoncé", EntityTag::PersonF),
        ("australia", EntityTag::Other),
    ] {
        lex.insert(name, tag);
    }
    lex
}

/// Ellipsis first, then pronoun substitution.
pub fn default_rules() -> &'static [Box<dyn SimplifyRule>] {
    static RULES: OnceLock<Vec<Box<dyn SimplifyRule>>> = OnceLock::new();
    RULES.get_or_init(|| {
        vec![
            Box::new(EllipsisRule),
            Box::new(PronounRule::new(default_lexicon())),
        ]
    })
}

/// First rule that fires on `query`, with its name.
pub fn simplify_query(history: &[String], query: &str) -> Option<(String, &'static str)> {
    default_rules()
        .iter()
        .find_map(|r| r.apply(history, query).map(|s| (s, r.name())))
}

pub fn rule_simplify(session: &Session) -> Vec<LabeledExample> {
    rule_simplify_with(default_rules(), session)
}

/// Weakly labeled (history, simplified, original) triples for every turn
/// after the first where some rule fires.
pub fn rule_simplify_with(
    rules: &[Box<dyn SimplifyRule>],
    session: &Session,
) -> Vec<LabeledExample> {
    let mut out = Vec::new();
    for t in 1..session.turns.len() {
        let history = session.history(t);
        let query = &session.turns[t].query;
        let Some(simplified) = rules.iter().find_map(|r| r.apply(&history, query)) else {
            continue;
        };
        if let Ok(ex) = LabeledExample::new(history, &simplified, &tokenize(query).join(" ")) {
            if ex.source != ex.target {
                out.push(ex);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Turn;

    fn session(queries: &[&str]) -> Session {
        Session::new(
            "s",
            queries.iter().map(|q| Turn::query(q).unwrap()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn stem_matched_country_becomes_it() {
        let s = session(&[
            "what is the australian flag ?",
            "what is the population of australia ?",
        ]);
        let ex = rule_simplify(&s);
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].source, "what is the population of it ?");
        assert_eq!(ex[0].target, "what is the population of australia ?");
        assert_eq!(
            ex[0].history,
            vec!["what is the australian flag ?".to_string()]
        );
    }

    #[test]
    fn possessive_person_becomes_her() {
        for apostrophe in ["'", "\u{2019}"] {
            let s = session(&[
                &format!("what can you tell me about beyoncé{apostrophe}s voice ?"),
                &format!("what are some other facts about beyoncé{apostrophe}s voice ?"),
            ]);
            let ex = rule_simplify(&s);
            assert_eq!(ex.len(), 1, "{apostrophe}");
            assert_eq!(ex[0].source, "what are some other facts about her voice ?");
        }
    }

    #[test]
    fn ellipsis_keeps_article() {
        let h = vec!["what is the color of the moon ?".to_string()];
        let r = EllipsisRule.apply(&h, "what is the size of the moon ?");
        assert_eq!(r.as_deref(), Some("what about the size ?"));
        let (out, name) = simplify_query(&h, "what is the size of the moon ?").unwrap();
        assert_eq!((out.as_str(), name), ("what about the size ?", "ellipsis"));
    }

    #[test]
    fn gendered_and_plural_objects() {
        let h = vec!["what is the age of the beatles ?".to_string()];
        let r = PronounRule::new(default_lexicon());
        assert_eq!(
            r.apply(&h, "tell me about the origin of the beatles .")
                .as_deref(),
            Some("tell me about the origin of them .")
        );
        let h = vec!["who was isaac newton ?".to_string()];
        assert_eq!(
            r.apply(&h, "what is the history of isaac newton ?")
                .as_deref(),
            Some("what is the history of him ?")
        );
    }

    #[test]
    fn fallbacks_without_lexicon() {
        let r = PronounRule::new(Lexicon::new());
        let h = vec!["how tall is the golden gate bridge ?".to_string()];
        assert_eq!(
            r.apply(&h, "when was the golden gate bridge built ?")
                .as_deref(),
            Some("when was it built ?")
        );
        let h = vec!["where is Kyoto ?".to_string()];
        assert_eq!(
            r.apply(&h, "how old is Kyoto ?").as_deref(),
            Some("how old is it ?")
        );
    }

    #[test]
    fn unrelated_turns_and_single_turns_yield_nothing() {
        assert!(rule_simplify(&session(&[
            "how do magnets work ?",
            "best pizza dough recipe"
        ]))
        .is_empty());
        assert!(rule_simplify(&session(&["what is the size of the sun ?"])).is_empty());
    }

    #[test]
    fn output_never_equals_input() {
        let s = session(&[
            "what is the color of the sun ?",
            "what is the color of the sun ?",
            "tell me about the sun .",
        ]);
        for ex in rule_simplify(&s) {
            assert_ne!(ex.source, ex.target);
        }
    }
}
