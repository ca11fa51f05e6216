use serde::{Deserialize, Serialize};

use crate::metrics::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntityTag {
    PersonF,
    PersonM,
    Plural,
    Other,
}

impl EntityTag {
    /// Pronoun replacing the mention in object position ("of it").
    pub fn object(self) -> &'static str {
        match self {
            EntityTag::PersonF => "her",
            EntityTag::PersonM => "him",
            EntityTag::Plural => "them",
            EntityTag::Other => "it",
        }
    }

    /// Pronoun replacing a possessive mention ("its voice").
    pub fn possessive(self) -> &'static str {
        match self {
            EntityTag::PersonF => "her",
            EntityTag::PersonM => "his",
            EntityTag::Plural => "their",
            EntityTag::Other => "its",
        }
    }
}

/// Known entity names (as token sequences) with their pronoun class.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Lexicon {
    entries: Vec<(Vec<String>, EntityTag)>,
}

impl Lexicon {
    pub fn new() -> Self {
        Lexicon::default()
    }

    pub fn insert(&mut self, name: &str, tag: EntityTag) {
        let toks = tokenize(name);
        if toks.is_empty() {
            return;
        }
        match self.entries.iter_mut().find(|(t, _)| *t == toks) {
            Some(e) => e.1 = tag,
            None => self.entries.push((toks, tag)),
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (&[String], EntityTag)> {
        self.entries.iter().map(|(t, g)| (t.as_slice(), *g))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl<'a> FromIterator<(&'a str, EntityTag)> for Lexicon {
    fn from_iter<I: IntoIterator<Item = (&'a str, EntityTag)>>(iter: I) -> Self {
        let mut lex = Lexicon::new();
        for (name, tag) in iter {
            lex.insert(name, tag);
        }
        lex
    }
}
