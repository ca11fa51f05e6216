use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::tokenize;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const SEP: usize = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<unk>", "<bos>", "<eos>", "<sep>"];

/// Word-level vocabulary over [`tokenize`] output. Unknown words map to `<unk>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Specials followed by every distinct token of `texts` in sorted order.
    pub fn build<I, S>(texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set = BTreeSet::new();
        for t in texts {
            set.extend(tokenize(t.as_ref()));
        }
        let words = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(set.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())))
            .collect();
        Self::from_words(words).expect("built vocabulary is well formed")
    }

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < SPECIALS.len() || words[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Checkpoint(
                "vocabulary must start with the reserved symbols".into(),
            ));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Checkpoint(format!(
                    "duplicate vocabulary entry `{w}`"
                )));
            }
        }
        Ok(Vocab { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.words[i].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(words: Vec<String>) -> Result<Self> {
        Vocab::from_words(words)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_first_and_unknowns_map_to_unk() {
        let v = Vocab::build(["What is it ?", "tell me"]);
        assert_eq!(&v.words()[..5], &SPECIALS.map(String::from));
        assert_eq!(v.encode("what is zebra ?")[2], UNK);
        assert_eq!(v.decode(&v.encode("What is it ?")), "what is it ?");
    }

    #[test]
    fn serde_round_trip_and_validation() {
        let v = Vocab::build(["a b c"]);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocab>(&json).unwrap(), v);
        assert!(serde_json::from_str::<Vocab>(r#"["a","b"]"#).is_err());
    }
}
