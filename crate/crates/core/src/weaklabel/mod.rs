//! Weak supervision: deterministic query simplification rules for zero-shot
//! warm-up, and a synthetic conversational world with an exact rewrite oracle.

mod lexicon;
mod rules;
mod synth;

pub use lexicon::{EntityTag, Lexicon};
pub use rules::{
    default_rules, rule_simplify, rule_simplify_with, simplify_query, EllipsisRule, PronounRule,
    SimplifyRule,
};
pub use synth::{
    oracle_rewrite, synth_generate, synth_generate_with, synth_triples, SynthSpec, SynthTriple,
    SyntheticData, SyntheticWorld, ATTRIBUTES,
};
