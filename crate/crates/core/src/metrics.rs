//! Rewrite-quality metrics: sentence-level BLEU-n, ROUGE-n / ROUGE-L F1,
//! exact match, corpus averaging and a paired t-test.
//!
//! All metrics share [`tokenize`]: lowercase, ASCII punctuation split into
//! its own tokens, whitespace split.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if c.is_ascii_punctuation() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(c.to_string());
        } else {
            cur.extend(c.to_lowercase());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// (clipped matches, candidate n-gram total, reference n-gram total)
fn overlap(cand: &[String], reference: &[String], n: usize) -> (usize, usize, usize) {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let matched = c
        .iter()
        .map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (
        matched,
        cand.len().saturating_sub(n - 1).min(cand.len()),
        reference.len().saturating_sub(n - 1).min(reference.len()),
    )
}

fn bleu_tokens(cand: &[String], reference: &[String], n: usize) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let mut log_p = 0.0;
    for k in 1..=n {
        let (m, total, _) = overlap(cand, reference, k);
        let p = match (k, m) {
            (1, 0) => return 0.0,
            // add-one smoothing for empty higher orders
            (_, 0) => 1.0 / (total as f64 + 1.0),
            _ => m as f64 / total as f64,
        };
        log_p += p.ln();
    }
    let (c, r) = (cand.len() as f64, reference.len() as f64);
    let bp = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_p / n as f64).exp()
}

/// Sentence BLEU with orders 1..=n, uniform weights and brevity penalty.
pub fn bleu_n(candidate: &str, reference: &str, n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(Error::invalid(format!("BLEU order {n} outside 1..=4")));
    }
    Ok(bleu_tokens(&tokenize(candidate), &tokenize(reference), n))
}

fn f1(matched: f64, cand_total: f64, ref_total: f64) -> f64 {
    if matched == 0.0 {
        return 0.0;
    }
    let p = matched / cand_total;
    let r = matched / ref_total;
    2.0 * p * r / (p + r)
}

fn rouge_n_tokens(cand: &[String], reference: &[String], n: usize) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let (m, ct, rt) = overlap(cand, reference, n);
    if ct == 0 && rt == 0 {
        // Both too short to hold an n-gram: fall back to identity.
        return if cand == reference { 1.0 } else { 0.0 };
    }
    f1(m as f64, ct as f64, rt as f64)
}

pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> Result<f64> {
    if !(1..=2).contains(&n) {
        return Err(Error::invalid(format!("ROUGE order {n} outside 1..=2")));
    }
    Ok(rouge_n_tokens(
        &tokenize(candidate),
        &tokenize(reference),
        n,
    ))
}

pub fn lcs_length(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn rouge_l_tokens(cand: &[String], reference: &[String]) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    f1(
        lcs_length(cand, reference) as f64,
        cand.len() as f64,
        reference.len() as f64,
    )
}

pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    rouge_l_tokens(&tokenize(candidate), &tokenize(reference))
}

pub fn exact_match(candidate: &str, reference: &str) -> u8 {
    u8::from(tokenize(candidate) == tokenize(reference))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ExampleScores {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu4: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub em: f64,
}

impl ExampleScores {
    pub fn score(candidate: &str, reference: &str) -> Self {
        let c = tokenize(candidate);
        let r = tokenize(reference);
        ExampleScores {
            bleu1: bleu_tokens(&c, &r, 1),
            bleu2: bleu_tokens(&c, &r, 2),
            bleu4: bleu_tokens(&c, &r, 4),
            rouge1: rouge_n_tokens(&c, &r, 1),
            rouge2: rouge_n_tokens(&c, &r, 2),
            rouge_l: rouge_l_tokens(&c, &r),
            em: f64::from(u8::from(c == r)),
        }
    }

    fn as_array(&self) -> [f64; 7] {
        [
            self.bleu1,
            self.bleu2,
            self.bleu4,
            self.rouge1,
            self.rouge2,
            self.rouge_l,
            self.em,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu4: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub em: f64,
    pub n: usize,
    #[serde(skip)]
    pub per_example: Vec<ExampleScores>,
}

impl MetricReport {
    /// Corpus scores in key order bleu1, bleu2, bleu4, rouge1, rouge2, rougeL, em.
    pub fn scores(&self) -> [f64; 7] {
        [
            self.bleu1,
            self.bleu2,
            self.bleu4,
            self.rouge1,
            self.rouge2,
            self.rouge_l,
            self.em,
        ]
    }
}

/// Mean of sentence-level scores over all (candidate, reference) pairs.
pub fn evaluate_corpus<S: AsRef<str>>(pairs: &[(S, S)]) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty corpus"));
    }
    let per_example: Vec<ExampleScores> = pairs
        .iter()
        .map(|(c, r)| ExampleScores::score(c.as_ref(), r.as_ref()))
        .collect();
    let mut sums = [0.0; 7];
    for ex in &per_example {
        for (s, v) in sums.iter_mut().zip(ex.as_array()) {
            *s += v;
        }
    }
    let n = per_example.len();
    let m = sums.map(|s| s / n as f64);
    Ok(MetricReport {
        bleu1: m[0],
        bleu2: m[1],
        bleu4: m[2],
        rouge1: m[3],
        rouge2: m[4],
        rouge_l: m[5],
        em: m[6],
        n,
        per_example,
    })
}

/// Two-tailed p-value of the paired t statistic over `a[i] - b[i]`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid(
            "paired t-test needs two equal-length samples of size >= 2",
        ));
    }
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var <= 0.0 || !var.is_finite() {
        return Err(Error::Degenerate(
            "differences have zero variance; samples are incomparable".into(),
        ));
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(2.0 * (1.0 - dist.cdf(t.abs())))
}
