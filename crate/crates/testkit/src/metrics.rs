//! Brute-force text metrics: explicit list scans for n-gram counting and
//! exhaustive subsequence enumeration for the longest common subsequence.

pub fn tokens(text: &str) -> Vec<String> {
    let mut spaced = String::new();
    for c in text.chars() {
        if c.is_ascii_punctuation() {
            spaced.push(' ');
            spaced.push(c);
            spaced.push(' ');
        } else {
            spaced.extend(c.to_lowercase());
        }
    }
    spaced.split_whitespace().map(str::to_string).collect()
}

fn ngrams(toks: &[String], n: usize) -> Vec<Vec<String>> {
    if toks.len() < n {
        return Vec::new();
    }
    (0..=toks.len() - n)
        .map(|i| toks[i..i + n].to_vec())
        .collect()
}

fn count(list: &[Vec<String>], item: &[String]) -> usize {
    list.iter().filter(|g| g.as_slice() == item).count()
}

/// Clipped matches between candidate and reference n-grams.
fn clipped_matches(cand: &[Vec<String>], refs: &[Vec<String>]) -> usize {
    let mut seen: Vec<&Vec<String>> = Vec::new();
    let mut total = 0;
    for g in cand {
        if seen.contains(&g) {
            continue;
        }
        seen.push(g);
        total += count(cand, g).min(count(refs, g));
    }
    total
}

pub fn bleu(candidate: &str, reference: &str, n: usize) -> f64 {
    let c = tokens(candidate);
    let r = tokens(reference);
    if c.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let cg = ngrams(&c, k);
        let rg = ngrams(&r, k);
        let m = clipped_matches(&cg, &rg) as f64;
        let t = cg.len() as f64;
        let p = if k == 1 {
            if m == 0.0 {
                return 0.0;
            }
            m / t
        } else if m == 0.0 {
            1.0 / (t + 1.0)
        } else {
            m / t
        };
        log_sum += p.ln();
    }
    let bp = if c.len() >= r.len() {
        1.0
    } else {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    };
    bp * (log_sum / n as f64).exp()
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> f64 {
    let c = tokens(candidate);
    let r = tokens(reference);
    if c.is_empty() {
        return 0.0;
    }
    let cg = ngrams(&c, n);
    let rg = ngrams(&r, n);
    if cg.is_empty() && rg.is_empty() {
        return if c == r { 1.0 } else { 0.0 };
    }
    if cg.is_empty() || rg.is_empty() {
        return 0.0;
    }
    let m = clipped_matches(&cg, &rg) as f64;
    f1(m / cg.len() as f64, m / rg.len() as f64)
}

fn is_subsequence(sub: &[&String], seq: &[String]) -> bool {
    let mut it = seq.iter();
    sub.iter().all(|s| it.any(|x| x == *s))
}

/// Longest common subsequence by enumerating every subsequence of `a`.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    assert!(a.len() <= 20, "exhaustive LCS is exponential");
    let mut best = 0;
    for mask in 0u32..(1u32 << a.len()) {
        let len = mask.count_ones() as usize;
        if len <= best {
            continue;
        }
        let sub: Vec<&String> = (0..a.len())
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| &a[i])
            .collect();
        if is_subsequence(&sub, b) {
            best = len;
        }
    }
    best
}

pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let c = tokens(candidate);
    let r = tokens(reference);
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let l = lcs_len(&c, &r) as f64;
    f1(l / c.len() as f64, l / r.len() as f64)
}

pub fn exact_match(candidate: &str, reference: &str) -> f64 {
    if tokens(candidate) == tokens(reference) {
        1.0
    } else {
        0.0
    }
}

/// Sentence-level scores averaged over the corpus, in the order
/// bleu1, bleu2, bleu4, rouge1, rouge2, rougeL, em.
pub fn corpus(pairs: &[(String, String)]) -> [f64; 7] {
    let mut acc = [0.0; 7];
    for (c, r) in pairs {
        let row = [
            bleu(c, r, 1),
            bleu(c, r, 2),
            bleu(c, r, 4),
            rouge_n(c, r, 1),
            rouge_n(c, r, 2),
            rouge_l(c, r),
            exact_match(c, r),
        ];
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    acc.map(|a| a / pairs.len() as f64)
}

/// Ten hand-written (candidate, reference) rewrite pairs shared by the
/// metric tests and the CLI evaluation tests.
pub fn golden_corpus() -> Vec<(String, String)> {
    [
        (
            "what is the size of the sun ?",
            "what is the size of the sun ?",
        ),
        ("what else", "what else can you tell"),
        ("a b c", "a c d"),
        (
            "What are some other facts about Beyoncé's voice?",
            "what are some other facts about beyoncé's voice ?",
        ),
        (
            "what is the population of it ?",
            "what is the population of australia ?",
        ),
        (
            "tell me about the history of the moon .",
            "tell me about the history of mars .",
        ),
        ("how old is she", "how old is marie curie ?"),
        (
            "when did the beatles form ?",
            "when did the beatles form and where ?",
        ),
        (
            "what about the color ?",
            "what is the color of the eiffel tower ?",
        ),
        (
            "the origin of japan what is ?",
            "what is the origin of japan ?",
        ),
    ]
    .iter()
    .map(|(a, b)| (a.to_string(), b.to_string()))
    .collect()
}
