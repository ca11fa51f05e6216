use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::contrastive::ContrastiveConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    /// Warm up on a small labeled set.
    FewShot,
    /// Warm up on rule-simplified queries from the Simplifier pool.
    ZeroShot,
}

/// Selector threshold on generation confidence (a log-likelihood).
///
/// A percentile is resolved in every iteration against the confidences of
/// that iteration's candidates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    Value(f64),
    Percentile(f64),
}

impl Threshold {
    pub const NONE_KEPT: Threshold = Threshold::Value(f64::INFINITY);
    pub const ALL_KEPT: Threshold = Threshold::Value(f64::NEG_INFINITY);

    /// Fixed value, or the given percentile of `observed`.
    pub fn resolve(self, observed: &[f64]) -> f64 {
        match self {
            Threshold::Value(v) => v,
            Threshold::Percentile(p) => percentile(observed, p),
        }
    }

    fn validate(self, field: &str) -> Result<()> {
        match self {
            Threshold::Value(v) if v.is_nan() => Err(Error::config(field, "threshold is NaN")),
            Threshold::Percentile(p) if !(0.0..=100.0).contains(&p) => {
                Err(Error::config(field, "percentile must lie in [0, 100]"))
            }
            _ => Ok(()),
        }
    }
}

/// Linear interpolation between closest ranks; `-inf` for an empty sample.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NEG_INFINITY;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (rank - lo as f64)
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Threshold::Value(v) if *v == f64::INFINITY => f.write_str("+inf"),
            Threshold::Value(v) if *v == f64::NEG_INFINITY => f.write_str("-inf"),
            Threshold::Value(v) => write!(f, "{v}"),
            Threshold::Percentile(p) => write!(f, "p{p}"),
        }
    }
}

impl FromStr for Threshold {
    type Err = Error;

    /// Accepts a number, `inf`/`+inf`/`-inf`, or `p<percentile>` such as `p60`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::invalid(format!("cannot parse threshold `{s}`"));
        if let Some(p) = s.strip_prefix('p').or_else(|| s.strip_prefix('P')) {
            return p.parse().map(Threshold::Percentile).map_err(|_| bad());
        }
        match s {
            "inf" | "+inf" => Ok(Threshold::NONE_KEPT),
            "-inf" => Ok(Threshold::ALL_KEPT),
            _ => s.parse().map(Threshold::Value).map_err(|_| bad()),
        }
    }
}

impl Serialize for Threshold {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Threshold::Value(v) if v.is_finite() => s.serialize_f64(*v),
            other => s.serialize_str(&other.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Threshold::Value(v)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoTrainConfig {
    /// Simplifier confidence threshold.
    pub s_s: Threshold,
    /// Rewriter confidence threshold.
    pub s_r: Threshold,
    /// Weight of the pseudo-data generation loss.
    pub lambda: f64,
    /// Weight of the contrastive loss.
    pub w: f64,
    pub tau: f64,
    pub max_iterations: usize,
    pub warmup_epochs: usize,
    pub iter_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub mode: Mode,
    /// Decoding cap for pseudo-labeling and evaluation.
    pub max_len: usize,
    /// Share of the warm-up set held out for per-iteration dev metrics.
    pub dev_fraction: f64,
    /// Extra invariant checks (reinitialization probes) on every iteration.
    pub audit: bool,
}

impl Default for CoTrainConfig {
    fn default() -> Self {
        CoTrainConfig {
            s_s: Threshold::Percentile(60.0),
            s_r: Threshold::Percentile(60.0),
            lambda: 0.5,
            w: 0.03,
            tau: 0.1,
            max_iterations: 3,
            warmup_epochs: 10,
            iter_epochs: 5,
            batch_size: 4,
            learning_rate: 5e-5,
            seed: 0,
            mode: Mode::FewShot,
            max_len: 32,
            dev_fraction: 0.1,
            audit: false,
        }
    }
}

impl CoTrainConfig {
    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            tau: self.tau,
            weight: self.w,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.s_s.validate("s_s")?;
        self.s_r.validate("s_r")?;
        let non_negative = [("lambda", self.lambda), ("w", self.w)];
        for (field, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be a non-negative finite number"));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("tau", "must be a positive finite number"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(
                "learning_rate",
                "must be a positive finite number",
            ));
        }
        let at_least_one = [
            ("max_iterations", self.max_iterations),
            ("warmup_epochs", self.warmup_epochs),
            ("iter_epochs", self.iter_epochs),
            ("batch_size", self.batch_size),
            ("max_len", self.max_len),
        ];
        for (field, v) in at_least_one {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return Err(Error::config("dev_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }
}
