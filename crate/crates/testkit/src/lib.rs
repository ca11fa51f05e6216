//! Slow, obviously-correct reference implementations.
//!
//! Everything here is written independently of `cqr-core` so the test suites
//! can compare the optimized code paths against a second derivation.

pub mod contrastive;
pub mod metrics;
pub mod stats;

/// Central finite difference of `f` at `x` along coordinate `i`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut plus = x.to_vec();
    let mut minus = x.to_vec();
    plus[i] += h;
    minus[i] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Relative error used by every gradient check: |a - b| / max(|a|, |b|, floor).
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
