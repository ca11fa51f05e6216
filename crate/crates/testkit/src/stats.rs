//! Paired t-test p-value by direct numerical integration of the Student-t
//! density, independent of any special-function library.

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7.
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

fn t_density(t: f64, df: f64) -> f64 {
    let c =
        ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0) - 0.5 * (df * std::f64::consts::PI).ln();
    (c - (df + 1.0) / 2.0 * (1.0 + t * t / df).ln()).exp()
}

/// Two-tailed p-value: 1 - 2 * integral_0^|t| density, composite Simpson.
pub fn two_tailed_p(t: f64, df: f64) -> f64 {
    let steps = 200_000;
    let b = t.abs();
    let h = b / steps as f64;
    let mut s = t_density(0.0, df) + t_density(b, df);
    for i in 1..steps {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * t_density(i as f64 * h, df);
    }
    (1.0 - 2.0 * s * h / 3.0).max(0.0)
}

pub fn paired_t(a: &[f64], b: &[f64]) -> (f64, f64) {
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let t = mean / (var / n).sqrt();
    (t, two_tailed_p(t, n - 1.0))
}
