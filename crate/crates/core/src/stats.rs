//! Goodness-of-fit helpers used to validate the Monte-Carlo against the
//! closed forms.

/// One-sample Kolmogorov–Smirnov statistic `sup |F_n(x) − F(x)|`.
///
/// `samples` is sorted in place.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &mut [f64], cdf: F) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples.iter().enumerate().fold(0.0f64, |d, (i, &x)| {
        let f = cdf(x);
        d.max(f - i as f64 / n).max((i + 1) as f64 / n - f)
    })
}

/// Asymptotic critical value of the one-sample KS statistic at level
/// `alpha`: `sqrt(−ln(α/2)/2) / sqrt(n)`.
pub fn ks_critical(n: usize, alpha: f64) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt() / (n as f64).sqrt()
}

/// Pearson chi-square statistic for observed counts against expected counts.
pub fn chi_square(observed: &[u64], expected: &[f64]) -> f64 {
    observed
        .iter()
        .zip(expected)
        .map(|(&o, &e)| {
            let d = o as f64 - e;
            d * d / e
        })
        .sum()
}

/// Upper 1% point of the chi-square distribution with `dof` degrees of
/// freedom, for small `dof`.
pub fn chi_square_critical_1pct(dof: usize) -> f64 {
    const TABLE: [f64; 8] = [6.635, 9.210, 11.345, 13.277, 15.086, 16.812, 18.475, 20.090];
    assert!((1..=TABLE.len()).contains(&dof), "dof {dof} not tabulated");
    TABLE[dof - 1]
}

/// Standard error of a binomial proportion.
pub fn binomial_se(p: f64, n: u64) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}
