//! Small statistical toolkit: summaries, normal and truncated-normal laws,
//! Kolmogorov-Smirnov tests, correlation tests.

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use statrs::function::erf::erfc;

/// Mean with its standard error `sd / sqrt(n)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub se: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Summary {
        let n = xs.len();
        if n == 0 {
            return Summary { n, mean: f64::NAN, sd: f64::NAN, se: f64::NAN };
        }
        // two-pass for accuracy
        let mean = xs.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        Summary { n, mean, sd, se: sd / (n as f64).sqrt() }
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `log sum exp(xs)`; `-inf` for an empty slice.
pub fn log_sum_exp(xs: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || m.is_nan() {
        return m;
    }
    m + xs.into_iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn normal_sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// One-sided p-value `P(Z <= z)` for a standard normal statistic.
pub fn p_lower(z: f64) -> f64 {
    normal_cdf(z)
}

/// `N(mu, 1)` conditioned on `[0, inf)`.
#[derive(Debug, Clone, Copy)]
pub struct PositiveNormal {
    pub mu: f64,
}

impl PositiveNormal {
    pub fn new(mu: f64) -> Self {
        Self { mu }
    }

    /// Mean `mu + phi(mu) / Phi(mu)`.
    pub fn mean(&self) -> f64 {
        let s = normal_sf(-self.mu);
        if s > 1e-300 {
            self.mu + normal_pdf(self.mu) / s
        } else {
            // Mills ratio asymptotics deep in the lower tail
            let a = -self.mu;
            1.0 / a - 2.0 / a.powi(3)
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        let a = -self.mu;
        let z = x - self.mu;
        if a > 0.0 {
            // upper tail: work with survival functions to keep precision
            let sa = normal_sf(a);
            ((sa - normal_sf(z)) / sa).clamp(0.0, 1.0)
        } else {
            let ca = normal_cdf(a);
            ((normal_cdf(z) - ca) / (1.0 - ca)).clamp(0.0, 1.0)
        }
    }
}

impl Distribution<f64> for PositiveNormal {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let a = -self.mu;
        if a < 0.45 {
            loop {
                let z: f64 = rng.sample(StandardNormal);
                if z >= a {
                    return self.mu + z;
                }
            }
        }
        // exponential proposal with the optimal rate (Robert, 1995)
        let lambda = 0.5 * (a + (a * a + 4.0).sqrt());
        let exp = Exp::new(lambda).expect("positive rate");
        loop {
            let z = a + exp.sample(rng);
            let u: f64 = rng.random();
            if u <= (-0.5 * (z - lambda).powi(2)).exp() {
                return self.mu + z;
            }
        }
    }
}

/// Outcome of a Kolmogorov-Smirnov test.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n_eff: f64,
}

impl KsResult {
    pub fn rejects(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// Asymptotic Kolmogorov tail `P(K > lambda)` with Stephens' small-sample
/// correction applied to the statistic.
pub fn kolmogorov_p(d: f64, n_eff: f64) -> f64 {
    let s = n_eff.sqrt();
    let lambda = (s + 0.12 + 0.11 / s) * d;
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64 * lambda).powi(2)).exp();
        sum += sign * term;
        if term < 1e-16 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// One-sample test of `xs` against a continuous CDF.
pub fn ks_one_sample(xs: &[f64], cdf: impl Fn(f64) -> f64) -> KsResult {
    let v = sorted(xs);
    let n = v.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in v.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    KsResult { statistic: d, p_value: kolmogorov_p(d, n), n_eff: n }
}

/// Two-sample statistic `sup |F_a - F_b|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    ks_statistic_sorted(&sorted(a), &sorted(b))
}

fn ks_statistic_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

pub fn ks_two_sample(a: &[f64], b: &[f64]) -> KsResult {
    let d = ks_statistic(a, b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let n_eff = na * nb / (na + nb);
    KsResult { statistic: d, p_value: kolmogorov_p(d, n_eff), n_eff }
}

/// Two-sample test where `b` is only known up to an additive shift in
/// `[lo, hi]`: the statistic is minimised over shifts on a fine grid.
pub fn ks_two_sample_shift_band(a: &[f64], b: &[f64], lo: f64, hi: f64, steps: usize) -> (KsResult, f64) {
    let sa = sorted(a);
    let sb = sorted(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let n_eff = na * nb / (na + nb);
    let mut best = (f64::INFINITY, 0.0);
    let mut shifted = vec![0.0; sb.len()];
    for k in 0..=steps {
        let s = if steps == 0 { 0.5 * (lo + hi) } else { lo + (hi - lo) * k as f64 / steps as f64 };
        for (t, &x) in shifted.iter_mut().zip(&sb) {
            *t = x + s;
        }
        let d = ks_statistic_sorted(&sa, &shifted);
        if d < best.0 {
            best = (d, s);
        }
    }
    (KsResult { statistic: best.0, p_value: kolmogorov_p(best.0, n_eff), n_eff }, best.1)
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Two-sided p-value for equality of two independent correlations
/// through Fisher's z transform.
pub fn fisher_z_test(r1: f64, n1: usize, r2: f64, n2: usize) -> f64 {
    let z = (r1.atanh() - r2.atanh()) / (1.0 / (n1 as f64 - 3.0) + 1.0 / (n2 as f64 - 3.0)).sqrt();
    2.0 * normal_sf(z.abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedSource;

    #[test]
    fn summary_basics() {
        let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.sd - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((s.se - s.sd / 2.0).abs() < 1e-15);
        assert_eq!(Summary::of(&[7.0]).se, 0.0);
    }

    #[test]
    fn lse_is_stable() {
        assert!((log_sum_exp([1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(std::iter::empty::<f64>()), f64::NEG_INFINITY);
    }

    #[test]
    fn positive_normal_moments() {
        assert!((PositiveNormal::new(0.0).mean() - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-15);
        let mut rng = SeedSource::new(5).stream("tn", 0);
        for mu in [2.0, 0.0, -1.0, -6.0] {
            let d = PositiveNormal::new(mu);
            let xs: Vec<f64> = (0..40_000).map(|_| d.sample(&mut rng)).collect();
            assert!(xs.iter().all(|&x| x >= 0.0));
            let s = Summary::of(&xs);
            assert!((s.mean - d.mean()).abs() < 4.0 * s.se, "mu={mu}: {} vs {}", s.mean, d.mean());
            assert!(!ks_one_sample(&xs, |x| d.cdf(x)).rejects(0.001));
        }
    }

    #[test]
    fn kolmogorov_tail_values() {
        // P(K > 1.36) ~ 0.05 and P(K > 1.63) ~ 0.01 in the large-n limit
        assert!((kolmogorov_p(1.358 / 1e4, 1e8) - 0.05).abs() < 2e-3);
        assert!((kolmogorov_p(1.628 / 1e4, 1e8) - 0.01).abs() < 1e-3);
    }

    #[test]
    fn ks_detects_shift() {
        let mut rng = SeedSource::new(9).stream("ks", 0);
        let a: Vec<f64> = (0..5000).map(|_| rng.sample(StandardNormal)).collect();
        let b: Vec<f64> = (0..5000).map(|_| rng.sample(StandardNormal)).collect();
        assert!(!ks_two_sample(&a, &b).rejects(0.01));
        let c: Vec<f64> = b.iter().map(|x| x + 0.2).collect();
        assert!(ks_two_sample(&a, &c).rejects(0.01));
        let (r, s) = ks_two_sample_shift_band(&a, &c, -0.3, -0.1, 40);
        assert!(!r.rejects(0.01));
        assert!((s + 0.2).abs() < 0.1);
    }

    #[test]
    fn ks_statistic_handles_ties() {
        assert_eq!(ks_statistic(&[0.0, 0.0, 1.0], &[0.0, 0.0, 1.0]), 0.0);
        assert_eq!(ks_statistic(&[0.0], &[1.0]), 1.0);
    }
}
