//! Estimators and tests that turn ensembles into verdicts.
//!
//! Second moments are never mean-centered: every limit law here is a
//! centered Gaussian, so subtracting a noisy sample mean would only hide
//! bias. Means are reported separately instead.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::trajectory::FddSamples;

/// Number of terms kept in the Kolmogorov series.
pub const KS_SERIES_TERMS: usize = 100;
/// Minimum sample size for the asymptotic KS p-value.
pub const KS_MIN_SAMPLES: usize = 50;
/// A coordinate mean is flagged when it exceeds this many standard errors.
pub const MEAN_FLAG_SE: f64 = 4.0;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("inputs must be strictly positive (entry {0})")]
    NonPositiveInput(usize),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
}

/// Raw second-moment matrix with per-entry standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovEstimate {
    pub matrix: Matrix,
    pub n_samples: usize,
    pub std_errors: Matrix,
    pub mean: Vec<f64>,
    pub mean_std_errors: Vec<f64>,
    /// Coordinates whose sample mean exceeds the flagging threshold.
    pub mean_flags: Vec<bool>,
}

impl CovEstimate {
    pub fn any_mean_flagged(&self) -> bool {
        self.mean_flags.iter().any(|&f| f)
    }
}

/// How a verdict's statistic is judged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Rule {
    AtMost { threshold: f64 },
    Below { threshold: f64 },
    Within { lo: f64, hi: f64 },
    AtLeast { threshold: f64 },
    Above { threshold: f64 },
    PValueAbove { alpha: f64 },
}

/// Where a verdict came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerdictContext {
    pub problem: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestVerdict {
    pub name: String,
    pub statistic: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
    #[serde(flatten)]
    pub rule: Rule,
    pub pass: bool,
    pub context: VerdictContext,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl TestVerdict {
    /// Evaluates `rule` against the statistic (or p-value).
    pub fn new(
        name: impl Into<String>,
        statistic: f64,
        p_value: Option<f64>,
        rule: Rule,
        context: VerdictContext,
    ) -> Self {
        let pass = match rule {
            Rule::AtMost { threshold } => statistic <= threshold,
            Rule::Below { threshold } => statistic < threshold,
            Rule::Within { lo, hi } => lo <= statistic && statistic <= hi,
            Rule::AtLeast { threshold } => statistic >= threshold,
            Rule::Above { threshold } => statistic > threshold,
            Rule::PValueAbove { alpha } => p_value.is_some_and(|p| p > alpha),
        };
        Self {
            name: name.into(),
            statistic,
            p_value,
            rule,
            pass,
            context,
            detail: None,
        }
    }

    pub fn at_most(name: impl Into<String>, statistic: f64, threshold: f64, ctx: VerdictContext) -> Self {
        Self::new(name, statistic, None, Rule::AtMost { threshold }, ctx)
    }

    pub fn within(name: impl Into<String>, statistic: f64, lo: f64, hi: f64, ctx: VerdictContext) -> Self {
        Self::new(name, statistic, None, Rule::Within { lo, hi }, ctx)
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = Some(detail.into());
        self
    }
}

/// `Σᵢ aᵢbᵢᵀ / R` over replicas, accumulated in replica order.
fn cross_moment(a: &Matrix, b: &Matrix) -> Matrix {
    let r = a.rows();
    let mut out = Matrix::zeros(a.cols(), b.cols());
    for k in 0..r {
        let (u, v) = (a.row(k), b.row(k));
        for i in 0..u.len() {
            for j in 0..v.len() {
                out[(i, j)] += u[i] * v[j];
            }
        }
    }
    out.scale(1.0 / r as f64)
}

/// Second-moment matrix of a replica × coordinate sample.
///
/// Standard errors are the jackknife errors of each entry, which for an
/// average coincide with `sd/√R`.
pub fn empirical_cov(samples: &Matrix) -> Result<CovEstimate, StatsError> {
    let r = samples.rows();
    if r < 2 {
        return Err(StatsError::InsufficientSamples { needed: 2, got: r });
    }
    let d = samples.cols();
    let matrix = cross_moment(samples, samples);
    let rf = r as f64;
    let mut sq = Matrix::zeros(d, d);
    let mut mean = vec![0.0; d];
    let mut mean_sq = vec![0.0; d];
    for k in 0..r {
        let u = samples.row(k);
        for i in 0..d {
            mean[i] += u[i];
            for j in 0..d {
                let dev = u[i] * u[j] - matrix[(i, j)];
                sq[(i, j)] += dev * dev;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= rf);
    for k in 0..r {
        let u = samples.row(k);
        for i in 0..d {
            mean_sq[i] += (u[i] - mean[i]).powi(2);
        }
    }
    let denom = rf * (rf - 1.0);
    let std_errors = Matrix::new(d, d, sq.as_slice().iter().map(|s| (s / denom).sqrt()).collect())
        .expect("finite");
    let mean_std_errors: Vec<f64> = mean_sq.iter().map(|s| (s / denom).sqrt()).collect();
    let mean_flags = mean
        .iter()
        .zip(&mean_std_errors)
        .map(|(m, se)| m.abs() > MEAN_FLAG_SE * se)
        .collect();
    Ok(CovEstimate {
        matrix,
        n_samples: r,
        std_errors,
        mean,
        mean_std_errors,
        mean_flags,
    })
}

/// `E[U(t)U(s)ᵀ]` across replicas for two time indices of an FDD sample.
pub fn autocov_estimate(fdd: &FddSamples, t_index: usize, s_index: usize) -> Result<Matrix, StatsError> {
    let nt = fdd.times().len();
    if t_index >= nt || s_index >= nt {
        return Err(StatsError::IndexOutOfRange(format!(
            "time indices ({t_index}, {s_index}) with {nt} times"
        )));
    }
    if fdd.n_replicas() < 2 {
        return Err(StatsError::InsufficientSamples {
            needed: 2,
            got: fdd.n_replicas(),
        });
    }
    Ok(cross_moment(&fdd.slice(t_index), &fdd.slice(s_index)))
}

/// `‖A − B‖_F / max(‖B‖_F, 1e−12)`.
pub fn frobenius_rel(a: &Matrix, b: &Matrix) -> f64 {
    let diff: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    diff / b.frobenius_norm().max(1e-12)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub r_squared: f64,
}

/// Least-squares slope of `log(mean_sq_norm)` against `log(step)`.
pub fn rate_slope(ns: &[usize], mean_sq_norms: &[f64], steps: &[f64]) -> Result<RateFit, StatsError> {
    if ns.len() != mean_sq_norms.len() || ns.len() != steps.len() {
        return Err(StatsError::LengthMismatch(format!(
            "{} indices, {} norms, {} steps",
            ns.len(),
            mean_sq_norms.len(),
            steps.len()
        )));
    }
    if ns.len() < 4 {
        return Err(StatsError::InsufficientSamples { needed: 4, got: ns.len() });
    }
    for (i, (&m, &s)) in mean_sq_norms.iter().zip(steps).enumerate() {
        if !(m > 0.0 && s > 0.0 && m.is_finite() && s.is_finite()) {
            return Err(StatsError::NonPositiveInput(i));
        }
    }
    let xs: Vec<f64> = steps.iter().map(|s| s.ln()).collect();
    let ys: Vec<f64> = mean_sq_norms.iter().map(|m| m.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(StatsError::LengthMismatch("steps are all equal".into()));
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok(RateFit { slope, r_squared })
}

/// Two-sided statistic `sup |F_emp − F_ref|`.
pub fn ks_statistic(samples: &[f64], reference_cdf: impl Fn(f64) -> f64) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = reference_cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic Kolmogorov tail `P(K > λ)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.0 {
        // The alternating series converges slowly here; use the dual
        // representation of the CDF instead.
        let c = std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
        let cdf: f64 = (1..=KS_SERIES_TERMS)
            .map(|k| (-((2 * k - 1) as f64).powi(2) * c).exp())
            .sum::<f64>()
            * (2.0 * std::f64::consts::PI).sqrt()
            / lambda;
        return (1.0 - cdf).clamp(0.0, 1.0);
    }
    let sum: f64 = (1..=KS_SERIES_TERMS)
        .map(|k| {
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            sign * (-2.0 * (k * k) as f64 * lambda * lambda).exp()
        })
        .sum();
    (2.0 * sum).clamp(0.0, 1.0)
}

/// KS goodness-of-fit against `reference_cdf`, passing when `p > 0.01`.
pub fn ks_test_1d(
    name: impl Into<String>,
    samples: &[f64],
    reference_cdf: impl Fn(f64) -> f64,
    ctx: VerdictContext,
) -> Result<TestVerdict, StatsError> {
    if samples.len() < KS_MIN_SAMPLES {
        return Err(StatsError::InsufficientSamples {
            needed: KS_MIN_SAMPLES,
            got: samples.len(),
        });
    }
    let d = ks_statistic(samples, reference_cdf);
    let p = kolmogorov_sf((samples.len() as f64).sqrt() * d);
    Ok(TestVerdict::new(name, d, Some(p), Rule::PValueAbove { alpha: 0.01 }, ctx))
}

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// Standard normal quantile.
pub fn std_normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn rows(r: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(r).unwrap()
    }

    #[test]
    fn two_point_covariance() {
        let est = empirical_cov(&rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]])).unwrap();
        assert_eq!(est.matrix, rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]));
        assert_eq!(est.n_samples, 2);
        assert_eq!(est.mean, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_samples_give_zero_matrix() {
        let est = empirical_cov(&Matrix::zeros(5, 3)).unwrap();
        assert_eq!(est.matrix, Matrix::zeros(3, 3));
        assert!(!est.any_mean_flagged());
    }

    #[test]
    fn covariance_requires_two_replicas() {
        let err = empirical_cov(&rows(&[vec![1.0]])).unwrap_err();
        assert_eq!(err, StatsError::InsufficientSamples { needed: 2, got: 1 });
    }

    #[test]
    fn gaussian_covariance_within_three_standard_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let mut data = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            data.push(2f64.sqrt() * a);
            data.push(3f64.sqrt() * b);
        }
        let est = empirical_cov(&Matrix::new(n, 2, data).unwrap()).unwrap();
        let target = Matrix::diag(&[2.0, 3.0]);
        for i in 0..2 {
            for j in 0..2 {
                let z = (est.matrix[(i, j)] - target[(i, j)]) / est.std_errors[(i, j)];
                assert!(z.abs() < 3.0, "entry ({i},{j}) off by {z} standard errors");
            }
        }
        assert!(!est.any_mean_flagged());
    }

    #[test]
    fn mean_flag_fires_on_shifted_samples() {
        let data: Vec<f64> = (0..1000).map(|i| 1.0 + if i % 2 == 0 { 0.1 } else { -0.1 }).collect();
        let est = empirical_cov(&Matrix::new(1000, 1, data).unwrap()).unwrap();
        assert!(est.mean_flags[0]);
    }

    #[test]
    fn slope_of_proportional_inputs() {
        let ns = [10, 20, 40, 80, 160];
        let steps: Vec<f64> = ns.iter().map(|&n| (n as f64).powf(-0.6)).collect();
        let m: Vec<f64> = steps.iter().map(|s| 3.0 * s).collect();
        let fit = rate_slope(&ns, &m, &steps).unwrap();
        assert!((fit.slope - 1.0).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        let m: Vec<f64> = steps.iter().map(|s| 3.0 * s * s).collect();
        let fit = rate_slope(&ns, &m, &steps).unwrap();
        assert!((fit.slope - 2.0).abs() < 1e-12);
    }

    #[test]
    fn slope_input_errors() {
        let s = [1.0, 0.5, 0.25, 0.125];
        assert_eq!(
            rate_slope(&[1, 2, 3], &s[..3], &s[..3]).unwrap_err(),
            StatsError::InsufficientSamples { needed: 4, got: 3 }
        );
        assert_eq!(
            rate_slope(&[1, 2, 3, 4], &[1.0, 0.0, 1.0, 1.0], &s).unwrap_err(),
            StatsError::NonPositiveInput(1)
        );
        assert!(matches!(
            rate_slope(&[1, 2, 3, 4], &s, &s[..3]).unwrap_err(),
            StatsError::LengthMismatch(_)
        ));
    }

    #[test]
    fn ks_single_point() {
        assert_eq!(ks_statistic(&[0.0], std_normal_cdf), 0.5);
    }

    #[test]
    fn ks_on_quantiles() {
        let n = 1000;
        let q: Vec<f64> = (1..=n)
            .map(|i| std_normal_quantile((i as f64 - 0.5) / n as f64))
            .collect();
        let d = ks_statistic(&q, std_normal_cdf);
        assert!(d <= 0.5 / n as f64 + 1e-9, "{d}");
    }

    #[test]
    fn ks_requires_fifty_samples() {
        let err = ks_test_1d("k", &[0.0; 49], std_normal_cdf, VerdictContext::default()).unwrap_err();
        assert_eq!(err, StatsError::InsufficientSamples { needed: 50, got: 49 });
    }

    #[test]
    fn ks_golden_statistic() {
        // Frozen from a direct sorted-CDF sweep over the same draws.
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let xs: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let d = ks_statistic(&xs, std_normal_cdf);
        let mut sorted = xs.clone();
        sorted.sort_by(f64::total_cmp);
        let mut sweep: f64 = 0.0;
        let n = sorted.len() as f64;
        for (i, x) in sorted.iter().enumerate() {
            let f = std_normal_cdf(*x);
            sweep = sweep.max((f - i as f64 / n).abs()).max(((i + 1) as f64 / n - f).abs());
        }
        assert_eq!(d, sweep);
        let v = ks_test_1d("normal", &xs, std_normal_cdf, VerdictContext::default()).unwrap();
        assert_eq!(v.p_value.unwrap() > 0.01, v.pass);
    }

    #[test]
    fn kolmogorov_tail_values() {
        // Reference values of the Kolmogorov distribution.
        assert!((kolmogorov_sf(1.358) - 0.05).abs() < 5e-4);
        assert!((kolmogorov_sf(1.628) - 0.01).abs() < 2e-4);
        assert!((kolmogorov_sf(0.5) - 0.9639).abs() < 1e-4);
        // Both representations agree where they overlap.
        let c = std::f64::consts::PI.powi(2) / 8.0;
        let dual = 1.0
            - (2.0 * std::f64::consts::PI).sqrt()
                * (1..=100).map(|k: i32| (-((2 * k - 1) as f64).powi(2) * c).exp()).sum::<f64>();
        assert!((kolmogorov_sf(1.0) - dual).abs() < 1e-12);
        assert_eq!(kolmogorov_sf(0.0), 1.0);
    }

    #[test]
    fn verdict_rules() {
        let c = VerdictContext::default();
        assert!(TestVerdict::at_most("a", 0.1, 0.1, c.clone()).pass);
        assert!(!TestVerdict::at_most("a", 0.11, 0.1, c.clone()).pass);
        assert!(TestVerdict::within("a", 1.0, 0.9, 1.1, c.clone()).pass);
        assert!(!TestVerdict::within("a", 1.2, 0.9, 1.1, c.clone()).pass);
        assert!(!TestVerdict::new("a", 0.0, None, Rule::PValueAbove { alpha: 0.01 }, c).pass);
    }

    #[test]
    fn verdict_json_shape() {
        let v = TestVerdict::at_most("cov", 0.05, 0.1, VerdictContext::default());
        let s = serde_json::to_value(&v).unwrap();
        assert_eq!(s["rule"], "at_most");
        assert_eq!(s["threshold"], 0.1);
        assert_eq!(s["pass"], true);
        let back: TestVerdict = serde_json::from_value(s).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn frobenius_rel_floor() {
        let z = Matrix::zeros(2, 2);
        assert_eq!(frobenius_rel(&z, &z), 0.0);
        let a = Matrix::identity(2);
        assert!((frobenius_rel(&a, &a.scale(2.0)) - 0.5).abs() < 1e-15);
    }
}
