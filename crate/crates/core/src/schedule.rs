//! Step-size sequences for the fast (α) and slow (β) iterates.
//!
//! Besides point evaluation this module owns the time-interpolation maps
//! used to place discrete iterates on a continuous clock: partial step sums
//! `Γ_{n,m} = Σ_{k=n}^{m-1} step_k` and their generalized inverse
//! `N(n, t) = max{m ≥ n : Γ_{n,m} ≤ t}`.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on the stabilization of `1/β_{n+1} − 1/β_n` for table schedules.
pub const TAIL_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("invalid schedule parameter: {0}")]
    InvalidParameter(String),
    #[error("index {index} beyond the {len} stored table steps")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("1/β_(n+1) − 1/β_n does not stabilize in the table tail (spread {spread:e})")]
    NoLimit { spread: f64 },
}

/// Which step sequence a time map refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Alpha,
    Beta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScheduleKind {
    /// `α_n = α₀(n+1)^{−a}`, `β_n = β₀(n+1)^{−b}`.
    Polynomial {
        alpha0: f64,
        a: f64,
        beta0: f64,
        b: f64,
    },
    Table { alpha: Vec<f64>, beta: Vec<f64> },
}

/// A pair of step-size sequences plus a lazily grown cache of partial sums.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "ScheduleKind", into = "ScheduleKind")]
pub struct StepSchedule {
    kind: ScheduleKind,
    #[serde(skip)]
    sums: Arc<SumCache>,
}

impl PartialEq for StepSchedule {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
    }
}

impl TryFrom<ScheduleKind> for StepSchedule {
    type Error = ScheduleError;

    fn try_from(kind: ScheduleKind) -> Result<Self, ScheduleError> {
        match &kind {
            ScheduleKind::Polynomial {
                alpha0,
                a,
                beta0,
                b,
            } => {
                check_positive("alpha0", *alpha0)?;
                check_positive("beta0", *beta0)?;
                check_exponent("a", *a)?;
                check_exponent("b", *b)?;
            }
            ScheduleKind::Table { alpha, beta } => {
                check_table("alpha", alpha)?;
                check_table("beta", beta)?;
            }
        }
        Ok(Self {
            kind,
            sums: Arc::default(),
        })
    }
}

impl From<StepSchedule> for ScheduleKind {
    fn from(s: StepSchedule) -> Self {
        s.kind
    }
}

fn check_positive(name: &str, v: f64) -> Result<(), ScheduleError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(ScheduleError::InvalidParameter(format!(
            "{name} must be positive and finite, got {v}"
        )))
    }
}

fn check_exponent(name: &str, v: f64) -> Result<(), ScheduleError> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(ScheduleError::InvalidParameter(format!(
            "exponent {name} must lie in (0, 1], got {v}"
        )))
    }
}

fn check_table(name: &str, v: &[f64]) -> Result<(), ScheduleError> {
    if v.is_empty() {
        return Err(ScheduleError::InvalidParameter(format!(
            "{name} table is empty"
        )));
    }
    for (i, s) in v.iter().enumerate() {
        check_positive(name, *s)?;
        if i > 0 && *s > v[i - 1] {
            return Err(ScheduleError::InvalidParameter(format!(
                "{name} table increases at index {i}"
            )));
        }
    }
    Ok(())
}

/// Step sizes at one index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Steps {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl StepSchedule {
    pub fn polynomial(alpha0: f64, a: f64, beta0: f64, b: f64) -> Result<Self, ScheduleError> {
        ScheduleKind::Polynomial {
            alpha0,
            a,
            beta0,
            b,
        }
        .try_into()
    }

    pub fn table(alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self, ScheduleError> {
        ScheduleKind::Table { alpha, beta }.try_into()
    }

    pub fn kind(&self) -> &ScheduleKind {
        &self.kind
    }

    /// Number of stored steps for table schedules, `None` when unbounded.
    pub fn len(&self) -> Option<usize> {
        match &self.kind {
            ScheduleKind::Polynomial { .. } => None,
            ScheduleKind::Table { alpha, beta } => Some(alpha.len().min(beta.len())),
        }
    }

    pub fn step_at(&self, n: usize) -> Result<Steps, ScheduleError> {
        let alpha = self.step(Scale::Alpha, n)?;
        let beta = self.step(Scale::Beta, n)?;
        Ok(Steps {
            alpha,
            beta,
            kappa: beta / alpha,
        })
    }

    /// A single step of one sequence.
    pub fn step(&self, scale: Scale, n: usize) -> Result<f64, ScheduleError> {
        match &self.kind {
            ScheduleKind::Polynomial {
                alpha0,
                a,
                beta0,
                b,
            } => {
                let (c, e) = match scale {
                    Scale::Alpha => (alpha0, a),
                    Scale::Beta => (beta0, b),
                };
                Ok(c * ((n + 1) as f64).powf(-e))
            }
            ScheduleKind::Table { alpha, beta } => {
                let v = match scale {
                    Scale::Alpha => alpha,
                    Scale::Beta => beta,
                };
                v.get(n).copied().ok_or(ScheduleError::IndexOutOfRange {
                    index: n,
                    len: v.len(),
                })
            }
        }
    }

    /// `β̃ = lim (1/β_{n+1} − 1/β_n)`.
    pub fn beta_tilde(&self) -> Result<f64, ScheduleError> {
        match &self.kind {
            ScheduleKind::Polynomial { beta0, b, .. } => Ok(if *b == 1.0 { beta0.recip() } else { 0.0 }),
            ScheduleKind::Table { beta, .. } => {
                if beta.len() < 3 {
                    return Err(ScheduleError::NoLimit {
                        spread: f64::INFINITY,
                    });
                }
                let window = (beta.len() - 1).min(10);
                let diffs: Vec<f64> = beta[beta.len() - window - 1..]
                    .windows(2)
                    .map(|w| w[1].recip() - w[0].recip())
                    .collect();
                let lo = diffs.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = diffs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if hi - lo > TAIL_TOL {
                    return Err(ScheduleError::NoLimit { spread: hi - lo });
                }
                Ok(diffs[diffs.len() - 1].max(0.0))
            }
        }
    }

    /// `Γ_{n,m} = Σ_{k=n}^{m-1} step_k`, zero when `m ≤ n`.
    pub fn gamma_sum(&self, scale: Scale, n: usize, m: usize) -> Result<f64, ScheduleError> {
        if m <= n {
            return Ok(0.0);
        }
        self.sums.gamma(self, scale, n, m)
    }

    /// `[Γ_{n,n}, Γ_{n,n+1}, …]` with at least `len` entries, shared with
    /// the cache that backs [`locate`](Self::locate).
    pub fn partial_sums(&self, scale: Scale, n: usize, len: usize) -> Result<Arc<Vec<f64>>, ScheduleError> {
        self.sums.table(self, scale, n, len.max(1), None)
    }

    /// Returns `(N, t̲)` with `N = max{m ≥ n : Γ_{n,m} ≤ t}` and `t̲ = Γ_{n,N}`.
    pub fn locate(&self, scale: Scale, n: usize, t: f64) -> Result<(usize, f64), ScheduleError> {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(ScheduleError::InvalidParameter(format!(
                "locate needs a finite nonnegative time, got {t}"
            )));
        }
        self.sums.locate(self, scale, n, t)
    }

    /// Checks the step-size conditions given the caller-declared Hölder
    /// orders.
    ///
    /// Polynomial schedules are certified analytically. Table schedules only
    /// have a finite prefix, so each condition is judged from the stored tail
    /// and the verdicts are marked heuristic.
    pub fn validate(
        &self,
        delta_h: f64,
        delta_f: f64,
        delta_g: f64,
    ) -> Result<AssumptionReport, ScheduleError> {
        if !(0.5..=1.0).contains(&delta_h) {
            return Err(ScheduleError::InvalidParameter(format!(
                "delta_H must lie in [0.5, 1], got {delta_h}"
            )));
        }
        for (name, d) in [("delta_F", delta_f), ("delta_G", delta_g)] {
            if !(d > 0.0 && d <= 1.0) {
                return Err(ScheduleError::InvalidParameter(format!(
                    "{name} must lie in (0, 1], got {d}"
                )));
            }
        }
        let conditions = match &self.kind {
            ScheduleKind::Polynomial { a, b, .. } => polynomial_conditions(*a, *b, delta_h, delta_f, delta_g),
            ScheduleKind::Table { .. } => self.table_conditions(delta_h, delta_f, delta_g)?,
        };
        let pass = conditions.iter().all(|c| c.pass);
        Ok(AssumptionReport { conditions, pass })
    }

    fn table_conditions(&self, delta_h: f64, delta_f: f64, delta_g: f64) -> Result<Vec<ConditionVerdict>, ScheduleError> {
        let len = self.len().unwrap_or(0);
        if len < MIN_TABLE_FOR_VALIDATION {
            return Err(ScheduleError::InvalidParameter(format!(
                "table schedules need at least {MIN_TABLE_FOR_VALIDATION} steps for validation, got {len}"
            )));
        }
        let ScheduleKind::Table { alpha, beta } = &self.kind else {
            unreachable!("table schedule")
        };
        let (alpha, beta) = (&alpha[..len], &beta[..len]);
        let kappa: Vec<f64> = alpha.iter().zip(beta).map(|(a, b)| b / a).collect();
        let tail = len - len / 4;
        let nonincreasing = |v: &[f64]| v.windows(2).all(|w| w[1] <= w[0]);

        let cond_i = {
            let ok = nonincreasing(alpha)
                && nonincreasing(beta)
                && nonincreasing(&kappa[tail..])
                && kappa[len - 1] < kappa[0];
            let reason = format!(
                "steps nonincreasing over the table and kappa falls from {:e} to {:e}",
                kappa[0],
                kappa[len - 1]
            );
            ConditionVerdict::heuristic("i", ok, reason)
        };

        let cond_ii = match self.beta_tilde() {
            Ok(bt) => ConditionVerdict::heuristic(
                "ii",
                true,
                format!("1/beta_(n+1) - 1/beta_n settles at beta_tilde = {bt} in the table tail"),
            ),
            Err(e) => ConditionVerdict::heuristic("ii", false, e.to_string()),
        };

        // |α_{n−1}/α_n − 1|/β_n and |κ_{n−1}/κ_n − 1|/β_n must stay bounded:
        // the last half of the tail may not exceed twice the first half.
        let cond_iii = {
            let ratios: Vec<f64> = (tail.max(1)..len)
                .map(|n| {
                    let ra = (alpha[n - 1] / alpha[n] - 1.0).abs();
                    let rk = (kappa[n - 1] / kappa[n] - 1.0).abs();
                    ra.max(rk) / beta[n]
                })
                .collect();
            let mid = ratios.len() / 2;
            let early = ratios[..mid].iter().copied().fold(0.0, f64::max);
            let late = ratios[mid..].iter().copied().fold(0.0, f64::max);
            ConditionVerdict::heuristic(
                "iii",
                late <= 2.0 * early + 1e-12,
                format!("successive step ratios over beta_n: {early:e} early in the tail, {late:e} late"),
            )
        };

        let cond_iv = {
            let first_drop = (1..len).find(|&n| (n as f64) * beta[n] < ((n - 1) as f64) * beta[n - 1]);
            match first_drop {
                None => ConditionVerdict::heuristic("iv", true, "n beta_n nondecreasing over the table".into()),
                Some(n) => ConditionVerdict::heuristic("iv", false, format!("n beta_n decreases at n = {n}")),
            }
        };

        let exponent = |v: &[f64]| {
            // Least-squares slope of −log v against log(n+1) over the tail.
            let pts: Vec<(f64, f64)> = (tail..len).map(|n| (((n + 1) as f64).ln(), -v[n].ln())).collect();
            let k = pts.len() as f64;
            let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
            let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
            let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
            let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
            sxy / sxx
        };
        let (a, b) = (exponent(alpha), exponent(beta));
        let mut cond_v = exponent_ratio_condition(a, b, delta_h, delta_f, delta_g);
        cond_v.heuristic = true;
        cond_v.reason = format!("fitted tail exponents a = {a:.4}, b = {b:.4}: {}", cond_v.reason);

        Ok(vec![cond_i, cond_ii, cond_iii, cond_iv, cond_v])
    }
}

/// Fewest stored steps for which the tail heuristics are meaningful.
pub const MIN_TABLE_FOR_VALIDATION: usize = 64;

fn polynomial_conditions(a: f64, b: f64, delta_h: f64, delta_f: f64, delta_g: f64) -> Vec<ConditionVerdict> {
    let cond_i = if b > a {
        ConditionVerdict::pass(
            "i",
            format!("a = {a}, b = {b} > a: steps and their ratio vanish, steps decrease"),
        )
    } else {
        ConditionVerdict::fail(
            "i",
            format!("b = {b} ≤ a = {a}: kappa_n = beta_n/alpha_n does not vanish"),
        )
    };
    let cond_ii = ConditionVerdict::pass(
        "ii",
        format!(
            "polynomial family: beta_(n-1)/beta_n = 1 + O(beta_n), beta_tilde = {}",
            if b == 1.0 { "1/beta0" } else { "0" }
        ),
    );
    let cond_iii = ConditionVerdict::pass(
        "iii",
        "polynomial family: alpha_(n-1)/alpha_n and kappa_(n-1)/kappa_n are 1 + O(1/n) ⊆ 1 + O(beta_n)".to_string(),
    );
    let cond_iv = ConditionVerdict::pass("iv", "n(n+1)^(-e) is increasing for exponents e ≤ 1".to_string());
    let cond_v = exponent_ratio_condition(a, b, delta_h, delta_f, delta_g);
    vec![cond_i, cond_ii, cond_iii, cond_iv, cond_v]
}

/// `2/(1 + δ_H) ≤ b/a < 1 + min(δ_F, δ_G)`.
fn exponent_ratio_condition(a: f64, b: f64, delta_h: f64, delta_f: f64, delta_g: f64) -> ConditionVerdict {
    let ratio = b / a;
    let upper = 1.0 + delta_f.min(delta_g);
    let lower = 2.0 / (1.0 + delta_h);
    if ratio < upper && ratio >= lower {
        ConditionVerdict::pass("v", format!("b/a = {ratio} lies in [{lower}, {upper})"))
    } else if ratio >= upper {
        ConditionVerdict::fail("v", format!("b/a = {ratio} ≥ 1 + min(delta_F, delta_G) = {upper}"))
    } else {
        ConditionVerdict::fail("v", format!("b/a = {ratio} < 2/(1 + delta_H) = {lower}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionVerdict {
    /// Roman numeral of the step-size condition, `"i"` … `"v"`.
    pub condition: String,
    pub pass: bool,
    pub reason: String,
    /// Judged from a finite table rather than certified analytically.
    #[serde(default)]
    pub heuristic: bool,
}

impl ConditionVerdict {
    fn pass(condition: &str, reason: String) -> Self {
        Self {
            condition: condition.into(),
            pass: true,
            reason,
            heuristic: false,
        }
    }

    fn fail(condition: &str, reason: String) -> Self {
        Self {
            pass: false,
            ..Self::pass(condition, reason)
        }
    }

    fn heuristic(condition: &str, pass: bool, reason: String) -> Self {
        Self {
            pass,
            heuristic: true,
            ..Self::pass(condition, reason)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub conditions: Vec<ConditionVerdict>,
    /// True iff every condition passes.
    pub pass: bool,
}

impl AssumptionReport {
    pub fn failing(&self) -> impl Iterator<Item = &ConditionVerdict> {
        self.conditions.iter().filter(|c| !c.pass)
    }
}

/// Forward partial sums `Γ_{n,n}, Γ_{n,n+1}, …` keyed by start index.
#[derive(Debug, Default)]
struct SumCache {
    tables: RwLock<HashMap<(Scale, usize), Arc<Vec<f64>>>>,
}

impl SumCache {
    /// Returns a table for start `n` covering at least index `m` (`table[k] = Γ_{n,n+k}`),
    /// or covering the first value exceeding `t` when `until` is given.
    fn table(
        &self,
        sched: &StepSchedule,
        scale: Scale,
        n: usize,
        min_len: usize,
        until: Option<f64>,
    ) -> Result<Arc<Vec<f64>>, ScheduleError> {
        let done = |tab: &Vec<f64>| {
            tab.len() >= min_len && until.is_none_or(|t| tab.last().is_some_and(|&last| last > t))
        };
        if let Some(tab) = self.tables.read().expect("poisoned").get(&(scale, n)) {
            if done(tab) {
                return Ok(Arc::clone(tab));
            }
        }
        let mut guard = self.tables.write().expect("poisoned");
        let entry = guard
            .entry((scale, n))
            .or_insert_with(|| Arc::new(vec![0.0]));
        if !done(entry) {
            let tab = Arc::make_mut(entry);
            while !done(tab) {
                let k = n + tab.len() - 1;
                let step = sched.step(scale, k)?;
                let last = *tab.last().expect("table starts non-empty");
                tab.push(last + step);
            }
        }
        Ok(Arc::clone(entry))
    }

    fn gamma(&self, sched: &StepSchedule, scale: Scale, n: usize, m: usize) -> Result<f64, ScheduleError> {
        let tab = self.table(sched, scale, n, m - n + 1, None)?;
        Ok(tab[m - n])
    }

    fn locate(&self, sched: &StepSchedule, scale: Scale, n: usize, t: f64) -> Result<(usize, f64), ScheduleError> {
        let tab = self.table(sched, scale, n, 1, Some(t))?;
        // First entry exceeding t; the one before it is the floor.
        let k = tab.partition_point(|&g| g <= t) - 1;
        Ok((n + k, tab[k]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn harmonic() -> StepSchedule {
        StepSchedule::polynomial(1.0, 1.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn step_at_polynomial() {
        let s = StepSchedule::polynomial(1.0, 0.6, 1.0, 0.9).unwrap();
        let st = s.step_at(0).unwrap();
        assert_eq!((st.alpha, st.beta, st.kappa), (1.0, 1.0, 1.0));
        let st = s.step_at(999).unwrap();
        assert!((st.alpha - 1000f64.powf(-0.6)).abs() < 1e-16);
        assert!((st.beta - 1000f64.powf(-0.9)).abs() < 1e-16);
        assert!((st.kappa - 1000f64.powf(-0.3)).abs() < 1e-14);

        let s = StepSchedule::polynomial(0.5, 1.0, 2.0, 1.0).unwrap();
        let st = s.step_at(3).unwrap();
        assert_eq!((st.alpha, st.beta), (0.125, 0.5));
    }

    #[test]
    fn table_out_of_range() {
        let s = StepSchedule::table(vec![1.0, 0.5], vec![0.5, 0.25]).unwrap();
        assert_eq!(s.step_at(1).unwrap().kappa, 0.5);
        assert_eq!(
            s.step_at(2),
            Err(ScheduleError::IndexOutOfRange { index: 2, len: 2 })
        );
        assert!(s.gamma_sum(Scale::Alpha, 0, 3).is_err());
    }

    #[test]
    fn construction_rejects_bad_parameters() {
        assert!(StepSchedule::polynomial(0.0, 0.5, 1.0, 0.9).is_err());
        assert!(StepSchedule::polynomial(1.0, 1.5, 1.0, 0.9).is_err());
        assert!(StepSchedule::polynomial(1.0, 0.5, 1.0, 0.0).is_err());
        assert!(StepSchedule::table(vec![1.0, 2.0], vec![1.0, 1.0]).is_err());
        assert!(StepSchedule::table(vec![], vec![1.0]).is_err());
    }

    #[test]
    fn beta_tilde_cases() {
        let s = StepSchedule::polynomial(1.0, 0.6, 2.0, 1.0).unwrap();
        assert_eq!(s.beta_tilde().unwrap(), 0.5);
        let s = StepSchedule::polynomial(1.0, 0.6, 1.0, 0.9).unwrap();
        assert_eq!(s.beta_tilde().unwrap(), 0.0);

        let beta: Vec<f64> = (0..200).map(|n| 1.0 / (n as f64 + 2.0)).collect();
        let s = StepSchedule::table(beta.clone(), beta).unwrap();
        assert!((s.beta_tilde().unwrap() - 1.0).abs() < 1e-9);

        // 1/β_n = n² grows without a stable difference.
        let beta: Vec<f64> = (0..50).map(|n| 1.0 / ((n + 1) as f64).powi(2)).collect();
        let s = StepSchedule::table(beta.clone(), beta).unwrap();
        assert!(matches!(s.beta_tilde(), Err(ScheduleError::NoLimit { .. })));
    }

    #[test]
    fn validate_examples() {
        let s = StepSchedule::polynomial(1.0, 0.6, 1.0, 0.9).unwrap();
        let r = s.validate(1.0, 1.0, 1.0).unwrap();
        assert!(r.pass, "{r:?}");

        let s = StepSchedule::polynomial(1.0, 0.8, 1.0, 0.9).unwrap();
        let r = s.validate(1.0, 0.1, 0.1).unwrap();
        assert!(!r.pass);
        let failing: Vec<_> = r.failing().map(|c| c.condition.as_str()).collect();
        assert_eq!(failing, ["v"]);

        let s = StepSchedule::polynomial(1.0, 0.6, 1.0, 0.6).unwrap();
        let r = s.validate(1.0, 1.0, 1.0).unwrap();
        assert!(!r.pass);
        assert!(r.failing().any(|c| c.condition == "i"));

        // b/a below 2/(1+δ_H).
        let s = StepSchedule::polynomial(1.0, 0.6, 1.0, 0.65).unwrap();
        let r = s.validate(0.5, 1.0, 1.0).unwrap();
        assert!(r.failing().any(|c| c.condition == "v" && c.reason.contains("delta_H")));

        let t = StepSchedule::table(vec![1.0], vec![1.0]).unwrap();
        assert!(matches!(t.validate(1.0, 1.0, 1.0), Err(ScheduleError::InvalidParameter(_))));
        assert!(s.validate(0.2, 1.0, 1.0).is_err());
    }

    fn sampled(a: f64, b: f64, len: usize) -> StepSchedule {
        let alpha = (0..len).map(|n| ((n + 1) as f64).powf(-a)).collect();
        let beta = (0..len).map(|n| ((n + 1) as f64).powf(-b)).collect();
        StepSchedule::table(alpha, beta).unwrap()
    }

    #[test]
    fn table_validation_is_heuristic() {
        let r = sampled(0.6, 1.0, 4096).validate(1.0, 1.0, 1.0).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.conditions.iter().all(|c| c.heuristic));
        assert!(r.conditions[4].reason.contains("a = 0.6000"), "{}", r.conditions[4].reason);

        let r = sampled(0.8, 1.0, 4096).validate(1.0, 0.1, 0.1).unwrap();
        let failing: Vec<_> = r.failing().map(|c| c.condition.as_str()).collect();
        assert_eq!(failing, ["v"]);

        // A tail that has not settled cannot certify a limit for 1/β differences.
        let r = sampled(0.6, 0.9, 4096).validate(1.0, 1.0, 1.0).unwrap();
        assert!(r.failing().any(|c| c.condition == "ii"));

        // Equal steps keep kappa at 1.
        let r = sampled(1.0, 1.0, 128).validate(1.0, 1.0, 1.0).unwrap();
        assert!(r.failing().any(|c| c.condition == "i"));
    }

    #[test]
    fn polynomial_verdicts_are_not_heuristic() {
        let s = StepSchedule::polynomial(1.0, 0.6, 1.0, 0.9).unwrap();
        assert!(s.validate(1.0, 1.0, 1.0).unwrap().conditions.iter().all(|c| !c.heuristic));
    }

    #[test]
    fn gamma_sum_examples() {
        let s = harmonic();
        assert_eq!(s.gamma_sum(Scale::Alpha, 5, 5).unwrap(), 0.0);
        assert_eq!(s.gamma_sum(Scale::Alpha, 7, 2).unwrap(), 0.0);
        assert!((s.gamma_sum(Scale::Alpha, 1, 3).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(s.gamma_sum(Scale::Beta, 0, 2).unwrap(), 1.5);
    }

    #[test]
    fn locate_examples() {
        let s = harmonic();
        assert_eq!(s.locate(Scale::Alpha, 1, 0.0).unwrap(), (1, 0.0));
        assert_eq!(s.locate(Scale::Alpha, 1, 0.5).unwrap(), (2, 0.5));
        assert_eq!(s.locate(Scale::Alpha, 1, 0.7).unwrap(), (2, 0.5));
        assert!(s.locate(Scale::Alpha, 1, -1.0).is_err());
    }
}
