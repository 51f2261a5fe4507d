//! Finite MDPs for off-policy GTD2/TDC with linear features.
//!
//! Samples are i.i.d. tuples `(s, a, s')` with `s ~ μ`, `a ~ π_b(·|s)` and
//! `s' ~ P(·|s, a)`; the importance weight is `ρ = π(a|s)/π_b(a|s)`.
//! Per-sample matrices:
//!
//! ```text
//! A_n = ρ φ(s)(φ(s) − γφ(s'))ᵀ    b_n = ρ r(s, a) φ(s)
//! C_n = φ(s)φ(s)ᵀ                 D_n = γρ φ(s)φ(s')ᵀ
//! ```

use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::problem::ProblemError;

/// Tolerance for probability vectors summing to one.
pub const PROB_TOL: f64 = 1e-12;
/// Tolerance on the identity `C − Dᵀ = Aᵀ`.
pub const IDENTITY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpSpec {
    pub n_states: usize,
    pub n_actions: usize,
    /// Row `s` is `φ(s)`.
    pub features: Matrix,
    /// `rewards[s][a] ∈ [0, 1]`.
    pub rewards: Vec<Vec<f64>>,
    /// `transitions[s][a][s'] = P(s'|s, a)`.
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// `target_policy[s][a] = π(a|s)`.
    pub target_policy: Vec<Vec<f64>>,
    /// `behavior_policy[s][a] = π_b(a|s)`.
    pub behavior_policy: Vec<Vec<f64>>,
    /// Sampling distribution `μ` of the current state.
    pub state_distribution: Vec<f64>,
    pub gamma: f64,
}

/// Exact expectations `A = E[A_n]`, `b = E[b_n]`, `C = E[C_n]`, `D = E[D_n]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtdMatrices {
    pub a: Matrix,
    pub b: Vec<f64>,
    pub c: Matrix,
    pub d: Matrix,
}

/// One `(s, a, s')` triple with its probability and per-sample matrices.
#[derive(Debug, Clone)]
pub struct TransitionSample {
    pub state: usize,
    pub action: usize,
    pub next_state: usize,
    pub prob: f64,
    pub a: Matrix,
    pub b: Vec<f64>,
    pub c: Matrix,
    pub d: Matrix,
}

fn check_distribution(what: &str, p: &[f64], len: usize) -> Result<(), ProblemError> {
    if p.len() != len {
        return Err(ProblemError::InvalidMdp(format!(
            "{what} has {} entries, expected {len}",
            p.len()
        )));
    }
    if p.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(ProblemError::InvalidMdp(format!("{what} has negative entries")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > PROB_TOL {
        return Err(ProblemError::InvalidMdp(format!(
            "{what} sums to {total}, not 1"
        )));
    }
    Ok(())
}

impl MdpSpec {
    /// Fixed 3-state, 2-action MDP with two mean-zero features and γ = 0.9.
    pub fn benchmark() -> Self {
        Self {
            n_states: 3,
            n_actions: 2,
            features: Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 3.0], vec![-3.0, -3.0]])
                .expect("static features"),
            rewards: vec![vec![0.2, 0.9], vec![0.5, 0.1], vec![0.8, 0.4]],
            transitions: vec![
                vec![vec![0.6, 0.3, 0.1], vec![0.1, 0.2, 0.7]],
                vec![vec![0.3, 0.5, 0.2], vec![0.2, 0.2, 0.6]],
                vec![vec![0.4, 0.1, 0.5], vec![0.5, 0.4, 0.1]],
            ],
            target_policy: vec![vec![0.7, 0.3], vec![0.4, 0.6], vec![0.5, 0.5]],
            behavior_policy: vec![vec![0.5, 0.5], vec![0.5, 0.5], vec![0.6, 0.4]],
            state_distribution: vec![0.3, 0.3, 0.4],
            gamma: 0.9,
        }
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn validate(&self) -> Result<(), ProblemError> {
        let (ns, na) = (self.n_states, self.n_actions);
        if ns == 0 || na == 0 {
            return Err(ProblemError::InvalidMdp("empty state or action space".into()));
        }
        if self.features.rows() != ns || self.features.cols() == 0 {
            return Err(ProblemError::InvalidMdp(format!(
                "features must be {ns}×d, got {}×{}",
                self.features.rows(),
                self.features.cols()
            )));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(ProblemError::InvalidMdp(format!(
                "discount {} outside [0, 1)",
                self.gamma
            )));
        }
        check_distribution("state_distribution", &self.state_distribution, ns)?;
        for tab in [&self.rewards, &self.target_policy, &self.behavior_policy] {
            if tab.len() != ns || tab.iter().any(|r| r.len() != na) {
                return Err(ProblemError::InvalidMdp(format!(
                    "per-state tables must be {ns}×{na}"
                )));
            }
        }
        if self.transitions.len() != ns || self.transitions.iter().any(|r| r.len() != na) {
            return Err(ProblemError::InvalidMdp(format!(
                "transitions must be {ns}×{na}×{ns}"
            )));
        }
        for s in 0..ns {
            check_distribution(&format!("target_policy[{s}]"), &self.target_policy[s], na)?;
            check_distribution(&format!("behavior_policy[{s}]"), &self.behavior_policy[s], na)?;
            for a in 0..na {
                check_distribution(&format!("transitions[{s}][{a}]"), &self.transitions[s][a], ns)?;
                let r = self.rewards[s][a];
                if !(0.0..=1.0).contains(&r) {
                    return Err(ProblemError::InvalidMdp(format!(
                        "reward r({s},{a}) = {r} outside [0, 1]"
                    )));
                }
                if self.target_policy[s][a] > 0.0 && self.behavior_policy[s][a] <= 0.0 {
                    return Err(ProblemError::InvalidMdp(format!(
                        "behavior policy never takes action {a} in state {s} but the target does"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Every triple with positive probability, in `(s, a, s')` lexicographic order.
    pub fn transition_samples(&self) -> Vec<TransitionSample> {
        let d = self.n_features();
        let mut out = Vec::new();
        for s in 0..self.n_states {
            let phi = self.features.row(s);
            for a in 0..self.n_actions {
                let pb = self.behavior_policy[s][a];
                if pb <= 0.0 {
                    continue;
                }
                let rho = self.target_policy[s][a] / pb;
                let r = self.rewards[s][a];
                for sn in 0..self.n_states {
                    let prob = self.state_distribution[s] * pb * self.transitions[s][a][sn];
                    if prob <= 0.0 {
                        continue;
                    }
                    let phin = self.features.row(sn);
                    let mut am = Matrix::zeros(d, d);
                    let mut cm = Matrix::zeros(d, d);
                    let mut dm = Matrix::zeros(d, d);
                    for i in 0..d {
                        for j in 0..d {
                            am[(i, j)] = rho * phi[i] * (phi[j] - self.gamma * phin[j]);
                            cm[(i, j)] = phi[i] * phi[j];
                            dm[(i, j)] = self.gamma * rho * phi[i] * phin[j];
                        }
                    }
                    out.push(TransitionSample {
                        state: s,
                        action: a,
                        next_state: sn,
                        prob,
                        a: am,
                        b: phi.iter().map(|f| rho * r * f).collect(),
                        c: cm,
                        d: dm,
                    });
                }
            }
        }
        out
    }

    /// Exact expectations by enumeration, checked against `C − Dᵀ = Aᵀ`.
    pub fn gtd_matrices(&self) -> Result<GtdMatrices, ProblemError> {
        self.validate()?;
        let d = self.n_features();
        let mut m = GtdMatrices {
            a: Matrix::zeros(d, d),
            b: vec![0.0; d],
            c: Matrix::zeros(d, d),
            d: Matrix::zeros(d, d),
        };
        for s in self.transition_samples() {
            m.a = m.a.add(&s.a.scale(s.prob))?;
            m.c = m.c.add(&s.c.scale(s.prob))?;
            m.d = m.d.add(&s.d.scale(s.prob))?;
            for (acc, v) in m.b.iter_mut().zip(&s.b) {
                *acc += s.prob * v;
            }
        }
        let gap = m.c.sub(&m.d.transpose())?.max_abs_diff(&m.a.transpose());
        if gap > IDENTITY_TOL {
            return Err(ProblemError::IdentityViolation(gap));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn tabular_on_policy_myopic() {
        // γ = 0, π = π_b, Φ = I: D = 0 and A = C = diag(μ).
        let mut mdp = MdpSpec::benchmark();
        mdp.features = Matrix::identity(3);
        mdp.gamma = 0.0;
        mdp.target_policy = mdp.behavior_policy.clone();
        let g = mdp.gtd_matrices().unwrap();
        let mu = Matrix::diag(&mdp.state_distribution);
        assert!(g.d.max_abs_diff(&Matrix::zeros(3, 3)) == 0.0);
        assert!(g.a.max_abs_diff(&mu) < 1e-15);
        assert!(g.c.max_abs_diff(&mu) < 1e-15);
    }

    #[test]
    fn benchmark_golden_expectations() {
        // Frozen from an independent brute-force triple loop over (s, a, s').
        let g = MdpSpec::benchmark().gtd_matrices().unwrap();
        let a = m(&[&[6.3729, 3.4623], &[4.572, 6.4296]]);
        let c = m(&[&[6.3, 3.6], &[3.6, 6.3]]);
        let d = m(&[&[-0.0729, 0.1377], &[-0.972, -0.1296]]);
        let b = [-0.351, -0.486];
        assert!(g.a.max_abs_diff(&a) < 1e-12, "{:?}", g.a);
        assert!(g.c.max_abs_diff(&c) < 1e-12, "{:?}", g.c);
        assert!(g.d.max_abs_diff(&d) < 1e-12, "{:?}", g.d);
        for (x, y) in g.b.iter().zip(b) {
            assert!((x - y).abs() < 1e-12, "{:?}", g.b);
        }
    }

    #[test]
    fn identity_holds() {
        let g = MdpSpec::benchmark().gtd_matrices().unwrap();
        let gap = g.c.sub(&g.d.transpose()).unwrap().max_abs_diff(&g.a.transpose());
        assert!(gap < 1e-10);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let total: f64 = MdpSpec::benchmark()
            .transition_samples()
            .iter()
            .map(|s| s.prob)
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_mdps_rejected() {
        let mut bad = MdpSpec::benchmark();
        bad.transitions[0][1] = vec![0.5, 0.5, 0.1];
        assert!(matches!(bad.validate(), Err(ProblemError::InvalidMdp(_))));

        let mut bad = MdpSpec::benchmark();
        bad.behavior_policy[1] = vec![1.0, 0.0];
        assert!(bad.validate().unwrap_err().to_string().contains("behavior policy"));

        let mut bad = MdpSpec::benchmark();
        bad.gamma = 1.0;
        assert!(bad.validate().is_err());

        let mut bad = MdpSpec::benchmark();
        bad.rewards[2][0] = 1.5;
        assert!(bad.validate().is_err());

        let mut bad = MdpSpec::benchmark();
        bad.features = Matrix::identity(2);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let mdp = MdpSpec::benchmark();
        let s = serde_json::to_string(&mdp).unwrap();
        let back: MdpSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(back, mdp);
    }
}
