//! Ornstein-Uhlenbeck weak limits of the rescaled iterates and an exact
//! transition sampler used as a distributional oracle.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{matrix_exp, solve_lyapunov, spectral_report, LinalgError, Matrix, SOLVER_TOL};
use crate::problem::{ProblemError, ProblemSpec};
use crate::schedule::{ScheduleError, StepSchedule};

/// Diagonal jitter tried when a transition covariance is numerically
/// indefinite.
pub const CHOLESKY_JITTER: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LimitError {
    #[error("B1 is singular")]
    SingularB1,
    #[error("-{which} is not Hurwitz (min eigenvalue real part {min_real_part}): {matrix:?}")]
    NotHurwitz {
        which: String,
        min_real_part: f64,
        matrix: Matrix,
    },
    #[error("corrected slow diffusion is not positive semidefinite (min eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("transition covariance factorization failed at time index {0}")]
    CholeskyFailure(usize),
    #[error("invalid sampling request: {0}")]
    InvalidTimes(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

/// Law of a stationary OU process `dU = −B U dt + Σ^{1/2} dW`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitSpec {
    pub drift: Matrix,
    pub diffusion_cov: Matrix,
    pub stationary_cov: Matrix,
}

impl LimitSpec {
    /// Solves for the stationary covariance of the given drift/diffusion.
    pub fn new(which: &str, drift: Matrix, diffusion_cov: Matrix) -> Result<Self, LimitError> {
        let spec = spectral_report(&drift)?;
        if !spec.hurwitz_for_negation {
            return Err(LimitError::NotHurwitz {
                which: which.to_string(),
                min_real_part: spec.min_real_part,
                matrix: drift,
            });
        }
        let stationary_cov = solve_lyapunov(&drift, &diffusion_cov)?;
        Ok(Self {
            drift,
            diffusion_cov,
            stationary_cov,
        })
    }

    pub fn dim(&self) -> usize {
        self.drift.rows()
    }

    /// `‖BΣ + ΣBᵀ − C‖_F`.
    pub fn lyapunov_residual(&self) -> f64 {
        let bs = self.drift.matmul(&self.stationary_cov).expect("square");
        let r = bs
            .add(&bs.transpose())
            .and_then(|m| m.sub(&self.diffusion_cov))
            .expect("square");
        r.frobenius_norm()
    }
}

/// Covariance of `ψ − Mξ` with `M = B₂B₁⁻¹`:
/// `Σ_ψ − MΣ_ξψ − Σ_ξψᵀMᵀ + MΣ_ξMᵀ`.
pub fn sigma_tilde_psi(
    sigma_psi: &Matrix,
    sigma_xipsi: &Matrix,
    sigma_xi: &Matrix,
    b1: &Matrix,
    b2: &Matrix,
) -> Result<Matrix, LimitError> {
    let b1_inv = b1.inverse().map_err(|e| match e {
        LinalgError::Singular => LimitError::SingularB1,
        other => other.into(),
    })?;
    let m = b2.matmul(&b1_inv)?;
    let cross = m.matmul(sigma_xipsi)?;
    let out = sigma_psi
        .sub(&cross)?
        .sub(&cross.transpose())?
        .add(&m.matmul(sigma_xi)?.matmul(&m.transpose())?)?
        .symmetrized();
    let scale = 1.0 + sigma_psi.frobenius_norm() + m.frobenius_norm().powi(2) * sigma_xi.frobenius_norm();
    let min_eig = out.min_symmetric_eigenvalue()?;
    if min_eig < -SOLVER_TOL * scale {
        return Err(LimitError::NotPsd(min_eig));
    }
    Ok(out)
}

/// Limit of the rescaled fast error: drift `B₁`, diffusion `Σ_ξ`.
pub fn fast_limit(p: &ProblemSpec) -> Result<LimitSpec, LimitError> {
    let noise = p.asymptotic_noise_cov()?;
    LimitSpec::new("B1", p.linearize().b1.clone(), noise.sigma_xi)
}

/// Limit of the rescaled slow error: drift `B₃ − β̃I/2`, diffusion `Σ̃_ψ`.
pub fn slow_limit(p: &ProblemSpec, sched: &StepSchedule) -> Result<LimitSpec, LimitError> {
    let lin = p.linearize();
    let noise = p.asymptotic_noise_cov()?;
    let diffusion = sigma_tilde_psi(
        &noise.sigma_psi,
        &noise.sigma_xipsi,
        &noise.sigma_xi,
        &lin.b1,
        &lin.b2,
    )?;
    let drift = p.slow_drift(sched.beta_tilde()?)?;
    LimitSpec::new("(B3 - beta_tilde I/2)", drift, diffusion)
}

/// Stationary autocovariance `Cov(U(t), U(t+s)) = Σ e^{−Bᵀs}`.
pub fn ou_autocov(lim: &LimitSpec, s: f64) -> Matrix {
    let decay = matrix_exp(&lim.drift.transpose(), -s).expect("drift is square");
    lim.stationary_cov.matmul(&decay).expect("square")
}

#[derive(Debug, Clone, PartialEq)]
pub enum OuStart {
    Stationary,
    Fixed(Vec<f64>),
}

/// Exact-transition sampler for a fixed time grid.
///
/// The transition matrices and noise factors are computed once so that
/// drawing many paths costs only matrix-vector products.
#[derive(Debug, Clone)]
pub struct OuSampler {
    times: Vec<f64>,
    start: OuStart,
    stationary_factor: Matrix,
    /// `(e^{−Bh}, chol(Σ − e^{−Bh}Σe^{−Bᵀh}))` for each gap `h` (the first
    /// entry is the gap from time 0 to `times[0]`).
    steps: Vec<(Matrix, Matrix)>,
}

impl OuSampler {
    pub fn new(lim: &LimitSpec, times: &[f64], start: OuStart) -> Result<Self, LimitError> {
        if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(LimitError::InvalidTimes("times must be finite and nonnegative".into()));
        }
        if times.windows(2).any(|w| w[1] < w[0]) {
            return Err(LimitError::InvalidTimes("times must be sorted".into()));
        }
        if let OuStart::Fixed(u) = &start {
            if u.len() != lim.dim() {
                return Err(LimitError::InvalidTimes(format!(
                    "start vector has length {}, limit has dimension {}",
                    u.len(),
                    lim.dim()
                )));
            }
        }
        let sigma = &lim.stationary_cov;
        let stationary_factor = factor_with_jitter(sigma).ok_or(LimitError::CholeskyFailure(0))?;
        let mut steps = Vec::with_capacity(times.len());
        let mut prev = 0.0;
        for (k, &t) in times.iter().enumerate() {
            let e = matrix_exp(&lim.drift, -(t - prev))?;
            let cov = sigma.sub(&e.matmul(sigma)?.matmul(&e.transpose())?)?.symmetrized();
            let l = factor_with_jitter(&cov).ok_or(LimitError::CholeskyFailure(k))?;
            steps.push((e, l));
            prev = t;
        }
        Ok(Self {
            times: times.to_vec(),
            start,
            stationary_factor,
            steps,
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// One path: the process value at every grid time.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Vec<f64>> {
        let d = self.stationary_factor.rows();
        let mut u = match &self.start {
            OuStart::Fixed(u) => u.clone(),
            OuStart::Stationary => gaussian(&self.stationary_factor, rng),
        };
        let mut out = Vec::with_capacity(self.steps.len());
        let mut next = vec![0.0; d];
        for (e, l) in &self.steps {
            e.matvec_into(&u, &mut next);
            for (a, z) in next.iter_mut().zip(gaussian(l, rng)) {
                *a += z;
            }
            std::mem::swap(&mut u, &mut next);
            out.push(u.clone());
        }
        out
    }
}

/// Draws one exact finite-dimensional sample of the OU process.
pub fn ou_sample_path<R: Rng + ?Sized>(
    lim: &LimitSpec,
    times: &[f64],
    rng: &mut R,
    start: OuStart,
) -> Result<Vec<Vec<f64>>, LimitError> {
    Ok(OuSampler::new(lim, times, start)?.sample(rng))
}

fn gaussian<R: Rng + ?Sized>(factor: &Matrix, rng: &mut R) -> Vec<f64> {
    let z: Vec<f64> = (0..factor.cols()).map(|_| rng.sample(StandardNormal)).collect();
    let mut out = vec![0.0; factor.rows()];
    factor.matvec_into(&z, &mut out);
    out
}

fn factor_with_jitter(cov: &Matrix) -> Option<Matrix> {
    cov.cholesky().ok().or_else(|| {
        let jitter = Matrix::identity(cov.rows()).scale(CHOLESKY_JITTER * (1.0 + cov.frobenius_norm()));
        cov.add(&jitter).ok()?.cholesky().ok()
    })
}
