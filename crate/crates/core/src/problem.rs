//! Two-time-scale problems: the operator pair `(F, G)`, the inner solution
//! `H`, the root pair, the local linearization `(B₁, B₂, B₃, ∇H(y⋆))`, and
//! the noise source.
//!
//! Built-in problems cover a generic linear system, Polyak-Ruppert averaging,
//! normalized stochastic heavy ball, and off-policy GTD2/TDC on a finite MDP.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{spectral_report, LinalgError, Matrix, SpectralReport};
use crate::mdp::{GtdMatrices, MdpSpec};
use crate::schedule::{ScheduleError, StepSchedule};

/// Root residual tolerance for `F(x⋆, y⋆)` and `G(x⋆, y⋆)`.
pub const ROOT_TOL: f64 = 1e-10;
/// Tolerance on `F(H(y), y)` at probes around `y⋆`.
pub const INNER_TOL: f64 = 1e-8;
/// Condition number above which `∇ₓF` is treated as singular.
pub const MAX_INNER_CONDITION: f64 = 1e12;
/// Relative central-difference step.
pub const FD_STEP: f64 = 1e-5;

const INNER_PROBES: usize = 100;
const PROBE_RADIUS: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),
    #[error("grad_x F is numerically singular at the root (condition {0:e})")]
    SingularInnerJacobian(f64),
    #[error("root residual {0:e} exceeds tolerance")]
    RootResidual(f64),
    #[error("F(H(y), y) = {0:e} at a probe near y*; H is not the inner solution")]
    InnerSolution(f64),
    #[error("expectation identity C - D^T = A^T violated by {0:e}")]
    IdentityViolation(f64),
    #[error("joint noise covariance is not positive semidefinite")]
    CholeskyFailure,
    #[error("-{which} is not Hurwitz (min eigenvalue real part {min_real_part})")]
    NotHurwitz { which: String, min_real_part: f64 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

/// Deterministic part of a two-time-scale problem.
///
/// Methods write into caller buffers so the simulation loop stays
/// allocation-free; dimensions are the caller's responsibility.
pub trait Operators: Send + Sync + fmt::Debug {
    fn dim_x(&self) -> usize;
    fn dim_y(&self) -> usize;
    fn f(&self, x: &[f64], y: &[f64], out: &mut [f64]);
    fn g(&self, x: &[f64], y: &[f64], out: &mut [f64]);
    fn h(&self, y: &[f64], out: &mut [f64]);
}

/// Declared Hölder orders of the inner map and the linear approximations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HolderOrders {
    pub delta_h: f64,
    pub delta_f: f64,
    pub delta_g: f64,
}

impl Default for HolderOrders {
    fn default() -> Self {
        Self {
            delta_h: 1.0,
            delta_f: 1.0,
            delta_g: 1.0,
        }
    }
}

/// Local linear structure at the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linearization {
    pub b1: Matrix,
    pub b2: Matrix,
    pub b3: Matrix,
    /// `∇H(y⋆)`, `dim_x × dim_y`.
    pub h_star: Matrix,
}

/// Limits of the conditional noise covariances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseCovariances {
    pub sigma_xi: Matrix,
    pub sigma_psi: Matrix,
    pub sigma_xipsi: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GtdVariant {
    Gtd2,
    Tdc,
}

// ---------------------------------------------------------------------------
// Operators of the built-in problems.

/// `H(y) = x⋆ + Hₘ(y − y⋆)`, `F = B₁(x − H(y))`, `G = B₂(x − H(y)) + B₃(y − y⋆)`.
#[derive(Debug, Clone)]
struct LinearOps {
    b1: Matrix,
    b2: Matrix,
    b3: Matrix,
    h: Matrix,
    x_star: Vec<f64>,
    y_star: Vec<f64>,
}

/// Runs `f` on a zeroed scratch slice, on the stack for small dimensions.
fn with_scratch<T>(len: usize, f: impl FnOnce(&mut [f64]) -> T) -> T {
    const STACK: usize = 16;
    if len <= STACK {
        let mut buf = [0.0; STACK];
        f(&mut buf[..len])
    } else {
        f(&mut vec![0.0; len])
    }
}

impl LinearOps {
    /// `x − H(y)` into `out`.
    fn inner_error_into(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        self.h(y, out);
        for (o, a) in out.iter_mut().zip(x) {
            *o = a - *o;
        }
    }

    fn slow_error_into(&self, y: &[f64], out: &mut [f64]) {
        for ((o, a), b) in out.iter_mut().zip(y).zip(&self.y_star) {
            *o = a - b;
        }
    }
}

impl Operators for LinearOps {
    fn dim_x(&self) -> usize {
        self.x_star.len()
    }
    fn dim_y(&self) -> usize {
        self.y_star.len()
    }
    fn f(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        with_scratch(x.len(), |xh| {
            self.inner_error_into(x, y, xh);
            self.b1.matvec_into(xh, out);
        });
    }
    fn g(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        with_scratch(x.len() + 2 * y.len(), |buf| {
            let (xh, rest) = buf.split_at_mut(x.len());
            let (yh, tmp) = rest.split_at_mut(y.len());
            self.inner_error_into(x, y, xh);
            self.slow_error_into(y, yh);
            self.b2.matvec_into(xh, out);
            self.b3.matvec_into(yh, tmp);
            out.iter_mut().zip(tmp.iter()).for_each(|(o, t)| *o += t);
        });
    }
    fn h(&self, y: &[f64], out: &mut [f64]) {
        with_scratch(y.len(), |yh| {
            self.slow_error_into(y, yh);
            self.h.matvec_into(yh, out);
        });
        out.iter_mut().zip(&self.x_star).for_each(|(o, s)| *o += s);
    }
}

/// SGD on `½xᵀQx` with running average: `F = Qx`, `G = y − x`, `H ≡ 0`.
#[derive(Debug, Clone)]
struct PrAveragingOps {
    q: Matrix,
}

impl Operators for PrAveragingOps {
    fn dim_x(&self) -> usize {
        self.q.rows()
    }
    fn dim_y(&self) -> usize {
        self.q.rows()
    }
    fn f(&self, x: &[f64], _y: &[f64], out: &mut [f64]) {
        self.q.matvec_into(x, out);
    }
    fn g(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        for ((o, a), b) in out.iter_mut().zip(y).zip(x) {
            *o = a - b;
        }
    }
    fn h(&self, _y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// Normalized heavy ball on `½yᵀQy`: `F = x − Qy`, `G = x`, `H(y) = Qy`.
#[derive(Debug, Clone)]
struct HeavyBallOps {
    q: Matrix,
}

impl Operators for HeavyBallOps {
    fn dim_x(&self) -> usize {
        self.q.rows()
    }
    fn dim_y(&self) -> usize {
        self.q.rows()
    }
    fn f(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        self.q.matvec_into(y, out);
        for (o, a) in out.iter_mut().zip(x) {
            *o = a - *o;
        }
    }
    fn g(&self, x: &[f64], _y: &[f64], out: &mut [f64]) {
        out.copy_from_slice(x);
    }
    fn h(&self, y: &[f64], out: &mut [f64]) {
        self.q.matvec_into(y, out);
    }
}

/// Expected GTD2/TDC updates: `F = Cx + Ay − b`, `G₂ = −Aᵀx`, `G_TDC = Dᵀx + Ay − b`.
#[derive(Debug, Clone)]
struct GtdOps {
    m: GtdMatrices,
    a_t: Matrix,
    d_t: Matrix,
    c_inv: Matrix,
    variant: GtdVariant,
}

impl Operators for GtdOps {
    fn dim_x(&self) -> usize {
        self.m.b.len()
    }
    fn dim_y(&self) -> usize {
        self.m.b.len()
    }
    fn f(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let n = out.len();
        for i in 0..n {
            let cx: f64 = self.m.c.row(i).iter().zip(x).map(|(a, b)| a * b).sum();
            let ay: f64 = self.m.a.row(i).iter().zip(y).map(|(a, b)| a * b).sum();
            out[i] = cx + ay - self.m.b[i];
        }
    }
    fn g(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        match self.variant {
            GtdVariant::Gtd2 => {
                self.a_t.matvec_into(x, out);
                out.iter_mut().for_each(|o| *o = -*o);
            }
            GtdVariant::Tdc => {
                for i in 0..out.len() {
                    let dx: f64 = self.d_t.row(i).iter().zip(x).map(|(a, b)| a * b).sum();
                    let ay: f64 = self.m.a.row(i).iter().zip(y).map(|(a, b)| a * b).sum();
                    out[i] = dx + ay - self.m.b[i];
                }
            }
        }
    }
    fn h(&self, y: &[f64], out: &mut [f64]) {
        let r: Vec<f64> = (0..y.len())
            .map(|i| {
                self.m.a.row(i).iter().zip(y).map(|(a, b)| a * b).sum::<f64>() - self.m.b[i]
            })
            .collect();
        self.c_inv.matvec_into(&r, out);
        out.iter_mut().for_each(|o| *o = -*o);
    }
}

/// User-supplied operators built from closures.
pub struct ClosureOperators {
    dim_x: usize,
    dim_y: usize,
    f: Box<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>,
    g: Box<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>,
    h: Box<dyn Fn(&[f64], &mut [f64]) + Send + Sync>,
}

impl ClosureOperators {
    pub fn new(
        dim_x: usize,
        dim_y: usize,
        f: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        g: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        h: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim_x,
            dim_y,
            f: Box::new(f),
            g: Box::new(g),
            h: Box::new(h),
        }
    }
}

impl fmt::Debug for ClosureOperators {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ClosureOperators({}x{})", self.dim_x, self.dim_y)
    }
}

impl Operators for ClosureOperators {
    fn dim_x(&self) -> usize {
        self.dim_x
    }
    fn dim_y(&self) -> usize {
        self.dim_y
    }
    fn f(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        (self.f)(x, y, out)
    }
    fn g(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        (self.g)(x, y, out)
    }
    fn h(&self, y: &[f64], out: &mut [f64]) {
        (self.h)(y, out)
    }
}

// ---------------------------------------------------------------------------
// Noise.

/// Joint Gaussian martingale-difference noise with constant covariance.
#[derive(Debug, Clone)]
pub struct GaussianNoise {
    cov: NoiseCovariances,
    /// Lower Cholesky factor of `[[Σ_ξ, Σ_ξψ], [Σ_ξψᵀ, Σ_ψ]]`.
    factor: Matrix,
}

impl GaussianNoise {
    pub fn new(cov: NoiseCovariances) -> Result<Self, ProblemError> {
        let dx = cov.sigma_xi.rows();
        let dy = cov.sigma_psi.rows();
        if !cov.sigma_xi.is_square()
            || !cov.sigma_psi.is_square()
            || cov.sigma_xipsi.rows() != dx
            || cov.sigma_xipsi.cols() != dy
        {
            return Err(ProblemError::DimensionMismatch(
                "noise covariance blocks have inconsistent shapes".into(),
            ));
        }
        let mut joint = Matrix::zeros(dx + dy, dx + dy);
        for i in 0..dx {
            for j in 0..dx {
                joint[(i, j)] = cov.sigma_xi[(i, j)];
            }
            for j in 0..dy {
                joint[(i, dx + j)] = cov.sigma_xipsi[(i, j)];
                joint[(dx + j, i)] = cov.sigma_xipsi[(i, j)];
            }
        }
        for i in 0..dy {
            for j in 0..dy {
                joint[(dx + i, dx + j)] = cov.sigma_psi[(i, j)];
            }
        }
        if joint.asymmetry() > 1e-12 * (1.0 + joint.frobenius_norm()) {
            return Err(ProblemError::Invalid(
                "noise covariance blocks are not symmetric".into(),
            ));
        }
        let factor = joint.cholesky().map_err(|_| ProblemError::CholeskyFailure)?;
        Ok(Self { cov, factor })
    }
}

/// Samples of `(s, a, s')` with the per-sample GTD matrices precomputed.
#[derive(Debug, Clone)]
pub struct GtdNoise {
    variant: GtdVariant,
    samples: Arc<Vec<crate::mdp::TransitionSample>>,
    cumulative: Arc<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub enum NoiseModel {
    GaussianJoint(GaussianNoise),
    GtdSampling(GtdNoise),
}

// ---------------------------------------------------------------------------
// Configuration.

/// Problem block of an experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    Linear {
        b1: Matrix,
        b2: Matrix,
        b3: Matrix,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        h: Option<Matrix>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        x_star: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        y_star: Option<Vec<f64>>,
        sigma_xi: Matrix,
        sigma_psi: Matrix,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma_xipsi: Option<Matrix>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        holder: Option<HolderOrders>,
    },
    PrAveraging {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        q: Option<Matrix>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma_xi: Option<Matrix>,
    },
    Shb {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        q: Option<Matrix>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma_xi: Option<Matrix>,
    },
    Gtd2 {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mdp: Option<MdpSpec>,
    },
    Tdc {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mdp: Option<MdpSpec>,
    },
}

fn default_quadratic() -> Matrix {
    Matrix::diag(&[1.0, 2.0])
}

// ---------------------------------------------------------------------------

/// One fully specified two-time-scale problem.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    name: String,
    ops: Arc<dyn Operators>,
    x_star: Vec<f64>,
    y_star: Vec<f64>,
    declared: Option<Linearization>,
    lin: Linearization,
    noise: NoiseModel,
    gtd: Option<GtdMatrices>,
    holder: HolderOrders,
}

impl ProblemSpec {
    /// Builds and checks a problem from its configuration block.
    pub fn from_config(cfg: &ProblemConfig) -> Result<Self, ProblemError> {
        match cfg {
            ProblemConfig::Linear {
                b1,
                b2,
                b3,
                h,
                x_star,
                y_star,
                sigma_xi,
                sigma_psi,
                sigma_xipsi,
                holder,
            } => {
                let dx = b1.rows();
                let dy = b3.rows();
                let shape_ok = b1.is_square()
                    && b3.is_square()
                    && b2.rows() == dy
                    && b2.cols() == dx
                    && h.as_ref().is_none_or(|h| h.rows() == dx && h.cols() == dy)
                    && x_star.as_ref().is_none_or(|v| v.len() == dx)
                    && y_star.as_ref().is_none_or(|v| v.len() == dy);
                if !shape_ok {
                    return Err(ProblemError::DimensionMismatch(
                        "linear problem: b1 must be dx×dx, b2 dy×dx, b3 dy×dy, h dx×dy".into(),
                    ));
                }
                let h = h.clone().unwrap_or_else(|| Matrix::zeros(dx, dy));
                let ops = LinearOps {
                    b1: b1.clone(),
                    b2: b2.clone(),
                    b3: b3.clone(),
                    h: h.clone(),
                    x_star: x_star.clone().unwrap_or_else(|| vec![0.0; dx]),
                    y_star: y_star.clone().unwrap_or_else(|| vec![0.0; dy]),
                };
                let noise = NoiseModel::GaussianJoint(GaussianNoise::new(NoiseCovariances {
                    sigma_xi: sigma_xi.clone(),
                    sigma_psi: sigma_psi.clone(),
                    sigma_xipsi: sigma_xipsi.clone().unwrap_or_else(|| Matrix::zeros(dx, dy)),
                })?)
                .checked_dims(dx, dy)?;
                let lin = Linearization {
                    b1: b1.clone(),
                    b2: b2.clone(),
                    b3: b3.clone(),
                    h_star: h,
                };
                let (xs, ys) = (ops.x_star.clone(), ops.y_star.clone());
                Self::assemble(
                    "linear",
                    Arc::new(ops),
                    xs,
                    ys,
                    Some(lin),
                    noise,
                    None,
                    holder.unwrap_or_default(),
                )
            }
            ProblemConfig::PrAveraging { q, sigma_xi } => {
                let q = q.clone().unwrap_or_else(default_quadratic);
                let d = check_spd("q", &q)?;
                let sigma_xi = sigma_xi.clone().unwrap_or_else(|| Matrix::identity(d));
                let noise = NoiseModel::GaussianJoint(GaussianNoise::new(NoiseCovariances {
                    sigma_xi,
                    sigma_psi: Matrix::zeros(d, d),
                    sigma_xipsi: Matrix::zeros(d, d),
                })?)
                .checked_dims(d, d)?;
                let lin = Linearization {
                    b1: q.clone(),
                    b2: Matrix::identity(d).scale(-1.0),
                    b3: Matrix::identity(d),
                    h_star: Matrix::zeros(d, d),
                };
                Self::assemble(
                    "pr_averaging",
                    Arc::new(PrAveragingOps { q }),
                    vec![0.0; d],
                    vec![0.0; d],
                    Some(lin),
                    noise,
                    None,
                    HolderOrders::default(),
                )
            }
            ProblemConfig::Shb { q, sigma_xi } => {
                let q = q.clone().unwrap_or_else(default_quadratic);
                let d = check_spd("q", &q)?;
                let sigma_xi = sigma_xi.clone().unwrap_or_else(|| Matrix::identity(d));
                let noise = NoiseModel::GaussianJoint(GaussianNoise::new(NoiseCovariances {
                    sigma_xi,
                    sigma_psi: Matrix::zeros(d, d),
                    sigma_xipsi: Matrix::zeros(d, d),
                })?)
                .checked_dims(d, d)?;
                let lin = Linearization {
                    b1: Matrix::identity(d),
                    b2: Matrix::identity(d),
                    b3: q.clone(),
                    h_star: q.clone(),
                };
                Self::assemble(
                    "shb",
                    Arc::new(HeavyBallOps { q }),
                    vec![0.0; d],
                    vec![0.0; d],
                    Some(lin),
                    noise,
                    None,
                    HolderOrders::default(),
                )
            }
            ProblemConfig::Gtd2 { mdp } => {
                Self::gtd(mdp.clone().unwrap_or_else(MdpSpec::benchmark), GtdVariant::Gtd2)
            }
            ProblemConfig::Tdc { mdp } => {
                Self::gtd(mdp.clone().unwrap_or_else(MdpSpec::benchmark), GtdVariant::Tdc)
            }
        }
    }

    /// GTD2 or TDC with i.i.d. transition samples from `mdp`.
    pub fn gtd(mdp: MdpSpec, variant: GtdVariant) -> Result<Self, ProblemError> {
        mdp.validate()?;
        let m = mdp.gtd_matrices()?;
        let d = m.b.len();
        if m.c.min_symmetric_eigenvalue()? <= 0.0 {
            return Err(ProblemError::InvalidMdp(
                "C = E[phi phi^T] is not positive definite".into(),
            ));
        }
        let c_inv = m.c.inverse()?;
        let a_inv = m
            .a
            .inverse()
            .map_err(|_| ProblemError::InvalidMdp("A is singular".into()))?;
        let y_star = a_inv.matvec(&m.b)?;
        let a_t = m.a.transpose();
        let d_t = m.d.transpose();
        let c_inv_a = c_inv.matmul(&m.a)?;
        let (b2, b3) = match variant {
            GtdVariant::Gtd2 => (a_t.scale(-1.0), a_t.matmul(&c_inv_a)?),
            GtdVariant::Tdc => (d_t.clone(), m.a.sub(&d_t.matmul(&c_inv_a)?)?),
        };
        let lin = Linearization {
            b1: m.c.clone(),
            b2,
            b3,
            h_star: c_inv_a.scale(-1.0),
        };
        let samples = mdp.transition_samples();
        let mut acc = 0.0;
        let cumulative: Vec<f64> = samples
            .iter()
            .map(|s| {
                acc += s.prob;
                acc
            })
            .collect();
        let noise = NoiseModel::GtdSampling(GtdNoise {
            variant,
            samples: Arc::new(samples),
            cumulative: Arc::new(cumulative),
        });
        let ops = GtdOps {
            m: m.clone(),
            a_t,
            d_t,
            c_inv,
            variant,
        };
        let name = match variant {
            GtdVariant::Gtd2 => "gtd2",
            GtdVariant::Tdc => "tdc",
        };
        Self::assemble(
            name,
            Arc::new(ops),
            vec![0.0; d],
            y_star,
            Some(lin),
            noise,
            Some(m),
            HolderOrders::default(),
        )
    }

    /// A problem with user-supplied operators; the linearization is
    /// obtained by central finite differences at the root.
    pub fn custom(
        name: &str,
        ops: Arc<dyn Operators>,
        x_star: Vec<f64>,
        y_star: Vec<f64>,
        noise: NoiseCovariances,
        holder: HolderOrders,
    ) -> Result<Self, ProblemError> {
        let noise = NoiseModel::GaussianJoint(GaussianNoise::new(noise)?)
            .checked_dims(x_star.len(), y_star.len())?;
        Self::assemble(name, ops, x_star, y_star, None, noise, None, holder)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        name: &str,
        ops: Arc<dyn Operators>,
        x_star: Vec<f64>,
        y_star: Vec<f64>,
        declared: Option<Linearization>,
        noise: NoiseModel,
        gtd: Option<GtdMatrices>,
        holder: HolderOrders,
    ) -> Result<Self, ProblemError> {
        if ops.dim_x() != x_star.len() || ops.dim_y() != y_star.len() {
            return Err(ProblemError::DimensionMismatch(
                "root dimensions disagree with the operators".into(),
            ));
        }
        if !(0.5..=1.0).contains(&holder.delta_h)
            || !(holder.delta_f > 0.0 && holder.delta_f <= 1.0)
            || !(holder.delta_g > 0.0 && holder.delta_g <= 1.0)
        {
            return Err(ProblemError::Invalid(format!(
                "Hölder orders out of range: {holder:?}"
            )));
        }
        let lin = match &declared {
            Some(l) => l.clone(),
            None => linearize_numeric(ops.as_ref(), &x_star, &y_star)?,
        };
        let p = Self {
            name: name.to_string(),
            ops,
            x_star,
            y_star,
            declared,
            lin,
            noise,
            gtd,
            holder,
        };
        p.check_root()?;
        p.check_inner_solution()?;
        Ok(p)
    }

    fn check_root(&self) -> Result<(), ProblemError> {
        let (f, g, _) = self.eval_operators(&self.x_star, &self.y_star)?;
        let r = norm(&f).max(norm(&g));
        if r >= ROOT_TOL {
            return Err(ProblemError::RootResidual(r));
        }
        Ok(())
    }

    fn check_inner_solution(&self) -> Result<(), ProblemError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x1a2b_3c4d);
        let (dx, dy) = (self.dim_x(), self.dim_y());
        let mut hy = vec![0.0; dx];
        let mut fv = vec![0.0; dx];
        for _ in 0..INNER_PROBES {
            let y: Vec<f64> = self
                .y_star
                .iter()
                .map(|v| v + rng.random_range(-PROBE_RADIUS..PROBE_RADIUS))
                .collect();
            debug_assert_eq!(y.len(), dy);
            self.ops.h(&y, &mut hy);
            self.ops.f(&hy, &y, &mut fv);
            let r = norm(&fv);
            if !(r < INNER_TOL) {
                return Err(ProblemError::InnerSolution(r));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn dim_x(&self) -> usize {
        self.x_star.len()
    }
    pub fn dim_y(&self) -> usize {
        self.y_star.len()
    }
    pub fn x_star(&self) -> &[f64] {
        &self.x_star
    }
    pub fn y_star(&self) -> &[f64] {
        &self.y_star
    }
    pub fn holder(&self) -> HolderOrders {
        self.holder
    }
    pub fn operators(&self) -> &dyn Operators {
        self.ops.as_ref()
    }
    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }
    /// Exact GTD expectations, for the GTD2/TDC problems.
    pub fn gtd_matrices(&self) -> Option<&GtdMatrices> {
        self.gtd.as_ref()
    }

    pub fn eval_operators(
        &self,
        x: &[f64],
        y: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), ProblemError> {
        self.check_dims(x, y)?;
        let mut f = vec![0.0; self.dim_x()];
        let mut g = vec![0.0; self.dim_y()];
        let mut h = vec![0.0; self.dim_x()];
        self.ops.f(x, y, &mut f);
        self.ops.g(x, y, &mut g);
        self.ops.h(y, &mut h);
        Ok((f, g, h))
    }

    fn check_dims(&self, x: &[f64], y: &[f64]) -> Result<(), ProblemError> {
        if x.len() != self.dim_x() || y.len() != self.dim_y() {
            return Err(ProblemError::DimensionMismatch(format!(
                "expected x in R^{} and y in R^{}, got {} and {}",
                self.dim_x(),
                self.dim_y(),
                x.len(),
                y.len()
            )));
        }
        Ok(())
    }

    /// `(B₁, B₂, B₃, ∇H(y⋆))`: the declared matrices when the problem has
    /// closed forms, finite differences otherwise.
    pub fn linearize(&self) -> &Linearization {
        &self.lin
    }

    /// Always recomputes the linearization by central differences.
    pub fn linearize_numeric(&self) -> Result<Linearization, ProblemError> {
        linearize_numeric(self.ops.as_ref(), &self.x_star, &self.y_star)
    }

    pub fn has_declared_linearization(&self) -> bool {
        self.declared.is_some()
    }

    /// Spectra of `B₁` and `B₃ − β̃I/2` for the given schedule.
    pub fn hurwitz_report(&self, sched: &StepSchedule) -> Result<HurwitzReport, ProblemError> {
        let bt = sched.beta_tilde()?;
        let slow = self.slow_drift(bt)?;
        Ok(HurwitzReport {
            beta_tilde: bt,
            fast: spectral_report(&self.lin.b1)?,
            slow: spectral_report(&slow)?,
        })
    }

    /// Fails with [`ProblemError::NotHurwitz`] naming the offending drift.
    pub fn require_hurwitz(&self, sched: &StepSchedule) -> Result<HurwitzReport, ProblemError> {
        let r = self.hurwitz_report(sched)?;
        if !r.fast.hurwitz_for_negation {
            return Err(ProblemError::NotHurwitz {
                which: "B1".into(),
                min_real_part: r.fast.min_real_part,
            });
        }
        if !r.slow.hurwitz_for_negation {
            return Err(ProblemError::NotHurwitz {
                which: "(B3 - beta_tilde I/2)".into(),
                min_real_part: r.slow.min_real_part,
            });
        }
        Ok(r)
    }

    /// `B₃ − β̃I/2`.
    pub fn slow_drift(&self, beta_tilde: f64) -> Result<Matrix, ProblemError> {
        let d = self.dim_y();
        Ok(self.lin.b3.sub(&Matrix::identity(d).scale(beta_tilde / 2.0))?)
    }

    /// Draws `(ξ, ψ)` at `(x, y)` into the output buffers.
    pub fn sample_noise_into<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        x: &[f64],
        y: &[f64],
        xi: &mut [f64],
        psi: &mut [f64],
        scratch: &mut Vec<f64>,
    ) {
        match &self.noise {
            NoiseModel::GaussianJoint(g) => {
                let dx = xi.len();
                let n = g.factor.rows();
                scratch.clear();
                scratch.extend((0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
                for i in 0..n {
                    // Lower triangular: row i only touches draws 0..=i.
                    let v: f64 = g.factor.row(i)[..=i]
                        .iter()
                        .zip(&scratch[..=i])
                        .map(|(a, b)| a * b)
                        .sum();
                    if i < dx {
                        xi[i] = v;
                    } else {
                        psi[i - dx] = v;
                    }
                }
            }
            NoiseModel::GtdSampling(gn) => {
                let u: f64 = rng.random();
                let k = gn
                    .cumulative
                    .partition_point(|&c| c <= u)
                    .min(gn.samples.len() - 1);
                let s = &gn.samples[k];
                // ξ = C_k x + A_k y − b_k − F(x, y)
                self.ops.f(x, y, xi);
                for i in 0..xi.len() {
                    let cx: f64 = s.c.row(i).iter().zip(x).map(|(a, b)| a * b).sum();
                    let ay: f64 = s.a.row(i).iter().zip(y).map(|(a, b)| a * b).sum();
                    xi[i] = cx + ay - s.b[i] - xi[i];
                }
                self.ops.g(x, y, psi);
                match gn.variant {
                    GtdVariant::Gtd2 => {
                        // ψ = −A_kᵀ x − G(x, y)
                        for i in 0..psi.len() {
                            let atx: f64 = (0..x.len()).map(|j| s.a[(j, i)] * x[j]).sum();
                            psi[i] = -atx - psi[i];
                        }
                    }
                    GtdVariant::Tdc => {
                        // ψ = D_kᵀ x + A_k y − b_k − G(x, y)
                        for i in 0..psi.len() {
                            let dtx: f64 = (0..x.len()).map(|j| s.d[(j, i)] * x[j]).sum();
                            let ay: f64 = s.a.row(i).iter().zip(y).map(|(a, b)| a * b).sum();
                            psi[i] = dtx + ay - s.b[i] - psi[i];
                        }
                    }
                }
            }
        }
    }

    pub fn sample_noise<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        x: &[f64],
        y: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>), ProblemError> {
        self.check_dims(x, y)?;
        let mut xi = vec![0.0; self.dim_x()];
        let mut psi = vec![0.0; self.dim_y()];
        self.sample_noise_into(rng, x, y, &mut xi, &mut psi, &mut Vec::new());
        Ok((xi, psi))
    }

    /// Exact covariance blocks of `(ξ, ψ)` evaluated at `(x, y)`.
    ///
    /// For Gaussian noise these are the stored matrices; for GTD sampling
    /// they come from enumerating every transition triple.
    pub fn noise_cov_at(&self, x: &[f64], y: &[f64]) -> Result<NoiseCovariances, ProblemError> {
        self.check_dims(x, y)?;
        match &self.noise {
            NoiseModel::GaussianJoint(g) => Ok(g.cov.clone()),
            NoiseModel::GtdSampling(gn) => {
                let (dx, dy) = (self.dim_x(), self.dim_y());
                let mut cov = NoiseCovariances {
                    sigma_xi: Matrix::zeros(dx, dx),
                    sigma_psi: Matrix::zeros(dy, dy),
                    sigma_xipsi: Matrix::zeros(dx, dy),
                };
                let (f, g, _) = self.eval_operators(x, y)?;
                for s in gn.samples.iter() {
                    let mut xi = s.c.matvec(x)?;
                    let ay = s.a.matvec(y)?;
                    for i in 0..dx {
                        xi[i] += ay[i] - s.b[i] - f[i];
                    }
                    let psi: Vec<f64> = match gn.variant {
                        GtdVariant::Gtd2 => {
                            let atx = s.a.transpose().matvec(x)?;
                            (0..dy).map(|i| -atx[i] - g[i]).collect()
                        }
                        GtdVariant::Tdc => {
                            let dtx = s.d.transpose().matvec(x)?;
                            (0..dy).map(|i| dtx[i] + ay[i] - s.b[i] - g[i]).collect()
                        }
                    };
                    for i in 0..dx {
                        for j in 0..dx {
                            cov.sigma_xi[(i, j)] += s.prob * xi[i] * xi[j];
                        }
                        for j in 0..dy {
                            cov.sigma_xipsi[(i, j)] += s.prob * xi[i] * psi[j];
                        }
                    }
                    for i in 0..dy {
                        for j in 0..dy {
                            cov.sigma_psi[(i, j)] += s.prob * psi[i] * psi[j];
                        }
                    }
                }
                Ok(cov)
            }
        }
    }

    /// Limits of the conditional noise covariances (evaluated at the root).
    pub fn asymptotic_noise_cov(&self) -> Result<NoiseCovariances, ProblemError> {
        self.noise_cov_at(&self.x_star, &self.y_star)
    }
}

impl NoiseModel {
    fn checked_dims(self, dx: usize, dy: usize) -> Result<Self, ProblemError> {
        if let NoiseModel::GaussianJoint(g) = &self {
            if g.cov.sigma_xi.rows() != dx || g.cov.sigma_psi.rows() != dy {
                return Err(ProblemError::DimensionMismatch(format!(
                    "noise covariances are {}x{} and {}x{}, problem has dim_x = {dx}, dim_y = {dy}",
                    g.cov.sigma_xi.rows(),
                    g.cov.sigma_xi.rows(),
                    g.cov.sigma_psi.rows(),
                    g.cov.sigma_psi.rows()
                )));
            }
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HurwitzReport {
    pub beta_tilde: f64,
    /// Spectrum of `B₁`.
    pub fast: SpectralReport,
    /// Spectrum of `B₃ − β̃I/2`.
    pub slow: SpectralReport,
}

fn check_spd(name: &str, q: &Matrix) -> Result<usize, ProblemError> {
    if !q.is_square() || q.asymmetry() > 1e-12 {
        return Err(ProblemError::Invalid(format!("{name} must be symmetric")));
    }
    if q.min_symmetric_eigenvalue()? <= 0.0 {
        return Err(ProblemError::Invalid(format!(
            "{name} must be positive definite"
        )));
    }
    Ok(q.rows())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Central-difference Jacobians at the root composed into `(B₁, B₂, B₃, ∇H)`.
pub fn linearize_numeric(
    ops: &dyn Operators,
    x_star: &[f64],
    y_star: &[f64],
) -> Result<Linearization, ProblemError> {
    let (dx, dy) = (x_star.len(), y_star.len());
    let root_norm = norm(x_star).hypot(norm(y_star));
    let step = FD_STEP * (1.0 + root_norm);

    // Differentiates `eval` (output length `rows`) with respect to `point`.
    let jac = |rows: usize, point: &[f64], eval: &dyn Fn(&[f64], &mut [f64])| -> Matrix {
        let mut j = Matrix::zeros(rows, point.len());
        let mut plus = vec![0.0; rows];
        let mut minus = vec![0.0; rows];
        let mut p = point.to_vec();
        for k in 0..point.len() {
            p[k] = point[k] + step;
            eval(&p, &mut plus);
            p[k] = point[k] - step;
            eval(&p, &mut minus);
            p[k] = point[k];
            for i in 0..rows {
                j[(i, k)] = (plus[i] - minus[i]) / (2.0 * step);
            }
        }
        j
    };

    let fx = jac(dx, x_star, &|x, out| ops.f(x, y_star, out));
    let fy = jac(dx, y_star, &|y, out| ops.f(x_star, y, out));
    let gx = jac(dy, x_star, &|x, out| ops.g(x, y_star, out));
    let gy = jac(dy, y_star, &|y, out| ops.g(x_star, y, out));
    let h_star = jac(dx, y_star, &|y, out| ops.h(y, out));

    // Central differences cannot resolve slopes below their truncation
    // error, which is of order step².
    let cond = fx.condition_number();
    let resolvable = fx.inverse().is_ok_and(|inv| inv.norm_1() * 10.0 * step * step < 1.0);
    if !(cond <= MAX_INNER_CONDITION) || !resolvable {
        return Err(ProblemError::SingularInnerJacobian(cond));
    }
    let b3 = gy.sub(&gx.matmul(&fx.solve(&fy)?)?)?;
    Ok(Linearization {
        b1: fx,
        b2: gx,
        b3,
        h_star,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support::linear_2d;

    fn pr() -> ProblemSpec {
        ProblemSpec::from_config(&ProblemConfig::PrAveraging {
            q: None,
            sigma_xi: None,
        })
        .unwrap()
    }

    fn shb() -> ProblemSpec {
        ProblemSpec::from_config(&ProblemConfig::Shb {
            q: None,
            sigma_xi: None,
        })
        .unwrap()
    }

    #[test]
    fn pr_averaging_operators() {
        let p = pr();
        let (f, g, h) = p.eval_operators(&[1.0, 1.0], &[3.0, -1.0]).unwrap();
        assert_eq!(f, vec![1.0, 2.0]);
        assert_eq!(g, vec![2.0, -2.0]);
        assert_eq!(h, vec![0.0, 0.0]);
        let l = p.linearize();
        assert_eq!(l.b1, Matrix::diag(&[1.0, 2.0]));
        assert_eq!(l.b2, Matrix::identity(2).scale(-1.0));
        assert_eq!(l.b3, Matrix::identity(2));
        let sched = StepSchedule::polynomial(1.0, 0.6, 1.0, 1.0).unwrap();
        assert_eq!(p.slow_drift(sched.beta_tilde().unwrap()).unwrap(), Matrix::identity(2).scale(0.5));
    }

    #[test]
    fn shb_operators() {
        let p = shb();
        let (f, g, h) = p.eval_operators(&[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(f, vec![0.0, -1.0]);
        assert_eq!(g, vec![1.0, 1.0]);
        assert_eq!(h, vec![1.0, 2.0]);
        let l = p.linearize();
        assert_eq!(l.b1, Matrix::identity(2));
        assert_eq!(l.b2, Matrix::identity(2));
        assert_eq!(l.b3, Matrix::diag(&[1.0, 2.0]));
    }

    #[test]
    fn linear_root_of_inner_loop() {
        let p = linear_2d();
        let y = [0.3, -0.7];
        let (_, _, h) = p.eval_operators(&[0.0, 0.0], &y).unwrap();
        let (f, _, _) = p.eval_operators(&h, &y).unwrap();
        assert!(f.iter().all(|v| v.abs() < 1e-15));
        assert!(matches!(
            p.eval_operators(&[0.0], &y),
            Err(ProblemError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn declared_matches_finite_differences() {
        for p in [linear_2d(), pr(), shb()] {
            let fd = p.linearize_numeric().unwrap();
            let l = p.linearize();
            for (a, b) in [(&l.b1, &fd.b1), (&l.b2, &fd.b2), (&l.b3, &fd.b3), (&l.h_star, &fd.h_star)] {
                assert!(a.max_abs_diff(b) < 1e-4, "{}: {a:?} vs {b:?}", p.name());
            }
        }
    }

    #[test]
    fn custom_nonlinear_problem_linearizes() {
        // F = x − sin(y), G = x + y³ + y: H = sin, root (0, 0).
        // B₁ = 1, B₂ = 1, B₃ = ∇_yG − ∇_xG ∇_xF⁻¹ ∇_yF = 1 − 1·(−1) = 2.
        let ops = ClosureOperators::new(
            1,
            1,
            |x, y, o| o[0] = x[0] - y[0].sin(),
            |x, y, o| o[0] = x[0] + y[0].powi(3) + y[0],
            |y, o| o[0] = y[0].sin(),
        );
        let p = ProblemSpec::custom(
            "sine",
            Arc::new(ops),
            vec![0.0],
            vec![0.0],
            NoiseCovariances {
                sigma_xi: Matrix::identity(1),
                sigma_psi: Matrix::identity(1),
                sigma_xipsi: Matrix::zeros(1, 1),
            },
            HolderOrders::default(),
        )
        .unwrap();
        assert!(!p.has_declared_linearization());
        let l = p.linearize();
        assert!((l.b1[(0, 0)] - 1.0).abs() < 1e-8);
        assert!((l.b2[(0, 0)] - 1.0).abs() < 1e-8);
        assert!((l.b3[(0, 0)] - 2.0).abs() < 1e-8);
        assert!((l.h_star[(0, 0)] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn singular_inner_jacobian() {
        // F = x³ has vanishing derivative at the root.
        let ops = ClosureOperators::new(
            1,
            1,
            |x, _y, o| o[0] = x[0].powi(3),
            |_x, y, o| o[0] = y[0],
            |_y, o| o[0] = 0.0,
        );
        let cov = NoiseCovariances {
            sigma_xi: Matrix::identity(1),
            sigma_psi: Matrix::identity(1),
            sigma_xipsi: Matrix::zeros(1, 1),
        };
        let err = ProblemSpec::custom("cubic", Arc::new(ops), vec![0.0], vec![0.0], cov, HolderOrders::default())
            .unwrap_err();
        assert!(matches!(err, ProblemError::SingularInnerJacobian(_)), "{err}");
    }

    #[test]
    fn wrong_root_and_wrong_inner_map_rejected() {
        let cov = || NoiseCovariances {
            sigma_xi: Matrix::identity(1),
            sigma_psi: Matrix::identity(1),
            sigma_xipsi: Matrix::zeros(1, 1),
        };
        let ops = ClosureOperators::new(1, 1, |x, _, o| o[0] = x[0], |_, y, o| o[0] = y[0], |_, o| o[0] = 0.0);
        let err = ProblemSpec::custom("off", Arc::new(ops), vec![0.0], vec![1.0], cov(), HolderOrders::default())
            .unwrap_err();
        assert!(matches!(err, ProblemError::RootResidual(_)));

        let ops = ClosureOperators::new(1, 1, |x, y, o| o[0] = x[0] - y[0], |_, y, o| o[0] = y[0], |_, o| o[0] = 0.0);
        let err = ProblemSpec::custom("inner", Arc::new(ops), vec![0.0], vec![0.0], cov(), HolderOrders::default())
            .unwrap_err();
        assert!(matches!(err, ProblemError::InnerSolution(_)));
    }

    #[test]
    fn zero_noise_is_exactly_zero() {
        let p = ProblemSpec::from_config(&ProblemConfig::Linear {
            b1: Matrix::identity(1),
            b2: Matrix::zeros(1, 1),
            b3: Matrix::identity(1),
            h: None,
            x_star: None,
            y_star: None,
            sigma_xi: Matrix::zeros(1, 1),
            sigma_psi: Matrix::zeros(1, 1),
            sigma_xipsi: None,
            holder: None,
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let (xi, psi) = p.sample_noise(&mut rng, &[0.3], &[2.0]).unwrap();
            assert_eq!((xi[0], psi[0]), (0.0, 0.0));
        }
    }

    #[test]
    fn non_psd_noise_rejected() {
        let err = ProblemSpec::from_config(&ProblemConfig::Linear {
            b1: Matrix::identity(1),
            b2: Matrix::zeros(1, 1),
            b3: Matrix::identity(1),
            h: None,
            x_star: None,
            y_star: None,
            sigma_xi: Matrix::identity(1),
            sigma_psi: Matrix::identity(1),
            sigma_xipsi: Some(Matrix::diag(&[2.0])),
            holder: None,
        })
        .unwrap_err();
        assert!(matches!(err, ProblemError::CholeskyFailure));
    }

    #[test]
    fn independent_blocks_have_small_cross_covariance() {
        let p = linear_2d();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 1_000_000;
        let mut cross = [[0.0; 2]; 2];
        let mut xi = [0.0; 2];
        let mut psi = [0.0; 2];
        let mut scratch = Vec::new();
        for _ in 0..n {
            p.sample_noise_into(&mut rng, &[0.0; 2], &[0.0; 2], &mut xi, &mut psi, &mut scratch);
            for i in 0..2 {
                for j in 0..2 {
                    cross[i][j] += xi[i] * psi[j];
                }
            }
        }
        for row in cross {
            for v in row {
                assert!((v / n as f64).abs() < 0.01, "{}", v / n as f64);
            }
        }
    }

    #[test]
    fn hurwitz_depends_on_beta_tilde() {
        // B₃ = I with β₀ = 0.25, b = 1: β̃ = 4 and B₃ − 2I is not Hurwitz-stable.
        let p = pr();
        let ok = StepSchedule::polynomial(1.0, 0.6, 1.0, 1.0).unwrap();
        assert!(p.require_hurwitz(&ok).is_ok());
        let bad = StepSchedule::polynomial(1.0, 0.6, 0.25, 1.0).unwrap();
        match p.require_hurwitz(&bad) {
            Err(ProblemError::NotHurwitz { which, min_real_part }) => {
                assert!(which.contains("B3"));
                assert!((min_real_part + 1.0).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_json_shape() {
        let json = r#"{"kind":"pr_averaging","q":[[1.0,0.0],[0.0,2.0]]}"#;
        let cfg: ProblemConfig = serde_json::from_str(json).unwrap();
        assert_eq!(serde_json::to_string(&cfg).unwrap(), json);
        assert!(serde_json::from_str::<ProblemConfig>(r#"{"kind":"pr_averaging","bogus":1}"#).is_err());
        assert!(serde_json::from_str::<ProblemConfig>(r#"{"kind":"nope"}"#).is_err());
    }
}
