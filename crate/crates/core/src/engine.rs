//! The coupled fast/slow iteration and seeded Monte Carlo ensembles.
//!
//! Each replica draws from its own ChaCha8 stream (seed = master seed,
//! stream = replica id), so results do not depend on how replicas are
//! scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::problem::{ProblemError, ProblemSpec};
use crate::schedule::{Scale, ScheduleError, StepSchedule};
use crate::trajectory::{FddSamples, TrajectoryError};

/// Magnitude beyond which an iterate counts as diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;
/// Largest tolerated fraction of diverged replicas.
pub const MAX_DIVERGED_FRACTION: f64 = 0.01;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("iterate diverged at step {n}")]
    Diverged { n: usize },
    #[error("rescaled quantities need n >= 1 (the step at n - 1 must exist)")]
    IndexError,
    #[error("{diverged} of {replicas} replicas diverged")]
    TooManyDivergences { diverged: usize, replicas: usize },
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
    #[error("B1 is singular; the auxiliary sequence is undefined")]
    SingularB1,
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

fn default_offset() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub n_iters: usize,
    pub master_seed: u64,
    pub n_replicas: usize,
    pub checkpoints: Vec<usize>,
    /// Start offset from the root, 1.0 in every coordinate by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_offset_x: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_offset_y: Option<Vec<f64>>,
}

impl RunConfig {
    pub fn new(n_iters: usize, master_seed: u64, n_replicas: usize, checkpoints: Vec<usize>) -> Self {
        Self {
            n_iters,
            master_seed,
            n_replicas,
            checkpoints,
            initial_offset_x: None,
            initial_offset_y: None,
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.n_replicas == 0 {
            return Err(EngineError::InvalidConfig("n_replicas must be positive".into()));
        }
        if self.checkpoints.windows(2).any(|w| w[1] <= w[0]) {
            return Err(EngineError::InvalidConfig(
                "checkpoints must be strictly increasing".into(),
            ));
        }
        if let (Some(&first), Some(&last)) = (self.checkpoints.first(), self.checkpoints.last()) {
            if first < 1 || last > self.n_iters {
                return Err(EngineError::InvalidConfig(format!(
                    "checkpoints must lie in [1, n_iters = {}]",
                    self.n_iters
                )));
            }
        }
        Ok(())
    }

    fn start(&self, p: &ProblemSpec) -> Result<IterateState, EngineError> {
        let pick = |offset: &Option<Vec<f64>>, root: &[f64], name: &str| -> Result<Vec<f64>, EngineError> {
            match offset {
                None => Ok(root.iter().map(|r| r + default_offset()).collect()),
                Some(o) if o.len() == root.len() => Ok(root.iter().zip(o).map(|(r, d)| r + d).collect()),
                Some(o) => Err(EngineError::InvalidConfig(format!(
                    "{name} has length {}, expected {}",
                    o.len(),
                    root.len()
                ))),
            }
        };
        Ok(IterateState {
            n: 0,
            x: pick(&self.initial_offset_x, p.x_star(), "initial_offset_x")?,
            y: pick(&self.initial_offset_y, p.y_star(), "initial_offset_y")?,
        })
    }
}

/// Raw iterates after `n` updates.
#[derive(Debug, Clone, PartialEq)]
pub struct IterateState {
    pub n: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Error terms and their rescalings at one index.
#[derive(Debug, Clone, PartialEq)]
pub struct Rescaled {
    pub x_hat: Vec<f64>,
    pub y_hat: Vec<f64>,
    pub x_check: Vec<f64>,
    pub y_check: Vec<f64>,
    pub z_check: Vec<f64>,
}

/// Precomputed data for turning raw iterates into rescaled ones.
#[derive(Debug, Clone)]
pub struct Rescaler {
    /// `B₂B₁⁻¹`.
    coupling: Matrix,
    h_buf: Vec<f64>,
}

impl Rescaler {
    pub fn new(p: &ProblemSpec) -> Result<Self, EngineError> {
        let lin = p.linearize();
        let b1_inv = lin.b1.inverse().map_err(|_| EngineError::SingularB1)?;
        let coupling = lin.b2.matmul(&b1_inv).map_err(ProblemError::from)?;
        Ok(Self {
            coupling,
            h_buf: vec![0.0; p.dim_x()],
        })
    }

    pub fn coupling(&self) -> &Matrix {
        &self.coupling
    }

    /// Writes `(x̂, ŷ, x̌, y̌, ž)` for index `n ≥ 1` into `out`.
    pub fn rescale_into(
        &mut self,
        p: &ProblemSpec,
        sched: &StepSchedule,
        n: usize,
        x: &[f64],
        y: &[f64],
        out: &mut Rescaled,
    ) -> Result<(), EngineError> {
        if n == 0 {
            return Err(EngineError::IndexError);
        }
        let s = sched.step_at(n - 1)?;
        p.operators().h(y, &mut self.h_buf);
        let (ra, rb) = (s.alpha.sqrt().recip(), s.beta.sqrt().recip());
        for i in 0..x.len() {
            out.x_hat[i] = x[i] - self.h_buf[i];
            out.x_check[i] = out.x_hat[i] * ra;
        }
        for (i, ys) in p.y_star().iter().enumerate() {
            out.y_hat[i] = y[i] - ys;
            out.y_check[i] = out.y_hat[i] * rb;
        }
        self.coupling.matvec_into(&out.x_check, &mut out.z_check);
        let root_kappa = s.kappa.sqrt();
        for i in 0..y.len() {
            out.z_check[i] = out.y_check[i] - root_kappa * out.z_check[i];
        }
        Ok(())
    }
}

impl Rescaled {
    fn zeros(dx: usize, dy: usize) -> Self {
        Self {
            x_hat: vec![0.0; dx],
            y_hat: vec![0.0; dy],
            x_check: vec![0.0; dx],
            y_check: vec![0.0; dy],
            z_check: vec![0.0; dy],
        }
    }
}

/// `(x̂, ŷ, x̌, y̌, ž)` at index `n`.
pub fn rescale(p: &ProblemSpec, sched: &StepSchedule, n: usize, x: &[f64], y: &[f64]) -> Result<Rescaled, EngineError> {
    if x.len() != p.dim_x() || y.len() != p.dim_y() {
        return Err(ProblemError::DimensionMismatch("rescale: iterate dimensions".into()).into());
    }
    let mut out = Rescaled::zeros(p.dim_x(), p.dim_y());
    Rescaler::new(p)?.rescale_into(p, sched, n, x, y, &mut out)?;
    Ok(out)
}

/// Allocation-free single-replica stepper.
struct Stepper {
    f: Vec<f64>,
    g: Vec<f64>,
    xi: Vec<f64>,
    psi: Vec<f64>,
    scratch: Vec<f64>,
}

impl Stepper {
    fn new(dx: usize, dy: usize) -> Self {
        Self {
            f: vec![0.0; dx],
            g: vec![0.0; dy],
            xi: vec![0.0; dx],
            psi: vec![0.0; dy],
            scratch: Vec::with_capacity(dx + dy),
        }
    }

    /// Synchronous update: `F`, `G` and the noise all read the same `(x, y)`.
    fn step(
        &mut self,
        p: &ProblemSpec,
        alpha: f64,
        beta: f64,
        s: &mut IterateState,
        rng: &mut ChaCha8Rng,
    ) -> Result<(), EngineError> {
        let ops = p.operators();
        ops.f(&s.x, &s.y, &mut self.f);
        ops.g(&s.x, &s.y, &mut self.g);
        p.sample_noise_into(rng, &s.x, &s.y, &mut self.xi, &mut self.psi, &mut self.scratch);
        let mut ok = true;
        for i in 0..s.x.len() {
            s.x[i] -= alpha * (self.f[i] + self.xi[i]);
            ok &= s.x[i].abs() <= DIVERGENCE_THRESHOLD;
        }
        for i in 0..s.y.len() {
            s.y[i] -= beta * (self.g[i] + self.psi[i]);
            ok &= s.y[i].abs() <= DIVERGENCE_THRESHOLD;
        }
        s.n += 1;
        if ok {
            Ok(())
        } else {
            Err(EngineError::Diverged { n: s.n })
        }
    }
}

/// One update `x_{n+1} = x_n − α_n(F + ξ_n)`, `y_{n+1} = y_n − β_n(G + ψ_n)`.
pub fn step_once(
    p: &ProblemSpec,
    sched: &StepSchedule,
    s: &IterateState,
    rng: &mut ChaCha8Rng,
) -> Result<IterateState, EngineError> {
    if s.x.len() != p.dim_x() || s.y.len() != p.dim_y() {
        return Err(ProblemError::DimensionMismatch("step_once: state dimensions".into()).into());
    }
    let st = sched.step_at(s.n)?;
    let mut next = s.clone();
    Stepper::new(p.dim_x(), p.dim_y()).step(p, st.alpha, st.beta, &mut next, rng)?;
    Ok(next)
}

/// The RNG of one replica.
pub fn replica_rng(master_seed: u64, replica_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(replica_id);
    rng
}

/// Rescaled quantities of every surviving replica at one checkpoint.
///
/// Each matrix is replica × coordinate, rows ordered by `replica_ids`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSnapshot {
    pub n: usize,
    pub replica_ids: Vec<usize>,
    pub x_hat: Matrix,
    pub y_hat: Matrix,
    pub x_check: Matrix,
    pub y_check: Matrix,
    pub z_check: Matrix,
}

/// The five recorded quantities, in output order.
pub const QUANTITIES: [&str; 5] = ["x_hat", "y_hat", "x_check", "y_check", "z_check"];

impl EnsembleSnapshot {
    pub fn quantity(&self, name: &str) -> Option<&Matrix> {
        match name {
            "x_hat" => Some(&self.x_hat),
            "y_hat" => Some(&self.y_hat),
            "x_check" => Some(&self.x_check),
            "y_check" => Some(&self.y_check),
            "z_check" => Some(&self.z_check),
            _ => None,
        }
    }

    /// Mean of `‖v‖²` over replicas for one quantity.
    pub fn mean_sq_norm(&self, name: &str) -> f64 {
        let m = self.quantity(name).expect("known quantity");
        m.as_slice().iter().map(|v| v * v).sum::<f64>() / m.rows() as f64
    }
}

/// Interpolated-trajectory sampling attached to an ensemble run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FddRequest {
    /// First index of the paths (burn-in).
    pub start: usize,
    /// Evaluation times, sorted, in each path's own time scale.
    pub times: Vec<f64>,
}

/// Samples of `X̄`, `Ȳ` and `Z̄` at the requested times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FddBundle {
    pub xbar: FddSamples,
    pub ybar: FddSamples,
    pub zbar: FddSamples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergedReplica {
    pub replica_id: usize,
    pub at: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleResult {
    pub n_replicas: usize,
    pub snapshots: Vec<EnsembleSnapshot>,
    pub diverged: Vec<DivergedReplica>,
    pub fdd: Option<FddBundle>,
}

/// Per-replica output before assembly.
struct ReplicaRun {
    checkpoints: Vec<Rescaled>,
    fdd: Option<[Vec<f64>; 3]>,
}

/// Where a requested time falls among a path's anchors: the anchor offset
/// from the path start and the weight of the next anchor, `None` when the
/// time coincides with the anchor.
#[derive(Debug, Clone, Copy)]
struct Node {
    index: usize,
    weight: Option<f64>,
}

/// Bracketing anchors of every requested time, shared by all replicas.
///
/// Replicas record only these indices, and interpolate exactly as
/// [`PiecewiseLinearPath::eval`](crate::trajectory::PiecewiseLinearPath::eval)
/// does, so the values match a path built from the full sequence.
#[derive(Debug)]
struct FddPlan {
    times: Vec<f64>,
    alpha: Vec<Node>,
    beta: Vec<Node>,
    /// Sorted, deduplicated indices whose rescaled values are needed.
    needed: Vec<usize>,
}

impl FddPlan {
    fn new(sched: &StepSchedule, req: &FddRequest) -> Result<Self, EngineError> {
        if req.times.windows(2).any(|w| w[1] < w[0]) || req.times.iter().any(|t| !(*t >= 0.0)) {
            return Err(EngineError::InvalidConfig("FDD times must be sorted and nonnegative".into()));
        }
        if req.start < 1 {
            return Err(EngineError::InvalidConfig("FDD start must be at least 1".into()));
        }
        let nodes = |scale| -> Result<Vec<Node>, EngineError> {
            req.times
                .iter()
                .map(|&t| {
                    let (m, floor) = sched.locate(scale, req.start, t)?;
                    let weight = if t == floor {
                        None
                    } else {
                        Some((t - floor) / sched.step(scale, m)?)
                    };
                    Ok(Node { index: m, weight })
                })
                .collect()
        };
        let alpha = nodes(Scale::Alpha)?;
        let beta = nodes(Scale::Beta)?;
        let mut needed: Vec<usize> = alpha
            .iter()
            .chain(&beta)
            .flat_map(|n| std::iter::once(n.index).chain(n.weight.map(|_| n.index + 1)))
            .collect();
        needed.sort_unstable();
        needed.dedup();
        Ok(Self {
            times: req.times.clone(),
            alpha,
            beta,
            needed,
        })
    }

    fn last_index(&self) -> usize {
        self.needed.last().copied().unwrap_or(0)
    }

    fn interpolate(&self, nodes: &[Node], recorded: &[Rescaled], pick: fn(&Rescaled) -> &Vec<f64>) -> Vec<f64> {
        let at = |n: usize| pick(&recorded[self.needed.binary_search(&n).expect("planned index")]);
        let mut row = Vec::new();
        for node in nodes {
            let lo = at(node.index);
            match node.weight {
                None => row.extend_from_slice(lo),
                Some(w) => {
                    let hi = at(node.index + 1);
                    row.extend(lo.iter().zip(hi).map(|(a, b)| a + w * (b - a)));
                }
            }
        }
        row
    }
}

fn run_replica(
    p: &ProblemSpec,
    sched: &StepSchedule,
    cfg: &RunConfig,
    plan: Option<&FddPlan>,
    rescaler: &Rescaler,
    steps: &[(f64, f64)],
    replica_id: usize,
) -> Result<ReplicaRun, EngineError> {
    let (dx, dy) = (p.dim_x(), p.dim_y());
    let mut rng = replica_rng(cfg.master_seed, replica_id as u64);
    let mut state = cfg.start(p)?;
    let mut stepper = Stepper::new(dx, dy);
    let mut rescaler = rescaler.clone();
    let mut buf = Rescaled::zeros(dx, dy);
    let mut out = Vec::with_capacity(cfg.checkpoints.len());
    let mut recorded = Vec::with_capacity(plan.map_or(0, |p| p.needed.len()));
    let needed: &[usize] = plan.map_or(&[], |p| &p.needed);

    for &(alpha, beta) in steps {
        stepper.step(p, alpha, beta, &mut state, &mut rng)?;
        let n = state.n;
        let want_cp = next_cp_is(n, &cfg.checkpoints, out.len());
        let want_fdd = needed.get(recorded.len()) == Some(&n);
        if want_cp || want_fdd {
            rescaler.rescale_into(p, sched, n, &state.x, &state.y, &mut buf)?;
            if want_cp {
                out.push(buf.clone());
            }
            if want_fdd {
                recorded.push(buf.clone());
            }
        }
    }

    let fdd = plan.map(|plan| {
        [
            plan.interpolate(&plan.alpha, &recorded, |r| &r.x_check),
            plan.interpolate(&plan.beta, &recorded, |r| &r.y_check),
            plan.interpolate(&plan.beta, &recorded, |r| &r.z_check),
        ]
    });
    Ok(ReplicaRun {
        checkpoints: out,
        fdd,
    })
}

fn next_cp_is(n: usize, checkpoints: &[usize], recorded: usize) -> bool {
    checkpoints.get(recorded) == Some(&n)
}

/// Runs the ensemble and collects snapshots at every checkpoint.
pub fn run_ensemble(p: &ProblemSpec, sched: &StepSchedule, cfg: &RunConfig) -> Result<Vec<EnsembleSnapshot>, EngineError> {
    Ok(simulate(p, sched, cfg, None)?.snapshots)
}

/// Runs the ensemble, optionally sampling interpolated trajectories.
///
/// Diverged replicas are dropped from every snapshot and listed in the
/// result; more than 1% of them is an error.
pub fn simulate(
    p: &ProblemSpec,
    sched: &StepSchedule,
    cfg: &RunConfig,
    fdd: Option<&FddRequest>,
) -> Result<EnsembleResult, EngineError> {
    cfg.validate()?;
    cfg.start(p)?;
    p.require_hurwitz(sched)?;
    let plan = fdd.map(|req| FddPlan::new(sched, req)).transpose()?;
    let rescaler = Rescaler::new(p)?;
    let last = cfg.n_iters.max(plan.as_ref().map_or(0, FddPlan::last_index));
    let steps = (0..last)
        .map(|n| sched.step_at(n).map(|st| (st.alpha, st.beta)))
        .collect::<Result<Vec<_>, _>>()?;

    let runs: Vec<Result<ReplicaRun, EngineError>> = (0..cfg.n_replicas)
        .into_par_iter()
        .map(|r| run_replica(p, sched, cfg, plan.as_ref(), &rescaler, &steps, r))
        .collect();

    let mut kept = Vec::with_capacity(runs.len());
    let mut diverged = Vec::new();
    for (id, run) in runs.into_iter().enumerate() {
        match run {
            Ok(r) => kept.push((id, r)),
            Err(EngineError::Diverged { n }) => diverged.push(DivergedReplica { replica_id: id, at: n }),
            Err(e) => return Err(e),
        }
    }
    if diverged.len() as f64 > MAX_DIVERGED_FRACTION * cfg.n_replicas as f64 {
        return Err(EngineError::TooManyDivergences {
            diverged: diverged.len(),
            replicas: cfg.n_replicas,
        });
    }

    let (dx, dy) = (p.dim_x(), p.dim_y());
    let ids: Vec<usize> = kept.iter().map(|(id, _)| *id).collect();
    let gather = |k: usize, pick: &dyn Fn(&Rescaled) -> &Vec<f64>, d: usize| -> Matrix {
        let data = kept.iter().flat_map(|(_, r)| pick(&r.checkpoints[k]).iter().copied()).collect();
        Matrix::new(kept.len(), d, data).expect("finite iterates")
    };
    let snapshots = cfg
        .checkpoints
        .iter()
        .enumerate()
        .map(|(k, &n)| EnsembleSnapshot {
            n,
            replica_ids: ids.clone(),
            x_hat: gather(k, &|r| &r.x_hat, dx),
            y_hat: gather(k, &|r| &r.y_hat, dy),
            x_check: gather(k, &|r| &r.x_check, dx),
            y_check: gather(k, &|r| &r.y_check, dy),
            z_check: gather(k, &|r| &r.z_check, dy),
        })
        .collect();

    let fdd = plan.map(|plan| {
        let mut rows: [Vec<Vec<f64>>; 3] = Default::default();
        for (_, r) in &mut kept {
            let [a, b, c] = r.fdd.take().expect("requested FDD rows");
            rows[0].push(a);
            rows[1].push(b);
            rows[2].push(c);
        }
        let [xr, yr, zr] = rows;
        FddBundle {
            xbar: FddSamples::from_rows(plan.times.clone(), dx, xr),
            ybar: FddSamples::from_rows(plan.times.clone(), dy, yr),
            zbar: FddSamples::from_rows(plan.times, dy, zr),
        }
    });

    Ok(EnsembleResult {
        n_replicas: cfg.n_replicas,
        snapshots,
        diverged,
        fdd,
    })
}
