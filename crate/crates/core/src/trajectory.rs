//! Continuous piecewise-linear trajectories built from rescaled sequences.
//!
//! A path started at index `n` places the value for index `m` at the step
//! sum `Γ_{n,m}` of its own scale and interpolates linearly in between.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::schedule::{Scale, ScheduleError, StepSchedule};

#[derive(Debug, Error, PartialEq)]
pub enum TrajectoryError {
    #[error("a path needs at least 2 values, got {0}")]
    InsufficientValues(usize),
    #[error("time {t} is outside the covered horizon [0, {horizon}]")]
    OutOfHorizon { t: f64, horizon: f64 },
    #[error("values have inconsistent dimensions")]
    RaggedValues,
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

#[derive(Debug, Clone)]
pub struct PiecewiseLinearPath {
    start: usize,
    scale: Scale,
    /// `Γ_{n,n+k}`; may extend past the last value.
    times: Arc<Vec<f64>>,
    values: Vec<Vec<f64>>,
    sched: StepSchedule,
}

/// Anchors `values[k]` (the sequence at index `n + k`) at `Γ_{n,n+k}`.
pub fn build_path(
    scale: Scale,
    n: usize,
    values: Vec<Vec<f64>>,
    sched: &StepSchedule,
) -> Result<PiecewiseLinearPath, TrajectoryError> {
    if values.len() < 2 {
        return Err(TrajectoryError::InsufficientValues(values.len()));
    }
    let d = values[0].len();
    if values.iter().any(|v| v.len() != d) {
        return Err(TrajectoryError::RaggedValues);
    }
    let times = sched.partial_sums(scale, n, values.len())?;
    Ok(PiecewiseLinearPath {
        start: n,
        scale,
        times,
        values,
        sched: sched.clone(),
    })
}

impl PiecewiseLinearPath {
    pub fn start(&self) -> usize {
        self.start
    }

    pub fn scale(&self) -> Scale {
        self.scale
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn anchor_times(&self) -> &[f64] {
        &self.times[..self.values.len()]
    }

    pub fn anchor_values(&self) -> &[Vec<f64>] {
        &self.values
    }

    /// Last covered time `Γ_{n, n+len−1}`.
    pub fn horizon(&self) -> f64 {
        self.times[self.values.len() - 1]
    }

    /// Linear interpolation between the anchors bracketing `t`.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>, TrajectoryError> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(t, &mut out)?;
        Ok(out)
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) -> Result<(), TrajectoryError> {
        let horizon = self.horizon();
        if !(t >= 0.0 && t <= horizon) {
            return Err(TrajectoryError::OutOfHorizon { t, horizon });
        }
        let (m, t_floor) = self.sched.locate(self.scale, self.start, t)?;
        let k = m - self.start;
        let lo = &self.values[k];
        if t == t_floor {
            out.copy_from_slice(lo);
            return Ok(());
        }
        let hi = &self.values[k + 1];
        let w = (t - t_floor) / self.sched.step(self.scale, m)?;
        for ((o, a), b) in out.iter_mut().zip(lo).zip(hi) {
            *o = a + w * (b - a);
        }
        Ok(())
    }
}

/// Free-function form of [`PiecewiseLinearPath::eval`].
pub fn eval_path(path: &PiecewiseLinearPath, t: f64) -> Result<Vec<f64>, TrajectoryError> {
    path.eval(t)
}

/// Replica × time × coordinate samples of an ensemble of paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FddSamples {
    times: Vec<f64>,
    dim: usize,
    n_replicas: usize,
    /// Replica-major, then time, then coordinate.
    data: Vec<f64>,
}

impl FddSamples {
    /// Assembles samples from per-replica rows, each `times.len() × dim`
    /// values laid out time-major.
    pub fn from_rows(times: Vec<f64>, dim: usize, rows: Vec<Vec<f64>>) -> Self {
        let width = times.len() * dim;
        assert!(rows.iter().all(|r| r.len() == width), "ragged FDD rows");
        let n_replicas = rows.len();
        Self {
            times,
            dim,
            n_replicas,
            data: rows.into_iter().flatten().collect(),
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_replicas(&self) -> usize {
        self.n_replicas
    }

    pub fn value(&self, replica: usize, t_index: usize) -> &[f64] {
        let at = (replica * self.times.len() + t_index) * self.dim;
        &self.data[at..at + self.dim]
    }

    /// Replica × coordinate matrix at one time index.
    pub fn slice(&self, t_index: usize) -> Matrix {
        let data = (0..self.n_replicas)
            .flat_map(|r| self.value(r, t_index).iter().copied())
            .collect();
        Matrix::new(self.n_replicas, self.dim, data).expect("finite samples")
    }
}

/// Evaluates every path at every time; rows are in path order.
pub fn sample_fdd(paths: &[PiecewiseLinearPath], times: &[f64]) -> Result<FddSamples, TrajectoryError> {
    let dim = paths.first().map_or(0, |p| p.dim());
    let rows = paths
        .iter()
        .map(|p| sample_one(p, times))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FddSamples::from_rows(times.to_vec(), dim, rows))
}

/// One path's values at `times`, concatenated.
pub fn sample_one(path: &PiecewiseLinearPath, times: &[f64]) -> Result<Vec<f64>, TrajectoryError> {
    let d = path.dim();
    let mut row = vec![0.0; times.len() * d];
    for (k, &t) in times.iter().enumerate() {
        path.eval_into(t, &mut row[k * d..(k + 1) * d])?;
    }
    Ok(row)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `α_k = 1/(k+1)`.
    fn harmonic() -> StepSchedule {
        StepSchedule::polynomial(1.0, 1.0, 1.0, 1.0).unwrap()
    }

    fn scalar_path(values: &[f64]) -> PiecewiseLinearPath {
        build_path(Scale::Alpha, 1, values.iter().map(|&v| vec![v]).collect(), &harmonic()).unwrap()
    }

    #[test]
    fn anchors_at_partial_sums() {
        let p = scalar_path(&[1.0, 2.0, 3.0]);
        let t = p.anchor_times();
        assert_eq!(t[0], 0.0);
        assert!((t[1] - 0.5).abs() < 1e-15);
        assert!((t[2] - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(p.eval(0.0).unwrap(), vec![1.0]);
    }

    #[test]
    fn segment_formula() {
        let p = scalar_path(&[0.0, 1.0, 3.0]);
        let v = p.eval(0.7).unwrap()[0];
        assert!((v - 2.2).abs() < 1e-12, "{v}");
        let p = scalar_path(&[0.0, 1.0]);
        assert!((p.eval(0.25).unwrap()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constant_values_give_constant_path() {
        let p = scalar_path(&[4.0; 6]);
        for i in 0..=20 {
            let t = p.horizon() * i as f64 / 20.0;
            assert_eq!(p.eval(t).unwrap(), vec![4.0]);
        }
    }

    #[test]
    fn errors() {
        assert_eq!(
            build_path(Scale::Beta, 1, vec![vec![1.0]], &harmonic()).unwrap_err(),
            TrajectoryError::InsufficientValues(1)
        );
        assert_eq!(
            build_path(Scale::Beta, 1, vec![vec![1.0], vec![1.0, 2.0]], &harmonic()).unwrap_err(),
            TrajectoryError::RaggedValues
        );
        let p = scalar_path(&[0.0, 1.0, 3.0]);
        assert!(matches!(p.eval(0.9), Err(TrajectoryError::OutOfHorizon { .. })));
        assert!(matches!(p.eval(-0.1), Err(TrajectoryError::OutOfHorizon { .. })));
        assert!(sample_fdd(&[p], &[0.0, 2.0]).is_err());
    }

    #[test]
    fn horizon_end_is_last_value() {
        let p = scalar_path(&[0.0, 1.0, 3.0]);
        assert_eq!(p.eval(p.horizon()).unwrap(), vec![3.0]);
    }

    #[test]
    fn fdd_layout() {
        let a = scalar_path(&[0.0, 1.0, 3.0]);
        let b = scalar_path(&[5.0, 6.0, 7.0]);
        let times = [0.0, 0.5];
        let f = sample_fdd(&[a, b], &times).unwrap();
        assert_eq!(f.n_replicas(), 2);
        assert_eq!(f.value(0, 1), &[1.0]);
        assert_eq!(f.value(1, 0), &[5.0]);
        assert_eq!(f.slice(0), Matrix::from_rows(&[vec![0.0], vec![5.0]]).unwrap());
    }
}
