//! Small dense real-matrix kernel.
//!
//! Everything in this crate works with tiny matrices (a handful of rows), so
//! the routines here favour exactness and reproducibility over asymptotic
//! speed: Lyapunov equations are solved through their Kronecker-vectorized
//! linear system, matrix exponentials use Padé scaling-and-squaring, and
//! eigenvalues come from a real Schur decomposition.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Absolute tolerance on Lyapunov residuals and symmetry checks.
pub const SOLVER_TOL: f64 = 1e-10;

/// Largest dimension accepted by [`solve_lyapunov`] (the vectorized system is d²×d²).
pub const MAX_LYAPUNOV_DIM: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("-B is not Hurwitz: smallest eigenvalue real part of B is {min_real_part}")]
    NotHurwitz { min_real_part: f64 },
    #[error("eigenvalue iteration did not converge")]
    NonConvergence,
    #[error("matrix is singular to working precision")]
    Singular,
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("Cholesky factorization failed at pivot {0}")]
    CholeskyFailure(usize),
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Dense row-major real matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(LinalgError::DimensionMismatch("ragged rows".into()));
        }
        Self::new(r, c, rows.iter().flatten().copied().collect())
    }

    /// Column vector.
    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(LinalgError::DimensionMismatch(format!(
                "{}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.data[k * other.cols + j];
                }
            }
        }
        Ok(out)
    }

    /// `self * v`, panics on dimension mismatch (internal hot path).
    pub fn matvec_into(&self, v: &[f64], out: &mut [f64]) {
        assert_eq!(v.len(), self.cols);
        assert_eq!(out.len(), self.rows);
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.row(i).iter().zip(v).map(|(a, b)| a * b).sum();
        }
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(LinalgError::DimensionMismatch(format!(
                "{}x{} * vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.rows];
        self.matvec_into(v, &mut out);
        Ok(out)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(LinalgError::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Induced 1-norm (max column sum).
    pub fn norm_1(&self) -> f64 {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self[(i, j)].abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn asymmetry(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        self.max_abs_diff(&self.transpose())
    }

    /// `(M + Mᵀ)/2`.
    pub fn symmetrized(&self) -> Matrix {
        let t = self.transpose();
        self.zip_with(&t, |a, b| 0.5 * (a + b))
            .expect("square matrix required for symmetrization")
    }

    fn require_square(&self, what: &str) -> Result<usize> {
        if self.is_square() {
            Ok(self.rows)
        } else {
            Err(LinalgError::DimensionMismatch(format!(
                "{what} must be square, got {}x{}",
                self.rows, self.cols
            )))
        }
    }

    /// Kronecker product `self ⊗ other`.
    pub fn kron(&self, other: &Matrix) -> Matrix {
        let (r, c) = (self.rows * other.rows, self.cols * other.cols);
        let mut out = Matrix::zeros(r, c);
        for i in 0..self.rows {
            for j in 0..self.cols {
                let a = self[(i, j)];
                for k in 0..other.rows {
                    for l in 0..other.cols {
                        out[(i * other.rows + k, j * other.cols + l)] = a * other[(k, l)];
                    }
                }
            }
        }
        out
    }

    pub fn inverse(&self) -> Result<Matrix> {
        let n = self.require_square("inverse")?;
        Lu::factor(self)?.solve_matrix(&Matrix::identity(n))
    }

    /// Solves `self * x = rhs` for a matrix right-hand side.
    pub fn solve(&self, rhs: &Matrix) -> Result<Matrix> {
        self.require_square("solve")?;
        Lu::factor(self)?.solve_matrix(rhs)
    }

    /// 1-norm condition number estimate `‖M‖₁‖M⁻¹‖₁` (infinite if singular).
    pub fn condition_number(&self) -> f64 {
        match self.inverse() {
            Ok(inv) => self.norm_1() * inv.norm_1(),
            Err(_) => f64::INFINITY,
        }
    }

    fn to_nalgebra(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    /// Smallest eigenvalue of the symmetric part of a square matrix.
    pub fn min_symmetric_eigenvalue(&self) -> Result<f64> {
        self.require_square("symmetric eigenvalues")?;
        if self.rows == 0 {
            return Ok(0.0);
        }
        let eig = self.symmetrized().to_nalgebra().symmetric_eigenvalues();
        Ok(eig.iter().copied().fold(f64::INFINITY, f64::min))
    }

    /// Lower-triangular Cholesky factor `L` with `L Lᵀ = self`.
    ///
    /// Zero pivots are accepted (positive semidefinite input); the
    /// corresponding column of `L` is set to zero.
    pub fn cholesky(&self) -> Result<Matrix> {
        let n = self.require_square("cholesky")?;
        let scale = self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
        let zero_tol = 1e-13 * scale;
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = self[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if d < -zero_tol {
                return Err(LinalgError::CholeskyFailure(j));
            }
            if d <= zero_tol {
                // Semidefinite direction: the rest of the column must vanish.
                for i in j + 1..n {
                    let mut s = self[(i, j)];
                    for k in 0..j {
                        s -= l[(i, k)] * l[(j, k)];
                    }
                    if s.abs() > 1e-8 * scale {
                        return Err(LinalgError::CholeskyFailure(j));
                    }
                }
                continue;
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in j + 1..n {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(l)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix{:?}", self.to_rows())
    }
}

// Matrices travel through JSON as nested row arrays.
impl Serialize for Matrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(deserializer)?;
        Matrix::from_rows(&rows).map_err(D::Error::custom)
    }
}

/// LU factorization with partial pivoting.
struct Lu {
    lu: Matrix,
    perm: Vec<usize>,
}

impl Lu {
    fn factor(m: &Matrix) -> Result<Self> {
        let n = m.rows;
        let mut lu = m.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = m.data.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        for k in 0..n {
            let (p, pivot) = (k..n)
                .map(|i| (i, lu[(i, k)].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pivot <= f64::EPSILON * scale * n as f64 || pivot == 0.0 {
                return Err(LinalgError::Singular);
            }
            if p != k {
                for j in 0..n {
                    lu.data.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let d = lu[(k, k)];
            for i in k + 1..n {
                let f = lu[(i, k)] / d;
                lu[(i, k)] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        lu.data[i * n + j] -= f * lu.data[k * n + j];
                    }
                }
            }
        }
        Ok(Self { lu, perm })
    }

    fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let n = self.lu.rows;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for k in 0..i {
                x[i] -= self.lu[(i, k)] * x[k];
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                x[i] -= self.lu[(i, k)] * x[k];
            }
            x[i] /= self.lu[(i, i)];
        }
        x
    }

    fn solve_matrix(&self, rhs: &Matrix) -> Result<Matrix> {
        let n = self.lu.rows;
        if rhs.rows != n {
            return Err(LinalgError::DimensionMismatch(format!(
                "system of size {n} with {} right-hand-side rows",
                rhs.rows
            )));
        }
        let mut out = Matrix::zeros(n, rhs.cols);
        let mut col = vec![0.0; n];
        for j in 0..rhs.cols {
            for i in 0..n {
                col[i] = rhs[(i, j)];
            }
            let x = self.solve_vec(&col);
            for i in 0..n {
                out[(i, j)] = x[i];
            }
        }
        Ok(out)
    }
}

/// Eigenvalue real parts of a square matrix and the derived Hurwitz verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub real_parts: Vec<f64>,
    pub min_real_part: f64,
    /// `true` iff every eigenvalue of `M` has positive real part, i.e. `−M` is Hurwitz.
    pub hurwitz_for_negation: bool,
}

pub fn spectral_report(m: &Matrix) -> Result<SpectralReport> {
    let n = m.require_square("spectral_report input")?;
    if n == 0 {
        return Ok(SpectralReport {
            real_parts: vec![],
            min_real_part: f64::INFINITY,
            hurwitz_for_negation: true,
        });
    }
    let schur = nalgebra::linalg::Schur::try_new(m.to_nalgebra(), f64::EPSILON, 10_000)
        .ok_or(LinalgError::NonConvergence)?;
    let mut real_parts: Vec<f64> = schur.complex_eigenvalues().iter().map(|c| c.re).collect();
    real_parts.sort_by(f64::total_cmp);
    let min_real_part = real_parts[0];
    Ok(SpectralReport {
        real_parts,
        min_real_part,
        hurwitz_for_negation: min_real_part > 0.0,
    })
}

/// Solves `BΣ + ΣBᵀ = C` for symmetric `C` with `−B` Hurwitz.
///
/// The d²×d² vectorized system `(B ⊗ I + I ⊗ B) vec(Σ) = vec(C)` is solved
/// densely; the result is symmetrized to remove roundoff skew.
pub fn solve_lyapunov(b: &Matrix, c: &Matrix) -> Result<Matrix> {
    let d = b.require_square("Lyapunov drift")?;
    if c.rows != d || c.cols != d {
        return Err(LinalgError::DimensionMismatch(format!(
            "drift is {d}x{d}, right-hand side is {}x{}",
            c.rows, c.cols
        )));
    }
    if d > MAX_LYAPUNOV_DIM {
        return Err(LinalgError::DimensionMismatch(format!(
            "dimension {d} exceeds the dense Lyapunov limit {MAX_LYAPUNOV_DIM}"
        )));
    }
    let asym = c.asymmetry();
    if asym > SOLVER_TOL * (1.0 + c.frobenius_norm()) {
        return Err(LinalgError::NotSymmetric(asym));
    }
    let report = spectral_report(b)?;
    if !report.hurwitz_for_negation {
        return Err(LinalgError::NotHurwitz {
            min_real_part: report.min_real_part,
        });
    }
    if d == 0 {
        return Ok(Matrix::zeros(0, 0));
    }
    let eye = Matrix::identity(d);
    // Row-major vec: vec(BΣ) = (B ⊗ I) vec(Σ), vec(ΣBᵀ) = (I ⊗ B) vec(Σ).
    let system = b.kron(&eye).add(&eye.kron(b))?;
    let rhs = Matrix::column(c.as_slice());
    let sol = Lu::factor(&system)?.solve_vec(rhs.as_slice());
    Ok(Matrix::new(d, d, sol)?.symmetrized())
}

// Padé(13) coefficients and theta_13 from Higham (2005).
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA13: f64 = 5.371920351148152;

/// `exp(t·M)` by scaling and squaring around a degree-13 Padé approximant.
pub fn matrix_exp(m: &Matrix, t: f64) -> Result<Matrix> {
    let n = m.require_square("matrix_exp input")?;
    if !t.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let a = m.scale(t);
    let norm = a.norm_1();
    if norm == 0.0 {
        return Ok(Matrix::identity(n));
    }
    let s = if norm > THETA13 {
        (norm / THETA13).log2().ceil() as i32
    } else {
        0
    };
    let a = a.scale(0.5_f64.powi(s));
    let eye = Matrix::identity(n);
    let a2 = a.matmul(&a)?;
    let a4 = a2.matmul(&a2)?;
    let a6 = a4.matmul(&a2)?;
    let c = &PADE13;
    let lin = |w6: f64, w4: f64, w2: f64, w0: f64| -> Matrix {
        a6.scale(w6)
            .add(&a4.scale(w4))
            .and_then(|m| m.add(&a2.scale(w2)))
            .and_then(|m| m.add(&eye.scale(w0)))
            .expect("square operands")
    };
    let u_inner = a6.matmul(&lin(c[13], c[11], c[9], 0.0))?;
    let u = a.matmul(&u_inner.add(&lin(c[7], c[5], c[3], c[1]))?)?;
    let v = a6
        .matmul(&lin(c[12], c[10], c[8], 0.0))?
        .add(&lin(c[6], c[4], c[2], c[0]))?;
    let p = v.add(&u)?;
    let q = v.sub(&u)?;
    let mut r = q.solve(&p)?;
    for _ in 0..s {
        r = r.matmul(&r)?;
    }
    Ok(r)
}
