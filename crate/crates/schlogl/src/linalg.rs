//! Small dense/banded kernels shared by the FEM and diagnostics layers.
//!
//! The time-stepping hot path only ever touches symmetric tridiagonal
//! matrices, so those get hand-rolled O(n) routines; everything genuinely
//! dense (eigenproblems, Gram solves) goes through nalgebra.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Symmetric tridiagonal matrix stored as main diagonal and one off diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SymTridiag {
    pub diag: Vec<f64>,
    pub off: Vec<f64>,
}

impl SymTridiag {
    pub fn zeros(n: usize) -> Self {
        Self {
            diag: vec![0.0; n],
            off: vec![0.0; n.saturating_sub(1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    /// y = self * x
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(x.len(), n);
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut acc = self.diag[i] * x[i];
            if i > 0 {
                acc += self.off[i - 1] * x[i - 1];
            }
            if i + 1 < n {
                acc += self.off[i] * x[i + 1];
            }
            y[i] = acc;
        }
        y
    }

    /// xᵀ (self) y
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let n = self.dim();
        assert_eq!(x.len(), n);
        assert_eq!(y.len(), n);
        let mut acc = 0.0;
        for i in 0..n {
            let mut row = self.diag[i] * y[i];
            if i > 0 {
                row += self.off[i - 1] * y[i - 1];
            }
            if i + 1 < n {
                row += self.off[i] * y[i + 1];
            }
            acc += x[i] * row;
        }
        acc
    }

    /// a*self + b*other, entrywise.
    pub fn linear_comb(&self, a: f64, other: &SymTridiag, b: f64) -> SymTridiag {
        assert_eq!(self.dim(), other.dim());
        SymTridiag {
            diag: self
                .diag
                .iter()
                .zip(&other.diag)
                .map(|(x, y)| a * x + b * y)
                .collect(),
            off: self
                .off
                .iter()
                .zip(&other.off)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                self.diag[i]
            } else if i + 1 == j {
                self.off[i]
            } else if j + 1 == i {
                self.off[j]
            } else {
                0.0
            }
        })
    }
}

/// LDLᵀ factorization of a symmetric positive definite tridiagonal matrix.
#[derive(Debug, Clone)]
pub struct SymTridiagFactor {
    d: Vec<f64>,
    l: Vec<f64>,
}

impl SymTridiagFactor {
    pub fn new(m: &SymTridiag) -> Result<Self> {
        let n = m.dim();
        let mut d = vec![0.0; n];
        let mut l = vec![0.0; n.saturating_sub(1)];
        d[0] = m.diag[0];
        if d[0] <= 0.0 {
            return Err(Error::Numerical("tridiagonal factor: not SPD".into()));
        }
        for i in 1..n {
            l[i - 1] = m.off[i - 1] / d[i - 1];
            d[i] = m.diag[i] - l[i - 1] * m.off[i - 1];
            if d[i] <= 0.0 || !d[i].is_finite() {
                return Err(Error::Numerical(format!(
                    "tridiagonal factor: pivot {i} nonpositive"
                )));
            }
        }
        Ok(Self { d, l })
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = rhs.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.d.len();
        assert_eq!(x.len(), n);
        for i in 1..n {
            x[i] -= self.l[i - 1] * x[i - 1];
        }
        for i in 0..n {
            x[i] /= self.d[i];
        }
        for i in (0..n - 1).rev() {
            x[i] -= self.l[i] * x[i + 1];
        }
    }
}

/// Cholesky factor L (lower bidiagonal) of an SPD tridiagonal matrix, M = LLᵀ.
///
/// Used to turn M-weighted problems into Euclidean ones: x̃ = Lᵀx has
/// ‖x̃‖₂ = ‖x‖_M.
#[derive(Debug, Clone)]
pub struct BidiagChol {
    diag: Vec<f64>,
    sub: Vec<f64>,
}

impl BidiagChol {
    pub fn new(m: &SymTridiag) -> Result<Self> {
        let n = m.dim();
        let mut diag = vec![0.0; n];
        let mut sub = vec![0.0; n.saturating_sub(1)];
        if m.diag[0] <= 0.0 {
            return Err(Error::Numerical("cholesky: not SPD".into()));
        }
        diag[0] = m.diag[0].sqrt();
        for i in 1..n {
            sub[i - 1] = m.off[i - 1] / diag[i - 1];
            let v = m.diag[i] - sub[i - 1] * sub[i - 1];
            if v <= 0.0 || !v.is_finite() {
                return Err(Error::Numerical(format!("cholesky: pivot {i} nonpositive")));
            }
            diag[i] = v.sqrt();
        }
        Ok(Self { diag, sub })
    }

    /// Solve L x = b.
    pub fn solve_l(&self, b: &[f64]) -> Vec<f64> {
        let n = self.diag.len();
        let mut x = vec![0.0; n];
        for i in 0..n {
            let mut v = b[i];
            if i > 0 {
                v -= self.sub[i - 1] * x[i - 1];
            }
            x[i] = v / self.diag[i];
        }
        x
    }

    /// Solve Lᵀ x = b.
    pub fn solve_lt(&self, b: &[f64]) -> Vec<f64> {
        let n = self.diag.len();
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut v = b[i];
            if i + 1 < n {
                v -= self.sub[i] * x[i + 1];
            }
            x[i] = v / self.diag[i];
        }
        x
    }

    /// Lᵀ x (multiplication, not solve).
    pub fn mul_lt(&self, x: &[f64]) -> Vec<f64> {
        let n = self.diag.len();
        let mut y = vec![0.0; n];
        for i in 0..n {
            y[i] = self.diag[i] * x[i];
            if i + 1 < n {
                y[i] += self.sub[i] * x[i + 1];
            }
        }
        y
    }
}

/// L⁻¹ S L⁻ᵀ for a dense symmetric S and bidiagonal Cholesky factor L,
/// symmetrized against roundoff.
pub fn congruence_transform(chol: &BidiagChol, s: &DMatrix<f64>) -> DMatrix<f64> {
    let n = s.nrows();
    let mut b = DMatrix::zeros(n, n);
    let mut col = vec![0.0; n];
    for j in 0..n {
        for i in 0..n {
            col[i] = s[(i, j)];
        }
        let x = chol.solve_l(&col);
        for i in 0..n {
            b[(i, j)] = x[i];
        }
    }
    let mut row = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            row[j] = b[(i, j)];
        }
        let x = chol.solve_l(&row);
        for j in 0..n {
            b[(i, j)] = x[j];
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (b[(i, j)] + b[(j, i)]);
            b[(i, j)] = v;
            b[(j, i)] = v;
        }
    }
    b
}

/// Smallest eigenvalue of the symmetric form `a` restricted to the subspace
/// {x : cᵀx = 0 for every constraint column c}.
///
/// Constraints are deflated with Householder reflectors applied two-sided to
/// `a`; the trailing block is then handed to a dense symmetric eigensolver.
pub fn min_eig_constrained(a: &DMatrix<f64>, constraints: &DMatrix<f64>) -> Result<f64> {
    let n = a.nrows();
    assert_eq!(a.ncols(), n);
    assert_eq!(constraints.nrows(), n);
    let m = constraints.ncols();
    if m >= n {
        return Err(Error::Config(
            "constrained eigenproblem: no degrees of freedom left".into(),
        ));
    }

    let mut a = a.clone();
    let mut c = constraints.clone();

    for k in 0..m {
        // Householder vector zeroing c[k+1.., k].
        let mut v = vec![0.0; n];
        let mut norm2 = 0.0;
        for i in k..n {
            norm2 += c[(i, k)] * c[(i, k)];
        }
        let norm = norm2.sqrt();
        if norm < 1e-13 {
            return Err(Error::DegenerateFamily(
                "constraint matrix is rank deficient".into(),
            ));
        }
        let alpha = if c[(k, k)] >= 0.0 { -norm } else { norm };
        v[k] = c[(k, k)] - alpha;
        for i in (k + 1)..n {
            v[i] = c[(i, k)];
        }
        let vtv: f64 = v.iter().map(|x| x * x).sum();
        if vtv < 1e-300 {
            continue; // already in triangular form
        }
        let tau = 2.0 / vtv;

        // Apply H = I - tau v vᵀ to the remaining constraint columns.
        for j in k..m {
            let mut dot = 0.0;
            for i in k..n {
                dot += v[i] * c[(i, j)];
            }
            let s = tau * dot;
            for i in k..n {
                c[(i, j)] -= s * v[i];
            }
        }

        // Two-sided update A <- H A H.
        let mut w = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for j in k..n {
                acc += a[(i, j)] * v[j];
            }
            w[i] = tau * acc;
        }
        let vtw: f64 = (k..n).map(|i| v[i] * w[i]).sum();
        for i in 0..n {
            let ki = w[i] - 0.5 * tau * vtw * if i >= k { v[i] } else { 0.0 };
            w[i] = ki;
        }
        for i in 0..n {
            for j in k..n {
                a[(i, j)] -= w[i] * v[j];
            }
        }
        for j in 0..n {
            for i in k..n {
                a[(i, j)] -= v[i] * w[j];
            }
        }
    }

    let nf = n - m;
    let mut block = DMatrix::zeros(nf, nf);
    for i in 0..nf {
        for j in 0..nf {
            block[(i, j)] = 0.5 * (a[(m + i, m + j)] + a[(m + j, m + i)]);
        }
    }
    let eig = block.symmetric_eigen();
    let min = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return Err(Error::Numerical("constrained eigensolve failed".into()));
    }
    Ok(min)
}
