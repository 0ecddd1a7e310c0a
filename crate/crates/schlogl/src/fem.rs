//! P1 finite elements on a uniform partition of Ω = (0, L) with homogeneous
//! Neumann boundary conditions.
//!
//! The discrete pivot inner product is (a, b)_H = aᵀ M_h b with the consistent
//! mass matrix M_h, and the energy inner product is (a, b)_V = aᵀ A_h b with
//! A_h = ν K_h + M_h, the shifted Neumann Laplacian.

use crate::error::{Error, Result};
use crate::linalg::{BidiagChol, SymTridiag, SymTridiagFactor};

/// Uniform 1D grid over (0, L).
#[derive(Debug, Clone)]
pub struct Grid {
    n_nodes: usize,
    length: f64,
    nu: f64,
    h: f64,
    nodes: Vec<f64>,
}

impl Grid {
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }
    pub fn length(&self) -> f64 {
        self.length
    }
    pub fn nu(&self) -> f64 {
        self.nu
    }
    pub fn h(&self) -> f64 {
        self.h
    }
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }
    pub fn node(&self, i: usize) -> f64 {
        self.nodes[i]
    }
}

/// Nodal coefficients of a continuous piecewise linear function.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    values: Vec<f64>,
}

impl Field {
    /// Validating constructor: length must match the grid and all entries be finite.
    pub fn new(values: Vec<f64>, grid: &Grid) -> Result<Self> {
        if values.len() != grid.n_nodes {
            return Err(Error::Mismatch(format!(
                "field has {} coefficients, grid has {} nodes",
                values.len(),
                grid.n_nodes
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("field contains non-finite entries".into()));
        }
        Ok(Self { values })
    }

    pub(crate) fn from_vec(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            values: vec![0.0; n],
        }
    }

    pub fn constant(n: usize, c: f64) -> Self {
        Self {
            values: vec![c; n],
        }
    }

    pub fn from_fn(grid: &Grid, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            values: grid.nodes.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Evaluate the P1 interpolant at a point of the domain.
    pub fn eval(&self, grid: &Grid, x: f64) -> f64 {
        let h = grid.h;
        let pos = (x / h).clamp(0.0, (grid.n_nodes - 1) as f64);
        let i = (pos.floor() as usize).min(grid.n_nodes - 2);
        let s = pos - i as f64;
        self.values[i] * (1.0 - s) + self.values[i + 1] * s
    }

    /// self += a * other
    pub fn axpy(&mut self, a: f64, other: &Field) {
        assert_eq!(self.len(), other.len());
        for (s, o) in self.values.iter_mut().zip(&other.values) {
            *s += a * o;
        }
    }

    pub fn scaled(&self, a: f64) -> Field {
        Field {
            values: self.values.iter().map(|v| a * v).collect(),
        }
    }

    pub fn sub(&self, other: &Field) -> Field {
        assert_eq!(self.len(), other.len());
        Field {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }
}

/// Assembled mass/stiffness matrices and the shifted operator A_h = νK_h + M_h.
#[derive(Debug, Clone)]
pub struct FemOperators {
    mass: SymTridiag,
    stiffness: SymTridiag,
    shifted: SymTridiag,
    mass_factor: SymTridiagFactor,
    nu: f64,
}

impl FemOperators {
    pub fn mass(&self) -> &SymTridiag {
        &self.mass
    }
    pub fn stiffness(&self) -> &SymTridiag {
        &self.stiffness
    }
    pub fn shifted(&self) -> &SymTridiag {
        &self.shifted
    }
    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn apply_mass(&self, x: &[f64]) -> Vec<f64> {
        self.mass.mul_vec(x)
    }

    pub fn apply_shifted(&self, x: &[f64]) -> Vec<f64> {
        self.shifted.mul_vec(x)
    }

    /// Solve M_h x = rhs.
    pub fn mass_solve(&self, rhs: &[f64]) -> Vec<f64> {
        self.mass_factor.solve(rhs)
    }

    /// Discrete L² inner product (a, b)_H.
    pub fn h_inner(&self, a: &Field, b: &Field) -> f64 {
        self.mass.bilinear(a.values(), b.values())
    }

    /// Energy inner product (a, b)_V = ν (a′, b′) + (a, b)_H.
    pub fn v_inner(&self, a: &Field, b: &Field) -> f64 {
        self.shifted.bilinear(a.values(), b.values())
    }

    pub fn h_norm(&self, a: &Field) -> f64 {
        self.h_inner(a, a).max(0.0).sqrt()
    }

    pub fn v_norm(&self, a: &Field) -> f64 {
        self.v_inner(a, a).max(0.0).sqrt()
    }
}

/// Assemble the grid and P1 operators.
pub fn build_grid(n_nodes: usize, length: f64, nu: f64) -> Result<(Grid, FemOperators)> {
    if n_nodes < 3 {
        return Err(Error::Config(format!("need at least 3 nodes, got {n_nodes}")));
    }
    if !(length > 0.0) || !length.is_finite() {
        return Err(Error::Config(format!("domain length must be positive, got {length}")));
    }
    if !(nu > 0.0) || !nu.is_finite() {
        return Err(Error::Config(format!("diffusion ν must be positive, got {nu}")));
    }

    let h = length / (n_nodes - 1) as f64;
    let nodes: Vec<f64> = (0..n_nodes).map(|i| i as f64 * h).collect();
    let grid = Grid {
        n_nodes,
        length,
        nu,
        h,
        nodes,
    };

    let mut mass = SymTridiag::zeros(n_nodes);
    let mut stiffness = SymTridiag::zeros(n_nodes);
    for e in 0..n_nodes - 1 {
        mass.diag[e] += h / 3.0;
        mass.diag[e + 1] += h / 3.0;
        mass.off[e] += h / 6.0;
        stiffness.diag[e] += 1.0 / h;
        stiffness.diag[e + 1] += 1.0 / h;
        stiffness.off[e] -= 1.0 / h;
    }
    let shifted = stiffness.linear_comb(nu, &mass, 1.0);
    let mass_factor = SymTridiagFactor::new(&mass)?;

    Ok((
        grid,
        FemOperators {
            mass,
            stiffness,
            shifted,
            mass_factor,
            nu,
        },
    ))
}

/// 3-point Gauss–Legendre quadrature on [a, b]; exact for degree ≤ 5.
pub fn gauss3(a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
    const P: f64 = 0.7745966692414834; // sqrt(3/5)
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    half * ((5.0 / 9.0) * f(mid - half * P) + (8.0 / 9.0) * f(mid) + (5.0 / 9.0) * f(mid + half * P))
}

/// (‖z‖_H, ‖z‖_V, ‖z‖_L⁶) of the P1 interpolant.
///
/// The L⁶ norm is computed by elementwise Gauss-3 quadrature of the sixth
/// power of the interpolant.
pub fn norms(field: &Field, ops: &FemOperators, grid: &Grid) -> (f64, f64, f64) {
    assert_eq!(field.len(), grid.n_nodes);
    let nh = ops.h_norm(field);
    let nv = ops.v_norm(field);
    let v = field.values();
    let mut acc = 0.0;
    for e in 0..grid.n_nodes - 1 {
        let (a, b) = (grid.nodes[e], grid.nodes[e + 1]);
        let (ya, yb) = (v[e], v[e + 1]);
        acc += gauss3(a, b, |x| {
            let s = (x - a) / (b - a);
            let y = ya * (1.0 - s) + yb * s;
            y.powi(6)
        });
    }
    (nh, nv, acc.max(0.0).powf(1.0 / 6.0))
}

/// The first eigenpairs of A_h e = α M_h e, M_h-orthonormalized.
#[derive(Debug, Clone)]
pub struct EigenBasis {
    fields: Vec<Field>,
    values: Vec<f64>,
}

impl EigenBasis {
    pub fn count(&self) -> usize {
        self.fields.len()
    }
    pub fn fields(&self) -> &[Field] {
        &self.fields
    }
    pub fn field(&self, k: usize) -> &Field {
        &self.fields[k]
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Solve the generalized symmetric eigenproblem A_h e = α M_h e and return the
/// `count` smallest pairs.
///
/// M_h = LLᵀ reduces the pencil to a standard symmetric problem for
/// L⁻¹A_hL⁻ᵀ. Sign convention: the first coefficient of each eigenfield that
/// is nonzero (relative to the largest) is made positive.
pub fn neumann_eigenbasis(grid: &Grid, ops: &FemOperators, count: usize) -> Result<EigenBasis> {
    let n = grid.n_nodes;
    if count == 0 || count > n {
        return Err(Error::Config(format!(
            "eigenbasis count {count} out of range 1..={n}"
        )));
    }
    let chol = BidiagChol::new(ops.mass())?;
    // reduce the pencil to a standard symmetric problem for L⁻¹AL⁻ᵀ
    let b = crate::linalg::congruence_transform(&chol, &ops.shifted().to_dense());
    let eig = b.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));

    let mut fields = Vec::with_capacity(count);
    let mut values = Vec::with_capacity(count);
    for &k in order.iter().take(count) {
        let alpha = eig.eigenvalues[k];
        if !alpha.is_finite() {
            return Err(Error::Numerical("eigensolver returned non-finite value".into()));
        }
        let vk: Vec<f64> = eig.eigenvectors.column(k).iter().cloned().collect();
        let mut e = chol.solve_lt(&vk);
        let maxabs = e.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if let Some(first) = e.iter().find(|v| v.abs() > 1e-12 * maxabs) {
            if *first < 0.0 {
                for v in &mut e {
                    *v = -*v;
                }
            }
        }
        fields.push(Field::from_vec(e));
        values.push(alpha);
    }
    Ok(EigenBasis { fields, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn mass_matrix_small_grid() {
        let (grid, ops) = build_grid(3, 1.0, 0.1).unwrap();
        let h = 0.5;
        assert_eq!(grid.h(), h);
        // (h/6)·tridiag(1, {2,4,2}, 1)
        assert_relative_eq!(ops.mass().diag[0], 2.0 * h / 6.0, max_relative = 1e-14);
        assert_relative_eq!(ops.mass().diag[1], 4.0 * h / 6.0, max_relative = 1e-14);
        assert_relative_eq!(ops.mass().diag[2], 2.0 * h / 6.0, max_relative = 1e-14);
        assert_relative_eq!(ops.mass().off[0], h / 6.0, max_relative = 1e-14);
        // row sums integrate the constant 1: total = |Ω|
        let ones = Field::constant(3, 1.0);
        assert_relative_eq!(ops.h_inner(&ones, &ones), 1.0, max_relative = 1e-14);
    }

    #[test]
    fn reference_resolution_grid() {
        let (grid, _) = build_grid(1001, 1.0, 0.1).unwrap();
        assert_eq!(grid.n_nodes(), 1001);
        assert_relative_eq!(grid.h(), 1e-3, max_relative = 1e-14);
        assert_eq!(grid.node(0), 0.0);
        assert_relative_eq!(grid.node(1000), 1.0, max_relative = 1e-14);
    }

    #[test]
    fn stiffness_kills_constants() {
        for n in [3, 17, 101] {
            let (_, ops) = build_grid(n, 1.0, 0.3).unwrap();
            let c = vec![2.5; n];
            let kc = ops.stiffness().mul_vec(&c);
            assert!(kc.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn invalid_grids_rejected() {
        assert!(build_grid(2, 1.0, 0.1).is_err());
        assert!(build_grid(10, 0.0, 0.1).is_err());
        assert!(build_grid(10, 1.0, -1.0).is_err());
    }

    #[test]
    fn norms_of_unit_constant() {
        let (grid, ops) = build_grid(41, 1.0, 0.1).unwrap();
        let one = Field::constant(41, 1.0);
        let (h, v, l6) = norms(&one, &ops, &grid);
        assert_relative_eq!(h, 1.0, max_relative = 1e-13);
        assert_relative_eq!(v, 1.0, max_relative = 1e-13);
        assert_relative_eq!(l6, 1.0, max_relative = 1e-13);
    }

    #[test]
    fn norms_of_zero_field() {
        let (grid, ops) = build_grid(11, 2.0, 0.5).unwrap();
        let z = Field::zeros(11);
        let (h, v, l6) = norms(&z, &ops, &grid);
        assert_eq!((h, v, l6), (0.0, 0.0, 0.0));
    }

    #[test]
    fn v_norm_of_cosine_converges_to_analytic_value() {
        // ∫ cos²(πx) = 1/2 and ∫ (π sin(πx))² = π²/2 on (0,1), so
        // ‖cos(πx)‖_V² → 0.5·(νπ² + 1). Richardson-extrapolate the O(h²) error.
        let nu = 0.1;
        let exact = 0.5 * (nu * std::f64::consts::PI.powi(2) + 1.0);
        let mut vals = Vec::new();
        for n in [101usize, 201, 401] {
            let (grid, ops) = build_grid(n, 1.0, nu).unwrap();
            let f = Field::from_fn(&grid, |x| (std::f64::consts::PI * x).cos());
            let (_, v, _) = norms(&f, &ops, &grid);
            vals.push(v * v);
        }
        let extrap = vals[2] + (vals[2] - vals[1]) / 3.0;
        assert_relative_eq!(extrap, exact, max_relative = 1e-6);
        // and the raw value is already close on the finest grid
        assert_relative_eq!(vals[2], exact, max_relative = 1e-3);
    }

    #[test]
    fn gauss3_exact_to_degree_five() {
        // ∫₀¹ x⁵ = 1/6 exactly, composite over a few elements
        let mut acc = 0.0;
        let k = 4;
        for e in 0..k {
            let a = e as f64 / k as f64;
            let b = (e + 1) as f64 / k as f64;
            acc += gauss3(a, b, |x| x.powi(5));
        }
        assert_relative_eq!(acc, 1.0 / 6.0, max_relative = 1e-15);
        // degree 6 is not exact on a single element
        let q6 = gauss3(0.0, 1.0, |x| x.powi(6));
        assert!((q6 - 1.0 / 7.0).abs() > 1e-6);
    }

    #[test]
    fn operators_symmetric_and_v_dominates_h() {
        let (grid, ops) = build_grid(64, 1.0, 0.1).unwrap();
        for m in [ops.mass(), ops.stiffness(), ops.shifted()] {
            let d = m.to_dense();
            for i in 0..64 {
                for j in 0..64 {
                    assert!((d[(i, j)] - d[(j, i)]).abs() < 1e-12);
                }
            }
        }
        // deterministic pseudo-random fields
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for _ in 0..50 {
            let f = Field::from_fn(&grid, |_| next() * 4.0);
            assert!(ops.v_inner(&f, &f) >= ops.h_inner(&f, &f) - 1e-12);
        }
    }

    #[test]
    fn eigenbasis_constant_mode() {
        let (grid, ops) = build_grid(51, 1.0, 0.1).unwrap();
        let basis = neumann_eigenbasis(&grid, &ops, 1).unwrap();
        assert_relative_eq!(basis.values()[0], 1.0, max_relative = 1e-10);
        let e0 = basis.field(0);
        let mean = e0.values().iter().sum::<f64>() / 51.0;
        for v in e0.values() {
            assert_relative_eq!(*v, mean, max_relative = 1e-8);
        }
        assert!(mean > 0.0, "sign convention: constant mode positive");
    }

    #[test]
    fn eigenvalues_converge_to_neumann_spectrum() {
        // α_k → νπ²k² + 1, observed order 2 in h for k ≤ 5
        let nu = 0.1;
        let pi = std::f64::consts::PI;
        let mut errs = Vec::new();
        for n in [26usize, 51, 101] {
            let (grid, ops) = build_grid(n, 1.0, nu).unwrap();
            let basis = neumann_eigenbasis(&grid, &ops, 6).unwrap();
            let mut worst: f64 = 0.0;
            for k in 1..=5usize {
                let exact = nu * pi * pi * (k * k) as f64 + 1.0;
                worst = worst.max((basis.values()[k] - exact).abs() / exact);
            }
            errs.push(worst);
        }
        let order1 = (errs[0] / errs[1]).log2();
        let order2 = (errs[1] / errs[2]).log2();
        assert!(
            (1.8..=2.2).contains(&order1) && (1.8..=2.2).contains(&order2),
            "orders {order1:.2}, {order2:.2}"
        );
        // and k = 1 on a fine grid is near the analytic value
        let (grid, ops) = build_grid(401, 1.0, nu).unwrap();
        let basis = neumann_eigenbasis(&grid, &ops, 2).unwrap();
        assert_relative_eq!(basis.values()[1], nu * pi * pi + 1.0, max_relative = 1e-4);
    }

    #[test]
    fn eigenbasis_mass_orthonormal_and_residual_small() {
        let (grid, ops) = build_grid(101, 1.0, 0.1).unwrap();
        let basis = neumann_eigenbasis(&grid, &ops, 20).unwrap();
        for i in 0..20 {
            for j in 0..20 {
                let dot = ops.h_inner(basis.field(i), basis.field(j));
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-10, "({i},{j}): {dot}");
            }
        }
        // A e = α M e residual
        for k in 0..20 {
            let e = basis.field(k);
            let ae = ops.apply_shifted(e.values());
            let me = ops.apply_mass(e.values());
            let alpha = basis.values()[k];
            let mut res: f64 = 0.0;
            for i in 0..e.len() {
                res = res.max((ae[i] - alpha * me[i]).abs());
            }
            assert!(res < 1e-8 * alpha.max(1.0), "mode {k}: residual {res}");
        }
        // nondecreasing
        for k in 1..20 {
            assert!(basis.values()[k] >= basis.values()[k - 1] - 1e-12);
        }
    }

    #[test]
    fn field_validation() {
        let (grid, _) = build_grid(11, 1.0, 0.1).unwrap();
        assert!(Field::new(vec![0.0; 10], &grid).is_err());
        assert!(Field::new(vec![f64::NAN; 11], &grid).is_err());
        assert!(Field::new(vec![1.0; 11], &grid).is_ok());
    }

    #[test]
    fn p1_interpolant_evaluation() {
        let (grid, _) = build_grid(11, 1.0, 0.1).unwrap();
        let f = Field::from_fn(&grid, |x| 2.0 * x);
        assert_relative_eq!(f.eval(&grid, 0.55), 1.1, max_relative = 1e-13);
        assert_relative_eq!(f.eval(&grid, 0.0), 0.0, max_relative = 1e-13);
        assert_relative_eq!(f.eval(&grid, 1.0), 2.0, max_relative = 1e-13);
    }
}
