//! Indicator actuators, bump companions, oblique projections and the
//! saturated explicit feedback law.
//!
//! For a partition index M the family has M_σ = M disjoint supports
//! ω_j = (c_j − rL/(2M), c_j + rL/(2M)) with centers c_j = (2j−1)L/(2M),
//! covering a fraction r of the domain. Indicators are carried as their
//! L²-projections onto the P1 space; the pairing (z, 1_{ω_j})_H stays exact
//! because the projection right-hand sides are integrated exactly.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fem::{Field, FemOperators, Grid};

/// The a-priori norm ⦀·⦀ on the control space ℝ^{M_σ}.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SatNorm {
    Linf,
    L2,
}

impl SatNorm {
    pub fn eval(&self, v: &[f64]) -> f64 {
        match self {
            SatNorm::Linf => v.iter().fold(0.0_f64, |m, x| m.max(x.abs())),
            SatNorm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        }
    }
}

/// Which explicit feedback law to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeedbackVariant {
    /// −λ (U⋄)⁻¹ P_{U}^{Ũ⊥} A P_{Ũ}^{U⊥} z (oblique projections through the bumps)
    Oblique,
    /// −λ (U⋄)⁻¹ P_{U} z (plain orthogonal projection, earlier construction)
    Orthogonal,
}

#[derive(Debug, Clone, Copy)]
pub struct FeedbackConfig {
    pub lambda: f64,
    pub c_u: f64,
    pub norm: SatNorm,
    pub variant: FeedbackVariant,
}

impl FeedbackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "feedback gain λ must be a finite nonnegative number, got {}",
                self.lambda
            )));
        }
        if self.c_u.is_nan() || self.c_u < 0.0 {
            return Err(Error::Config(format!(
                "control bound C_u must be in [0, +∞], got {}",
                self.c_u
            )));
        }
        Ok(())
    }
}

/// Direction of the oblique projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObliqueDirection {
    /// P_{Ũ_M}^{U_M^⊥}: range = bumps, residual orthogonal to the indicators.
    BumpsAlongIndicatorPerp,
    /// P_{U_M}^{Ũ_M^⊥}: range = indicators, residual orthogonal to the bumps.
    IndicatorsAlongBumpPerp,
}

/// Actuator geometry plus everything precomputed for projections.
#[derive(Debug, Clone)]
pub struct ActuatorFamily {
    m: usize,
    count: usize,
    r: f64,
    centers: Vec<f64>,
    supports: Vec<(f64, f64)>,
    /// exact loads b_j with (b_j)_i = ∫_{ω_j} φ_i
    loads: Vec<Vec<f64>>,
    /// a_j = M_h⁻¹ b_j, the P1 projections of the indicators
    indicator_fields: Vec<Field>,
    /// nodal interpolants of the sin² bumps
    bump_fields: Vec<Field>,
    /// G[j][k] = (1_{ω_j}, Ψ_k)_H
    gram_ind_bump: DMatrix<f64>,
    /// (Φ_i, Φ_j)_H for the orthogonal variant
    gram_ind_ind: DMatrix<f64>,
    lu_g: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    lu_gt: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    lu_uu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl ActuatorFamily {
    pub fn partition_index(&self) -> usize {
        self.m
    }
    /// M_σ, the number of actuators.
    pub fn count(&self) -> usize {
        self.count
    }
    pub fn volume_fraction(&self) -> f64 {
        self.r
    }
    pub fn centers(&self) -> &[f64] {
        &self.centers
    }
    pub fn supports(&self) -> &[(f64, f64)] {
        &self.supports
    }
    pub fn indicator_fields(&self) -> &[Field] {
        &self.indicator_fields
    }
    pub fn bump_fields(&self) -> &[Field] {
        &self.bump_fields
    }

    /// Exact pairing (z, 1_{ω_j})_H of a P1 field with the true indicator.
    pub fn pairing(&self, j: usize, z: &Field) -> f64 {
        dot(&self.loads[j], z.values())
    }

    /// Load vector b_j with (b_j)_i = ∫_{ω_j} φ_i, the coefficients of the
    /// pairing functional.
    pub fn indicator_load(&self, j: usize) -> &[f64] {
        &self.loads[j]
    }

    /// G with entries (1_{ω_j}, Ψ_k)_H, the mixed Gram matrix behind both
    /// oblique projections.
    pub fn gram_indicator_bump(&self) -> &DMatrix<f64> {
        &self.gram_ind_bump
    }

    /// (Φ_i, Φ_j)_H, the Gram matrix of the projected indicators.
    pub fn gram_indicator(&self) -> &DMatrix<f64> {
        &self.gram_ind_ind
    }

    fn pairings(&self, z: &Field) -> DVector<f64> {
        DVector::from_iterator(self.count, (0..self.count).map(|j| self.pairing(j, z)))
    }

    fn bump_moments(&self, ops: &FemOperators, z: &Field) -> DVector<f64> {
        let mz = ops.apply_mass(z.values());
        DVector::from_iterator(
            self.count,
            self.bump_fields.iter().map(|psi| dot(psi.values(), &mz)),
        )
    }

    fn solve_g(&self, rhs: DVector<f64>) -> Result<DVector<f64>> {
        self.lu_g
            .solve(&rhs)
            .ok_or_else(|| Error::DegenerateFamily("indicator/bump Gram matrix is singular".into()))
    }

    fn solve_gt(&self, rhs: DVector<f64>) -> Result<DVector<f64>> {
        self.lu_gt
            .solve(&rhs)
            .ok_or_else(|| Error::DegenerateFamily("indicator/bump Gram matrix is singular".into()))
    }

    fn solve_uu(&self, rhs: DVector<f64>) -> Result<DVector<f64>> {
        self.lu_uu
            .solve(&rhs)
            .ok_or_else(|| Error::DegenerateFamily("indicator Gram matrix is singular".into()))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Build the actuator family for partition index `m` and volume fraction `r`.
pub fn build_actuators(
    m: usize,
    r: f64,
    grid: &Grid,
    ops: &FemOperators,
) -> Result<ActuatorFamily> {
    if m < 1 {
        return Err(Error::Config("partition index M must be ≥ 1".into()));
    }
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::Config(format!(
            "volume fraction r must lie in (0, 1), got {r}"
        )));
    }
    let length = grid.length();
    let count = m; // M_σ = M^d with d = 1
    let half_width = r * length / (2.0 * m as f64);

    let mut centers = Vec::with_capacity(count);
    let mut supports = Vec::with_capacity(count);
    for k in 1..=m {
        let c = (2 * k - 1) as f64 * length / (2.0 * m as f64);
        centers.push(c);
        supports.push((c - half_width, c + half_width));
    }

    let n = grid.n_nodes();
    for (j, &(lo, hi)) in supports.iter().enumerate() {
        let inside = grid.nodes().iter().filter(|&&x| x > lo && x < hi).count();
        if inside < 4 {
            return Err(Error::Resolution(format!(
                "support ω_{} = ({lo:.6}, {hi:.6}) contains only {inside} nodes (need ≥ 4)",
                j + 1
            )));
        }
    }

    let mut loads = Vec::with_capacity(count);
    let mut indicator_fields = Vec::with_capacity(count);
    let mut bump_fields = Vec::with_capacity(count);
    let h = grid.h();
    for (j, &(lo, hi)) in supports.iter().enumerate() {
        // exact ∫_{ω_j} φ_i: clip ω_j against every element
        let mut b = vec![0.0; n];
        let e_first = ((lo / h).floor() as usize).min(n - 2);
        let e_last = ((hi / h).ceil() as usize).min(n - 1).max(1) - 1;
        for e in e_first..=e_last {
            let (xa, xb) = (grid.node(e), grid.node(e + 1));
            let a = lo.max(xa);
            let bnd = hi.min(xb);
            if bnd <= a {
                continue;
            }
            let sa = (a - xa) / h;
            let sb = (bnd - xa) / h;
            let ds = sb - sa;
            let ds2 = 0.5 * (sb * sb - sa * sa);
            b[e] += h * (ds - ds2);
            b[e + 1] += h * ds2;
        }
        indicator_fields.push(Field::from_vec(ops.mass_solve(&b)));
        loads.push(b);

        // nodal interpolant of the sin² bump on ω_j
        let c = centers[j];
        let scale = m as f64 * std::f64::consts::PI / (r * length);
        let bump = Field::from_fn(grid, |x| {
            if x <= lo || x >= hi {
                0.0
            } else {
                (scale * (x - c + half_width)).sin().powi(2)
            }
        });
        bump_fields.push(bump);
    }

    let gram_ind_bump = DMatrix::from_fn(count, count, |j, k| {
        dot(&loads[j], bump_fields[k].values())
    });
    let mass_ind: Vec<Vec<f64>> = indicator_fields
        .iter()
        .map(|a| ops.apply_mass(a.values()))
        .collect();
    let gram_ind_ind = DMatrix::from_fn(count, count, |i, j| {
        dot(indicator_fields[i].values(), &mass_ind[j])
    });

    let lu_g = gram_ind_bump.clone().lu();
    let lu_gt = gram_ind_bump.transpose().lu();
    let lu_uu = gram_ind_ind.clone().lu();
    for lu in [&lu_g, &lu_gt, &lu_uu] {
        let det = lu.determinant();
        if !det.is_finite() || det.abs() < 1e-300 {
            return Err(Error::DegenerateFamily(
                "Gram matrix is numerically singular".into(),
            ));
        }
    }

    Ok(ActuatorFamily {
        m,
        count,
        r,
        centers,
        supports,
        loads,
        indicator_fields,
        bump_fields,
        gram_ind_bump,
        gram_ind_ind,
        lu_g,
        lu_gt,
        lu_uu,
    })
}

/// U⋄u = Σ uᵢ·(indicator field i), the control shape in state space.
pub fn u_diamond(u: &[f64], fam: &ActuatorFamily) -> Field {
    assert_eq!(u.len(), fam.count);
    let n = fam.indicator_fields[0].len();
    let mut out = Field::zeros(n);
    for (ui, a) in u.iter().zip(&fam.indicator_fields) {
        if *ui != 0.0 {
            out.axpy(*ui, a);
        }
    }
    out
}

/// (U⋄)*p, with component i = (p, 1_{ω_i})_H.
pub fn u_diamond_adjoint(p: &Field, fam: &ActuatorFamily, _ops: &FemOperators) -> Vec<f64> {
    (0..fam.count).map(|j| fam.pairing(j, p)).collect()
}

/// Oblique projection of `z` in the M_h inner product.
pub fn oblique_project(
    z: &Field,
    fam: &ActuatorFamily,
    ops: &FemOperators,
    direction: ObliqueDirection,
) -> Result<Field> {
    let n = z.len();
    match direction {
        ObliqueDirection::BumpsAlongIndicatorPerp => {
            let c = fam.solve_g(fam.pairings(z))?;
            let mut out = Field::zeros(n);
            for (ck, psi) in c.iter().zip(&fam.bump_fields) {
                if *ck != 0.0 {
                    out.axpy(*ck, psi);
                }
            }
            Ok(out)
        }
        ObliqueDirection::IndicatorsAlongBumpPerp => {
            let d = fam.solve_gt(fam.bump_moments(ops, z))?;
            let mut out = Field::zeros(n);
            for (dk, a) in d.iter().zip(&fam.indicator_fields) {
                if *dk != 0.0 {
                    out.axpy(*dk, a);
                }
            }
            Ok(out)
        }
    }
}

/// Radial projection onto the ⦀·⦀-ball of radius `c_u`.
///
/// Returns v unchanged when ⦀v⦀ ≤ C_u, scales it radially otherwise.
/// C_u = 0 maps everything to zero and C_u = +∞ is the identity.
pub fn saturate(v: &[f64], c_u: f64, norm: SatNorm) -> Vec<f64> {
    if c_u == 0.0 {
        return vec![0.0; v.len()];
    }
    if c_u.is_infinite() {
        return v.to_vec();
    }
    let m = norm.eval(v);
    if m <= c_u {
        return v.to_vec();
    }
    let s = c_u / m;
    match norm {
        // componentwise clamp keeps the bound exact against roundoff
        SatNorm::Linf => v.iter().map(|x| (s * x).clamp(-c_u, c_u)).collect(),
        SatNorm::L2 => {
            let mut out: Vec<f64> = v.iter().map(|x| s * x).collect();
            // the rescaled norm may land an ulp above the bound
            let mut nn = norm.eval(&out);
            while nn > c_u {
                let fix = (c_u / nn) * (1.0 - f64::EPSILON);
                for x in &mut out {
                    *x *= fix;
                }
                nn = norm.eval(&out);
            }
            out
        }
    }
}

/// Result of one feedback evaluation.
#[derive(Debug, Clone)]
pub struct FeedbackOutcome {
    /// saturated control, ⦀u⦀ ≤ C_u
    pub u: Vec<f64>,
    /// pre-saturation value v = K z
    pub presaturation: Vec<f64>,
    pub saturated: bool,
}

/// Saturated explicit feedback u = 𝔓_{C_u}(K z).
pub fn feedback(
    z: &Field,
    fam: &ActuatorFamily,
    ops: &FemOperators,
    cfg: &FeedbackConfig,
) -> Result<FeedbackOutcome> {
    cfg.validate()?;
    let v: Vec<f64> = match cfg.variant {
        FeedbackVariant::Oblique => {
            let w = oblique_project(z, fam, ops, ObliqueDirection::BumpsAlongIndicatorPerp)?;
            let aw = ops.apply_shifted(w.values());
            let rhs = DVector::from_iterator(
                fam.count,
                fam.bump_fields.iter().map(|psi| dot(psi.values(), &aw)),
            );
            let d = fam.solve_gt(rhs)?;
            // + 0.0 normalizes the negative zeros a zero gain would produce
            d.iter().map(|x| -cfg.lambda * x + 0.0).collect()
        }
        FeedbackVariant::Orthogonal => {
            let e = fam.solve_uu(fam.pairings(z))?;
            e.iter().map(|x| -cfg.lambda * x + 0.0).collect()
        }
    };
    let u = saturate(&v, cfg.c_u, cfg.norm);
    let saturated = cfg.norm.eval(&v) > cfg.c_u;
    Ok(FeedbackOutcome {
        u,
        presaturation: v,
        saturated,
    })
}

/// Operator norm ⦀𝔘_M⦀ of w ↦ (U⋄)⁻¹ P_{U}^{Ũ⊥} A P_{Ũ}^{U⊥} w from
/// (H, ‖·‖_H) into (ℝ^{M_σ}, ⦀·⦀).
///
/// Each component functional is assembled as a Riesz representer field; the
/// ℓ∞ norm is the largest representer norm, the ℓ² norm comes from power
/// iteration on the small normal matrix.
pub fn frak_u_norm(fam: &ActuatorFamily, ops: &FemOperators, norm: SatNorm) -> Result<f64> {
    let msig = fam.count;
    let n = fam.indicator_fields[0].len();

    // W[j][k] = (Ψ_j, Ψ_k)_V
    let a_bumps: Vec<Vec<f64>> = fam
        .bump_fields
        .iter()
        .map(|psi| ops.apply_shifted(psi.values()))
        .collect();
    let w = DMatrix::from_fn(msig, msig, |j, k| dot(fam.bump_fields[j].values(), &a_bumps[k]));

    // rows of 𝔘_M in coefficient space: T = G⁻ᵀ W G⁻¹ B
    let b = DMatrix::from_fn(msig, n, |j, i| fam.loads[j][i]);
    let e = fam
        .lu_g
        .solve(&b)
        .ok_or_else(|| Error::DegenerateFamily("Gram matrix singular".into()))?;
    let f = fam
        .lu_gt
        .solve(&w)
        .ok_or_else(|| Error::DegenerateFamily("Gram matrix singular".into()))?;
    let t = f * e;

    // representers rep_i = M⁻¹ tᵢ and their pairwise H-inner products
    let mut normal = DMatrix::zeros(msig, msig);
    let mut row = vec![0.0; n];
    let mut reps: Vec<Vec<f64>> = Vec::with_capacity(msig);
    for i in 0..msig {
        for k in 0..n {
            row[k] = t[(i, k)];
        }
        reps.push(ops.mass_solve(&row));
    }
    for i in 0..msig {
        for j in 0..msig {
            let mut acc = 0.0;
            for k in 0..n {
                acc += t[(i, k)] * reps[j][k];
            }
            normal[(i, j)] = acc;
        }
    }

    match norm {
        SatNorm::Linf => {
            let mut best = 0.0_f64;
            for i in 0..msig {
                best = best.max(normal[(i, i)].max(0.0).sqrt());
            }
            Ok(best)
        }
        SatNorm::L2 => {
            // power iteration on the symmetric PSD normal matrix
            let mut x = DVector::from_element(msig, 1.0 / (msig as f64).sqrt());
            let mut lambda = 0.0;
            for _ in 0..10_000 {
                let y = &normal * &x;
                let ny = y.norm();
                if ny == 0.0 {
                    return Ok(0.0);
                }
                let xn = y / ny;
                let next = (normal.clone() * &xn).dot(&xn);
                let done = (next - lambda).abs() <= 1e-8 * next.abs().max(1e-30);
                x = xn;
                lambda = next;
                if done {
                    return Ok(lambda.max(0.0).sqrt());
                }
            }
            Err(Error::Numerical(
                "power iteration for ⦀𝔘_M⦀ did not converge in 10⁴ steps".into(),
            ))
        }
    }
}

/// Saturation threshold C_u* = λ·⦀𝔘_M⦀·D for an absorbing radius D.
pub fn cu_star(lambda: f64, d: f64, frak_norm: f64) -> f64 {
    debug_assert!(lambda >= 0.0 && d >= 0.0 && frak_norm >= 0.0);
    lambda * frak_norm * d
}
