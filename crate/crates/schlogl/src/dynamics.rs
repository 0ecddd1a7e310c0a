//! Schlögl reaction terms, target trajectories, and the IMEX
//! Crank–Nicolson / Adams–Bashforth-2 integrator.
//!
//! Diffusion is treated implicitly (CN), reaction, forcing and control
//! explicitly (AB2, bootstrapped by one explicit Euler substep), all in weak
//! form with the consistent mass matrix:
//!
//!   (M + dt/2·νK) yⁿ⁺¹ = (M − dt/2·νK) yⁿ + dt·M·[3/2·Nⁿ − 1/2·Nⁿ⁻¹]
//!
//! Controlled modes evolve the error z = y_c − y_t; the feedback is frozen at
//! the start of each step (sample-and-hold).

use std::io::Write;

use crate::actuation::{feedback, u_diamond, ActuatorFamily, FeedbackConfig};
use crate::error::{Error, Result};
use crate::expr::{Expr, Var};
use crate::fem::{Field, FemOperators, Grid};
use crate::linalg::SymTridiagFactor;

/// Roots (ζ₁, ζ₂, ζ₃) of the bistable cubic f(w) = (w−ζ₁)(w−ζ₂)(w−ζ₃).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReactionParams {
    zeta: [f64; 3],
}

impl ReactionParams {
    pub fn new(zeta: [f64; 3]) -> Self {
        Self { zeta }
    }
    pub fn zeta(&self) -> [f64; 3] {
        self.zeta
    }
    /// Expanded coefficients (ξ₀, ξ₁, ξ₂) of f(w) = w³ + ξ₂w² + ξ₁w + ξ₀.
    pub fn xi(&self) -> (f64, f64, f64) {
        xi_coeffs(self.zeta)
    }
}

/// ξ₂ = −(ζ₁+ζ₂+ζ₃), ξ₁ = ζ₁ζ₂+ζ₁ζ₃+ζ₂ζ₃, ξ₀ = −ζ₁ζ₂ζ₃.
pub fn xi_coeffs(zeta: [f64; 3]) -> (f64, f64, f64) {
    let [a, b, c] = zeta;
    (-(a * b * c), a * b + a * c + b * c, -(a + b + c))
}

/// Nodal evaluation of the cubic f(y).
pub fn f_cubic(y: &Field, params: &ReactionParams) -> Field {
    let [z1, z2, z3] = params.zeta;
    Field::from_vec(
        y.values()
            .iter()
            .map(|&v| (v - z1) * (v - z2) * (v - z3))
            .collect(),
    )
}

/// Shifted nonlinearity of the error dynamics:
/// fʸᵗ(z) = z³ + (3yₜ+ξ₂)z² + (3yₜ²+2ξ₂yₜ+ξ₁−1)z.
pub fn f_error(z: &Field, y_t: &Field, params: &ReactionParams) -> Field {
    assert_eq!(z.len(), y_t.len());
    let (_, xi1, xi2) = params.xi();
    Field::from_vec(
        z.values()
            .iter()
            .zip(y_t.values())
            .map(|(&zi, &yi)| {
                let c2 = 3.0 * yi + xi2;
                let c1 = 3.0 * yi * yi + 2.0 * xi2 * yi + xi1 - 1.0;
                zi * (zi * (zi + c2) + c1)
            })
            .collect(),
    )
}

/// Derivative of fʸᵗ at z̄ applied to w.
pub fn df_error(z: &Field, y_t: &Field, params: &ReactionParams, w: &Field) -> Field {
    assert_eq!(z.len(), y_t.len());
    assert_eq!(z.len(), w.len());
    let (_, xi1, xi2) = params.xi();
    Field::from_vec(
        z.values()
            .iter()
            .zip(y_t.values())
            .zip(w.values())
            .map(|((&zi, &yi), &wi)| {
                let c1 = 3.0 * yi * yi + 2.0 * xi2 * yi + xi1 - 1.0;
                (3.0 * zi * zi + (6.0 * yi + 2.0 * xi2) * zi + c1) * wi
            })
            .collect(),
    )
}

/// Nodal coefficient field of dfʸᵗ|_z̄ (the multiplier of w).
pub(crate) fn df_error_coeff(z: &[f64], y_t: &[f64], params: &ReactionParams) -> Vec<f64> {
    let (_, xi1, xi2) = params.xi();
    z.iter()
        .zip(y_t)
        .map(|(&zi, &yi)| {
            3.0 * zi * zi
                + (6.0 * yi + 2.0 * xi2) * zi
                + 3.0 * yi * yi
                + 2.0 * xi2 * yi
                + xi1
                - 1.0
        })
        .collect()
}

/// A target trajectory yₜ(t, x) in closed form, with the derivatives the
/// manufactured forcing needs.
#[derive(Debug, Clone)]
pub struct TargetSpec {
    value: Expr,
    d_t: Expr,
    d_xx: Expr,
}

impl TargetSpec {
    pub fn zero() -> Self {
        Self {
            value: Expr::Const(0.0),
            d_t: Expr::Const(0.0),
            d_xx: Expr::Const(0.0),
        }
    }

    /// The time-dependent reference trajectory sin(3t)·cos(πx/L).
    pub fn sin_cos(length: f64) -> Self {
        let pi = std::f64::consts::PI;
        let expr = Expr::Mul(
            Box::new(Expr::Sin(Box::new(Expr::Mul(
                Box::new(Expr::Const(3.0)),
                Box::new(Expr::T),
            )))),
            Box::new(Expr::Cos(Box::new(Expr::Mul(
                Box::new(Expr::Const(pi / length)),
                Box::new(Expr::X),
            )))),
        );
        Self::from_expr(expr, length).expect("separable target is Neumann compatible")
    }

    /// Build from an arbitrary expression; rejects targets whose x-derivative
    /// does not vanish at the boundary (checked on a sample of times).
    pub fn from_expr(expr: Expr, length: f64) -> Result<Self> {
        let d_x = expr.derivative(Var::X);
        let d_xx = d_x.derivative(Var::X);
        let d_t = expr.derivative(Var::T);
        let ts = [0.0, 0.31, 0.87, 1.93, 3.7, 9.2];
        let mut scale = 0.0_f64;
        for &t in &ts {
            for k in 0..=10 {
                let x = length * k as f64 / 10.0;
                scale = scale.max(expr.eval(x, t).abs());
            }
        }
        let tol = 1e-7 * (1.0 + scale);
        for &t in &ts {
            for x in [0.0, length] {
                let g = d_x.eval(x, t);
                if g.abs() > tol {
                    return Err(Error::Config(format!(
                        "target violates Neumann compatibility: ∂ₓyₜ({x}, {t}) = {g:.3e}"
                    )));
                }
            }
        }
        Ok(Self { value: expr, d_t, d_xx })
    }

    pub fn eval(&self, x: f64, t: f64) -> f64 {
        self.value.eval(x, t)
    }

    pub fn sample(&self, grid: &Grid, t: f64) -> Field {
        Field::from_fn(grid, |x| self.value.eval(x, t))
    }

    pub fn sample_dt(&self, grid: &Grid, t: f64) -> Field {
        Field::from_fn(grid, |x| self.d_t.eval(x, t))
    }

    pub fn sample_dxx(&self, grid: &Grid, t: f64) -> Field {
        Field::from_fn(grid, |x| self.d_xx.eval(x, t))
    }
}

/// Forcing h = ∂ₜyₜ − ν∂ₓₓyₜ + f(yₜ) under which yₜ solves the free dynamics.
#[derive(Debug, Clone)]
pub struct ManufacturedForcing {
    target: TargetSpec,
    params: ReactionParams,
    nu: f64,
}

pub fn manufactured_forcing(
    target: &TargetSpec,
    params: &ReactionParams,
    nu: f64,
) -> ManufacturedForcing {
    ManufacturedForcing {
        target: target.clone(),
        params: *params,
        nu,
    }
}

impl ManufacturedForcing {
    pub fn at(&self, grid: &Grid, t: f64) -> Field {
        let y = self.target.sample(grid, t);
        let mut h = self.target.sample_dt(grid, t);
        h.axpy(-self.nu, &self.target.sample_dxx(grid, t));
        h.axpy(1.0, &f_cubic(&y, &self.params));
        h
    }
}

/// Right-hand-side selection for [`simulate`].
pub enum Rhs<'a> {
    /// ∂ₜy = νΔy − f(y) + h; reaction and forcing are each optional so the
    /// pure-diffusion problem is expressible.
    Free {
        reaction: Option<&'a ReactionParams>,
        forcing: Option<&'a dyn Fn(&Grid, f64) -> Field>,
    },
    /// Error dynamics with the saturated explicit feedback evaluated at the
    /// start of every step.
    ClosedLoop {
        params: &'a ReactionParams,
        target: &'a TargetSpec,
        fam: &'a ActuatorFamily,
        cfg: &'a FeedbackConfig,
    },
    /// Error dynamics driven by a given piecewise-constant control sequence
    /// (one value per time node; value k is held on [t_k, t_{k+1})).
    OpenLoop {
        params: &'a ReactionParams,
        target: &'a TargetSpec,
        fam: &'a ActuatorFamily,
        controls: &'a [Vec<f64>],
    },
}

/// What to keep while stepping.
pub struct RecordOptions<'a> {
    /// store the state every this many steps (≥ 1); first and last are always kept
    pub store_every: usize,
    /// ‖Qz‖_H used for the running state cost; `None` leaves the column at zero
    pub state_cost_norm: Option<&'a dyn Fn(&Field) -> f64>,
}

impl Default for RecordOptions<'_> {
    fn default() -> Self {
        Self {
            store_every: 10,
            state_cost_norm: None,
        }
    }
}

/// Time-stamped record of one run: norms every step, thinned state snapshots,
/// controls, saturation flags, and running cost components.
#[derive(Debug, Clone)]
pub struct SimTrace {
    pub t0: f64,
    pub dt: f64,
    pub times: Vec<f64>,
    pub norm_h: Vec<f64>,
    pub norm_v: Vec<f64>,
    pub norm_l6: Vec<f64>,
    /// one control vector per time node (empty for uncontrolled runs)
    pub controls: Vec<Vec<f64>>,
    pub saturated: Vec<bool>,
    pub cost_state: Vec<f64>,
    pub cost_control: Vec<f64>,
    /// (step index, state) pairs, thinned by `store_every`
    pub states: Vec<(usize, Field)>,
}

impl SimTrace {
    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn final_norm_h(&self) -> f64 {
        *self.norm_h.last().unwrap()
    }

    pub fn total_cost(&self) -> f64 {
        self.cost_state.last().unwrap() + self.cost_control.last().unwrap()
    }

    /// State at a step index, linearly interpolated between stored snapshots.
    pub fn state_at_step(&self, step: usize) -> Field {
        match self
            .states
            .binary_search_by(|(s, _)| s.cmp(&step))
        {
            Ok(i) => self.states[i].1.clone(),
            Err(i) => {
                assert!(i > 0 && i < self.states.len(), "step {step} outside stored range");
                let (s0, f0) = &self.states[i - 1];
                let (s1, f1) = &self.states[i];
                let w = (step - s0) as f64 / (s1 - s0) as f64;
                let mut out = f0.scaled(1.0 - w);
                out.axpy(w, f1);
                out
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.times.len();
        if self.norm_h.len() != n
            || self.norm_v.len() != n
            || self.norm_l6.len() != n
            || self.saturated.len() != n
            || self.cost_state.len() != n
            || self.cost_control.len() != n
            || (!self.controls.is_empty() && self.controls.len() != n)
        {
            return Err(Error::Mismatch("trace arrays have incongruent lengths".into()));
        }
        for k in 1..n {
            let step = self.times[k] - self.times[k - 1];
            if step <= 0.0 || (step - self.dt).abs() > 1e-9 * self.dt.max(1.0) {
                return Err(Error::Mismatch("trace times are not uniform".into()));
            }
        }
        Ok(())
    }

    /// Fixed-schema CSV: t, normH, normV, normL6, u_1..u_{M_σ}, saturated,
    /// cost_state, cost_control.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let msig = self.controls.first().map_or(0, |u| u.len());
        write!(w, "t,normH,normV,normL6")?;
        for i in 1..=msig {
            write!(w, ",u_{i}")?;
        }
        writeln!(w, ",saturated,cost_state,cost_control")?;
        for k in 0..self.times.len() {
            write!(
                w,
                "{},{},{},{}",
                self.times[k], self.norm_h[k], self.norm_v[k], self.norm_l6[k]
            )?;
            for i in 0..msig {
                write!(w, ",{}", self.controls[k][i])?;
            }
            writeln!(
                w,
                ",{},{},{}",
                self.saturated[k] as u8, self.cost_state[k], self.cost_control[k]
            )?;
        }
        Ok(())
    }
}

const BLOWUP_NORM: f64 = 1e6;

/// Integrate over [t0, t0 + t_span] with the CNAB scheme.
pub fn simulate(
    initial: &Field,
    t0: f64,
    t_span: f64,
    dt: f64,
    rhs: &Rhs<'_>,
    grid: &Grid,
    ops: &FemOperators,
    record: &RecordOptions<'_>,
) -> Result<SimTrace> {
    match simulate_partial(initial, t0, t_span, dt, rhs, grid, ops, record)? {
        (_, Some(err)) => Err(err),
        (trace, None) => Ok(trace),
    }
}

/// Like [`simulate`], but a blow-up aborts the run and hands back the trace
/// accumulated so far together with the error.
#[allow(clippy::too_many_arguments)]
pub fn simulate_partial(
    initial: &Field,
    t0: f64,
    t_span: f64,
    dt: f64,
    rhs: &Rhs<'_>,
    grid: &Grid,
    ops: &FemOperators,
    record: &RecordOptions<'_>,
) -> Result<(SimTrace, Option<Error>)> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("time step must be positive, got {dt}")));
    }
    let n_steps_f = t_span / dt;
    let n_steps = n_steps_f.round() as usize;
    if n_steps == 0 || (n_steps as f64 * dt - t_span).abs() > 1e-12 * (1.0 + t_span.abs()) {
        return Err(Error::Config(format!(
            "span {t_span} is not a multiple of dt = {dt}"
        )));
    }
    if initial.len() != grid.n_nodes() {
        return Err(Error::Mismatch("initial state does not match the grid".into()));
    }
    if let Rhs::OpenLoop { controls, .. } = rhs {
        if controls.len() < n_steps + 1 {
            return Err(Error::Config(format!(
                "control sequence has {} values, need {}",
                controls.len(),
                n_steps + 1
            )));
        }
    }
    let store_every = record.store_every.max(1);

    let nu = grid.nu();
    let half = 0.5 * dt * nu;
    let lhs = ops.stiffness().linear_comb(half, ops.mass(), 1.0);
    let rhs_mat = ops.stiffness().linear_comb(-half, ops.mass(), 1.0);
    let solver = SymTridiagFactor::new(&lhs)?;

    let n = grid.n_nodes();
    let mut y = initial.values().to_vec();

    let mut trace = SimTrace {
        t0,
        dt,
        times: Vec::with_capacity(n_steps + 1),
        norm_h: Vec::with_capacity(n_steps + 1),
        norm_v: Vec::with_capacity(n_steps + 1),
        norm_l6: Vec::with_capacity(n_steps + 1),
        controls: Vec::new(),
        saturated: Vec::with_capacity(n_steps + 1),
        cost_state: Vec::with_capacity(n_steps + 1),
        cost_control: Vec::with_capacity(n_steps + 1),
        states: Vec::new(),
    };

    // nodal explicit terms N(t, state) and the control for bookkeeping
    let eval_n = |k: usize, state: &[f64]| -> Result<(Vec<f64>, Option<Vec<f64>>, bool)> {
        let t = t0 + k as f64 * dt;
        match rhs {
            Rhs::Free { reaction, forcing } => {
                let mut nvec = vec![0.0; n];
                if let Some(p) = reaction {
                    let f = f_cubic(&Field::from_vec(state.to_vec()), p);
                    for (o, v) in nvec.iter_mut().zip(f.values()) {
                        *o -= v;
                    }
                }
                if let Some(h) = forcing {
                    let hf = h(grid, t);
                    for (o, v) in nvec.iter_mut().zip(hf.values()) {
                        *o += v;
                    }
                }
                Ok((nvec, None, false))
            }
            Rhs::ClosedLoop {
                params,
                target,
                fam,
                cfg,
            } => {
                let yt = target.sample(grid, t);
                let zf = Field::from_vec(state.to_vec());
                let fe = f_error(&zf, &yt, params);
                let out = feedback(&zf, fam, ops, cfg)?;
                let shape = u_diamond(&out.u, fam);
                let mut nvec = vec![0.0; n];
                for i in 0..n {
                    // −(f(z+yₜ)−f(yₜ)) = −(fʸᵗ(z) + z)
                    nvec[i] = -(fe.values()[i] + state[i]) + shape.values()[i];
                }
                Ok((nvec, Some(out.u), out.saturated))
            }
            Rhs::OpenLoop {
                params,
                target,
                fam,
                controls,
            } => {
                let yt = target.sample(grid, t);
                let zf = Field::from_vec(state.to_vec());
                let fe = f_error(&zf, &yt, params);
                let u = &controls[k.min(controls.len() - 1)];
                let shape = u_diamond(u, fam);
                let mut nvec = vec![0.0; n];
                for i in 0..n {
                    nvec[i] = -(fe.values()[i] + state[i]) + shape.values()[i];
                }
                Ok((nvec, Some(u.clone()), false))
            }
        }
    };

    // trapezoid integrands at the previous node, for the running costs
    let mut last_gs = 0.0;
    let mut last_gc = 0.0;

    let push_node = |trace: &mut SimTrace,
                         k: usize,
                         state: &[f64],
                         u: &Option<Vec<f64>>,
                         sat: bool,
                         last_gs: &mut f64,
                         last_gc: &mut f64|
     -> f64 {
        let f = Field::from_vec(state.to_vec());
        let (nh, nv, nl6) = crate::fem::norms(&f, ops, grid);
        trace.times.push(t0 + k as f64 * dt);
        trace.norm_h.push(nh);
        trace.norm_v.push(nv);
        trace.norm_l6.push(nl6);
        trace.saturated.push(sat);
        if let Some(u) = u {
            trace.controls.push(u.clone());
        }
        let g_state = record
            .state_cost_norm
            .map(|q| {
                let nq = q(&f);
                0.5 * nq * nq
            })
            .unwrap_or(0.0);
        let g_ctrl = u
            .as_ref()
            .map(|u| 0.5 * u.iter().map(|v| v * v).sum::<f64>())
            .unwrap_or(0.0);
        if k == 0 {
            trace.cost_state.push(0.0);
            trace.cost_control.push(0.0);
        } else {
            let prev_s = *trace.cost_state.last().unwrap();
            let prev_c = *trace.cost_control.last().unwrap();
            trace.cost_state.push(prev_s + 0.5 * dt * (*last_gs + g_state));
            trace.cost_control.push(prev_c + 0.5 * dt * (*last_gc + g_ctrl));
        }
        *last_gs = g_state;
        *last_gc = g_ctrl;
        if k % store_every == 0 || k == n_steps {
            trace.states.push((k, f));
        }
        nh
    };

    let (mut n_curr, u0, sat0) = eval_n(0, &y)?;
    push_node(&mut trace, 0, &y, &u0, sat0, &mut last_gs, &mut last_gc);

    let mut n_prev: Option<Vec<f64>> = None;
    let mut scratch = vec![0.0; n];
    for k in 0..n_steps {
        // dt·M·[3/2 Nᵏ − 1/2 Nᵏ⁻¹], Euler at the first step
        let comb: Vec<f64> = match &n_prev {
            None => n_curr.clone(),
            Some(p) => n_curr
                .iter()
                .zip(p)
                .map(|(a, b)| 1.5 * a - 0.5 * b)
                .collect(),
        };
        let m_comb = ops.apply_mass(&comb);
        let ry = rhs_mat.mul_vec(&y);
        for i in 0..n {
            scratch[i] = ry[i] + dt * m_comb[i];
        }
        y = solver.solve(&scratch);

        let t_next = t0 + (k + 1) as f64 * dt;
        if y.iter().any(|v| !v.is_finite()) {
            return Ok((
                trace,
                Some(Error::BlowUp {
                    time: t_next,
                    norm: f64::INFINITY,
                }),
            ));
        }
        n_prev = Some(std::mem::take(&mut n_curr));
        let (n_next, u_next, sat_next) = eval_n(k + 1, &y)?;
        n_curr = n_next;
        let nh = push_node(
            &mut trace,
            k + 1,
            &y,
            &u_next,
            sat_next,
            &mut last_gs,
            &mut last_gc,
        );
        if nh > BLOWUP_NORM {
            return Ok((
                trace,
                Some(Error::BlowUp {
                    time: t_next,
                    norm: nh,
                }),
            ));
        }
    }
    Ok((trace, None))
}
