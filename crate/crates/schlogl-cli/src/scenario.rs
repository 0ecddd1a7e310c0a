//! Scenario execution and trace post-processing.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;

use schlogl::actuation::{
    build_actuators, cu_star, frak_u_norm, ActuatorFamily, FeedbackConfig, FeedbackVariant,
    SatNorm,
};
use schlogl::diagnostics::{
    check_mlam, convergence_study, decay_rate, poincare_xi, ConvergenceStudy, DecayReport,
    RefinementPlan,
};
use schlogl::dynamics::{
    manufactured_forcing, simulate_partial, ReactionParams, RecordOptions, Rhs, SimTrace,
    TargetSpec,
};
use schlogl::error::Error;
use schlogl::expr::Expr;
use schlogl::fem::{build_grid, neumann_eigenbasis, Field, FemOperators, Grid};
use schlogl::ocp::{receding_horizon, ObservationQ, OcpOptions, RhcProblem};

use crate::config::{ControllerConfig, ScenarioConfig};

/// Exit codes of `run`: 0 ok (possibly with warnings), 2 configuration, 3 blow-up.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_BLOWUP: i32 = 3;

#[derive(Debug, Serialize)]
pub struct Summary {
    pub controller: String,
    pub n_nodes: usize,
    pub dt: f64,
    pub t_final: f64,
    pub initial_norm_h: f64,
    pub final_norm_h: f64,
    pub final_norm_v: f64,
    pub final_norm_l6: f64,
    pub cost_state: f64,
    pub cost_control: f64,
    pub cost_total: f64,
    /// fraction of time nodes at which the control bound was active
    pub saturation_duty: f64,
    pub last_saturated_time: Option<f64>,
    pub decay: Option<DecayReport>,
    pub windows_total: Option<usize>,
    pub windows_converged: Option<usize>,
    pub blow_up_time: Option<f64>,
    pub warnings: Vec<String>,
}

pub struct RunOutcome {
    pub summary: Summary,
    pub exit_code: i32,
    pub out_dir: PathBuf,
    /// the full trace backing the written artifacts
    pub trace: SimTrace,
}

struct Problem {
    grid: Grid,
    ops: FemOperators,
    fam: ActuatorFamily,
    params: ReactionParams,
    target: TargetSpec,
    z0: Field,
    q: ObservationQ,
}

fn build_problem(cfg: &ScenarioConfig) -> Result<Problem, Error> {
    let (grid, ops) = build_grid(cfg.grid.n_nodes, cfg.grid.length, cfg.grid.nu)?;
    let fam = build_actuators(cfg.actuators.m, cfg.actuators.r, &grid, &ops)?;
    let params = ReactionParams::new(cfg.reaction.zeta);
    let target = match cfg.target.kind.as_str() {
        "zero" => TargetSpec::zero(),
        "sin_cos" => TargetSpec::sin_cos(cfg.grid.length),
        "expression" => {
            let e = Expr::parse(cfg.target.expr.as_deref().unwrap_or_default())?;
            TargetSpec::from_expr(e, cfg.grid.length)?
        }
        other => {
            return Err(Error::Config(format!("unknown target kind `{other}`")));
        }
    };
    // the forcing that realizes the target must stay persistently bounded:
    // compare its size over an early and a far-future window
    let h = manufactured_forcing(&target, &params, cfg.grid.nu);
    let window_sup = |start: f64| -> f64 {
        (0..=50)
            .map(|k| ops.h_norm(&h.at(&grid, start + 0.1 * k as f64)))
            .fold(0.0, f64::max)
    };
    let early = window_sup(0.0);
    let late = window_sup(cfg.time.t_final + 100.0);
    if !late.is_finite() || late > 10.0 * (1.0 + early) {
        return Err(Error::Config(format!(
            "target forcing violates the persistent bound: ‖h‖_H grows from {early:.3e} to {late:.3e}"
        )));
    }

    let z0_expr = Expr::parse(&cfg.initial.z0)?;
    let z0 = Field::new(
        grid.nodes().iter().map(|&x| z0_expr.eval(x, 0.0)).collect(),
        &grid,
    )?;
    let m1 = match &cfg.controller {
        ControllerConfig::Rhc { m1, .. } => *m1,
        _ => cfg.observation.m1,
    };
    let basis = neumann_eigenbasis(&grid, &ops, m1)?;
    let q = ObservationQ::Spectral(basis);
    Ok(Problem {
        grid,
        ops,
        fam,
        params,
        target,
        z0,
        q,
    })
}

fn store_stride(cfg: &ScenarioConfig) -> usize {
    if cfg.output.snapshot_every <= 0.0 {
        usize::MAX
    } else {
        ((cfg.output.snapshot_every / cfg.time.dt).round() as usize).max(1)
    }
}

/// Run one scenario and write trace.csv, snapshots.json, summary.json (and
/// windows.json for receding-horizon runs) into the configured directory.
pub fn run_scenario(cfg: &ScenarioConfig) -> anyhow::Result<RunOutcome> {
    if let Err(e) = cfg.validate() {
        anyhow::bail!("invalid configuration:\n{e}");
    }
    let p = build_problem(cfg).map_err(|e| anyhow::anyhow!("setup failed: {e}"))?;
    let out_dir = PathBuf::from(&cfg.output.dir);
    fs::create_dir_all(&out_dir)?;

    let stride = store_stride(cfg);
    let qn = |z: &Field| p.q.h_norm(z, &p.ops);
    let record = RecordOptions {
        store_every: stride,
        state_cost_norm: Some(&qn),
    };

    let mut warnings = Vec::new();
    let mut windows_total = None;
    let mut windows_converged = None;
    let mut blow_up_time = None;

    let (trace, controller_name) = match &cfg.controller {
        ControllerConfig::Free => {
            let fbcfg = FeedbackConfig {
                lambda: 0.0,
                c_u: f64::INFINITY,
                norm: SatNorm::Linf,
                variant: FeedbackVariant::Oblique,
            };
            let (trace, err) = simulate_partial(
                &p.z0,
                0.0,
                cfg.time.t_final,
                cfg.time.dt,
                &Rhs::ClosedLoop {
                    params: &p.params,
                    target: &p.target,
                    fam: &p.fam,
                    cfg: &fbcfg,
                },
                &p.grid,
                &p.ops,
                &record,
            )
            .map_err(|e| anyhow::anyhow!("{e}"))?;
            if let Some(Error::BlowUp { time, .. }) = err {
                blow_up_time = Some(time);
            }
            (trace, "free".to_string())
        }
        ControllerConfig::Explicit {
            lambda,
            c_u,
            norm,
            variant,
        } => {
            let fbcfg = FeedbackConfig {
                lambda: *lambda,
                c_u: *c_u,
                norm: parse_norm(norm),
                variant: if variant == "orthogonal" {
                    FeedbackVariant::Orthogonal
                } else {
                    FeedbackVariant::Oblique
                },
            };
            let (trace, err) = simulate_partial(
                &p.z0,
                0.0,
                cfg.time.t_final,
                cfg.time.dt,
                &Rhs::ClosedLoop {
                    params: &p.params,
                    target: &p.target,
                    fam: &p.fam,
                    cfg: &fbcfg,
                },
                &p.grid,
                &p.ops,
                &record,
            )
            .map_err(|e| anyhow::anyhow!("{e}"))?;
            if let Some(Error::BlowUp { time, .. }) = err {
                blow_up_time = Some(time);
            }
            (trace, "explicit".to_string())
        }
        ControllerConfig::Rhc {
            t_rh,
            delta_rh,
            c_u,
            max_iters,
            grad_tol,
            terminal_weight,
            ..
        } => {
            let prob = RhcProblem {
                t_final: cfg.time.t_final,
                t_rh: *t_rh,
                delta_rh: *delta_rh,
                dt: cfg.time.dt,
                z0: p.z0.clone(),
                target: &p.target,
                params: &p.params,
                fam: &p.fam,
                grid: &p.grid,
                ops: &p.ops,
                q: &p.q,
                c_u: *c_u,
                constraint_norm: SatNorm::Linf,
                options: OcpOptions {
                    max_iters: *max_iters,
                    grad_tol: *grad_tol,
                    ..OcpOptions::default()
                },
                terminal_weight: *terminal_weight,
                store_every: stride,
            };
            let out = receding_horizon(&prob).map_err(|e| anyhow::anyhow!("{e}"))?;
            windows_total = Some(out.windows.len());
            let conv = out.windows.iter().filter(|w| w.converged).count();
            windows_converged = Some(conv);
            for w in &out.windows {
                if !w.converged {
                    warnings.push(format!(
                        "window {} did not reach the stationarity tolerance (residual {:.3e})",
                        w.index, w.stationarity
                    ));
                }
            }
            let windows_path = out_dir.join("windows.json");
            serde_json::to_writer_pretty(BufWriter::new(fs::File::create(&windows_path)?), &out.windows)?;
            (out.trace, "rhc".to_string())
        }
    };

    // artifacts
    trace.write_csv(BufWriter::new(fs::File::create(out_dir.join("trace.csv"))?))?;
    write_snapshots(&out_dir.join("snapshots.json"), &p.grid, &trace)?;

    let initial_norm_h = trace.norm_h[0];
    if controller_name != "free" && *trace.norm_h.last().unwrap() > 0.1 * initial_norm_h {
        warnings.push(format!(
            "not stabilized: |z(T)|/|z0| = {:.3}",
            trace.norm_h.last().unwrap() / initial_norm_h
        ));
    }
    let decay = match decay_rate(&trace.times, &trace.norm_h, 0.1 * cfg.time.t_final) {
        Ok(rep) => Some(rep),
        Err(e) => {
            warnings.push(format!("decay fit unavailable: {e}"));
            None
        }
    };
    let n_nodes_time = trace.times.len();
    let sat_count = trace.saturated.iter().filter(|s| **s).count();
    let last_sat = trace
        .saturated
        .iter()
        .rposition(|s| *s)
        .map(|k| trace.times[k]);

    let summary = Summary {
        controller: controller_name,
        n_nodes: cfg.grid.n_nodes,
        dt: cfg.time.dt,
        t_final: cfg.time.t_final,
        initial_norm_h,
        final_norm_h: *trace.norm_h.last().unwrap(),
        final_norm_v: *trace.norm_v.last().unwrap(),
        final_norm_l6: *trace.norm_l6.last().unwrap(),
        cost_state: *trace.cost_state.last().unwrap(),
        cost_control: *trace.cost_control.last().unwrap(),
        cost_total: trace.cost_state.last().unwrap() + trace.cost_control.last().unwrap(),
        saturation_duty: sat_count as f64 / n_nodes_time as f64,
        last_saturated_time: last_sat,
        decay,
        windows_total,
        windows_converged,
        blow_up_time,
        warnings,
    };
    serde_json::to_writer_pretty(
        BufWriter::new(fs::File::create(out_dir.join("summary.json"))?),
        &summary,
    )?;

    let exit_code = if blow_up_time.is_some() { EXIT_BLOWUP } else { EXIT_OK };
    Ok(RunOutcome {
        summary,
        exit_code,
        out_dir,
        trace,
    })
}

fn parse_norm(s: &str) -> SatNorm {
    if s == "l2" {
        SatNorm::L2
    } else {
        SatNorm::Linf
    }
}

#[derive(Serialize)]
struct SnapshotFile<'a> {
    x: &'a [f64],
    snapshots: Vec<Snapshot<'a>>,
}

#[derive(Serialize)]
struct Snapshot<'a> {
    t: f64,
    values: &'a [f64],
}

fn write_snapshots(path: &Path, grid: &Grid, trace: &SimTrace) -> anyhow::Result<()> {
    let snapshots = trace
        .states
        .iter()
        .map(|(step, f)| Snapshot {
            t: trace.t0 + *step as f64 * trace.dt,
            values: f.values(),
        })
        .collect();
    let file = SnapshotFile {
        x: grid.nodes(),
        snapshots,
    };
    serde_json::to_writer(BufWriter::new(fs::File::create(path)?), &file)?;
    Ok(())
}

/// One parsed trace.csv.
pub struct LoadedTrace {
    pub path: PathBuf,
    pub times: Vec<f64>,
    pub norm_h: Vec<f64>,
    pub saturated: Vec<bool>,
    pub cost_state: Vec<f64>,
    pub cost_control: Vec<f64>,
}

pub fn load_trace(path: &Path) -> anyhow::Result<LoadedTrace> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| anyhow::anyhow!("{}: empty trace", path.display()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let idx = |name: &str| -> anyhow::Result<usize> {
        cols.iter()
            .position(|c| *c == name)
            .ok_or_else(|| anyhow::anyhow!("{}: missing column {name}", path.display()))
    };
    let (it, ih, isat, ics, icc) = (
        idx("t")?,
        idx("normH")?,
        idx("saturated")?,
        idx("cost_state")?,
        idx("cost_control")?,
    );
    let mut out = LoadedTrace {
        path: path.to_path_buf(),
        times: Vec::new(),
        norm_h: Vec::new(),
        saturated: Vec::new(),
        cost_state: Vec::new(),
        cost_control: Vec::new(),
    };
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let get = |i: usize| -> anyhow::Result<f64> {
            f.get(i)
                .ok_or_else(|| anyhow::anyhow!("{}: short row {}", path.display(), ln + 2))?
                .parse()
                .map_err(|e| anyhow::anyhow!("{}: row {}: {e}", path.display(), ln + 2))
        };
        out.times.push(get(it)?);
        out.norm_h.push(get(ih)?);
        out.saturated.push(get(isat)? != 0.0);
        out.cost_state.push(get(ics)?);
        out.cost_control.push(get(icc)?);
    }
    if out.times.len() < 2 {
        anyhow::bail!("{}: trace has fewer than two rows", path.display());
    }
    Ok(out)
}

/// Comparison table (CSV) of runs sharing the same time grid.
pub fn compare(paths: &[PathBuf]) -> anyhow::Result<String> {
    if paths.is_empty() {
        anyhow::bail!("compare needs at least one trace");
    }
    let traces: Vec<LoadedTrace> = paths
        .iter()
        .map(|p| load_trace(p))
        .collect::<anyhow::Result<_>>()?;

    let t_final = *traces[0].times.last().unwrap();
    let dt = traces[0].times[1] - traces[0].times[0];
    let mut mismatches = Vec::new();
    for tr in &traces[1..] {
        let tf = *tr.times.last().unwrap();
        let d = tr.times[1] - tr.times[0];
        if (tf - t_final).abs() > 1e-9 {
            mismatches.push(format!(
                "{}: final time {tf} differs from {t_final}",
                tr.path.display()
            ));
        }
        if (d - dt).abs() > 1e-12 {
            mismatches.push(format!("{}: dt {d} differs from {dt}", tr.path.display()));
        }
    }
    if !mismatches.is_empty() {
        anyhow::bail!("incompatible traces:\n{}", mismatches.join("\n"));
    }

    let mut out = String::from("trace,final_norm_h,mu_hat,total_cost,saturation_duty\n");
    for tr in &traces {
        let mu = decay_rate(&tr.times, &tr.norm_h, 0.1 * t_final)
            .map(|r| r.mu_hat)
            .unwrap_or(f64::NAN);
        let total = tr.cost_state.last().unwrap() + tr.cost_control.last().unwrap();
        let duty =
            tr.saturated.iter().filter(|s| **s).count() as f64 / tr.saturated.len() as f64;
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            tr.path.display(),
            tr.norm_h.last().unwrap(),
            mu,
            total,
            duty
        ));
    }
    Ok(out)
}

#[derive(Serialize)]
pub struct XiEntry {
    pub m: usize,
    pub xi: Option<f64>,
    pub error: Option<String>,
}

#[derive(Serialize)]
pub struct DiagnosticsReport {
    pub poincare: Vec<XiEntry>,
    pub frak_norm_linf: f64,
    pub c_u_star: Option<f64>,
    pub mlam_lambda: f64,
    pub mlam_min_ratio: f64,
    pub convergence: ConvergenceStudy,
}

/// Poincaré, gain-inequality and scheme-order suites for a configuration.
pub fn diagnose(cfg: &ScenarioConfig, absorbing_radius: f64) -> anyhow::Result<DiagnosticsReport> {
    if let Err(e) = cfg.validate() {
        anyhow::bail!("invalid configuration:\n{e}");
    }
    let p = build_problem(cfg).map_err(|e| anyhow::anyhow!("setup failed: {e}"))?;

    let mut poincare = Vec::new();
    for m in [1usize, 2, 4, 8] {
        match build_actuators(m, cfg.actuators.r, &p.grid, &p.ops)
            .and_then(|fam| poincare_xi(&fam, &p.grid, &p.ops))
        {
            Ok(xi) => poincare.push(XiEntry {
                m,
                xi: Some(xi),
                error: None,
            }),
            Err(e) => poincare.push(XiEntry {
                m,
                xi: None,
                error: Some(e.to_string()),
            }),
        }
    }

    let frak = frak_u_norm(&p.fam, &p.ops, SatNorm::Linf).map_err(|e| anyhow::anyhow!("{e}"))?;
    let (lambda, c_u_star) = match &cfg.controller {
        ControllerConfig::Explicit { lambda, .. } => {
            (*lambda, Some(cu_star(*lambda, absorbing_radius, frak)))
        }
        _ => (0.0, None),
    };

    // sample fields: deterministic pseudo-random plus leading eigenfields
    let mut state = 0x243f6a8885a308d3u64;
    let mut rand = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    let mut samples: Vec<Field> = (0..50)
        .map(|_| Field::from_fn(&p.grid, |_| 4.0 * rand()))
        .collect();
    let basis = neumann_eigenbasis(&p.grid, &p.ops, 10).map_err(|e| anyhow::anyhow!("{e}"))?;
    samples.extend(basis.fields().iter().cloned());
    let mlam_min_ratio =
        check_mlam(&samples, lambda, &p.fam, &p.ops).map_err(|e| anyhow::anyhow!("{e}"))?;

    let plan = RefinementPlan {
        length: cfg.grid.length,
        nu: cfg.grid.nu,
        t_final: 0.5,
        temporal_n_nodes: 201,
        temporal_dts: vec![2e-2, 1e-2, 5e-3],
        spatial_dt: 2e-4,
        spatial_n_nodes: vec![26, 51, 101],
    };
    let convergence = convergence_study(&p.target, Some(&p.params), &plan)
        .map_err(|e| anyhow::anyhow!("{e}"))?;

    Ok(DiagnosticsReport {
        poincare,
        frak_norm_linf: frak,
        c_u_star,
        mlam_lambda: lambda,
        mlam_min_ratio,
        convergence,
    })
}
