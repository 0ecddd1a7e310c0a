//! Scenario configuration: one TOML file describes a complete experiment.
//!
//! Every key maps one-to-one onto the solver inputs; see the bundled files
//! under `configs/` for annotated examples.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub grid: GridConfig,
    pub reaction: ReactionConfig,
    pub actuators: ActuatorConfig,
    pub target: TargetConfig,
    pub initial: InitialConfig,
    pub controller: ControllerConfig,
    pub time: TimeConfig,
    #[serde(default)]
    pub observation: ObservationConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub n_nodes: usize,
    pub length: f64,
    pub nu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReactionConfig {
    /// roots (ζ₁, ζ₂, ζ₃) of the bistable cubic
    pub zeta: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActuatorConfig {
    /// partition index M (M_σ = M actuators in 1D)
    pub m: usize,
    /// covered volume fraction r ∈ (0, 1)
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    /// "zero", "sin_cos" (sin(3t)·cos(πx/L)), or "expression"
    pub kind: String,
    /// closed-form y_t(t, x) when kind = "expression"
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expr: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    /// initial error z₀(x) as a closed-form expression
    pub z0: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControllerConfig {
    /// uncontrolled error dynamics (u = 0)
    Free,
    /// saturated explicit feedback
    Explicit {
        lambda: f64,
        c_u: f64,
        #[serde(default = "default_norm")]
        norm: String,
        #[serde(default = "default_variant")]
        variant: String,
    },
    /// receding-horizon optimal control
    Rhc {
        t_rh: f64,
        delta_rh: f64,
        c_u: f64,
        #[serde(default = "default_m1")]
        m1: usize,
        #[serde(default = "default_max_iters")]
        max_iters: usize,
        #[serde(default = "default_grad_tol")]
        grad_tol: f64,
        /// weight of the terminal tail surrogate in the window objectives;
        /// 0 runs the plain finite-horizon windows
        #[serde(default = "default_terminal_weight")]
        terminal_weight: f64,
    },
}

fn default_norm() -> String {
    "linf".into()
}
fn default_variant() -> String {
    "oblique".into()
}
fn default_m1() -> usize {
    20
}
fn default_max_iters() -> usize {
    200
}
fn default_grad_tol() -> f64 {
    1e-5
}
fn default_terminal_weight() -> f64 {
    2000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub t_final: f64,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationConfig {
    /// eigenmode count of Q used for cost reporting (and for the RHC unless
    /// the controller sets its own)
    pub m1: usize,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self { m1: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
    /// field snapshot spacing in time units; 0 stores only first/last
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: f64,
}

fn default_snapshot_every() -> f64 {
    0.01
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| format!("config parse error: {e}"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Full validation; collects every problem instead of stopping at the first.
    pub fn validate(&self) -> Result<(), String> {
        let mut problems = Vec::new();
        let g = &self.grid;
        if g.n_nodes < 3 {
            problems.push(format!("grid.n_nodes must be ≥ 3, got {}", g.n_nodes));
        }
        if !(g.length > 0.0) {
            problems.push(format!("grid.length must be positive, got {}", g.length));
        }
        if !(g.nu > 0.0) {
            problems.push(format!("grid.nu must be positive, got {}", g.nu));
        }
        if self.actuators.m < 1 {
            problems.push("actuators.m must be ≥ 1".into());
        }
        if !(self.actuators.r > 0.0 && self.actuators.r < 1.0) {
            problems.push(format!(
                "actuators.r must lie in (0, 1), got {}",
                self.actuators.r
            ));
        }
        match self.target.kind.as_str() {
            "zero" | "sin_cos" => {}
            "expression" => {
                if self.target.expr.is_none() {
                    problems.push("target.kind = \"expression\" requires target.expr".into());
                } else if let Err(e) =
                    schlogl::expr::Expr::parse(self.target.expr.as_deref().unwrap())
                {
                    problems.push(format!("target.expr: {e}"));
                }
            }
            other => problems.push(format!(
                "target.kind must be zero | sin_cos | expression, got `{other}`"
            )),
        }
        if let Err(e) = schlogl::expr::Expr::parse(&self.initial.z0) {
            problems.push(format!("initial.z0: {e}"));
        }
        match &self.controller {
            ControllerConfig::Free => {}
            ControllerConfig::Explicit {
                lambda,
                c_u,
                norm,
                variant,
            } => {
                if !(*lambda >= 0.0) || !lambda.is_finite() {
                    problems.push(format!("controller.lambda must be ≥ 0, got {lambda}"));
                }
                if c_u.is_nan() || *c_u < 0.0 {
                    problems.push(format!("controller.c_u must be in [0, inf], got {c_u}"));
                }
                if !matches!(norm.as_str(), "linf" | "l2") {
                    problems.push(format!("controller.norm must be linf | l2, got `{norm}`"));
                }
                if !matches!(variant.as_str(), "oblique" | "orthogonal") {
                    problems.push(format!(
                        "controller.variant must be oblique | orthogonal, got `{variant}`"
                    ));
                }
            }
            ControllerConfig::Rhc {
                t_rh,
                delta_rh,
                c_u,
                m1,
                max_iters,
                grad_tol,
                terminal_weight,
            } => {
                if !(*t_rh > 0.0) {
                    problems.push(format!("controller.t_rh must be positive, got {t_rh}"));
                }
                if !(*delta_rh > 0.0) || *delta_rh > *t_rh + 1e-12 {
                    problems.push(format!(
                        "controller.delta_rh must satisfy 0 < δ ≤ T_rh, got {delta_rh}"
                    ));
                }
                if !(*c_u > 0.0) {
                    problems.push(format!("controller.c_u must be positive, got {c_u}"));
                }
                if *m1 < 1 || *m1 > self.grid.n_nodes {
                    problems.push(format!("controller.m1 out of range, got {m1}"));
                }
                if *max_iters == 0 {
                    problems.push("controller.max_iters must be ≥ 1".into());
                }
                if !(*grad_tol > 0.0) {
                    problems.push(format!("controller.grad_tol must be positive, got {grad_tol}"));
                }
                if !(*terminal_weight >= 0.0) {
                    problems.push(format!(
                        "controller.terminal_weight must be ≥ 0, got {terminal_weight}"
                    ));
                }
                let ratio = delta_rh / self.time.dt;
                if (ratio - ratio.round()).abs() > 1e-9 {
                    problems.push("controller.delta_rh must be a multiple of time.dt".into());
                }
                let wins = self.time.t_final / delta_rh;
                if (wins - wins.round()).abs() > 1e-9 {
                    problems.push("time.t_final must be a multiple of controller.delta_rh".into());
                }
            }
        }
        if !(self.time.t_final > 0.0) {
            problems.push(format!(
                "time.t_final must be positive, got {}",
                self.time.t_final
            ));
        }
        if !(self.time.dt > 0.0) {
            problems.push(format!("time.dt must be positive, got {}", self.time.dt));
        }
        let steps = self.time.t_final / self.time.dt;
        if (steps - steps.round()).abs() > 1e-6 {
            problems.push("time.t_final must be a multiple of time.dt".into());
        }
        if self.observation.m1 < 1 || self.observation.m1 > self.grid.n_nodes {
            problems.push(format!("observation.m1 out of range, got {}", self.observation.m1));
        }
        if self.output.snapshot_every < 0.0 {
            problems.push("output.snapshot_every must be ≥ 0".into());
        }
        if self.output.dir.is_empty() {
            problems.push("output.dir must not be empty".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems.join("\n"))
        }
    }
}
