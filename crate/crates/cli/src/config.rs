//! The JSON experiment description and its validation.

use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use gradflow::density::Grid;
use gradflow::euclidean::{ProjectionProcess, Weighting};
use gradflow::{DoubleWell, GridDensity, Linear, Objective, Potential, Quadratic};
use serde::{Deserialize, Serialize};

pub const DEFAULT_HALF_WIDTH: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Euclidean,
    Newton,
    Sgd,
    FokkerPlanck,
    Product,
    Verify,
}

impl Kind {
    pub const NAMES: [&'static str; 6] = ["euclidean", "newton", "sgd", "fokker_planck", "product", "verify"];

    pub fn parse(token: &str) -> Option<Self> {
        match token {
            "euclidean" => Some(Kind::Euclidean),
            "newton" => Some(Kind::Newton),
            "sgd" => Some(Kind::Sgd),
            "fokker_planck" | "fokker-planck" => Some(Kind::FokkerPlanck),
            "product" => Some(Kind::Product),
            "verify" => Some(Kind::Verify),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        Self::NAMES[self as usize]
    }
}

/// An objective or Hamiltonian named by a built-in identifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diag: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<f64>,
}

/// A starting point (`kind = "point"`, `x`) or density (`kind = "gaussian"`,
/// `mean`, `variance`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance: Option<f64>,
}

/// Grid bounds default to `±10` on every axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<Vec<f64>>,
    pub nodes: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    pub count: usize,
    pub magnitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdSpec {
    pub batch_size: usize,
    pub resample_interval: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<ObjectiveSpec>,
    /// Temperature of the Fokker–Planck potential.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialSpec>,
    /// Second density of a product run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partner: Option<InitialSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_final: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<PerturbationSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sgd: Option<SgdSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// A problem with a config, naming the offending field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Everything a run needs, resolved from a valid config.
pub struct Plan {
    pub kind: Kind,
    pub objective: Option<Arc<dyn Objective>>,
    pub potential: Option<Potential>,
    pub start: Option<Vec<f64>>,
    pub density: Option<GridDensity>,
    pub partner: Option<GridDensity>,
    pub t_final: f64,
    pub dt: f64,
    pub seed: u64,
    pub perturbation: Option<PerturbationSpec>,
    pub weighting: Option<Weighting>,
}

struct Checker {
    diagnostics: Vec<Diagnostic>,
}

impl Checker {
    fn push(&mut self, field: impl Into<String>, message: impl Into<String>) {
        self.diagnostics.push(Diagnostic {
            field: field.into(),
            message: message.into(),
        });
    }

    fn finite(&mut self, field: &str, values: &[f64]) -> bool {
        if values.iter().all(|v| v.is_finite()) {
            true
        } else {
            self.push(field, "must be finite");
            false
        }
    }

    fn positive(&mut self, field: &str, value: Option<f64>) -> Option<f64> {
        match value {
            None => {
                self.push(field, "is required");
                None
            }
            Some(v) if v.is_finite() && v > 0.0 => Some(v),
            Some(v) => {
                self.push(field, format!("must be positive and finite, got {v}"));
                None
            }
        }
    }
}

fn resolve_objective(c: &mut Checker, spec: &ObjectiveSpec) -> Option<Arc<dyn Objective>> {
    let built: Result<Arc<dyn Objective>, String> = match spec.name.as_str() {
        "quadratic" => match (&spec.diag, &spec.matrix) {
            (Some(d), None) => {
                if !c.finite("objective.diag", d) {
                    return None;
                }
                match &spec.center {
                    None => Quadratic::diagonal(d),
                    Some(center) => {
                        let rows: Vec<Vec<f64>> = (0..d.len())
                            .map(|i| (0..d.len()).map(|j| if i == j { d[i] } else { 0.0 }).collect())
                            .collect();
                        Quadratic::from_rows(&rows, center)
                    }
                }
                .map(|q| Arc::new(q) as Arc<dyn Objective>)
                .map_err(|e| e.to_string())
            }
            (None, Some(m)) => {
                if !c.finite("objective.matrix", &m.concat()) {
                    return None;
                }
                let center = spec.center.clone().unwrap_or_else(|| vec![0.0; m.len()]);
                Quadratic::from_rows(m, &center)
                    .map(|q| Arc::new(q) as Arc<dyn Objective>)
                    .map_err(|e| e.to_string())
            }
            _ => Err("quadratic needs exactly one of diag or matrix".into()),
        },
        "double_well" => Ok(Arc::new(DoubleWell)),
        "linear" => match &spec.slope {
            Some(slope) if !slope.is_empty() => {
                let offset = spec.offset.unwrap_or(0.0);
                if !c.finite("objective.slope", slope) || !c.finite("objective.offset", &[offset]) {
                    return None;
                }
                Ok(Arc::new(Linear {
                    slope: slope.clone(),
                    offset,
                }))
            }
            _ => Err("linear needs a nonempty slope".into()),
        },
        other => {
            c.push("objective.name", format!("unknown objective `{other}`"));
            return None;
        }
    };
    match built {
        Ok(o) => Some(o),
        Err(e) => {
            c.push("objective", e);
            None
        }
    }
}

fn resolve_grid(c: &mut Checker, spec: Option<&GridSpec>) -> Option<Grid> {
    let Some(spec) = spec else {
        c.push("grid", "is required for density experiments");
        return None;
    };
    let dim = spec.nodes.len();
    if !(1..=2).contains(&dim) {
        c.push("grid.nodes", format!("needs one or two axes, got {dim}"));
        return None;
    }
    if let Some(n) = spec.nodes.iter().find(|n| **n < Grid::MIN_NODES) {
        c.push(
            "grid.nodes",
            format!("{n} nodes is below the minimum of {}", Grid::MIN_NODES),
        );
        return None;
    }
    let lower = spec.lower.clone().unwrap_or_else(|| vec![-DEFAULT_HALF_WIDTH; dim]);
    let upper = spec.upper.clone().unwrap_or_else(|| vec![DEFAULT_HALF_WIDTH; dim]);
    if !c.finite("grid.lower", &lower) || !c.finite("grid.upper", &upper) {
        return None;
    }
    match Grid::new(lower, upper, spec.nodes.clone()) {
        Ok(g) => Some(g),
        Err(e) => {
            c.push("grid", e.to_string());
            None
        }
    }
}

fn resolve_density(c: &mut Checker, field: &str, spec: Option<&InitialSpec>, grid: &Grid) -> Option<GridDensity> {
    let Some(spec) = spec else {
        c.push(field, "is required");
        return None;
    };
    if spec.kind != "gaussian" {
        c.push(format!("{field}.kind"), format!("unknown density `{}`", spec.kind));
        return None;
    }
    let mean = spec.mean.clone().unwrap_or_else(|| vec![0.0; grid.dimension()]);
    if mean.len() != grid.dimension() {
        c.push(
            format!("{field}.mean"),
            format!("has {} entries for a {}-dimensional grid", mean.len(), grid.dimension()),
        );
        return None;
    }
    if !c.finite(&format!("{field}.mean"), &mean) {
        return None;
    }
    let variance = c.positive(&format!("{field}.variance"), spec.variance)?;
    match GridDensity::gaussian(grid, &mean, variance) {
        Ok(d) => Some(d),
        Err(e) => {
            c.push(field, e.to_string());
            None
        }
    }
}

/// Checks `config` as a run of `kind` (the config's own `kind` when `None`)
/// and returns every problem found.
pub fn validate(config: &ExperimentConfig, kind: Option<Kind>) -> Vec<Diagnostic> {
    match resolve(config, kind) {
        Ok(_) => Vec::new(),
        Err(d) => d,
    }
}

/// Resolves a config into a [`Plan`], or the list of diagnostics.
pub fn resolve(config: &ExperimentConfig, kind: Option<Kind>) -> Result<Plan, Vec<Diagnostic>> {
    let mut c = Checker {
        diagnostics: Vec::new(),
    };
    let config_kind = match config.kind.as_deref() {
        None => None,
        Some(token) => match Kind::parse(token) {
            Some(k) => Some(k),
            None => {
                c.push("kind", format!("unknown kind `{token}`"));
                None
            }
        },
    };
    let kind = match (kind, config_kind) {
        (Some(a), Some(b)) if a != b => {
            c.push("kind", format!("config says `{}` but `{}` was requested", b.name(), a.name()));
            a
        }
        (Some(a), _) => a,
        (None, Some(b)) => b,
        (None, None) => {
            if config.kind.is_none() {
                c.push("kind", "is required");
            }
            return Err(c.diagnostics);
        }
    };

    let mut plan = Plan {
        kind,
        objective: None,
        potential: None,
        start: None,
        density: None,
        partner: None,
        t_final: 0.0,
        dt: 0.0,
        seed: config.seed,
        perturbation: config.perturbation,
        weighting: None,
    };
    if let Some(p) = config.perturbation {
        if !p.magnitude.is_finite() || p.magnitude < 0.0 {
            c.push("perturbation.magnitude", format!("must be finite and nonnegative, got {}", p.magnitude));
        }
    }
    if kind == Kind::Verify {
        return if c.diagnostics.is_empty() { Ok(plan) } else { Err(c.diagnostics) };
    }

    let t_final = c.positive("t_final", config.t_final);
    let dt = c.positive("dt", config.dt);
    if let (Some(t), Some(h)) = (t_final, dt) {
        if h > t {
            c.push("dt", format!("dt = {h} exceeds t_final = {t}"));
        }
        plan.t_final = t;
        plan.dt = h;
    }

    match kind {
        Kind::Euclidean | Kind::Newton | Kind::Sgd => {
            let objective = match &config.objective {
                Some(spec) => resolve_objective(&mut c, spec),
                None => {
                    c.push("objective", "is required");
                    None
                }
            };
            let start = match &config.initial {
                Some(s) if s.kind == "point" => match &s.x {
                    Some(x) if c.finite("initial.x", x) => Some(x.clone()),
                    Some(_) => None,
                    None => {
                        c.push("initial.x", "is required for a point");
                        None
                    }
                },
                Some(s) => {
                    c.push("initial.kind", format!("`{}` is not a point", s.kind));
                    None
                }
                None => {
                    c.push("initial", "is required");
                    None
                }
            };
            if let (Some(o), Some(x)) = (&objective, &start) {
                if o.dimension() != x.len() {
                    c.push(
                        "initial.x",
                        format!("has {} entries for a {}-dimensional objective", x.len(), o.dimension()),
                    );
                }
            }
            plan.weighting = match kind {
                Kind::Euclidean => Some(Weighting::Identity),
                Kind::Newton => {
                    if let (Some(o), Some(x)) = (&objective, &start) {
                        if o.dimension() == x.len() && o.hessian(x).is_none() {
                            c.push("objective", "Newton flow needs a Hessian");
                        }
                    }
                    Some(Weighting::InverseHessian)
                }
                _ => match (config.sgd, &objective) {
                    (Some(s), Some(o)) => match ProjectionProcess::new(o.dimension(), s.batch_size, s.resample_interval, config.seed) {
                        Ok(p) => {
                            if let Some(h) = dt {
                                if s.resample_interval < h {
                                    c.push("sgd.resample_interval", "must be at least dt");
                                }
                            }
                            Some(Weighting::Projection(p))
                        }
                        Err(e) => {
                            c.push("sgd", e.to_string());
                            None
                        }
                    },
                    (None, _) => {
                        c.push("sgd", "is required (batch_size, resample_interval)");
                        None
                    }
                    _ => None,
                },
            };
            plan.objective = objective;
            plan.start = start;
        }
        Kind::FokkerPlanck | Kind::Product => {
            let grid = resolve_grid(&mut c, config.grid.as_ref());
            if let Some(grid) = &grid {
                plan.density = resolve_density(&mut c, "initial", config.initial.as_ref(), grid);
            }
            if kind == Kind::FokkerPlanck {
                let objective = match &config.objective {
                    Some(spec) => resolve_objective(&mut c, spec),
                    None => {
                        c.push("objective", "is required");
                        None
                    }
                };
                let kt = c.positive("kt", Some(config.kt.unwrap_or(1.0)));
                if let (Some(o), Some(g), Some(kt)) = (objective, &grid, kt) {
                    if o.dimension() != g.dimension() {
                        c.push(
                            "objective",
                            format!("is {}-dimensional on a {}-dimensional grid", o.dimension(), g.dimension()),
                        );
                    } else {
                        match Potential::new(o, kt) {
                            Ok(p) => plan.potential = Some(p),
                            Err(e) => c.push("kt", e.to_string()),
                        }
                    }
                }
            } else if let Some(grid) = &grid {
                plan.partner = resolve_density(&mut c, "partner", config.partner.as_ref(), grid);
            }
        }
        Kind::Verify => unreachable!(),
    }

    if c.diagnostics.is_empty() {
        Ok(plan)
    } else {
        Err(c.diagnostics)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn euclidean() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{"kind": "euclidean", "objective": {"name": "quadratic", "diag": [1, 4]},
                "initial": {"kind": "point", "x": [1, 1]}, "t_final": 5, "dt": 0.001}"#,
        )
        .unwrap()
    }

    fn product() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{"kind": "product", "grid": {"lower": [-8], "upper": [8], "nodes": [161]},
                "initial": {"kind": "gaussian", "mean": [-1], "variance": 0.5},
                "partner": {"kind": "gaussian", "mean": [1], "variance": 0.5},
                "t_final": 1, "dt": 0.01}"#,
        )
        .unwrap()
    }

    #[test]
    fn valid_configs_have_no_diagnostics() {
        assert!(validate(&euclidean(), None).is_empty());
        assert!(validate(&product(), None).is_empty());
        let verify = ExperimentConfig::from_json(r#"{"kind": "verify"}"#).unwrap();
        assert!(validate(&verify, None).is_empty());
    }

    #[test]
    fn small_grid_names_the_field() {
        let mut cfg = product();
        cfg.grid.as_mut().unwrap().nodes = vec![8];
        let d = validate(&cfg, None);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].field, "grid.nodes");
    }

    #[test]
    fn unknown_potential_reports_the_token() {
        let mut cfg = euclidean();
        cfg.objective.as_mut().unwrap().name = "rosenbrok".into();
        let d = validate(&cfg, None);
        assert_eq!(d.len(), 1);
        assert!(d[0].message.contains("rosenbrok"));
    }

    #[test]
    fn bad_dt_names_the_field() {
        let mut cfg = euclidean();
        cfg.dt = Some(0.0);
        let d = validate(&cfg, None);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].field, "dt");
        assert!(d[0].to_string().starts_with("dt"));
    }

    #[test]
    fn kind_conflicts_and_unknowns() {
        assert_eq!(validate(&euclidean(), Some(Kind::Product))[0].field, "kind");
        let mut cfg = euclidean();
        cfg.kind = Some("annealing".into());
        assert!(validate(&cfg, None)[0].message.contains("annealing"));
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = product();
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }
}
