//! Experiment configuration: TOML parsing with aggregated validation,
//! key=value overrides, defaults, and a canonical serialization that
//! round-trips.

use nalgebra::{DMatrix, DVector};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{FhError, Result};
use crate::experiments::{
    CorrelatedDimsConfig, CovErrorConfig, GuidanceNormConfig, ToyPosteriorConfig,
};
use crate::guidance::CgSettings;
use crate::matrix::DenseSymMatrix;
use crate::metrics::{AxisSpec, HistogramGrid};
use crate::mixture::{GaussianMixture, LinearObservation, LinearOperator};
use crate::sampler::SolverKind;
use crate::tracker::MeanTransferMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    ToyPosterior,
    CorrelatedDims,
    CovError,
    GuidanceNorm,
    CustomSample,
}

impl ExperimentKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "toy-posterior" => Ok(Self::ToyPosterior),
            "correlated-dims" => Ok(Self::CorrelatedDims),
            "cov-error" => Ok(Self::CovError),
            "guidance-norm" => Ok(Self::GuidanceNorm),
            "custom-sample" => Ok(Self::CustomSample),
            other => Err(FhError::InvalidConfig(vec![format!(
                "unknown experiment '{other}' (expected toy-posterior, correlated-dims, \
                 cov-error, guidance-norm, or custom-sample)"
            )])),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::ToyPosterior => "toy-posterior",
            Self::CorrelatedDims => "correlated-dims",
            Self::CovError => "cov-error",
            Self::GuidanceNorm => "guidance-norm",
            Self::CustomSample => "custom-sample",
        }
    }
}

/// Guidance method selector for the free-form sampling experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CustomMethod {
    None,
    ExactConditional,
    Dps,
    PiGdm,
    PiGdmNoScale,
    HeuristicSigma,
    FreeHunch,
    OptimalCovariance,
}

impl CustomMethod {
    fn parse(name: &str) -> Option<Self> {
        match name {
            "none" => Some(Self::None),
            "exact-conditional" => Some(Self::ExactConditional),
            "dps" => Some(Self::Dps),
            "pigdm" => Some(Self::PiGdm),
            "pigdm-noscale" => Some(Self::PiGdmNoScale),
            "heuristic-sigma" => Some(Self::HeuristicSigma),
            "free-hunch" => Some(Self::FreeHunch),
            "optimal-covariance" => Some(Self::OptimalCovariance),
            _ => None,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::ExactConditional => "exact-conditional",
            Self::Dps => "dps",
            Self::PiGdm => "pigdm",
            Self::PiGdmNoScale => "pigdm-noscale",
            Self::HeuristicSigma => "heuristic-sigma",
            Self::FreeHunch => "free-hunch",
            Self::OptimalCovariance => "optimal-covariance",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CustomSampleConfig {
    pub method: CustomMethod,
    pub n_samples: usize,
    pub dps_xi: f64,
    pub clip: bool,
    pub clip_range: (f64, f64),
    pub fallback_threshold: f64,
}

impl Default for CustomSampleConfig {
    fn default() -> Self {
        Self {
            method: CustomMethod::None,
            n_samples: 1000,
            dps_xi: 1.0,
            clip: false,
            clip_range: (-1.0, 1.0),
            fallback_threshold: f64::INFINITY,
        }
    }
}

/// Fully resolved run configuration; every experiment section is populated
/// (with defaults where the file is silent) so the echo is complete.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub mixture: GaussianMixture,
    pub observation: LinearObservation,
    pub solver: SolverKind,
    pub steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub heun_tracker_both_evals: bool,
    pub tracker_init_samples: usize,
    pub mean_transfer: MeanTransferMode,
    pub cg: CgSettings,
    pub toy: ToyParams,
    pub correlated: CorrelatedParams,
    pub cov_error: CovErrorParams,
    pub guidance_norm: GuidanceNormParams,
    pub custom: CustomSampleConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyParams {
    pub n_samples: usize,
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub grid_bins: usize,
    pub dps_xi_sweep: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelatedParams {
    pub dims: Vec<usize>,
    pub correlation: f64,
    pub sigma_y: f64,
    pub n_samples: usize,
    pub dps_xi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovErrorParams {
    pub n_trajectories: usize,
    pub step_counts: Vec<usize>,
    pub solvers: Vec<SolverKind>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceNormParams {
    pub dims: Vec<usize>,
    pub sigma: f64,
    pub sigma_y: f64,
    pub residual_scale: f64,
}

impl RunConfig {
    pub fn defaults(experiment: ExperimentKind, seed: u64) -> Self {
        let toy = ToyPosteriorConfig::default_with_seed(seed);
        let correlated = CorrelatedDimsConfig::default_with_seed(seed);
        let cov = CovErrorConfig::default_with_seed(seed);
        let gn = GuidanceNormConfig::default_with_seed(seed);
        Self {
            experiment,
            seed,
            mixture: toy.mixture.clone(),
            observation: toy.observation.clone(),
            solver: SolverKind::Euler,
            steps: toy.n_steps,
            sigma_min: toy.sigma_min,
            sigma_max: toy.sigma_max,
            rho: toy.rho,
            heun_tracker_both_evals: true,
            tracker_init_samples: toy.tracker_init_samples,
            mean_transfer: MeanTransferMode::ExactEvaluation,
            cg: toy.cg,
            toy: ToyParams {
                n_samples: toy.n_samples,
                grid_lo: -5.0,
                grid_hi: 5.0,
                grid_bins: 100,
                dps_xi_sweep: toy.dps_xi_sweep,
            },
            correlated: CorrelatedParams {
                dims: correlated.dims,
                correlation: correlated.correlation,
                sigma_y: correlated.sigma_y,
                n_samples: correlated.n_samples,
                dps_xi: correlated.dps_xi,
            },
            cov_error: CovErrorParams {
                n_trajectories: cov.n_trajectories,
                step_counts: cov.step_counts,
                solvers: cov.solvers,
            },
            guidance_norm: GuidanceNormParams {
                dims: gn.dims,
                sigma: gn.sigma,
                sigma_y: gn.sigma_y,
                residual_scale: gn.residual_scale,
            },
            custom: CustomSampleConfig::default(),
        }
    }

    pub fn toy_posterior_config(&self) -> Result<ToyPosteriorConfig> {
        Ok(ToyPosteriorConfig {
            mixture: self.mixture.clone(),
            observation: self.observation.clone(),
            n_samples: self.toy.n_samples,
            n_steps: self.steps,
            sigma_min: self.sigma_min,
            sigma_max: self.sigma_max,
            rho: self.rho,
            grid: HistogramGrid::new(vec![
                AxisSpec {
                    lo: self.toy.grid_lo,
                    hi: self.toy.grid_hi,
                    bins: self.toy.grid_bins,
                };
                self.mixture.dim()
            ])?,
            dps_xi_sweep: self.toy.dps_xi_sweep.clone(),
            tracker_init_samples: self.tracker_init_samples,
            cg: self.cg,
            seed: self.seed,
        })
    }

    pub fn correlated_dims_config(&self) -> CorrelatedDimsConfig {
        CorrelatedDimsConfig {
            dims: self.correlated.dims.clone(),
            correlation: self.correlated.correlation,
            sigma_y: self.correlated.sigma_y,
            n_samples: self.correlated.n_samples,
            n_steps: self.steps,
            sigma_min: self.sigma_min,
            sigma_max: self.sigma_max,
            rho: self.rho,
            dps_xi: self.correlated.dps_xi,
            cg: self.cg,
            seed: self.seed,
        }
    }

    pub fn cov_error_config(&self) -> CovErrorConfig {
        CovErrorConfig {
            mixture: self.mixture.clone(),
            n_trajectories: self.cov_error.n_trajectories,
            step_counts: self.cov_error.step_counts.clone(),
            solvers: self.cov_error.solvers.clone(),
            sigma_min: self.sigma_min,
            sigma_max: self.sigma_max,
            rho: self.rho,
            tracker_init_samples: self.tracker_init_samples,
            seed: self.seed,
        }
    }

    pub fn guidance_norm_config(&self) -> GuidanceNormConfig {
        GuidanceNormConfig {
            dims: self.guidance_norm.dims.clone(),
            sigma: self.guidance_norm.sigma,
            sigma_y: self.guidance_norm.sigma_y,
            residual_scale: self.guidance_norm.residual_scale,
            cg: self.cg,
            seed: self.seed,
        }
    }

    /// Canonical TOML serialization; parsing it back yields an equal config.
    pub fn to_toml_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "experiment = \"{}\"", self.experiment.name());
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s);
        let _ = writeln!(s, "[mixture]");
        let _ = writeln!(s, "weights = {}", fmt_f64_array(self.mixture.weights()));
        let _ = writeln!(
            s,
            "means = [{}]",
            self.mixture
                .means()
                .iter()
                .map(|m| fmt_f64_array(m.as_slice()))
                .collect::<Vec<_>>()
                .join(", ")
        );
        let _ = writeln!(
            s,
            "covariances = [{}]",
            self.mixture
                .covariances()
                .iter()
                .map(|c| fmt_matrix(c.as_matrix()))
                .collect::<Vec<_>>()
                .join(", ")
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "[observation]");
        match &self.observation.operator {
            LinearOperator::Identity { .. } => {
                let _ = writeln!(s, "operator = \"identity\"");
            }
            LinearOperator::Mask { kept, .. } => {
                let _ = writeln!(s, "operator = \"mask\"");
                let _ = writeln!(
                    s,
                    "mask_indices = [{}]",
                    kept.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(", ")
                );
            }
            LinearOperator::Dense(a) => {
                let _ = writeln!(s, "operator = \"dense\"");
                let _ = writeln!(s, "dense = {}", fmt_matrix(a));
            }
        }
        let _ = writeln!(s, "y = {}", fmt_f64_array(self.observation.y.as_slice()));
        let _ = writeln!(s, "noise_std = {}", fmt_f64(self.observation.noise_std));
        let _ = writeln!(s);
        let _ = writeln!(s, "[sampler]");
        let _ = writeln!(s, "solver = \"{}\"", solver_name(self.solver));
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "sigma_min = {}", fmt_f64(self.sigma_min));
        let _ = writeln!(s, "sigma_max = {}", fmt_f64(self.sigma_max));
        let _ = writeln!(s, "rho = {}", fmt_f64(self.rho));
        let _ = writeln!(
            s,
            "heun_tracker_both_evals = {}",
            self.heun_tracker_both_evals
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "[tracker]");
        let _ = writeln!(s, "init_samples = {}", self.tracker_init_samples);
        let _ = writeln!(
            s,
            "mean_transfer = \"{}\"",
            match self.mean_transfer {
                MeanTransferMode::TimeUpdate => "time-update",
                MeanTransferMode::ExactEvaluation => "exact-evaluation",
            }
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "[guidance]");
        let _ = writeln!(s, "cg_rtol_max = {}", fmt_f64(self.cg.rtol_max));
        let _ = writeln!(s, "cg_rtol_min = {}", fmt_f64(self.cg.rtol_min));
        let _ = writeln!(s, "cg_sigma_lo = {}", fmt_f64(self.cg.sigma_lo));
        let _ = writeln!(s, "cg_sigma_hi = {}", fmt_f64(self.cg.sigma_hi));
        let _ = writeln!(s, "cg_exponent = {}", fmt_f64(self.cg.exponent));
        let _ = writeln!(s, "cg_max_iterations = {}", self.cg.max_iterations);
        let _ = writeln!(s);
        let _ = writeln!(s, "[toy_posterior]");
        let _ = writeln!(s, "n_samples = {}", self.toy.n_samples);
        let _ = writeln!(s, "grid_lo = {}", fmt_f64(self.toy.grid_lo));
        let _ = writeln!(s, "grid_hi = {}", fmt_f64(self.toy.grid_hi));
        let _ = writeln!(s, "grid_bins = {}", self.toy.grid_bins);
        let _ = writeln!(s, "dps_xi_sweep = {}", fmt_f64_array(&self.toy.dps_xi_sweep));
        let _ = writeln!(s);
        let _ = writeln!(s, "[correlated_dims]");
        let _ = writeln!(
            s,
            "dims = [{}]",
            self.correlated.dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        );
        let _ = writeln!(s, "correlation = {}", fmt_f64(self.correlated.correlation));
        let _ = writeln!(s, "sigma_y = {}", fmt_f64(self.correlated.sigma_y));
        let _ = writeln!(s, "n_samples = {}", self.correlated.n_samples);
        let _ = writeln!(s, "dps_xi = {}", fmt_f64(self.correlated.dps_xi));
        let _ = writeln!(s);
        let _ = writeln!(s, "[cov_error]");
        let _ = writeln!(s, "n_trajectories = {}", self.cov_error.n_trajectories);
        let _ = writeln!(
            s,
            "step_counts = [{}]",
            self.cov_error.step_counts.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        );
        let _ = writeln!(
            s,
            "solvers = [{}]",
            self.cov_error
                .solvers
                .iter()
                .map(|k| format!("\"{}\"", solver_name(*k)))
                .collect::<Vec<_>>()
                .join(", ")
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "[guidance_norm]");
        let _ = writeln!(
            s,
            "dims = [{}]",
            self.guidance_norm.dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        );
        let _ = writeln!(s, "sigma = {}", fmt_f64(self.guidance_norm.sigma));
        let _ = writeln!(s, "sigma_y = {}", fmt_f64(self.guidance_norm.sigma_y));
        let _ = writeln!(s, "residual_scale = {}", fmt_f64(self.guidance_norm.residual_scale));
        let _ = writeln!(s);
        let _ = writeln!(s, "[custom_sample]");
        let _ = writeln!(s, "method = \"{}\"", self.custom.method.name());
        let _ = writeln!(s, "n_samples = {}", self.custom.n_samples);
        let _ = writeln!(s, "dps_xi = {}", fmt_f64(self.custom.dps_xi));
        let _ = writeln!(s, "clip = {}", self.custom.clip);
        let _ = writeln!(s, "clip_lo = {}", fmt_f64(self.custom.clip_range.0));
        let _ = writeln!(s, "clip_hi = {}", fmt_f64(self.custom.clip_range.1));
        let _ = writeln!(s, "fallback_threshold = {}", fmt_f64(self.custom.fallback_threshold));
        s
    }
}

fn fmt_f64(v: f64) -> String {
    if v.is_infinite() {
        // TOML has no literal infinity in all parsers; use the toml 0.8 form
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else if v == v.trunc() && v.abs() < 1e15 {
        format!("{v:.1}")
    } else {
        format!("{v}")
    }
}

fn fmt_f64_array(v: &[f64]) -> String {
    format!(
        "[{}]",
        v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(", ")
    )
}

fn fmt_matrix(m: &DMatrix<f64>) -> String {
    let rows: Vec<String> = (0..m.nrows())
        .map(|i| fmt_f64_array(m.row(i).transpose().as_slice()))
        .collect();
    format!("[{}]", rows.join(", "))
}

fn solver_name(kind: SolverKind) -> &'static str {
    match kind {
        SolverKind::Euler => "euler",
        SolverKind::EulerMaruyama => "euler-maruyama",
        SolverKind::Heun => "heun",
    }
}

// ---------------------------------------------------------------------------
// Validation walk
// ---------------------------------------------------------------------------

struct Validator {
    problems: Vec<String>,
}

impl Validator {
    fn new() -> Self {
        Self { problems: Vec::new() }
    }

    fn problem(&mut self, msg: impl Into<String>) {
        self.problems.push(msg.into());
    }

    fn check_keys(&mut self, table: &toml::Table, path: &str, allowed: &[&str]) {
        for key in table.keys() {
            if !allowed.contains(&key.as_str()) {
                self.problem(format!("unknown key '{path}{key}'"));
            }
        }
    }

    fn f64(&mut self, table: &toml::Table, path: &str, key: &str) -> Option<f64> {
        match table.get(key)? {
            toml::Value::Float(v) => Some(*v),
            toml::Value::Integer(v) => Some(*v as f64),
            toml::Value::String(s) if s == "inf" => Some(f64::INFINITY),
            other => {
                self.problem(format!(
                    "'{path}{key}' must be a number, got {}",
                    other.type_str()
                ));
                None
            }
        }
    }

    fn usize(&mut self, table: &toml::Table, path: &str, key: &str) -> Option<usize> {
        match table.get(key)? {
            toml::Value::Integer(v) if *v >= 0 => Some(*v as usize),
            other => {
                self.problem(format!(
                    "'{path}{key}' must be a non-negative integer, got {other}"
                ));
                None
            }
        }
    }

    fn string(&mut self, table: &toml::Table, path: &str, key: &str) -> Option<String> {
        match table.get(key)? {
            toml::Value::String(v) => Some(v.clone()),
            other => {
                self.problem(format!(
                    "'{path}{key}' must be a string, got {}",
                    other.type_str()
                ));
                None
            }
        }
    }

    fn bool(&mut self, table: &toml::Table, path: &str, key: &str) -> Option<bool> {
        match table.get(key)? {
            toml::Value::Boolean(v) => Some(*v),
            other => {
                self.problem(format!(
                    "'{path}{key}' must be a boolean, got {}",
                    other.type_str()
                ));
                None
            }
        }
    }

    fn f64_array(&mut self, table: &toml::Table, path: &str, key: &str) -> Option<Vec<f64>> {
        let arr = match table.get(key)? {
            toml::Value::Array(a) => a,
            other => {
                self.problem(format!(
                    "'{path}{key}' must be an array, got {}",
                    other.type_str()
                ));
                return None;
            }
        };
        let mut out = Vec::with_capacity(arr.len());
        for (i, v) in arr.iter().enumerate() {
            match v {
                toml::Value::Float(f) => out.push(*f),
                toml::Value::Integer(n) => out.push(*n as f64),
                other => {
                    self.problem(format!(
                        "'{path}{key}[{i}]' must be a number, got {}",
                        other.type_str()
                    ));
                    return None;
                }
            }
        }
        Some(out)
    }

    fn usize_array(&mut self, table: &toml::Table, path: &str, key: &str) -> Option<Vec<usize>> {
        let floats = self.f64_array(table, path, key)?;
        let mut out = Vec::with_capacity(floats.len());
        for v in floats {
            if v < 0.0 || v.fract() != 0.0 {
                self.problem(format!("'{path}{key}' must hold non-negative integers"));
                return None;
            }
            out.push(v as usize);
        }
        Some(out)
    }

    fn table<'a>(&mut self, root: &'a toml::Table, key: &str) -> Option<&'a toml::Table> {
        match root.get(key)? {
            toml::Value::Table(t) => Some(t),
            _ => {
                self.problem(format!("'{key}' must be a table"));
                None
            }
        }
    }
}

fn parse_nested_f64_matrix(
    v: &toml::Value,
    path: &str,
    problems: &mut Vec<String>,
) -> Option<DMatrix<f64>> {
    let rows = match v {
        toml::Value::Array(a) => a,
        _ => {
            problems.push(format!("'{path}' must be an array of arrays"));
            return None;
        }
    };
    let mut data: Vec<Vec<f64>> = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        match row {
            toml::Value::Array(cells) => {
                let mut r = Vec::new();
                for (j, c) in cells.iter().enumerate() {
                    match c {
                        toml::Value::Float(f) => r.push(*f),
                        toml::Value::Integer(n) => r.push(*n as f64),
                        _ => {
                            problems.push(format!("'{path}[{i}][{j}]' must be a number"));
                            return None;
                        }
                    }
                }
                data.push(r);
            }
            _ => {
                problems.push(format!("'{path}[{i}]' must be an array"));
                return None;
            }
        }
    }
    if data.is_empty() || data.iter().any(|r| r.len() != data[0].len()) {
        problems.push(format!("'{path}' rows must be nonempty and equal length"));
        return None;
    }
    let (nr, nc) = (data.len(), data[0].len());
    Some(DMatrix::from_fn(nr, nc, |i, j| data[i][j]))
}

/// Applies one `key=value` override with a dotted path into the TOML tree.
fn apply_override(root: &mut toml::Table, setting: &str) -> std::result::Result<(), String> {
    let (path, raw_value) = setting
        .split_once('=')
        .ok_or_else(|| format!("override '{setting}' must look like key=value"))?;
    // parse the right-hand side as a TOML value literal, falling back to a
    // bare string (so --set sampler.solver=euler works unquoted)
    let value = format!("v = {}", raw_value.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw_value.trim().to_string()));
    let parts: Vec<&str> = path.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("override '{setting}' has an empty path segment"));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        table = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| format!("override path '{path}' crosses a non-table value"))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Parses and validates a config. The experiment comes from the CLI; a
/// config-file `experiment` key must agree. Overrides beat file values;
/// every problem found is reported at once.
pub fn parse_config(
    experiment: ExperimentKind,
    path: Option<&Path>,
    overrides: &[String],
    seed_override: Option<u64>,
) -> Result<RunConfig> {
    let mut root: toml::Table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                FhError::InvalidConfig(vec![format!("cannot read '{}': {e}", p.display())])
            })?;
            text.parse().map_err(|e| {
                FhError::InvalidConfig(vec![format!("TOML parse error in '{}': {e}", p.display())])
            })?
        }
        None => toml::Table::new(),
    };

    let mut problems = Vec::new();
    for setting in overrides {
        if let Err(msg) = apply_override(&mut root, setting) {
            problems.push(msg);
        }
    }

    let mut v = Validator::new();
    v.problems = problems;
    v.check_keys(
        &root,
        "",
        &[
            "experiment",
            "seed",
            "mixture",
            "observation",
            "sampler",
            "tracker",
            "guidance",
            "toy_posterior",
            "correlated_dims",
            "cov_error",
            "guidance_norm",
            "custom_sample",
        ],
    );

    if let Some(name) = v.string(&root, "", "experiment") {
        match ExperimentKind::parse(&name) {
            Ok(kind) if kind != experiment => v.problem(format!(
                "config file names experiment '{}' but '{}' was requested",
                name,
                experiment.name()
            )),
            Ok(_) => {}
            Err(FhError::InvalidConfig(mut msgs)) => v.problems.append(&mut msgs),
            Err(_) => unreachable!(),
        }
    }

    let seed = seed_override
        .or_else(|| {
            root.get("seed").and_then(|s| s.as_integer()).and_then(|s| {
                if s < 0 {
                    v.problem("'seed' must be non-negative");
                    None
                } else {
                    Some(s as u64)
                }
            })
        })
        .unwrap_or(0);
    if root.get("seed").map(|s| s.as_integer().is_none()) == Some(true) {
        v.problem("'seed' must be an integer");
    }

    let mut config = RunConfig::defaults(experiment, seed);

    if let Some(t) = v.table(&root, "mixture") {
        v.check_keys(t, "mixture.", &["weights", "means", "covariances"]);
        let weights = v.f64_array(t, "mixture.", "weights");
        let means = t.get("means").and_then(|m| match m {
            toml::Value::Array(rows) => {
                let mat = parse_nested_f64_matrix(m, "mixture.means", &mut v.problems)?;
                let _ = rows;
                Some(
                    (0..mat.nrows())
                        .map(|i| mat.row(i).transpose().clone_owned())
                        .collect::<Vec<DVector<f64>>>(),
                )
            }
            _ => {
                v.problems.push("'mixture.means' must be an array of arrays".into());
                None
            }
        });
        let covs = t.get("covariances").and_then(|c| match c {
            toml::Value::Array(items) => {
                let mut out = Vec::new();
                for (i, item) in items.iter().enumerate() {
                    let m = parse_nested_f64_matrix(
                        item,
                        &format!("mixture.covariances[{i}]"),
                        &mut v.problems,
                    )?;
                    match DenseSymMatrix::new(m) {
                        Ok(d) => out.push(d),
                        Err(e) => {
                            v.problems
                                .push(format!("'mixture.covariances[{i}]': {e}"));
                            return None;
                        }
                    }
                }
                Some(out)
            }
            _ => {
                v.problems
                    .push("'mixture.covariances' must be an array of matrices".into());
                None
            }
        });
        if let (Some(w), Some(m), Some(c)) = (weights, means, covs) {
            match GaussianMixture::new(w, m, c) {
                Ok(gmm) => config.mixture = gmm,
                Err(e) => v.problem(format!("mixture: {e}")),
            }
        }
    }

    if let Some(t) = v.table(&root, "observation") {
        v.check_keys(
            t,
            "observation.",
            &["operator", "y", "noise_std", "mask_indices", "dense", "kernel"],
        );
        let dim = config.mixture.dim();
        let operator = match v.string(t, "observation.", "operator").as_deref() {
            None | Some("identity") => Some(LinearOperator::Identity { dim }),
            Some("mask") => v
                .usize_array(t, "observation.", "mask_indices")
                .map(|kept| LinearOperator::Mask { kept, dim }),
            Some("dense") => t.get("dense").and_then(|d| {
                parse_nested_f64_matrix(d, "observation.dense", &mut v.problems)
                    .map(LinearOperator::Dense)
            }),
            Some("convolution") => v.f64_array(t, "observation.", "kernel").and_then(|k| {
                match LinearOperator::convolution_1d(&k, dim) {
                    Ok(op) => Some(op),
                    Err(e) => {
                        v.problems.push(format!("observation.kernel: {e}"));
                        None
                    }
                }
            }),
            Some(other) => {
                v.problem(format!(
                    "'observation.operator' must be identity, mask, dense, or convolution (got '{other}')"
                ));
                None
            }
        };
        let y = v.f64_array(t, "observation.", "y");
        let noise = v.f64(t, "observation.", "noise_std");
        if let Some(n) = noise {
            if n < 0.0 {
                v.problem("'observation.noise_std' must be >= 0");
            }
        }
        if let Some(op) = operator {
            let y = y.map(DVector::from_vec).unwrap_or_else(|| config.observation.y.clone());
            let noise = noise.unwrap_or(config.observation.noise_std);
            match LinearObservation::new(op, y, noise) {
                Ok(obs) => config.observation = obs,
                Err(e) => v.problem(format!("observation: {e}")),
            }
        }
    }

    if let Some(t) = v.table(&root, "sampler") {
        v.check_keys(
            t,
            "sampler.",
            &["solver", "steps", "sigma_min", "sigma_max", "rho", "heun_tracker_both_evals"],
        );
        if let Some(name) = v.string(t, "sampler.", "solver") {
            match name.as_str() {
                "euler" => config.solver = SolverKind::Euler,
                "euler-maruyama" => config.solver = SolverKind::EulerMaruyama,
                "heun" => config.solver = SolverKind::Heun,
                other => v.problem(format!(
                    "'sampler.solver' must be euler, euler-maruyama, or heun (got '{other}')"
                )),
            }
        }
        if let Some(steps) = v.usize(t, "sampler.", "steps") {
            if steps < 2 {
                v.problem("'sampler.steps' must be at least 2");
            } else {
                config.steps = steps;
            }
        }
        if let Some(x) = v.f64(t, "sampler.", "sigma_min") {
            config.sigma_min = x;
        }
        if let Some(x) = v.f64(t, "sampler.", "sigma_max") {
            config.sigma_max = x;
        }
        if let Some(x) = v.f64(t, "sampler.", "rho") {
            if x <= 0.0 {
                v.problem("'sampler.rho' must be positive");
            } else {
                config.rho = x;
            }
        }
        if let Some(b) = v.bool(t, "sampler.", "heun_tracker_both_evals") {
            config.heun_tracker_both_evals = b;
        }
    }
    if !(config.sigma_min > 0.0) || config.sigma_min >= config.sigma_max {
        v.problem(format!(
            "'sampler.sigma_min' ({}) must be positive and below 'sampler.sigma_max' ({})",
            config.sigma_min, config.sigma_max
        ));
    }

    if let Some(t) = v.table(&root, "tracker") {
        v.check_keys(t, "tracker.", &["init_samples", "mean_transfer"]);
        if let Some(n) = v.usize(t, "tracker.", "init_samples") {
            if n < 2 {
                v.problem("'tracker.init_samples' must be at least 2");
            } else {
                config.tracker_init_samples = n;
            }
        }
        if let Some(mode) = v.string(t, "tracker.", "mean_transfer") {
            match mode.as_str() {
                "time-update" => config.mean_transfer = MeanTransferMode::TimeUpdate,
                "exact-evaluation" => config.mean_transfer = MeanTransferMode::ExactEvaluation,
                other => v.problem(format!(
                    "'tracker.mean_transfer' must be time-update or exact-evaluation (got '{other}')"
                )),
            }
        }
    }

    if let Some(t) = v.table(&root, "guidance") {
        v.check_keys(
            t,
            "guidance.",
            &[
                "cg_rtol_max",
                "cg_rtol_min",
                "cg_sigma_lo",
                "cg_sigma_hi",
                "cg_exponent",
                "cg_max_iterations",
            ],
        );
        if let Some(x) = v.f64(t, "guidance.", "cg_rtol_max") {
            config.cg.rtol_max = x;
        }
        if let Some(x) = v.f64(t, "guidance.", "cg_rtol_min") {
            config.cg.rtol_min = x;
        }
        if let Some(x) = v.f64(t, "guidance.", "cg_sigma_lo") {
            config.cg.sigma_lo = x;
        }
        if let Some(x) = v.f64(t, "guidance.", "cg_sigma_hi") {
            config.cg.sigma_hi = x;
        }
        if let Some(x) = v.f64(t, "guidance.", "cg_exponent") {
            config.cg.exponent = x;
        }
        if let Some(x) = v.usize(t, "guidance.", "cg_max_iterations") {
            config.cg.max_iterations = x;
        }
        if let Err(e) = config.cg.validate() {
            v.problem(format!("guidance: {e}"));
        }
    }

    if let Some(t) = v.table(&root, "toy_posterior") {
        v.check_keys(
            t,
            "toy_posterior.",
            &["n_samples", "grid_lo", "grid_hi", "grid_bins", "dps_xi_sweep"],
        );
        if let Some(n) = v.usize(t, "toy_posterior.", "n_samples") {
            config.toy.n_samples = n.max(1);
        }
        if let Some(x) = v.f64(t, "toy_posterior.", "grid_lo") {
            config.toy.grid_lo = x;
        }
        if let Some(x) = v.f64(t, "toy_posterior.", "grid_hi") {
            config.toy.grid_hi = x;
        }
        if let Some(n) = v.usize(t, "toy_posterior.", "grid_bins") {
            config.toy.grid_bins = n;
        }
        if let Some(xs) = v.f64_array(t, "toy_posterior.", "dps_xi_sweep") {
            if xs.is_empty() || xs.iter().any(|&x| x <= 0.0) {
                v.problem("'toy_posterior.dps_xi_sweep' must be nonempty positive values");
            } else {
                config.toy.dps_xi_sweep = xs;
            }
        }
        if config.toy.grid_lo >= config.toy.grid_hi {
            v.problem(format!(
                "'toy_posterior.grid_lo' ({}) must be below 'toy_posterior.grid_hi' ({})",
                config.toy.grid_lo, config.toy.grid_hi
            ));
        }
    }

    if let Some(t) = v.table(&root, "correlated_dims") {
        v.check_keys(
            t,
            "correlated_dims.",
            &["dims", "correlation", "sigma_y", "n_samples", "dps_xi"],
        );
        if let Some(dims) = v.usize_array(t, "correlated_dims.", "dims") {
            if dims.is_empty() || dims.iter().any(|&d| d < 1) {
                v.problem("'correlated_dims.dims' must be nonempty positive dimensions");
            } else {
                config.correlated.dims = dims;
            }
        }
        if let Some(x) = v.f64(t, "correlated_dims.", "correlation") {
            if !(0.0..1.0).contains(&x) {
                v.problem("'correlated_dims.correlation' must be in [0, 1)");
            } else {
                config.correlated.correlation = x;
            }
        }
        if let Some(x) = v.f64(t, "correlated_dims.", "sigma_y") {
            if x <= 0.0 {
                v.problem("'correlated_dims.sigma_y' must be positive");
            } else {
                config.correlated.sigma_y = x;
            }
        }
        if let Some(n) = v.usize(t, "correlated_dims.", "n_samples") {
            config.correlated.n_samples = n.max(2);
        }
        if let Some(x) = v.f64(t, "correlated_dims.", "dps_xi") {
            config.correlated.dps_xi = x;
        }
    }

    if let Some(t) = v.table(&root, "cov_error") {
        v.check_keys(t, "cov_error.", &["n_trajectories", "step_counts", "solvers"]);
        if let Some(n) = v.usize(t, "cov_error.", "n_trajectories") {
            config.cov_error.n_trajectories = n.max(1);
        }
        if let Some(steps) = v.usize_array(t, "cov_error.", "step_counts") {
            if steps.iter().any(|&s| s < 2) {
                v.problem("'cov_error.step_counts' entries must be at least 2");
            } else {
                config.cov_error.step_counts = steps;
            }
        }
        if let Some(toml::Value::Array(items)) = t.get("solvers") {
            let mut out = Vec::new();
            for item in items {
                match item.as_str() {
                    Some("euler") => out.push(SolverKind::Euler),
                    Some("euler-maruyama") => out.push(SolverKind::EulerMaruyama),
                    other => v.problem(format!(
                        "'cov_error.solvers' entries must be euler or euler-maruyama (got {other:?})"
                    )),
                }
            }
            if !out.is_empty() {
                config.cov_error.solvers = out;
            }
        }
    }

    if let Some(t) = v.table(&root, "guidance_norm") {
        v.check_keys(
            t,
            "guidance_norm.",
            &["dims", "sigma", "sigma_y", "residual_scale"],
        );
        if let Some(dims) = v.usize_array(t, "guidance_norm.", "dims") {
            config.guidance_norm.dims = dims;
        }
        if let Some(x) = v.f64(t, "guidance_norm.", "sigma") {
            config.guidance_norm.sigma = x;
        }
        if let Some(x) = v.f64(t, "guidance_norm.", "sigma_y") {
            config.guidance_norm.sigma_y = x;
        }
        if let Some(x) = v.f64(t, "guidance_norm.", "residual_scale") {
            config.guidance_norm.residual_scale = x;
        }
    }

    if let Some(t) = v.table(&root, "custom_sample") {
        v.check_keys(
            t,
            "custom_sample.",
            &["method", "n_samples", "dps_xi", "clip", "clip_lo", "clip_hi", "fallback_threshold"],
        );
        if let Some(name) = v.string(t, "custom_sample.", "method") {
            match CustomMethod::parse(&name) {
                Some(m) => config.custom.method = m,
                None => v.problem(format!("unknown 'custom_sample.method' '{name}'")),
            }
        }
        if let Some(n) = v.usize(t, "custom_sample.", "n_samples") {
            config.custom.n_samples = n.max(1);
        }
        if let Some(x) = v.f64(t, "custom_sample.", "dps_xi") {
            config.custom.dps_xi = x;
        }
        if let Some(b) = v.bool(t, "custom_sample.", "clip") {
            config.custom.clip = b;
        }
        if let Some(x) = v.f64(t, "custom_sample.", "clip_lo") {
            config.custom.clip_range.0 = x;
        }
        if let Some(x) = v.f64(t, "custom_sample.", "clip_hi") {
            config.custom.clip_range.1 = x;
        }
        if let Some(x) = v.f64(t, "custom_sample.", "fallback_threshold") {
            config.custom.fallback_threshold = x;
        }
    }

    if v.problems.is_empty() {
        Ok(config)
    } else {
        Err(FhError::InvalidConfig(v.problems))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn minimal_config_applies_defaults() {
        let f = write_temp("experiment = \"toy-posterior\"\n");
        let cfg =
            parse_config(ExperimentKind::ToyPosterior, Some(f.path()), &[], None).unwrap();
        assert_eq!(cfg.sigma_max, 20.0);
        assert_eq!(cfg.solver, SolverKind::Euler);
        assert_eq!(cfg.steps, 100);
        assert_eq!(cfg.seed, 0);
    }

    #[test]
    fn sigma_range_violation_names_both_fields() {
        let f = write_temp("[sampler]\nsigma_min = 30.0\nsigma_max = 20.0\n");
        let err =
            parse_config(ExperimentKind::ToyPosterior, Some(f.path()), &[], None).unwrap_err();
        match err {
            FhError::InvalidConfig(problems) => {
                assert!(problems.iter().any(|p| p.contains("sigma_min") && p.contains("sigma_max")));
            }
            other => panic!("expected InvalidConfig, got {other:?}"),
        }
    }

    #[test]
    fn overrides_beat_file_values() {
        let f = write_temp("[sampler]\nsteps = 100\n");
        let cfg = parse_config(
            ExperimentKind::ToyPosterior,
            Some(f.path()),
            &["sampler.steps=200".to_string()],
            None,
        )
        .unwrap();
        assert_eq!(cfg.steps, 200);
    }

    #[test]
    fn problems_are_aggregated() {
        let f = write_temp(
            "nonsense = 1\n[sampler]\nsteps = 1\nsolver = \"rk4\"\n[correlated_dims]\ncorrelation = 2.0\n",
        );
        let err =
            parse_config(ExperimentKind::ToyPosterior, Some(f.path()), &[], None).unwrap_err();
        match err {
            FhError::InvalidConfig(problems) => {
                assert!(problems.len() >= 4, "expected every problem listed: {problems:?}");
                assert!(problems.iter().any(|p| p.contains("unknown key 'nonsense'")));
                assert!(problems.iter().any(|p| p.contains("rk4")));
                assert!(problems.iter().any(|p| p.contains("steps")));
                assert!(problems.iter().any(|p| p.contains("correlation")));
            }
            other => panic!("expected InvalidConfig, got {other:?}"),
        }
    }

    #[test]
    fn experiment_mismatch_is_rejected() {
        let f = write_temp("experiment = \"cov-error\"\n");
        assert!(parse_config(ExperimentKind::ToyPosterior, Some(f.path()), &[], None).is_err());
    }

    #[test]
    fn round_trip_serialization() {
        let cfg = RunConfig::defaults(ExperimentKind::ToyPosterior, 7);
        let text = cfg.to_toml_string();
        let f = write_temp(&text);
        let back = parse_config(ExperimentKind::ToyPosterior, Some(f.path()), &[], None).unwrap();
        assert_eq!(back.to_toml_string(), text, "canonical form must round-trip");
        assert_eq!(back.seed, 7);
        // spot-check structured content
        assert_eq!(back.mixture.weights(), cfg.mixture.weights());
        assert_eq!(back.observation.y, cfg.observation.y);
        assert_eq!(back.toy, cfg.toy);
        assert_eq!(back.correlated, cfg.correlated);
        assert_eq!(back.cov_error, cfg.cov_error);
        assert_eq!(back.guidance_norm, cfg.guidance_norm);
        assert_eq!(back.custom, cfg.custom);
    }

    #[test]
    fn custom_operator_forms_parse() {
        let f = write_temp(
            "[observation]\noperator = \"mask\"\nmask_indices = [0]\ny = [0.5]\nnoise_std = 0.3\n",
        );
        let cfg =
            parse_config(ExperimentKind::CustomSample, Some(f.path()), &[], None).unwrap();
        assert_eq!(cfg.observation.y.len(), 1);
        assert!(matches!(
            cfg.observation.operator,
            LinearOperator::Mask { .. }
        ));
    }
}
