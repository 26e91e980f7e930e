//! Experiment configuration, the per-kind drivers, verdicts and the
//! cross-directory report.

use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbsde::{j_tables, simulate_paths, JTableParams, PathParams, Start};
use crate::flow::{abs_linear_closed_form, solve_flow, subcriticality_check, subcriticality_params, FlowParams, FlowTable};
use crate::io::{read_manifest, read_table, OutputDir, RESULTS, SUMMARY};
use crate::lab::{
    abs_linear_fbsde_moment, abs_linear_j_table, residual_profile, summarize, ConcentrationSpec, ConstantCoefficients, EnsembleSummary,
    LabOptions, LabPlan, LimitCoefficients, MomentSpec, PointFunction, ProbeSpecs, TestFunctionSpec, TwoPointSpec,
};
use crate::sigma::{ScalarSigma, SigmaKind, SigmaSpec};
use crate::spde::{simulate_trajectory, write_snapshot, Integrator, MeanPath, RunOptions, Scheme, SimParams};
use crate::stats::{mean_estimate, strictly_decreasing, variance_estimate, Estimate};
use crate::torus::{kernel_gap_sweep, Field, TorusGrid};

pub const SCHEMA_VERSION: u32 = 1;

// pinned tolerances
const KERNEL_SPREAD: f64 = 3.0;
const FLOW_REL_ERR: f64 = 1e-3;
const FLOW_B_MAX: f64 = 4.0;
const BLOW_UP_TOL: f64 = 0.05;
const Q_ESTIMATE_TOL: f64 = 0.10;
const FBSDE_SE: f64 = 5.0;
const J_IDENTITY_SE: f64 = 3.0;
const J_IDENTITY_FRACTION: f64 = 0.9;
const KS_LEVEL: f64 = 0.01;
const ISOMETRY_SE: f64 = 5.0;
const VAR_GAP_MAX: f64 = 0.10;
const COV_GAP_MAX: f64 = 0.15;
const H1_RATIO_MAX: f64 = 1.25;
const H1_SPREAD_MAX: f64 = 2.0;
const MOMENT_ELL: f64 = 4.0;
const MIN_MOMENT_SAMPLES: u64 = 128;

/// `lim gap·s/ξ²` as ξ → 0.
pub const CONTINUUM_KERNEL_CONSTANT: f64 = 1.0 / (6.0 * std::f64::consts::E);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    KernelCheck,
    Flow,
    Fbsde,
    Simulate,
    Fluctuations,
    Concentration,
    Report,
}

impl Kind {
    pub fn name(&self) -> &'static str {
        match self {
            Kind::KernelCheck => "kernel-check",
            Kind::Flow => "flow",
            Kind::Fbsde => "fbsde",
            Kind::Simulate => "simulate",
            Kind::Fluctuations => "fluctuations",
            Kind::Concentration => "concentration",
            Kind::Report => "report",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub side: f64,
    pub n: usize,
}

/// `u₀ = offset + amplitude·cos(2π·mode·x₁/L)` in every component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialConfig {
    pub offset: f64,
    pub amplitude: f64,
    pub mode: u32,
}

impl Default for InitialConfig {
    fn default() -> Self {
        Self {
            offset: 1.0,
            amplitude: 0.5,
            mode: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Coefficients {
    /// Closed form when one exists, otherwise the FBSDE tables.
    #[default]
    Auto,
    ClosedForm,
    Fbsde,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    pub coefficients: Coefficients,
    pub scheme: Scheme,
    pub mild_tracker: bool,
    pub test_functions: Vec<TestFunctionSpec>,
    /// Resolved from the grid when absent.
    pub probes: Option<ProbeSpecs>,
    /// Bins of the closed-form table over `[-8, 8]`.
    pub closed_form_bins: usize,
    /// Flow and table parameters when the coefficients come from the FBSDE.
    pub flow: FlowParams,
    pub jtable: JTableParams,
}

impl Default for LabConfig {
    fn default() -> Self {
        let mut psi = TestFunctionSpec::new("psi", [0.0, 0.0], 2.0, 0.25, 0.75);
        psi.partner = Some("phi".into());
        let phi = TestFunctionSpec::new("phi", [1.0, 0.0], 1.5, 0.2, 0.8);
        Self {
            coefficients: Coefficients::Auto,
            scheme: Scheme::PostSmoothed,
            mild_tracker: false,
            test_functions: vec![psi, phi],
            probes: None,
            closed_form_bins: 321,
            flow: FlowParams {
                half_width: 8.0,
                db: 0.05,
                dq: 1e-2,
                q_max: 1.0,
                store_dq: 5e-3,
            },
            jtable: JTableParams {
                n_paths: 64_000,
                n_bins: 32,
                ..JTableParams::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelCheckConfig {
    /// The gap is separable, so a much finer lattice than the simulation
    /// grid costs little; every ξ must span several cells.
    pub grid: GridConfig,
    pub durations: Vec<f64>,
    pub sides: Vec<f64>,
}

impl Default for KernelCheckConfig {
    fn default() -> Self {
        Self {
            grid: GridConfig { side: 16.0, n: 2048 },
            durations: vec![0.25, 0.5, 1.0],
            sides: vec![0.0625, 0.125, 0.25],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub params: FlowParams,
    /// abs_linear(β) closed-form sweep.
    pub betas: Vec<f64>,
    pub blow_up_betas: Vec<f64>,
    pub blow_up_params: FlowParams,
    pub subcriticality_betas: Vec<f64>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            params: FlowParams::default(),
            betas: vec![0.3, 0.5, 0.7],
            blow_up_betas: vec![1.2],
            blow_up_params: FlowParams {
                db: 0.05,
                dq: 1e-2,
                ..FlowParams::default()
            },
            subcriticality_betas: vec![0.5, 1.2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FbsdeConfig {
    pub starts: Vec<f64>,
    pub n_paths: usize,
    pub dq: f64,
    pub flow: FlowParams,
    pub jtable: JTableParams,
}

impl Default for FbsdeConfig {
    fn default() -> Self {
        Self {
            starts: vec![0.5, 1.0, 2.0],
            n_paths: 100_000,
            dq: 5e-3,
            flow: LabConfig::default().flow,
            jtable: LabConfig::default().jtable,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResidualConfig {
    pub enabled: bool,
    /// Defaults to the largest ρ of the ladder.
    pub rho: Option<f64>,
    pub replicas: u64,
    /// Number of Δt halvings after the base step.
    pub halvings: u32,
}

impl Default for ResidualConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            rho: None,
            replicas: 64,
            halvings: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub sample_times: Vec<f64>,
    pub snapshot_replicas: u64,
    pub residual: ResidualConfig,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            sample_times: vec![0.5, 1.0],
            snapshot_replicas: 1,
            residual: ResidualConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub dirs: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub kind: Option<Kind>,
    pub seed: u64,
    pub replicas: u64,
    pub workers: usize,
    pub out: Option<PathBuf>,
    pub grid: GridConfig,
    pub t_max: f64,
    pub rho_ladder: Vec<f64>,
    /// `Δt = dt_factor·ρ`.
    pub dt_factor: f64,
    /// Step of the shared fine noise stream that couples the rungs.
    pub noise_base_dt: Option<f64>,
    pub sigma: SigmaSpec,
    pub initial: InitialConfig,
    pub lab: LabConfig,
    pub kernel_check: KernelCheckConfig,
    pub flow: FlowConfig,
    pub fbsde: FbsdeConfig,
    pub simulate: SimulateConfig,
    pub report: ReportConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            kind: None,
            seed: 0,
            replicas: 512,
            workers: 1,
            out: None,
            grid: GridConfig { side: 16.0, n: 256 },
            t_max: 1.0,
            rho_ladder: vec![0.1, 0.05, 0.025],
            dt_factor: 0.25,
            noise_base_dt: None,
            sigma: SigmaSpec::abs_linear(1, 0.5).expect("valid"),
            initial: InitialConfig::default(),
            lab: LabConfig::default(),
            kernel_check: KernelCheckConfig::default(),
            flow: FlowConfig::default(),
            fbsde: FbsdeConfig::default(),
            simulate: SimulateConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

fn cfg_err(field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(cfg_err(field, format!("must be positive and finite, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(s);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            cfg_err(if path.is_empty() || path == "." { "config".into() } else { path }, e.into_inner().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| cfg_err("config", format!("{}: {e}", path.display())))?;
        Self::from_json_str(&s)
    }

    pub fn kind(&self) -> Result<Kind> {
        self.kind.ok_or_else(|| cfg_err("kind", "no experiment kind given"))
    }

    pub fn grid(&self) -> Result<TorusGrid> {
        TorusGrid::new(self.grid.side, self.grid.n).map_err(|e| cfg_err("grid", e.to_string()))
    }

    pub fn dt(&self, rho: f64) -> f64 {
        self.dt_factor * rho
    }

    /// Fine noise step shared by every rung of the ladder.
    pub fn base_dt(&self) -> f64 {
        self.noise_base_dt.unwrap_or_else(|| {
            let rho_min = self.rho_ladder.iter().copied().fold(f64::INFINITY, f64::min);
            let d = self.dt(rho_min);
            if self.lab.mild_tracker {
                d / 2.0
            } else {
                d
            }
        })
    }

    pub fn noise_refine(&self, rho: f64) -> Result<u32> {
        let r = self.dt(rho) / self.base_dt();
        let k = r.round();
        if !(k >= 1.0 && (r - k).abs() < 1e-9 * r.max(1.0)) {
            return Err(cfg_err(
                "noise_base_dt",
                format!("Δt = {} at ρ = {rho} is not an integer multiple of {}", self.dt(rho), self.base_dt()),
            ));
        }
        let k = k as u32;
        if self.lab.mild_tracker && k > 1 && k % 2 == 1 {
            return Err(cfg_err("noise_base_dt", format!("refinement {k} at ρ = {rho} must be even with the mild tracker")));
        }
        Ok(k)
    }

    pub fn initial_field(&self, grid: TorusGrid) -> Field {
        let InitialConfig { offset, amplitude, mode } = self.initial;
        let side = grid.side();
        Field::from_fn(grid, self.sigma.m(), move |_, x, _| offset + amplitude * (2.0 * PI * mode as f64 * x / side).cos())
    }

    pub fn sim_params(&self, rho: f64, dt: f64) -> Result<SimParams> {
        let grid = self.grid()?;
        SimParams::new(grid, rho, dt, self.t_max, self.sigma.clone(), self.initial_field(grid))
            .map_err(|e| cfg_err("rho_ladder", format!("ρ = {rho}: {e}")))
    }

    pub fn integrator(&self, rho: f64) -> Result<Integrator> {
        Ok(Integrator::new(self.sim_params(rho, self.dt(rho))?))
    }

    pub fn default_probes(side: f64) -> ProbeSpecs {
        ProbeSpecs {
            concentration: vec![ConcentrationSpec {
                s: 0.5,
                r: 0.25,
                z: [0.0, 0.0],
                f_offset: 1.0,
                f_amplitude: 0.5,
            }],
            two_point: vec![TwoPointSpec {
                s: 0.5,
                x: [0.0, 0.0],
                y: [side / 4.0, 0.0],
                g: PointFunction::Identity,
            }],
            moments: MomentSpec {
                times: vec![0.5, 1.0],
                points: vec![[0.0, 0.0], [side / 4.0, 0.0]],
            },
        }
    }

    pub fn probes(&self) -> ProbeSpecs {
        self.lab.probes.clone().unwrap_or_else(|| Self::default_probes(self.grid.side))
    }

    /// Fill every defaulted value so the manifest records it.
    pub fn resolve(&mut self) {
        if self.lab.probes.is_none() {
            self.lab.probes = Some(Self::default_probes(self.grid.side));
        }
        if self.noise_base_dt.is_none() && !self.rho_ladder.is_empty() {
            self.noise_base_dt = Some(self.base_dt());
        }
        if self.simulate.residual.rho.is_none() {
            self.simulate.residual.rho = self.rho_ladder.first().copied();
        }
        if self.lab.coefficients == Coefficients::Auto {
            self.lab.coefficients = if closed_form_coefficients(&self.sigma, 1).is_some() {
                Coefficients::ClosedForm
            } else {
                Coefficients::Fbsde
            };
        }
    }

    /// Field-level validation of everything the selected kind will touch.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(cfg_err("schema_version", format!("expected {SCHEMA_VERSION}, got {}", self.schema_version)));
        }
        let kind = self.kind()?;
        if self.workers == 0 {
            return Err(cfg_err("workers", "must be at least 1"));
        }
        if kind == Kind::Report {
            if self.report.dirs.is_empty() {
                return Err(cfg_err("report.dirs", "need at least one run directory"));
            }
            return Ok(());
        }
        match kind {
            Kind::KernelCheck => {
                let k = &self.kernel_check;
                let grid = TorusGrid::new(k.grid.side, k.grid.n).map_err(|e| cfg_err("kernel_check.grid", e.to_string()))?;
                if k.durations.is_empty() || k.sides.is_empty() {
                    return Err(cfg_err("kernel_check", "durations and sides must be non-empty"));
                }
                for s in &k.durations {
                    positive("kernel_check.durations", *s)?;
                }
                for xi in &k.sides {
                    crate::torus::BoxMollifierSpec::new(*xi)
                        .and_then(|b| b.cells(&grid))
                        .map_err(|e| cfg_err("kernel_check.sides", e.to_string()))?;
                }
            }
            Kind::Flow => {
                self.flow.params.validate().map_err(|e| cfg_err("flow.params", e.to_string()))?;
                self.flow.blow_up_params.validate().map_err(|e| cfg_err("flow.blow_up_params", e.to_string()))?;
                for b in self.flow.betas.iter().chain(&self.flow.blow_up_betas).chain(&self.flow.subcriticality_betas) {
                    positive("flow.betas", *b)?;
                }
                if self.flow.params.q_max < 1.0 {
                    return Err(cfg_err("flow.params.q_max", "the closed-form check needs q_max >= 1"));
                }
                if self.sigma.as_scalar().is_none() {
                    return Err(cfg_err("sigma", "the flow runs on scalar nonlinearities"));
                }
            }
            Kind::Fbsde => {
                if self.sigma.as_scalar().is_none() {
                    return Err(cfg_err("sigma", "fbsde runs need a scalar (m = 1) nonlinearity"));
                }
                if self.fbsde.starts.is_empty() {
                    return Err(cfg_err("fbsde.starts", "need at least one start"));
                }
                if self.fbsde.n_paths < 2 {
                    return Err(cfg_err("fbsde.n_paths", "need at least two paths"));
                }
                positive("fbsde.dq", self.fbsde.dq)?;
                self.fbsde.flow.validate().map_err(|e| cfg_err("fbsde.flow", e.to_string()))?;
            }
            Kind::Simulate | Kind::Fluctuations | Kind::Concentration => self.validate_ladder(kind, &self.grid()?)?,
            Kind::Report => unreachable!(),
        }
        Ok(())
    }

    fn validate_ladder(&self, kind: Kind, grid: &TorusGrid) -> Result<()> {
        if self.replicas < 2 {
            return Err(cfg_err("replicas", "need at least two replicas"));
        }
        positive("t_max", self.t_max)?;
        if !(self.dt_factor > 0.0 && self.dt_factor <= 1.0) {
            return Err(cfg_err("dt_factor", format!("must lie in (0, 1], got {}", self.dt_factor)));
        }
        if self.rho_ladder.is_empty() {
            return Err(cfg_err("rho_ladder", "must be non-empty"));
        }
        for r in &self.rho_ladder {
            positive("rho_ladder", *r)?;
        }
        if !strictly_decreasing(&self.rho_ladder) {
            return Err(cfg_err("rho_ladder", "must be strictly decreasing"));
        }
        if let Some(b) = self.noise_base_dt {
            positive("noise_base_dt", b)?;
        }
        for r in &self.rho_ladder {
            self.noise_refine(*r)?;
            self.sim_params(*r, self.dt(*r))?;
        }
        let m = self.sigma.m();
        let probes = self.probes();
        for t in probes.moments.times.iter().chain(probes.concentration.iter().map(|c| &c.s)).chain(probes.two_point.iter().map(|c| &c.s)) {
            if !(*t >= 0.0 && *t <= self.t_max) {
                return Err(cfg_err("lab.probes", format!("probe time {t} outside [0, {}]", self.t_max)));
            }
        }
        if kind == Kind::Simulate {
            for t in &self.simulate.sample_times {
                if !(*t >= 0.0 && *t <= self.t_max) {
                    return Err(cfg_err("simulate.sample_times", format!("{t} outside [0, {}]", self.t_max)));
                }
            }
            let r = &self.simulate.residual;
            if r.enabled {
                positive("simulate.residual.rho", r.rho.unwrap_or(self.rho_ladder[0]))?;
                if r.replicas < 2 {
                    return Err(cfg_err("simulate.residual.replicas", "need at least two replicas"));
                }
                if r.halvings < 1 {
                    return Err(cfg_err("simulate.residual.halvings", "need at least one halving"));
                }
            }
            if probes.moments.times.is_empty() || probes.moments.points.is_empty() {
                return Err(cfg_err("lab.probes.moments", "simulate needs moment probes"));
            }
            return Ok(());
        }
        if self.lab.test_functions.is_empty() {
            return Err(cfg_err("lab.test_functions", "need at least one test function"));
        }
        for t in &self.lab.test_functions {
            t.validate(self.t_max, grid, m).map_err(|e| cfg_err(format!("lab.test_functions[{}]", t.id), e.to_string()))?;
        }
        match self.lab.coefficients {
            Coefficients::ClosedForm if closed_form_coefficients(&self.sigma, self.lab.closed_form_bins).is_none() => {
                return Err(cfg_err("lab.coefficients", format!("no closed form for {}", self.sigma.label())));
            }
            Coefficients::Fbsde if self.sigma.as_scalar().is_none() => {
                return Err(cfg_err("lab.coefficients", "FBSDE coefficients need a scalar (m = 1) nonlinearity"));
            }
            _ => {}
        }
        Ok(())
    }
}

fn closed_form_coefficients(sigma: &SigmaSpec, bins: usize) -> Option<Box<dyn LimitCoefficients>> {
    match sigma.kind() {
        SigmaKind::Constant(c) => Some(Box::new(ConstantCoefficients(c.clone()))),
        SigmaKind::AbsLinear { beta } if sigma.m() == 1 && *beta < 1.0 => {
            abs_linear_j_table(*beta, 8.0, bins.max(3)).ok().map(|t| Box::new(t) as Box<dyn LimitCoefficients>)
        }
        _ => None,
    }
}

fn abs_linear_beta(sigma: &SigmaSpec) -> Option<f64> {
    match sigma.kind() {
        SigmaKind::AbsLinear { beta } if sigma.m() == 1 => Some(*beta),
        _ => None,
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| cfg_err("workers", e.to_string()))
}

// verdicts

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    /// Criterion tag, e.g. `6a`.
    pub criterion: String,
    pub check: String,
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(criterion: &str, check: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Self {
            criterion: criterion.into(),
            check: check.into(),
            pass,
            detail: detail.into(),
        }
    }

    pub fn line(&self) -> String {
        format!("{} [{}] {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.criterion, self.check, self.detail)
    }
}

#[derive(Debug)]
pub struct Outcome {
    pub dir: PathBuf,
    pub manifest: crate::io::Manifest,
    pub verdicts: Vec<Verdict>,
}

impl Outcome {
    /// 0 when every verdict passes, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.verdicts.iter().all(|v| v.pass) {
            0
        } else {
            2
        }
    }
}

fn fmt_list(v: &[f64]) -> String {
    let s: Vec<String> = v.iter().map(|x| format!("{x:.4e}")).collect();
    format!("[{}]", s.join(", "))
}

// table rows

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowRow {
    pub beta: f64,
    pub max_rel_err: f64,
    pub q_last: f64,
    pub blow_up_q: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubcriticalityRow {
    pub beta: f64,
    pub subcritical: Option<bool>,
    pub q_estimate: Option<f64>,
    pub slope: f64,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FbsdeRow {
    pub start: f64,
    pub n_paths: usize,
    pub mean_z1: f64,
    pub mean_z1_se: f64,
    pub second_moment: f64,
    pub second_moment_se: f64,
    pub exact_second_moment: Option<f64>,
    pub isometry_gap: f64,
    pub isometry_gap_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRecord {
    pub rho: f64,
    pub replica: u64,
    pub t: f64,
    pub spatial_mean: f64,
    /// `u` (component 0) at each moment probe point.
    pub probes: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimStatRow {
    pub rho: f64,
    pub t: f64,
    pub x0: f64,
    pub x1: f64,
    pub mean: f64,
    pub mean_se: f64,
    pub variance: f64,
    pub variance_se: f64,
    pub mean_field: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub rho: f64,
    pub dt: f64,
    pub noise_refine: u32,
    pub sup: f64,
    pub mean: f64,
}

/// One test function at one ρ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub rho: f64,
    pub gamma: f64,
    pub dt: f64,
    pub replicas: usize,
    pub test: String,
    pub partner: String,
    pub mean_pairing: f64,
    pub mean_pairing_se: f64,
    pub var_pairing: f64,
    pub var_pairing_se: f64,
    pub n_limit: f64,
    pub var_gap: f64,
    /// `c²∫∫(𝒢_ρΨᵈ)²` for constant σ.
    pub exact_variance: Option<f64>,
    pub ks_exact_p: Option<f64>,
    pub skewness: Option<f64>,
    pub excess_kurtosis: Option<f64>,
    pub ks_p: Option<f64>,
    pub isometry: f64,
    pub isometry_se: f64,
    pub cov_ew: f64,
    pub cov_ew_se: f64,
    pub n_nbar_limit: f64,
    pub cov_gap: f64,
    pub mean_qv_m: f64,
    pub mean_qv_m_se: f64,
    pub qv_gap: f64,
    pub mean_qv_cross: f64,
    pub mean_qv_cross_se: f64,
    pub qv_cross_gap: f64,
    pub mild_gap: Option<f64>,
    pub mild_gap_se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub rho: f64,
    pub t: f64,
    pub x0: f64,
    pub x1: f64,
    pub moment: f64,
    pub se: f64,
    /// `E|Z₁|^ℓ` started at `ū(t, x)` when a closed form exists.
    pub limit: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationRow {
    pub rho: f64,
    pub index: usize,
    pub s: f64,
    pub r: f64,
    pub mean_h: f64,
    pub mean_h_se: f64,
    pub var_h: f64,
    pub var_h_se: f64,
    pub target_h: f64,
    pub distance_h: f64,
    pub mean_j: f64,
    pub mean_j_se: f64,
    pub var_j: f64,
    pub var_j_se: f64,
    pub target_j: f64,
    pub distance_j: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoPointRow {
    pub rho: f64,
    pub s: f64,
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
    pub covariance: f64,
    pub se: f64,
    pub degenerate: bool,
}

// drivers

/// Run one experiment end to end into `cfg.out`.
pub fn run(mut cfg: ExperimentConfig, force: bool) -> Result<Outcome> {
    cfg.resolve();
    cfg.validate()?;
    let kind = cfg.kind()?;
    let dir = cfg.out.clone().ok_or_else(|| cfg_err("out", "no output directory given"))?;
    let start = Instant::now();
    let mut out = OutputDir::prepare(&dir, force)?;
    let mut summary = String::new();
    let verdicts = match kind {
        Kind::KernelCheck => run_kernel_check(&cfg, &mut out, &mut summary)?,
        Kind::Flow => run_flow(&cfg, &mut out, &mut summary)?,
        Kind::Fbsde => run_fbsde(&cfg, &mut out, &mut summary)?,
        Kind::Simulate => run_simulate(&cfg, &mut out, &mut summary)?,
        Kind::Fluctuations => run_lab(&cfg, &mut out, &mut summary, false)?,
        Kind::Concentration => run_lab(&cfg, &mut out, &mut summary, true)?,
        Kind::Report => run_report(&cfg, &mut out, &mut summary)?,
    };
    summary.push_str(&format!("\nverdicts ({}):\n", verdicts.len()));
    if verdicts.is_empty() {
        summary.push_str("  none\n");
    }
    for v in &verdicts {
        summary.push_str(&format!("  {}\n", v.line()));
    }
    out.write_string(SUMMARY, &summary)?;
    let config = serde_json::to_value(&cfg)?;
    let manifest = out.finish(kind.name(), config, start.elapsed().as_secs_f64(), cfg.workers, verdicts.clone())?;
    Ok(Outcome { dir, manifest, verdicts })
}

fn write_ndjson<T: Serialize>(out: &mut OutputDir, rows: &[T]) -> Result<()> {
    let mut w = out.create(RESULTS)?;
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn run_kernel_check(cfg: &ExperimentConfig, out: &mut OutputDir, summary: &mut String) -> Result<Vec<Verdict>> {
    let k = &cfg.kernel_check;
    let grid = TorusGrid::new(k.grid.side, k.grid.n)?;
    let rows = kernel_gap_sweep(&grid, &k.durations, &k.sides)?;
    write_ndjson(out, &rows)?;
    out.write_table("kernel_gap", &rows)?;
    summary.push_str(&format!("kernel_l1_gap on L = {}, n = {}\n     s        xi        gap   gap*s/xi^2\n", grid.side(), grid.n()));
    for r in &rows {
        summary.push_str(&format!("{:6.3} {:9.5} {:10.3e} {:10.4}\n", r.s, r.xi, r.gap, r.ratio));
    }
    // small-ξ limit: box variance ξ²/12 per axis against ‖ΔG_s‖₁ = 4/(e s)
    summary.push_str(&format!("continuum constant 1/(6e) = {:.4}\n", CONTINUUM_KERNEL_CONSTANT));
    let ratios: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
    let finite = ratios.iter().all(|r| r.is_finite() && *r > 0.0);
    let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(vec![Verdict::new(
        "1",
        "kernel gap ratio finite, spread < 3x",
        finite && hi / lo < KERNEL_SPREAD,
        format!("ratio in [{lo:.4}, {hi:.4}], spread {:.3}", hi / lo),
    )])
}

/// Max relative error against the abs_linear closed form over `q ≤ 1`,
/// `0 < |b| ≤ 4`.
pub fn flow_closed_form_error(t: &FlowTable, beta: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (k, q) in t.q_grid.iter().enumerate() {
        if *q > 1.0 + 1e-12 {
            continue;
        }
        for i in 0..t.nb {
            let b = t.b(i);
            let exact = abs_linear_closed_form(beta, *q, b);
            if b.abs() > FLOW_B_MAX + 1e-9 || exact <= 0.0 {
                continue;
            }
            worst = worst.max((t.h[k][i] - exact).abs() / exact);
        }
    }
    worst
}

fn run_flow(cfg: &ExperimentConfig, out: &mut OutputDir, summary: &mut String) -> Result<Vec<Verdict>> {
    let scalar = cfg.sigma.as_scalar().expect("validated");
    let mut verdicts = Vec::new();
    let mut rows = Vec::new();
    let own = solve_flow(&scalar, &cfg.flow.params)?;
    own.write_csv(out.create("tables/flow.csv")?)?;
    summary.push_str(&format!("flow for {}: q_last {:.4}, blow-up {:?}\n", cfg.sigma.label(), own.q_last(), own.blow_up_q));
    if let ScalarSigma::AbsLinear(beta) = scalar {
        let e = flow_closed_form_error(&own, beta);
        summary.push_str(&format!("  max rel err vs closed form {e:.3e}\n"));
        rows.push(FlowRow {
            beta,
            max_rel_err: e,
            q_last: own.q_last(),
            blow_up_q: own.blow_up_q,
        });
    }
    summary.push_str("closed-form sweep\n");
    for beta in &cfg.flow.betas {
        let t = solve_flow(&ScalarSigma::AbsLinear(*beta), &cfg.flow.params)?;
        t.write_csv(out.create(&format!("tables/flow_beta_{beta}.csv"))?)?;
        let e = flow_closed_form_error(&t, *beta);
        summary.push_str(&format!("  beta {beta}: max rel err {e:.3e}, blow-up {:?}\n", t.blow_up_q));
        rows.push(FlowRow {
            beta: *beta,
            max_rel_err: e,
            q_last: t.q_last(),
            blow_up_q: t.blow_up_q,
        });
    }
    if !rows.is_empty() {
        let errs: Vec<f64> = rows.iter().map(|r| r.max_rel_err).collect();
        let ok = rows.iter().all(|r| r.max_rel_err < FLOW_REL_ERR && r.blow_up_q.is_none() && r.q_last >= 1.0 - 1e-12);
        verdicts.push(Verdict::new("2a", "flow matches closed form (rel err < 1e-3)", ok, format!("max rel err {}", fmt_list(&errs))));
    }
    let mut blow = Vec::new();
    for beta in &cfg.flow.blow_up_betas {
        let t = solve_flow(&ScalarSigma::AbsLinear(*beta), &cfg.flow.blow_up_params)?;
        let pole = 1.0 / (beta * beta);
        let pass = t.blow_up_q.is_some_and(|q| (q - pole).abs() < BLOW_UP_TOL);
        summary.push_str(&format!("blow-up beta {beta}: detected at {:?}, pole {pole:.4}\n", t.blow_up_q));
        verdicts.push(Verdict::new(
            "2b",
            format!("blow-up for beta {beta} within 0.05 of 1/beta^2"),
            pass,
            format!("detected {:?}, expected {pole:.4}", t.blow_up_q),
        ));
        blow.push(FlowRow {
            beta: *beta,
            max_rel_err: f64::NAN,
            q_last: t.q_last(),
            blow_up_q: t.blow_up_q,
        });
    }
    let mut sub = Vec::new();
    for beta in &cfg.flow.subcriticality_betas {
        let spec = SigmaSpec::abs_linear(1, *beta)?;
        let v = subcriticality_check(&spec, &subcriticality_params())?;
        let expected = *beta < 1.0;
        let pass = if expected {
            let q = 1.0 / (beta * beta);
            v.subcritical == Some(true) && v.q_estimate.is_some_and(|e| (e - q).abs() <= Q_ESTIMATE_TOL * q)
        } else {
            v.subcritical == Some(false)
        };
        summary.push_str(&format!("subcriticality beta {beta}: {:?}, Q {:?}, slope {:.3}\n", v.subcritical, v.q_estimate, v.slope));
        verdicts.push(Verdict::new(
            "3",
            format!("abs_linear({beta}) subcritical = {expected}"),
            pass,
            format!("subcritical {:?}, Q_estimate {:?}", v.subcritical, v.q_estimate),
        ));
        sub.push(SubcriticalityRow {
            beta: *beta,
            subcritical: v.subcritical,
            q_estimate: v.q_estimate,
            slope: v.slope,
            note: v.note,
        });
    }
    let mut all = rows.clone();
    all.extend(blow.iter().cloned());
    write_ndjson(out, &all)?;
    out.write_table("flow_errors", &rows)?;
    out.write_table("blow_up", &blow)?;
    out.write_table("subcriticality", &sub)?;
    Ok(verdicts)
}

fn run_fbsde(cfg: &ExperimentConfig, out: &mut OutputDir, summary: &mut String) -> Result<Vec<Verdict>> {
    let scalar = cfg.sigma.as_scalar().expect("validated");
    let p = pool(cfg.workers)?;
    let flow = p.install(|| solve_flow(&scalar, &cfg.fbsde.flow))?;
    let exact_second = |b: f64| match scalar {
        ScalarSigma::AbsLinear(beta) if beta < 1.0 => Some(b * b / (1.0 - beta * beta)),
        ScalarSigma::Constant(c) => Some(b * b + c * c),
        _ => None,
    };
    let mut rows = Vec::new();
    let mut verdicts = Vec::new();
    summary.push_str(&format!("FBSDE paths for {} ({} paths, dq {})\n", cfg.sigma.label(), cfg.fbsde.n_paths, cfg.fbsde.dq));
    for (i, b) in cfg.fbsde.starts.iter().enumerate() {
        let mut pp = PathParams::new(cfg.fbsde.n_paths, cfg.fbsde.dq, cfg.seed);
        pp.family = i as u32;
        let ens = p.install(|| simulate_paths(&flow, &Start::Point(vec![*b]), &pp))?;
        let z1 = ens.column(ens.record_index(1.0)?, 0);
        let m = mean_estimate(&z1);
        let sq: Vec<f64> = z1.iter().map(|z| z * z).collect();
        let m2 = mean_estimate(&sq);
        let iso: Vec<f64> = z1.iter().zip(&ens.ito).map(|(z, w)| (z - b).powi(2) - w).collect();
        let iso = mean_estimate(&iso);
        let ex = exact_second(*b);
        summary.push_str(&format!(
            "  b {b}: E[Z1] {:.5} ± {:.5}, E[Z1^2] {:.5} ± {:.5} (exact {:?})\n",
            m.value, m.se, m2.value, m2.se, ex
        ));
        verdicts.push(Verdict::new("4a", format!("E[Z1] = {b} within 5 SE"), m.within(*b, FBSDE_SE), format!("z = {:.2}", m.z_score(*b))));
        if let Some(e) = ex {
            verdicts.push(Verdict::new(
                "4b",
                format!("E[Z1^2] = {e:.4} within 5 SE"),
                m2.within(e, FBSDE_SE),
                format!("z = {:.2}", m2.z_score(e)),
            ));
        }
        rows.push(FbsdeRow {
            start: *b,
            n_paths: cfg.fbsde.n_paths,
            mean_z1: m.value,
            mean_z1_se: m.se,
            second_moment: m2.value,
            second_moment_se: m2.se,
            exact_second_moment: ex,
            isometry_gap: iso.value,
            isometry_gap_se: iso.se,
        });
    }
    let jp = JTableParams {
        seed: cfg.seed,
        ..cfg.fbsde.jtable.clone()
    };
    let jt = p.install(|| j_tables(&cfg.sigma, &flow, &jp))?;
    jt.write_csv(out.create("tables/jtable.csv")?)?;
    let frac = jt.identity_pass_fraction(J_IDENTITY_SE);
    let valid = jt.valid.iter().filter(|v| **v).count();
    summary.push_str(&format!("J identity: {:.1}% of {valid} valid bins within 3 SE\n", 100.0 * frac));
    verdicts.push(Verdict::new(
        "4c",
        "J identity within 3 SE on >= 90% of valid bins",
        frac >= J_IDENTITY_FRACTION,
        format!("{:.1}% of {valid} bins", 100.0 * frac),
    ));
    write_ndjson(out, &rows)?;
    out.write_table("fbsde_moments", &rows)?;
    Ok(verdicts)
}

fn probe_cells(grid: &TorusGrid, points: &[[f64; 2]]) -> Vec<usize> {
    let n = grid.n();
    points.iter().map(|x| grid.index_of(x[0]) * n + grid.index_of(x[1])).collect()
}

/// Moment rows in `times × points` order, with the closed-form limit when σ
/// is abs_linear.
fn moment_rows(
    rho: f64,
    spec: &MomentSpec,
    estimates: &[Estimate],
    mean: &MeanPath,
    p: &SimParams,
    sigma: &SigmaSpec,
) -> Result<Vec<MomentRow>> {
    let cells = probe_cells(&p.grid, &spec.points);
    let beta = abs_linear_beta(sigma);
    let mut rows = Vec::new();
    let mut k = 0;
    for t in &spec.times {
        let step = p.step_of(*t)?;
        for (x, cell) in spec.points.iter().zip(&cells) {
            let e = estimates[k];
            k += 1;
            let ubar = mean.at(step, *cell)[0];
            rows.push(MomentRow {
                rho,
                t: *t,
                x0: x[0],
                x1: x[1],
                moment: e.value,
                se: e.se,
                limit: beta.map(|b| abs_linear_fbsde_moment(b, ubar, MOMENT_ELL)),
            });
        }
    }
    Ok(rows)
}

fn run_simulate(cfg: &ExperimentConfig, out: &mut OutputDir, summary: &mut String) -> Result<Vec<Verdict>> {
    let pool = pool(cfg.workers)?;
    let probes = cfg.probes();
    let mspec = &probes.moments;
    let mut times: Vec<f64> = cfg.simulate.sample_times.iter().chain(&mspec.times).copied().collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let mut records = Vec::new();
    let mut moments = Vec::new();
    let mut stats = Vec::new();
    summary.push_str(&format!(
        "simulate {} on L = {}, n = {}, {} replicas, scheme {:?}\n",
        cfg.sigma.label(),
        cfg.grid.side,
        cfg.grid.n,
        cfg.replicas,
        cfg.lab.scheme
    ));
    for rho in &cfg.rho_ladder {
        let integ = cfg.integrator(*rho)?;
        let p = integ.params().clone();
        let mean = integ.mean_path()?;
        let opts = RunOptions {
            scheme: cfg.lab.scheme,
            noise_refine: cfg.noise_refine(*rho)?,
            ..Default::default()
        };
        let cells = probe_cells(&p.grid, &mspec.points);
        let snap = cfg.simulate.snapshot_replicas;
        let per: Vec<(Vec<SimRecord>, Option<crate::spde::Trajectory>)> = pool.install(|| {
            (0..cfg.replicas)
                .into_par_iter()
                .map(|r| {
                    let traj = simulate_trajectory(&integ, &mean, &opts, cfg.seed, r, &times, false)?;
                    let recs = traj
                        .times
                        .iter()
                        .zip(&traj.u)
                        .map(|(t, u)| SimRecord {
                            rho: *rho,
                            replica: r,
                            t: *t,
                            spatial_mean: u.mean(0),
                            probes: cells.iter().map(|c| u.component(0)[*c]).collect(),
                        })
                        .collect();
                    Ok((recs, (r < snap).then_some(traj)))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let mut by_time: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); cells.len()]; times.len()];
        for (recs, traj) in per {
            for (ti, rec) in recs.iter().enumerate() {
                for (k, v) in rec.probes.iter().enumerate() {
                    by_time[ti][k].push(*v);
                }
            }
            records.extend(recs);
            if let Some(traj) = traj {
                for (t, u) in traj.times.iter().zip(&traj.u) {
                    let mut w = out.create(&format!("snapshots/rho_{rho}_replica_{}_t_{t}.bin", traj.replica))?;
                    write_snapshot(&mut w, u, *t, *rho, cfg.seed)?;
                    w.flush()?;
                }
            }
        }
        for (ti, t) in times.iter().enumerate() {
            let step = p.step_of(*t)?;
            for (k, x) in mspec.points.iter().enumerate() {
                let s = &by_time[ti][k];
                let m = mean_estimate(s);
                let v = variance_estimate(s);
                stats.push(SimStatRow {
                    rho: *rho,
                    t: *t,
                    x0: x[0],
                    x1: x[1],
                    mean: m.value,
                    mean_se: m.se,
                    variance: v.value,
                    variance_se: v.se,
                    mean_field: mean.at(step, cells[k])[0],
                });
            }
        }
        let mut samples = Vec::new();
        for t in &mspec.times {
            let ti = times.iter().position(|s| s == t).expect("merged");
            samples.extend(by_time[ti].iter().cloned());
        }
        if cfg.replicas >= MIN_MOMENT_SAMPLES {
            let probe = crate::spde::moment_probe(&samples, MOMENT_ELL)?;
            moments.extend(moment_rows(*rho, mspec, &probe.moments, &mean, &p, &cfg.sigma)?);
            summary.push_str(&format!("  rho {rho}: sup E|u|^4 over probes {:.4}\n", probe.sup));
        } else {
            summary.push_str(&format!("  rho {rho}: moment probe skipped (< {MIN_MOMENT_SAMPLES} replicas)\n"));
        }
    }
    write_ndjson(out, &records)?;
    out.write_table("pointwise", &stats)?;
    out.write_table("moments", &moments)?;
    let mut verdicts = h1_verdict(&moments, &cfg.rho_ladder);

    let r = &cfg.simulate.residual;
    if r.enabled {
        let rho = r.rho.expect("resolved");
        let dt0 = cfg.dt(rho);
        let levels = r.halvings + 1;
        let base = dt0 / f64::from(1u32 << levels);
        let mut res = Vec::new();
        for j in 0..levels {
            let dt = dt0 / f64::from(1u32 << j);
            let k = (dt / base).round() as u32;
            let integ = Integrator::new(cfg.sim_params(rho, dt)?);
            let prof = residual_profile(&integ, cfg.lab.scheme, k, cfg.seed, r.replicas, cfg.workers)?;
            let sup = prof.iter().copied().fold(0.0, f64::max);
            let mean = crate::stats::mean(&prof);
            summary.push_str(&format!("  residual at rho {rho}, dt {dt:.5}: sup {sup:.4e}, mean {mean:.4e}\n"));
            res.push(ResidualRow {
                rho,
                dt,
                noise_refine: k,
                sup,
                mean,
            });
        }
        out.write_table("residual", &res)?;
        let sups: Vec<f64> = res.iter().map(|r| r.sup).collect();
        verdicts.push(Verdict::new(
            "9-H2",
            "sup E|T u - u|^2 decreases under dt halving",
            strictly_decreasing(&sups),
            format!("sup {}", fmt_list(&sups)),
        ));
    }
    Ok(verdicts)
}

fn h1_verdict(moments: &[MomentRow], ladder: &[f64]) -> Vec<Verdict> {
    if ladder.len() < 2 || moments.is_empty() {
        return vec![];
    }
    let finite = moments.iter().all(|m| m.moment.is_finite());
    if moments.iter().all(|m| m.limit.is_some()) {
        let ratios: Vec<f64> = moments.iter().map(|m| m.moment / m.limit.expect("checked")).collect();
        let worst = ratios.iter().copied().fold(0.0, f64::max);
        vec![Verdict::new(
            "9-H1",
            "E|u|^4 bounded by 1.25x the FBSDE moment across the ladder",
            finite && worst <= H1_RATIO_MAX,
            format!("max ratio {worst:.4}"),
        )]
    } else {
        let sups: Vec<f64> = ladder
            .iter()
            .map(|r| moments.iter().filter(|m| m.rho == *r).map(|m| m.moment).fold(0.0, f64::max))
            .collect();
        let lo = sups.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = sups.iter().copied().fold(0.0, f64::max);
        vec![Verdict::new(
            "9-H1",
            "sup E|u|^4 finite with spread < 2x across the ladder",
            finite && hi / lo < H1_SPREAD_MAX,
            format!("sup {}", fmt_list(&sups)),
        )]
    }
}

fn lab_coefficients(cfg: &ExperimentConfig, pool: &rayon::ThreadPool) -> Result<Box<dyn LimitCoefficients>> {
    match cfg.lab.coefficients {
        Coefficients::Auto | Coefficients::ClosedForm => closed_form_coefficients(&cfg.sigma, cfg.lab.closed_form_bins)
            .ok_or_else(|| cfg_err("lab.coefficients", format!("no closed form for {}", cfg.sigma.label()))),
        Coefficients::Fbsde => {
            let scalar = cfg.sigma.as_scalar().expect("validated");
            let flow = pool.install(|| solve_flow(&scalar, &cfg.lab.flow))?;
            let jp = JTableParams {
                seed: cfg.seed,
                ..cfg.lab.jtable.clone()
            };
            Ok(Box::new(pool.install(|| j_tables(&cfg.sigma, &flow, &jp))?))
        }
    }
}

/// Per-rung tables of one lab ensemble.
#[derive(Debug, Clone, Default)]
pub struct RungTables {
    pub ladder: Vec<LadderRow>,
    pub moments: Vec<MomentRow>,
    pub concentration: Vec<ConcentrationRow>,
    pub two_point: Vec<TwoPointRow>,
}

/// Flatten a summary into table rows.
pub fn rung_tables(plan: &LabPlan, s: &EnsembleSummary) -> Result<RungTables> {
    let p = plan.integrator().params();
    let constant = match p.sigma.kind() {
        SigmaKind::Constant(c) => Some(c.square()),
        _ => None,
    };
    let mut t = RungTables::default();
    for (i, ts) in s.tests.iter().enumerate() {
        let comp = plan.test_functions()[i].component;
        let exact = constant.as_ref().map(|c2| c2.get(comp, comp) * plan.smoothed_energy(i));
        let g = ts.gaussianity.as_ref();
        t.ladder.push(LadderRow {
            rho: s.rho,
            gamma: s.gamma,
            dt: s.dt,
            replicas: s.replicas,
            test: ts.psi_id.clone(),
            partner: ts.phi_id.clone(),
            mean_pairing: ts.mean_pairing.value,
            mean_pairing_se: ts.mean_pairing.se,
            var_pairing: ts.var_pairing.value,
            var_pairing_se: ts.var_pairing.se,
            n_limit: ts.n_limit,
            var_gap: ts.var_gap,
            exact_variance: exact,
            ks_exact_p: None,
            skewness: g.map(|g| g.skewness),
            excess_kurtosis: g.map(|g| g.excess_kurtosis),
            ks_p: g.map(|g| g.ks.p_value),
            isometry: ts.isometry.value,
            isometry_se: ts.isometry.se,
            cov_ew: ts.cov_ew.value,
            cov_ew_se: ts.cov_ew.se,
            n_nbar_limit: ts.n_nbar_limit,
            cov_gap: ts.cov_gap,
            mean_qv_m: ts.mean_qv_m.value,
            mean_qv_m_se: ts.mean_qv_m.se,
            qv_gap: ts.qv_gap,
            mean_qv_cross: ts.mean_qv_cross.value,
            mean_qv_cross_se: ts.mean_qv_cross.se,
            qv_cross_gap: ts.qv_cross_gap,
            mild_gap: ts.mild_gap.map(|e| e.value),
            mild_gap_se: ts.mild_gap.map(|e| e.se),
        });
    }
    if let Some(m) = &s.moments {
        t.moments = moment_rows(s.rho, &plan.probe_specs().moments, &m.moments, plan.mean_path(), p, &p.sigma)?;
    }
    for (k, c) in s.concentration.iter().enumerate() {
        t.concentration.push(ConcentrationRow {
            rho: s.rho,
            index: k,
            s: c.spec.s,
            r: c.spec.r,
            mean_h: c.mean_h.value,
            mean_h_se: c.mean_h.se,
            var_h: c.var_h.value,
            var_h_se: c.var_h.se,
            target_h: c.target_h,
            distance_h: c.distance_h,
            mean_j: c.mean_j.value,
            mean_j_se: c.mean_j.se,
            var_j: c.var_j.value,
            var_j_se: c.var_j.se,
            target_j: c.target_j,
            distance_j: c.distance_j,
        });
    }
    for tp in &s.two_point {
        t.two_point.push(TwoPointRow {
            rho: s.rho,
            s: tp.spec.s,
            x0: tp.spec.x[0],
            x1: tp.spec.x[1],
            y0: tp.spec.y[0],
            y1: tp.spec.y[1],
            covariance: tp.estimate.covariance.value,
            se: tp.estimate.covariance.se,
            degenerate: tp.estimate.degenerate,
        });
    }
    Ok(t)
}

/// Build the plan for one rung.
pub fn lab_plan(cfg: &ExperimentConfig, rho: f64, coeffs: &dyn LimitCoefficients) -> Result<LabPlan> {
    let opts = LabOptions {
        scheme: cfg.lab.scheme,
        mild_tracker: cfg.lab.mild_tracker,
        noise_refine: cfg.noise_refine(rho)?,
    };
    LabPlan::new(cfg.integrator(rho)?, &cfg.lab.test_functions, coeffs, cfg.probes(), opts)
}

fn run_lab(cfg: &ExperimentConfig, out: &mut OutputDir, summary: &mut String, concentration_only: bool) -> Result<Vec<Verdict>> {
    let pool = pool(cfg.workers)?;
    let coeffs = lab_coefficients(cfg, &pool)?;
    let mut tables = RungTables::default();
    let mut w = out.create(RESULTS)?;
    summary.push_str(&format!(
        "{} for {} on L = {}, n = {}, t = {}, {} replicas, scheme {:?}, coefficients {:?}\n",
        if concentration_only { "concentration" } else { "fluctuations" },
        cfg.sigma.label(),
        cfg.grid.side,
        cfg.grid.n,
        cfg.t_max,
        cfg.replicas,
        cfg.lab.scheme,
        cfg.lab.coefficients
    ));
    let mut verdicts = Vec::new();
    for rho in &cfg.rho_ladder {
        let plan = lab_plan(cfg, *rho, coeffs.as_ref())?;
        let ens = plan.run(cfg.seed, cfg.replicas, cfg.workers)?;
        ens.write_ndjson(&mut w)?;
        let s = summarize(&plan, &ens)?;
        let mut t = rung_tables(&plan, &s)?;
        if !concentration_only {
            verdicts.extend(exact_gaussian_verdicts(&ens, &mut t.ladder)?);
        }
        tables.ladder.extend(t.ladder);
        tables.moments.extend(t.moments);
        tables.concentration.extend(t.concentration);
        tables.two_point.extend(t.two_point);
    }
    w.flush()?;
    drop(w);
    summary.push_str(&render_tables(&tables));
    out.write_table("ladder", &tables.ladder)?;
    out.write_table("moments", &tables.moments)?;
    out.write_table("concentration", &tables.concentration)?;
    out.write_table("two_point", &tables.two_point)?;
    let trend = TrendInputs {
        sigma: &cfg.sigma,
        scheme: cfg.lab.scheme,
        mild_tracker: cfg.lab.mild_tracker,
    };
    if concentration_only {
        verdicts.extend(concentration_verdicts(&tables.concentration));
    } else {
        verdicts.extend(trend_verdicts(&trend, &tables));
    }
    Ok(verdicts)
}

/// Pairings under constant σ against the exact Gaussian law.
fn exact_gaussian_verdicts(ens: &crate::lab::Ensemble, rows: &mut [LadderRow]) -> Result<Vec<Verdict>> {
    let mut v = Vec::new();
    for (i, row) in rows.iter_mut().enumerate() {
        let Some(var) = row.exact_variance else { continue };
        if var <= 0.0 || ens.replicas() < crate::lab::MIN_GAUSSIANITY_SAMPLES {
            continue;
        }
        let pairing = ens.column(i, |r| r.pairing);
        let ks = crate::stats::ks_normal(&pairing, var)?;
        row.ks_exact_p = Some(ks.p_value);
        let iso = Estimate::new(row.isometry, row.isometry_se);
        v.push(Verdict::new(
            "5",
            format!("{} at rho {}: KS vs exact Gaussian at 0.01", row.test, row.rho),
            ks.p_value > KS_LEVEL,
            format!("p = {:.4}, D = {:.4}", ks.p_value, ks.statistic),
        ));
        v.push(Verdict::new(
            "5",
            format!("{} at rho {}: isometry within 5 SE", row.test, row.rho),
            iso.within(0.0, ISOMETRY_SE),
            format!("z = {:.2}", iso.z_score(0.0)),
        ));
    }
    Ok(v)
}

pub struct TrendInputs<'a> {
    pub sigma: &'a SigmaSpec,
    pub scheme: Scheme,
    pub mild_tracker: bool,
}

fn distinct_rhos(rows: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut r: Vec<f64> = rows.collect();
    r.sort_by(|a, b| b.total_cmp(a));
    r.dedup();
    r
}

/// Trend verdicts over a ρ-ladder (decreasing ρ); empty for a single ρ.
pub fn trend_verdicts(inp: &TrendInputs<'_>, t: &RungTables) -> Vec<Verdict> {
    let rhos = distinct_rhos(t.ladder.iter().map(|r| r.rho));
    if rhos.len() < 2 {
        return vec![];
    }
    let mut v = Vec::new();
    let mut tests: Vec<&str> = Vec::new();
    for r in &t.ladder {
        if !tests.contains(&r.test.as_str()) {
            tests.push(&r.test);
        }
    }
    let last = *rhos.last().expect("non-empty");
    let series = |test: &str, f: &dyn Fn(&LadderRow) -> f64| -> Vec<f64> {
        rhos.iter()
            .map(|rho| t.ladder.iter().find(|r| r.test == test && r.rho == *rho).map(f).unwrap_or(f64::NAN))
            .collect()
    };
    let fluctuating = !inp.sigma.is_constant();
    for id in &tests {
        if fluctuating {
            let gap = series(id, &|r| r.var_gap);
            let end = *gap.last().expect("non-empty");
            v.push(Verdict::new(
                "6a",
                format!("{id}: |Var - [N]|/[N] decreases, < 10% at rho {last}"),
                strictly_decreasing(&gap) && end < VAR_GAP_MAX,
                format!("gap {}", fmt_list(&gap)),
            ));
            let skew = series(id, &|r| r.skewness.map_or(f64::NAN, f64::abs));
            let kurt = series(id, &|r| r.excess_kurtosis.map_or(f64::NAN, f64::abs));
            let ks = series(id, &|r| r.ks_p.unwrap_or(f64::NAN));
            let ks_end = *ks.last().expect("non-empty");
            let detail = if skew.iter().any(|x| x.is_nan()) {
                format!("Gaussianity statistics need >= {} replicas per rung", crate::lab::MIN_GAUSSIANITY_SAMPLES)
            } else {
                format!("|skew| {}, |kurt| {}, KS p {}", fmt_list(&skew), fmt_list(&kurt), fmt_list(&ks))
            };
            v.push(Verdict::new(
                "6b",
                format!("{id}: |skew|, |kurt| shrink; KS vs N(0,[N]) passes at rho {last}"),
                strictly_decreasing(&skew) && strictly_decreasing(&kurt) && ks_end > KS_LEVEL,
                detail,
            ));
            let cov = series(id, &|r| r.cov_gap);
            let cov_end = *cov.last().expect("non-empty");
            v.push(Verdict::new(
                "6c",
                format!("{id}: Cov(pairing, EW) within 15% of [N,Nbar] at rho {last}"),
                cov_end < COV_GAP_MAX,
                format!("gap {}", fmt_list(&cov)),
            ));
        }
        let qv = series(id, &|r| r.qv_gap);
        let qvx = series(id, &|r| r.qv_cross_gap);
        v.push(Verdict::new(
            "7",
            format!("{id}: |E[M] - [N]| and |E[M,Nbar] - [N,Nbar]| strictly decrease"),
            strictly_decreasing(&qv) && strictly_decreasing(&qvx),
            format!("[M] gap {}, cross gap {}", fmt_list(&qv), fmt_list(&qvx)),
        ));
        if inp.mild_tracker && inp.scheme == Scheme::PreSmoothed {
            let g = series(id, &|r| r.mild_gap.unwrap_or(f64::NAN));
            v.push(Verdict::new(
                "9-H3",
                format!("{id}: E|<psi, T u - u>/gamma|^2 (pre-smoothed) decreases"),
                strictly_decreasing(&g),
                format!("{}", fmt_list(&g)),
            ));
        }
    }
    v.extend(concentration_verdicts(&t.concentration));
    v.extend(h1_verdict(&t.moments, &distinct_rhos(t.moments.iter().map(|m| m.rho))));
    v
}

pub fn concentration_verdicts(rows: &[ConcentrationRow]) -> Vec<Verdict> {
    let rhos = distinct_rhos(rows.iter().map(|r| r.rho));
    if rhos.len() < 2 {
        return vec![];
    }
    let mut idx: Vec<usize> = rows.iter().map(|r| r.index).collect();
    idx.sort_unstable();
    idx.dedup();
    let mut v = Vec::new();
    for k in idx {
        let s = |f: &dyn Fn(&ConcentrationRow) -> f64| -> Vec<f64> {
            rhos.iter()
                .map(|rho| rows.iter().find(|r| r.index == k && r.rho == *rho).map(f).unwrap_or(f64::NAN))
                .collect()
        };
        let (vh, vj) = (s(&|r| r.var_h), s(&|r| r.var_j));
        let (dh, dj) = (s(&|r| r.distance_h), s(&|r| r.distance_j));
        v.push(Verdict::new(
            "8",
            format!("probe {k}: Var of both averages strictly decreases"),
            strictly_decreasing(&vh) && strictly_decreasing(&vj),
            format!("Var h {}, Var j {}", fmt_list(&vh), fmt_list(&vj)),
        ));
        v.push(Verdict::new(
            "8",
            format!("probe {k}: distance of means to flow targets decreases"),
            strictly_decreasing(&dh) && strictly_decreasing(&dj),
            format!("h {}, j {}", fmt_list(&dh), fmt_list(&dj)),
        ));
    }
    v
}

fn render_tables(t: &RungTables) -> String {
    let mut s = String::new();
    s.push_str("\n  rho     test   Var(pairing)        [N]      gap   E[M]-[N]  cross gap    cov gap    skew    kurt     KS p\n");
    for r in &t.ladder {
        s.push_str(&format!(
            "{:6.4} {:>6} {:10.4e}±{:8.2e} {:10.4e} {:7.4} {:10.3e} {:10.3e} {:9.4} {:7.3} {:7.3} {:8.2e}\n",
            r.rho,
            r.test,
            r.var_pairing,
            r.var_pairing_se,
            r.n_limit,
            r.var_gap,
            r.qv_gap,
            r.qv_cross_gap,
            r.cov_gap,
            r.skewness.unwrap_or(f64::NAN),
            r.excess_kurtosis.unwrap_or(f64::NAN),
            r.ks_p.unwrap_or(f64::NAN),
        ));
    }
    if !t.concentration.is_empty() {
        s.push_str("\n  rho  probe    Var h      dist h      Var j      dist j\n");
        for c in &t.concentration {
            s.push_str(&format!(
                "{:6.4} {:5} {:10.4e} {:10.4e} {:10.4e} {:10.4e}\n",
                c.rho, c.index, c.var_h, c.distance_h, c.var_j, c.distance_j
            ));
        }
    }
    if !t.moments.is_empty() {
        s.push_str("\n  rho     t      x0      x1     E|u|^4    limit\n");
        for m in &t.moments {
            s.push_str(&format!(
                "{:6.4} {:5.3} {:7.3} {:7.3} {:10.4} {:8.4}\n",
                m.rho,
                m.t,
                m.x0,
                m.x1,
                m.moment,
                m.limit.unwrap_or(f64::NAN)
            ));
        }
    }
    s
}

// report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct VarianceTrend {
    rho: f64,
    test: String,
    var_pairing: f64,
    var_pairing_se: f64,
    n_limit: f64,
    var_gap: f64,
    cov_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct QvTrend {
    rho: f64,
    test: String,
    qv_gap: f64,
    qv_cross_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GaussianityTrend {
    rho: f64,
    test: String,
    skewness: Option<f64>,
    excess_kurtosis: Option<f64>,
    ks_p: Option<f64>,
}

fn run_report(cfg: &ExperimentConfig, out: &mut OutputDir, summary: &mut String) -> Result<Vec<Verdict>> {
    let mut merged = RungTables::default();
    let mut reference: Option<ExperimentConfig> = None;
    for dir in &cfg.report.dirs {
        let m = read_manifest(dir)?;
        if m.kind != Kind::Fluctuations.name() && m.kind != Kind::Concentration.name() {
            return Err(Error::Incompatible(format!("{}: kind `{}` has no ladder tables", dir.display(), m.kind)));
        }
        let c: ExperimentConfig = serde_json::from_value(m.config.clone())?;
        if let Some(r) = &reference {
            if r.sigma != c.sigma {
                return Err(Error::Incompatible(format!(
                    "mixed sigma variants: {} vs {} in {}",
                    r.sigma.label(),
                    c.sigma.label(),
                    dir.display()
                )));
            }
            let same = r.grid == c.grid
                && r.t_max == c.t_max
                && r.initial == c.initial
                && r.lab.test_functions == c.lab.test_functions
                && r.lab.scheme == c.lab.scheme
                && r.lab.probes == c.lab.probes;
            if !same {
                return Err(Error::Incompatible(format!(
                    "{}: grid, horizon, initial data, scheme, probes or test functions differ",
                    dir.display()
                )));
            }
        } else {
            reference = Some(c);
        }
        if m.kind == Kind::Fluctuations.name() {
            merged.ladder.extend(read_table::<LadderRow>(dir, "ladder")?);
        }
        merged.moments.extend(read_table::<MomentRow>(dir, "moments")?);
        merged.concentration.extend(read_table::<ConcentrationRow>(dir, "concentration")?);
        merged.two_point.extend(read_table::<TwoPointRow>(dir, "two_point")?);
    }
    let reference = reference.expect("validated non-empty");
    let check_unique = |rhos: Vec<(f64, String)>| -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (r, k) in rhos {
            if !seen.insert((r.to_bits(), k.clone())) {
                return Err(Error::Incompatible(format!("ρ = {r} ({k}) appears in more than one run")));
            }
        }
        Ok(())
    };
    check_unique(merged.ladder.iter().map(|r| (r.rho, r.test.clone())).collect())?;
    check_unique(merged.concentration.iter().map(|r| (r.rho, r.index.to_string())).collect())?;
    let by_rho = |a: f64, b: f64| b.total_cmp(&a);
    merged.ladder.sort_by(|a, b| by_rho(a.rho, b.rho).then(a.test.cmp(&b.test)));
    merged.moments.sort_by(|a, b| by_rho(a.rho, b.rho));
    merged.concentration.sort_by(|a, b| by_rho(a.rho, b.rho).then(a.index.cmp(&b.index)));
    merged.two_point.sort_by(|a, b| by_rho(a.rho, b.rho));

    let variance: Vec<VarianceTrend> = merged
        .ladder
        .iter()
        .map(|r| VarianceTrend {
            rho: r.rho,
            test: r.test.clone(),
            var_pairing: r.var_pairing,
            var_pairing_se: r.var_pairing_se,
            n_limit: r.n_limit,
            var_gap: r.var_gap,
            cov_gap: r.cov_gap,
        })
        .collect();
    let qv: Vec<QvTrend> = merged
        .ladder
        .iter()
        .map(|r| QvTrend {
            rho: r.rho,
            test: r.test.clone(),
            qv_gap: r.qv_gap,
            qv_cross_gap: r.qv_cross_gap,
        })
        .collect();
    let gauss: Vec<GaussianityTrend> = merged
        .ladder
        .iter()
        .map(|r| GaussianityTrend {
            rho: r.rho,
            test: r.test.clone(),
            skewness: r.skewness,
            excess_kurtosis: r.excess_kurtosis,
            ks_p: r.ks_p,
        })
        .collect();
    write_ndjson(out, &merged.ladder)?;
    out.write_table("ladder", &merged.ladder)?;
    out.write_table("variance_vs_rho", &variance)?;
    out.write_table("qv_gap_vs_rho", &qv)?;
    out.write_table("gaussianity_vs_rho", &gauss)?;
    out.write_table("concentration", &merged.concentration)?;
    out.write_table("moments", &merged.moments)?;
    out.write_table("two_point", &merged.two_point)?;
    let rhos = distinct_rhos(merged.ladder.iter().map(|r| r.rho).chain(merged.concentration.iter().map(|r| r.rho)));
    summary.push_str(&format!(
        "report over {} run(s), sigma {}, rho {}\n",
        cfg.report.dirs.len(),
        reference.sigma.label(),
        fmt_list(&rhos)
    ));
    summary.push_str(&render_tables(&merged));
    if rhos.len() < 2 {
        summary.push_str("\nsingle rho: no trend verdicts\n");
        return Ok(vec![]);
    }
    let inp = TrendInputs {
        sigma: &reference.sigma,
        scheme: reference.lab.scheme,
        mild_tracker: reference.lab.mild_tracker,
    };
    if merged.ladder.is_empty() {
        Ok(concentration_verdicts(&merged.concentration))
    } else {
        Ok(trend_verdicts(&inp, &merged))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: Kind, dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            kind: Some(kind),
            out: Some(dir.to_path_buf()),
            grid: GridConfig { side: 8.0, n: 64 },
            rho_ladder: vec![0.1],
            replicas: 8,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn defaults_round_trip_and_resolve() {
        let mut c = ExperimentConfig {
            kind: Some(Kind::Fluctuations),
            ..Default::default()
        };
        c.resolve();
        assert_eq!(c.noise_base_dt, Some(0.025 * 0.25));
        assert_eq!(c.lab.coefficients, Coefficients::ClosedForm);
        assert_eq!(c.noise_refine(0.1).unwrap(), 4);
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::from_json_str(&s).unwrap(), c);
    }

    #[test]
    fn field_level_errors() {
        let e = ExperimentConfig::from_json_str(r#"{"grid": {"side": 8.0, "n": 64, "bogus": 1}}"#).unwrap_err();
        assert!(matches!(&e, Error::Config { field, .. } if field == "grid.bogus"), "{e}");
        let e = ExperimentConfig::from_json_str(r#"{"replicas": "many"}"#).unwrap_err();
        assert!(matches!(&e, Error::Config { field, .. } if field == "replicas"), "{e}");

        let dir = tempfile::tempdir().unwrap();
        let mut c = small(Kind::Fluctuations, dir.path());
        c.rho_ladder = vec![0.05, 0.1];
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "rho_ladder"));
        let mut c = small(Kind::Fluctuations, dir.path());
        c.rho_ladder = vec![0.1, 0.03];
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "noise_base_dt"));
        let mut c = small(Kind::Fluctuations, dir.path());
        c.schema_version = 7;
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "schema_version"));
        let mut c = small(Kind::Fluctuations, dir.path());
        c.lab.test_functions[0].radius = 10.0;
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field.starts_with("lab.test_functions")));
    }

    #[test]
    fn kernel_check_passes() {
        let dir = tempfile::tempdir().unwrap();
        let o = run(small(Kind::KernelCheck, &dir.path().join("k")), false).unwrap();
        assert_eq!(o.exit_code(), 0, "{:?}", o.verdicts);
        assert!(o.manifest.files.contains_key("tables/kernel_gap.csv"));
        let rows: Vec<crate::torus::KernelGapRow> = read_table(&dir.path().join("k"), "kernel_gap").unwrap();
        for r in rows {
            assert!((r.ratio / CONTINUUM_KERNEL_CONSTANT - 1.0).abs() < 0.06, "{r:?}");
        }
    }

    #[test]
    fn closed_form_flow_error_is_small() {
        let t = solve_flow(&ScalarSigma::AbsLinear(0.5), &FlowParams::default()).unwrap();
        assert!(flow_closed_form_error(&t, 0.5) < FLOW_REL_ERR);
    }

    #[test]
    fn trend_verdicts_follow_rows() {
        let row = |rho: f64, gap: f64| LadderRow {
            rho,
            gamma: 1.0,
            dt: rho / 4.0,
            replicas: 512,
            test: "psi".into(),
            partner: "psi".into(),
            mean_pairing: 0.0,
            mean_pairing_se: 0.0,
            var_pairing: 1.0,
            var_pairing_se: 0.1,
            n_limit: 1.0,
            var_gap: gap,
            exact_variance: None,
            ks_exact_p: None,
            skewness: Some(gap),
            excess_kurtosis: Some(gap),
            ks_p: Some(0.5),
            isometry: 0.0,
            isometry_se: 1.0,
            cov_ew: 0.0,
            cov_ew_se: 0.0,
            n_nbar_limit: 1.0,
            cov_gap: gap,
            mean_qv_m: 1.0,
            mean_qv_m_se: 0.0,
            qv_gap: gap,
            mean_qv_cross: 0.0,
            mean_qv_cross_se: 0.0,
            qv_cross_gap: gap,
            mild_gap: None,
            mild_gap_se: None,
        };
        let sigma = SigmaSpec::abs_linear(1, 0.5).unwrap();
        let inp = TrendInputs {
            sigma: &sigma,
            scheme: Scheme::PostSmoothed,
            mild_tracker: false,
        };
        let good = RungTables {
            ladder: vec![row(0.1, 0.3), row(0.05, 0.2), row(0.025, 0.05)],
            ..Default::default()
        };
        let v = trend_verdicts(&inp, &good);
        assert_eq!(v.len(), 4);
        assert!(v.iter().all(|v| v.pass), "{v:?}");
        let bad = RungTables {
            ladder: vec![row(0.1, 0.3), row(0.05, 0.2), row(0.025, 0.25)],
            ..Default::default()
        };
        assert!(trend_verdicts(&inp, &bad).iter().all(|v| !v.pass));
        let single = RungTables {
            ladder: vec![row(0.1, 0.3)],
            ..Default::default()
        };
        assert!(trend_verdicts(&inp, &single).is_empty());
    }
}
