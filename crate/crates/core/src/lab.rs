//! Fluctuation lab: spacetime bumps and their backward caps, pairings of the
//! rescaled fluctuation and of the EW field, martingale quadratic variations,
//! concentration and correlation probes, and the replica ensemble runner.
//!
//! Every pairing uses the trapezoid rule over step boundaries. Writing the
//! pairing of `γ⁻¹(u − ū)` as a sum over noise increments gives the discrete
//! martingale integrand `Ψᵈ_n = Ψ_n − (Δt/2)ψ_n` (the cap without its own
//! boundary term); the quadratic variations below integrate `Ψᵈ` so that the
//! Itô isometry holds exactly for the post-smoothed scheme.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fbsde::{BinGrid, JTable};
use crate::sigma::PsdMatrix;
use crate::spde::{moment_probe, EwCoefficients, Integrator, MeanPath, MomentProbe, RunOptions, Scheme, StepObserver, StepView};
use crate::stats::{
    covariance_estimate, excess_kurtosis, ks_normal, mean_estimate, skewness, variance_estimate, Estimate, KsResult,
};
use crate::torus::{wrapped_kernel_field, Spectral, TorusGrid};

/// Smallest ensemble accepted by [`gaussianity_report`].
pub const MIN_GAUSSIANITY_SAMPLES: usize = 256;

fn one() -> f64 {
    1.0
}

/// Spacetime bump `ψ(t, x) = a·T(t)·S(x)` with `T(t) = (1 − τ²)³`,
/// `τ = (2t − t₀ − t₁)/(t₁ − t₀)`, and `S(x) = (1 − |x − x₀|²/R²)³` on the
/// disc of radius `R` (periodic distance), living in one component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestFunctionSpec {
    pub id: String,
    pub centre: [f64; 2],
    pub radius: f64,
    pub t0: f64,
    pub t1: f64,
    #[serde(default)]
    pub component: usize,
    #[serde(default = "one")]
    pub amplitude: f64,
    /// Id of the function paired against the EW field; the function itself
    /// when absent.
    #[serde(default)]
    pub partner: Option<String>,
}

impl TestFunctionSpec {
    pub fn new(id: impl Into<String>, centre: [f64; 2], radius: f64, t0: f64, t1: f64) -> Self {
        Self {
            id: id.into(),
            centre,
            radius,
            t0,
            t1,
            component: 0,
            amplitude: 1.0,
            partner: None,
        }
    }

    pub fn partner_id(&self) -> &str {
        self.partner.as_deref().unwrap_or(&self.id)
    }

    /// Support must sit strictly inside `(0, t)` and the disc must fit on
    /// the torus.
    pub fn validate(&self, t: f64, grid: &TorusGrid, m: usize) -> Result<()> {
        if !(self.t0 > 0.0 && self.t0 < self.t1 && self.t1 < t) {
            return Err(invalid(
                "test_function",
                format!("`{}`: time support ({}, {}) must lie strictly inside (0, {t})", self.id, self.t0, self.t1),
            ));
        }
        if !(self.radius > 0.0 && self.radius < 0.5 * grid.side()) {
            return Err(invalid(
                "test_function",
                format!("`{}`: radius {} must be in (0, L/2)", self.id, self.radius),
            ));
        }
        if self.radius < 2.0 * grid.dx() {
            return Err(invalid("test_function", format!("`{}`: radius below two cells", self.id)));
        }
        if self.component >= m {
            return Err(invalid("test_function", format!("`{}`: component {} >= m", self.id, self.component)));
        }
        if !self.amplitude.is_finite() {
            return Err(invalid("test_function", format!("`{}`: amplitude is not finite", self.id)));
        }
        Ok(())
    }

    pub fn time_profile(&self, t: f64) -> f64 {
        let tau = (2.0 * t - self.t0 - self.t1) / (self.t1 - self.t0);
        if tau.abs() >= 1.0 {
            0.0
        } else {
            (1.0 - tau * tau).powi(3)
        }
    }

    /// `a·S(x)` on the grid (one scalar per cell).
    pub fn space_profile(&self, grid: &TorusGrid) -> Vec<f64> {
        let n = grid.n();
        let r2 = self.radius * self.radius;
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            let dx = grid.wrap_delta(self.centre[0], grid.coord(i));
            for j in 0..n {
                let dy = grid.wrap_delta(self.centre[1], grid.coord(j));
                let q = (dx * dx + dy * dy) / r2;
                out.push(if q < 1.0 { self.amplitude * (1.0 - q).powi(3) } else { 0.0 });
            }
        }
        out
    }
}

/// Backward cap `Ψ_n` on step boundaries, from the trapezoid rule
/// `Ψ_n = (Δt/2)ψ_n + Σ_{n<j<N} Δt 𝒢_{t_j−t_n}ψ_j + (Δt/2)𝒢_{t−t_n}ψ_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct CapTrajectory {
    pub id: String,
    pub component: usize,
    pub dt: f64,
    pub t: f64,
    pub n_steps: usize,
    /// `T(t_n)`.
    pub time_profile: Vec<f64>,
    /// `a·S`, one value per cell.
    pub space: Vec<f64>,
    pub space_hat: Vec<Complex64>,
    /// `Ψ_n`, one value per cell; `Ψ_N = 0`.
    pub cap: Vec<Vec<f64>>,
}

impl CapTrajectory {
    pub fn grid_cells(&self) -> usize {
        self.space.len()
    }

    /// `ψ_n` on the grid.
    pub fn psi(&self, n: usize) -> Vec<f64> {
        let tn = self.time_profile[n];
        self.space.iter().map(|s| tn * s).collect()
    }

    /// `Ψᵈ_n = Ψ_n − (Δt/2)ψ_n`.
    pub fn integrand(&self, n: usize) -> Vec<f64> {
        let h = 0.5 * self.dt * self.time_profile[n];
        self.cap[n].iter().zip(&self.space).map(|(c, s)| c - h * s).collect()
    }

    /// First step with `t_n ≥ t₁`; the cap vanishes from there on.
    pub fn support_end(&self) -> usize {
        (0..=self.n_steps)
            .rev()
            .find(|&n| self.time_profile[n] != 0.0)
            .map_or(0, |n| n + 1)
    }

    /// `max_n ‖(Ψ_{n+1} − Ψ_{n−1})/(2Δt) + ½ΔΨ_n + ψ_n‖_∞` over interior
    /// boundaries.
    pub fn backward_residual(&self, spectral: &Spectral) -> f64 {
        let lap = spectral.laplacian_multiplier();
        let mut scratch = spectral.scratch();
        let mut worst: f64 = 0.0;
        let mut work = vec![0.0; self.grid_cells()];
        for n in 1..self.n_steps {
            work.copy_from_slice(&self.cap[n]);
            spectral.apply_multiplier_real(&mut work, &lap, &mut scratch);
            let tn = self.time_profile[n];
            for (cell, l) in work.iter().enumerate() {
                let d = (self.cap[n + 1][cell] - self.cap[n - 1][cell]) / (2.0 * self.dt);
                worst = worst.max((d + 0.5 * l + tn * self.space[cell]).abs());
            }
        }
        worst
    }
}

/// Build the cap of `spec` on the step grid `t_n = nΔt`, `n ≤ n_steps`.
pub fn make_cap(spec: &TestFunctionSpec, spectral: &Spectral, dt: f64, n_steps: usize, m: usize) -> Result<CapTrajectory> {
    if !(dt > 0.0 && dt.is_finite()) || n_steps == 0 {
        return Err(invalid("dt", "cap needs a positive step and at least one step"));
    }
    let t = dt * n_steps as f64;
    let grid = *spectral.grid();
    spec.validate(t, &grid, m)?;
    let cells = grid.cells();
    let space = spec.space_profile(&grid);
    let time_profile: Vec<f64> = (0..=n_steps).map(|n| spec.time_profile(n as f64 * dt)).collect();
    let mut scratch = spectral.scratch();
    let mut space_hat = vec![Complex64::new(0.0, 0.0); cells];
    spectral.forward_real(&space, &mut space_hat, &mut scratch);

    // per mode, Ψ̂_n = a_n Ŝ with a_n = e(a_{n+1} + Δt/2 T_{n+1}) + Δt/2 T_n
    let decay = spectral.heat_multiplier(dt);
    let mut a = vec![0.0; cells];
    let mut cap = vec![Vec::new(); n_steps + 1];
    cap[n_steps] = vec![0.0; cells];
    let mut hat = vec![Complex64::new(0.0, 0.0); cells];
    let mut live = false;
    for n in (0..n_steps).rev() {
        let (tn, tn1) = (time_profile[n], time_profile[n + 1]);
        live |= tn != 0.0 || tn1 != 0.0;
        if !live {
            cap[n] = vec![0.0; cells];
            continue;
        }
        for (ak, e) in a.iter_mut().zip(&decay) {
            *ak = e * (*ak + 0.5 * dt * tn1) + 0.5 * dt * tn;
        }
        for ((h, s), ak) in hat.iter_mut().zip(&space_hat).zip(&a) {
            *h = s * *ak;
        }
        let mut out = vec![0.0; cells];
        spectral.inverse_real(&hat, &mut out, &mut scratch);
        cap[n] = out;
    }
    Ok(CapTrajectory {
        id: spec.id.clone(),
        component: spec.component,
        dt,
        t,
        n_steps,
        time_profile,
        space,
        space_hat,
        cap,
    })
}

/// Trapezoid weights over `n_steps + 1` equally spaced boundaries.
pub fn trapezoid_weights(dt: f64, n_steps: usize) -> Vec<f64> {
    (0..=n_steps)
        .map(|n| if n == 0 || n == n_steps { 0.5 * dt } else { dt })
        .collect()
}

/// Left-point spacetime quadrature `Σ_{n<N} Δt Δx² Σₓ a_n b_n`.
pub fn spacetime_dot(a: &[Vec<f64>], b: &[Vec<f64>], dt: f64, cell_area: f64) -> f64 {
    let n = a.len().min(b.len()).saturating_sub(1);
    (0..n)
        .map(|k| {
            if a[k].is_empty() || b[k].is_empty() {
                return 0.0;
            }
            a[k].iter().zip(&b[k]).map(|(x, y)| x * y).sum::<f64>()
        })
        .sum::<f64>()
        * dt
        * cell_area
}

// ---------------------------------------------------------------------------
// limit coefficients

/// `(J̄₁, J̃₁, H₁)` at one state, each `m×m` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitValues {
    pub jbar: Vec<f64>,
    pub jtilde: Vec<f64>,
    pub h1: Vec<f64>,
}

/// Source of the limit coefficients composed with the mean field.
pub trait LimitCoefficients: Sync {
    fn m(&self) -> usize;
    fn eval(&self, w: &[f64]) -> Result<LimitValues>;
}

impl LimitCoefficients for JTable {
    fn m(&self) -> usize {
        self.m
    }

    fn eval(&self, w: &[f64]) -> Result<LimitValues> {
        let v = JTable::eval(self, w[0])?;
        Ok(LimitValues {
            jbar: vec![v.jbar],
            jtilde: vec![v.jtilde],
            h1: vec![v.j1 * v.j1],
        })
    }
}

/// Coefficients of a constant `σ ≡ c`: `J̄₁ = c`, `J̃₁ = 0`, `H₁ = c²`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantCoefficients(pub PsdMatrix);

impl LimitCoefficients for ConstantCoefficients {
    fn m(&self) -> usize {
        self.0.dim()
    }

    fn eval(&self, _: &[f64]) -> Result<LimitValues> {
        let m = self.0.dim();
        Ok(LimitValues {
            jbar: self.0.data().to_vec(),
            jtilde: vec![0.0; m * m],
            h1: self.0.square().data().to_vec(),
        })
    }
}

/// Closed-form table for `σ(w) = β|w|` in one component. Started away from
/// zero, `dZ = β|Z|(1 − β²(1 − q))^{-1/2} dB` is a geometric martingale that
/// keeps its sign, so `J̄₁(b) = β|b|` and `J̃₁(b) = β²|b|/√(1 − β²)`.
pub fn abs_linear_j_table(beta: f64, half_width: f64, n_bins: usize) -> Result<JTable> {
    if !(beta.abs() < 1.0) {
        return Err(invalid("beta", "closed form needs |β| < 1"));
    }
    let bins = BinGrid::symmetric(1, half_width, n_bins)?;
    let s = (1.0 - beta * beta).sqrt();
    JTable::from_fn(bins, |b| (beta.abs() * b.abs(), beta * beta * b.abs() / s))
}

/// `E|Z₁|^ℓ` for `σ(w) = β|w|` started at `b`: the geometric martingale has
/// total variance `−log(1 − β²)`.
pub fn abs_linear_fbsde_moment(beta: f64, b: f64, ell: f64) -> f64 {
    let v = -(1.0 - beta * beta).ln();
    b.abs().powf(ell) * (0.5 * ell * (ell - 1.0) * v).exp()
}

/// Limit coefficients along the mean path, entry-major with `m²` entries per
/// cell at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitPath {
    pub m: usize,
    pub ew: EwCoefficients,
    pub h1: Vec<Vec<f64>>,
}

impl LimitPath {
    pub fn new(mean: &MeanPath, coeffs: &dyn LimitCoefficients) -> Result<Self> {
        let first = mean.fields.first().ok_or_else(|| Error::Missing("empty mean path".into()))?;
        let m = first.m();
        if coeffs.m() != m {
            return Err(Error::Shape(format!("coefficients are {}-dimensional, field has m = {m}", coeffs.m())));
        }
        let mm = m * m;
        let cells = first.grid().cells();
        let (mut jbar, mut jtilde, mut h1) = (Vec::new(), Vec::new(), Vec::new());
        let mut w = vec![0.0; m];
        for field in &mean.fields {
            let mut a = vec![0.0; mm * cells];
            let mut b = vec![0.0; mm * cells];
            let mut h = vec![0.0; mm * cells];
            for cell in 0..cells {
                for (c, wc) in w.iter_mut().enumerate() {
                    *wc = field.component(c)[cell];
                }
                let v = coeffs.eval(&w)?;
                for e in 0..mm {
                    a[e * cells + cell] = v.jbar[e];
                    b[e * cells + cell] = v.jtilde[e];
                    h[e * cells + cell] = v.h1[e];
                }
            }
            jbar.push(a);
            jtilde.push(b);
            h1.push(h);
        }
        Ok(Self {
            m,
            ew: EwCoefficients { m, jbar, jtilde },
            h1,
        })
    }

    fn cells(&self) -> usize {
        self.h1[0].len() / (self.m * self.m)
    }

    /// `(J̄₁J̄₁ᵀ)_{ab}` at one cell.
    fn jbar_outer(&self, step: usize, a: usize, b: usize, cell: usize) -> f64 {
        let (m, cells) = (self.m, self.cells());
        let j = &self.ew.jbar[step];
        (0..m).map(|c| j[(a * m + c) * cells + cell] * j[(b * m + c) * cells + cell]).sum()
    }
}

// ---------------------------------------------------------------------------
// quadratic variations

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QvLabel {
    #[serde(rename = "[M]")]
    M,
    #[serde(rename = "[N]")]
    N,
    #[serde(rename = "[Nbar]")]
    NBar,
    #[serde(rename = "[M,Nbar]")]
    MNBar,
    #[serde(rename = "[N,Nbar]")]
    NNBar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QVMatrix {
    pub label: QvLabel,
    pub time: f64,
    pub m: usize,
    /// Row-major `m×m`.
    pub value: Vec<f64>,
}

impl QVMatrix {
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.value[a * self.m + b]
    }
}

/// Deterministic limits `[N]`, `[N̄]` and `[N,N̄]` at the terminal time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QvLimits {
    pub n: QVMatrix,
    pub nbar: QVMatrix,
    pub n_nbar: QVMatrix,
}

/// `[N] = ∫∫Ψ²H₁(ū)`, `[N̄] = ∫∫Φ²J̄₁J̄₁ᵀ(ū)`, `[N,N̄] = ∫∫ΨΦJ̄₁J̄₁ᵀ(ū)`,
/// left-point rule in time with the martingale integrands.
pub fn qv_limits(psi: &CapTrajectory, phi: &CapTrajectory, limit: &LimitPath, cell_area: f64) -> Result<QvLimits> {
    if psi.n_steps != phi.n_steps || psi.grid_cells() != phi.grid_cells() || limit.h1.len() != psi.n_steps + 1 {
        return Err(Error::Shape("caps and limit path do not share a grid".into()));
    }
    let (m, cells) = (limit.m, limit.cells());
    let dt = psi.dt;
    let (mut n, mut nbar, mut nn) = (vec![0.0; m * m], vec![0.0; m * m], vec![0.0; m * m]);
    let end = psi.support_end().max(phi.support_end()).min(psi.n_steps);
    for step in 0..end {
        let a = psi.integrand(step);
        let b = phi.integrand(step);
        for x in 0..m {
            for y in 0..m {
                let e = x * m + y;
                let h = &limit.h1[step][e * cells..(e + 1) * cells];
                let (mut sn, mut sb, mut sx) = (0.0, 0.0, 0.0);
                for cell in 0..cells {
                    let jj = limit.jbar_outer(step, x, y, cell);
                    sn += a[cell] * a[cell] * h[cell];
                    sb += b[cell] * b[cell] * jj;
                    sx += a[cell] * b[cell] * jj;
                }
                n[e] += sn * dt * cell_area;
                nbar[e] += sb * dt * cell_area;
                nn[e] += sx * dt * cell_area;
            }
        }
    }
    let mk = |label, value| QVMatrix {
        label,
        time: psi.t,
        m,
        value,
    };
    Ok(QvLimits {
        n: mk(QvLabel::N, n),
        nbar: mk(QvLabel::NBar, nbar),
        n_nbar: mk(QvLabel::NNBar, nn),
    })
}

/// Planar heat kernel `G_q(x) = (2πq)⁻¹ exp(−|x|²/2q)`.
pub fn planar_kernel(q: f64, x: [f64; 2]) -> f64 {
    (-(x[0] * x[0] + x[1] * x[1]) / (2.0 * q)).exp() / (2.0 * PI * q)
}

/// `|G_{q₁}(x−y₁)G_{q₂}(x−y₂) − G_{q₁+q₂}(y₁−y₂)·G_{q₁q₂/(q₁+q₂)}(ȳ − x)|`
/// with `ȳ = (q₂y₁ + q₁y₂)/(q₁+q₂)`.
pub fn gaussian_product_check(q1: f64, q2: f64, y1: [f64; 2], y2: [f64; 2], x: [f64; 2]) -> Result<f64> {
    if !(q1 > 0.0 && q2 > 0.0) {
        return Err(invalid("q", "both variances must be positive"));
    }
    let sub = |a: [f64; 2], b: [f64; 2]| [a[0] - b[0], a[1] - b[1]];
    let lhs = planar_kernel(q1, sub(x, y1)) * planar_kernel(q2, sub(x, y2));
    let s = q1 + q2;
    let ybar = [(q2 * y1[0] + q1 * y2[0]) / s, (q2 * y1[1] + q1 * y2[1]) / s];
    let rhs = planar_kernel(s, sub(y1, y2)) * planar_kernel(q1 * q2 / s, sub(ybar, x));
    Ok((lhs - rhs).abs())
}

// ---------------------------------------------------------------------------
// statistics

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianityReport {
    pub samples: usize,
    pub mean: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub ks: KsResult,
}

/// Moments and the KS distance against `N(0, target_variance)`.
pub fn gaussianity_report(samples: &[f64], target_variance: f64) -> Result<GaussianityReport> {
    if samples.len() < MIN_GAUSSIANITY_SAMPLES {
        return Err(Error::InsufficientSamples(format!(
            "gaussianity report needs {MIN_GAUSSIANITY_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    Ok(GaussianityReport {
        samples: samples.len(),
        mean: crate::stats::mean(samples),
        skewness: skewness(samples),
        excess_kurtosis: excess_kurtosis(samples),
        ks: ks_normal(samples, target_variance)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoPointEstimate {
    pub covariance: Estimate,
    /// `x = y`: the estimate is a variance.
    pub degenerate: bool,
}

/// Ensemble covariance of `g(u_s(x))` and `g(u_s(y))` from the two sample
/// columns.
pub fn two_point_correlation(gx: &[f64], gy: &[f64], degenerate: bool) -> Result<TwoPointEstimate> {
    if gx.len() != gy.len() || gx.len() < 2 {
        return Err(Error::InsufficientSamples("two-point estimate needs matching columns of >= 2".into()));
    }
    Ok(TwoPointEstimate {
        covariance: covariance_estimate(gx, gy),
        degenerate,
    })
}

// ---------------------------------------------------------------------------
// probes

/// Scalar Lipschitz observable for the two-point probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PointFunction {
    #[default]
    Identity,
    Abs,
    Tanh,
}

impl PointFunction {
    pub fn apply(&self, v: f64) -> f64 {
        match self {
            Self::Identity => v,
            Self::Abs => v.abs(),
            Self::Tanh => v.tanh(),
        }
    }
}

fn default_f_offset() -> f64 {
    1.0
}

fn default_f_amplitude() -> f64 {
    0.5
}

/// `𝒢_r(σσᵀ∘u_s)(z)` and `𝒢_r[(σ∘u_s)f](z)` with
/// `f(x) = offset + amplitude·cos(2πx₁/L)` (times the identity).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationSpec {
    pub s: f64,
    pub r: f64,
    pub z: [f64; 2],
    #[serde(default = "default_f_offset")]
    pub f_offset: f64,
    #[serde(default = "default_f_amplitude")]
    pub f_amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoPointSpec {
    pub s: f64,
    pub x: [f64; 2],
    pub y: [f64; 2],
    #[serde(default)]
    pub g: PointFunction,
}

/// Points `(t, x)` whose `|u_t(x)|` is recorded for the moment probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MomentSpec {
    pub times: Vec<f64>,
    pub points: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ProbeSpecs {
    #[serde(default)]
    pub concentration: Vec<ConcentrationSpec>,
    #[serde(default)]
    pub two_point: Vec<TwoPointSpec>,
    #[serde(default)]
    pub moments: MomentSpec,
}

/// Per-replica probe values, recorded on the first test-function row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Probes {
    pub concentration_h: Vec<f64>,
    pub concentration_j: Vec<f64>,
    pub two_point: Vec<[f64; 2]>,
    pub moment_points: Vec<f64>,
}

/// One NDJSON row: replica × test function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRecord {
    pub replica: u64,
    pub rho: f64,
    pub psi_id: String,
    pub phi_id: String,
    /// `γ⁻¹⟨ψ, u − ū⟩` in the test function's component.
    pub pairing: f64,
    /// `⟨φ, Ū⟩` in the partner's component.
    pub pairing_ew: f64,
    #[serde(rename = "qv_M")]
    pub qv_m: Vec<f64>,
    pub qv_cross: Vec<f64>,
    /// `γ⁻¹⟨ψ, 𝒯u − u⟩` when the mild tracker runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mild_gap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probes: Option<Probes>,
}

// ---------------------------------------------------------------------------
// plan and runner

/// Scheme and noise switches for an ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabOptions {
    pub scheme: Scheme,
    pub mild_tracker: bool,
    pub noise_refine: u32,
}

impl Default for LabOptions {
    fn default() -> Self {
        Self {
            scheme: Scheme::PostSmoothed,
            mild_tracker: false,
            noise_refine: 1,
        }
    }
}

struct PreparedTest {
    cap: CapTrajectory,
    partner: usize,
    /// `Ψᵈ_n` (empty past the support).
    integrand: Vec<Vec<f64>>,
    /// `𝒢_ρΨᵈ_n`.
    smoothed: Vec<Vec<f64>>,
}

struct PreparedConcentration {
    step: usize,
    kernel: Vec<f64>,
    f: Vec<f64>,
    target_h: f64,
    target_j: f64,
}

struct PreparedTwoPoint {
    step: usize,
    x: usize,
    y: usize,
    g: PointFunction,
    degenerate: bool,
}

/// Everything an ensemble needs that does not depend on the replica.
pub struct LabPlan {
    integ: Integrator,
    mean: MeanPath,
    limit: LimitPath,
    specs: Vec<TestFunctionSpec>,
    tests: Vec<PreparedTest>,
    probes: ProbeSpecs,
    concentration: Vec<PreparedConcentration>,
    two_point: Vec<PreparedTwoPoint>,
    moment_cells: Vec<(usize, usize)>,
    weights: Vec<f64>,
    opts: LabOptions,
}

impl std::fmt::Debug for LabPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LabPlan")
            .field("params", self.integ.params())
            .field("tests", &self.specs)
            .field("opts", &self.opts)
            .finish()
    }
}

fn weighted_sum(kernel: &[f64], f: impl Fn(usize) -> f64, cell_area: f64) -> f64 {
    kernel.iter().enumerate().map(|(c, k)| k * f(c)).sum::<f64>() * cell_area
}

impl LabPlan {
    pub fn new(
        integ: Integrator,
        tests: &[TestFunctionSpec],
        coeffs: &dyn LimitCoefficients,
        probes: ProbeSpecs,
        opts: LabOptions,
    ) -> Result<Self> {
        if tests.is_empty() {
            return Err(invalid("test_functions", "need at least one test function"));
        }
        if opts.mild_tracker && opts.noise_refine > 1 && opts.noise_refine % 2 == 1 {
            return Err(invalid("noise_refine", "must be even with the mild tracker"));
        }
        let p = integ.params().clone();
        let (grid, m, dt, n_steps) = (p.grid, p.m, p.dt, p.n_steps());
        let mean = integ.mean_path()?;
        let limit = LimitPath::new(&mean, coeffs)?;
        let spectral = integ.spectral();
        let smooth = spectral.heat_multiplier(p.rho);
        let mut scratch = spectral.scratch();
        let mut ids = std::collections::HashSet::new();
        for t in tests {
            if !ids.insert(t.id.as_str()) {
                return Err(invalid("test_functions", format!("duplicate id `{}`", t.id)));
            }
        }
        let mut prepared = Vec::with_capacity(tests.len());
        for t in tests {
            let partner = tests
                .iter()
                .position(|o| o.id == t.partner_id())
                .ok_or_else(|| invalid("test_functions", format!("`{}`: unknown partner `{}`", t.id, t.partner_id())))?;
            let cap = make_cap(t, spectral, dt, n_steps, m)?;
            let end = cap.support_end();
            let mut integrand = vec![Vec::new(); n_steps + 1];
            let mut smoothed = vec![Vec::new(); n_steps + 1];
            for n in 0..end.min(n_steps + 1) {
                let a = cap.integrand(n);
                let mut b = a.clone();
                spectral.apply_multiplier_real(&mut b, &smooth, &mut scratch);
                integrand[n] = a;
                smoothed[n] = b;
            }
            prepared.push(PreparedTest {
                cap,
                partner,
                integrand,
                smoothed,
            });
        }

        let cell_area = grid.cell_area();
        let mut concentration = Vec::new();
        for c in &probes.concentration {
            if !(c.r > 0.0) {
                return Err(invalid("concentration.r", "must be positive"));
            }
            let step = p.step_of(c.s)?;
            let kernel = wrapped_kernel_field(&grid, c.r, c.z)?.into_values();
            let n = grid.n();
            let f: Vec<f64> = (0..grid.cells())
                .map(|cell| c.f_offset + c.f_amplitude * (2.0 * PI * grid.coord(cell / n) / grid.side()).cos())
                .collect();
            let target_h = weighted_sum(&kernel, |cell| limit.h1[step][cell], cell_area);
            let target_j = weighted_sum(&kernel, |cell| limit.ew.jbar[step][cell] * f[cell], cell_area);
            concentration.push(PreparedConcentration {
                step,
                kernel,
                f,
                target_h,
                target_j,
            });
        }
        let n = grid.n();
        let cell_of = |x: [f64; 2]| grid.index_of(x[0]) * n + grid.index_of(x[1]);
        let mut two_point = Vec::new();
        for tp in &probes.two_point {
            let (x, y) = (cell_of(tp.x), cell_of(tp.y));
            two_point.push(PreparedTwoPoint {
                step: p.step_of(tp.s)?,
                x,
                y,
                g: tp.g,
                degenerate: x == y,
            });
        }
        let mut moment_cells = Vec::new();
        for t in &probes.moments.times {
            let step = p.step_of(*t)?;
            for x in &probes.moments.points {
                moment_cells.push((step, cell_of(*x)));
            }
        }
        Ok(Self {
            weights: trapezoid_weights(dt, n_steps),
            integ,
            mean,
            limit,
            specs: tests.to_vec(),
            tests: prepared,
            probes,
            concentration,
            two_point,
            moment_cells,
            opts,
        })
    }

    pub fn integrator(&self) -> &Integrator {
        &self.integ
    }

    pub fn mean_path(&self) -> &MeanPath {
        &self.mean
    }

    pub fn limit_path(&self) -> &LimitPath {
        &self.limit
    }

    pub fn test_functions(&self) -> &[TestFunctionSpec] {
        &self.specs
    }

    pub fn probe_specs(&self) -> &ProbeSpecs {
        &self.probes
    }

    pub fn options(&self) -> LabOptions {
        self.opts
    }

    pub fn cap(&self, i: usize) -> &CapTrajectory {
        &self.tests[i].cap
    }

    /// Limits for test function `i` and its partner.
    pub fn limits(&self, i: usize) -> Result<QvLimits> {
        let t = &self.tests[i];
        qv_limits(&t.cap, &self.tests[t.partner].cap, &self.limit, self.integ.params().grid.cell_area())
    }

    /// `c²∫∫(𝒢_ρΨᵈ)²` for constant `σ = c` in one component: the exact
    /// variance of the post-smoothed pairing.
    pub fn smoothed_energy(&self, i: usize) -> f64 {
        let t = &self.tests[i];
        let p = self.integ.params();
        spacetime_dot(&t.smoothed, &t.smoothed, p.dt, p.grid.cell_area())
    }

    /// `∫∫(𝒢_ρΨᵈ)Φᵈ` for test function `i` and its partner.
    pub fn smoothed_cross_energy(&self, i: usize) -> f64 {
        let t = &self.tests[i];
        let p = self.integ.params();
        spacetime_dot(&t.smoothed, &self.tests[t.partner].integrand, p.dt, p.grid.cell_area())
    }

    fn run_options(&self) -> RunOptions<'_> {
        RunOptions {
            scheme: self.opts.scheme,
            ew: Some(&self.limit.ew),
            ew_tilde: false,
            mild_tracker: self.opts.mild_tracker,
            noise_refine: self.opts.noise_refine,
        }
    }

    /// All rows of one replica, in test-function order.
    pub fn run_replica(&self, seed: u64, replica: u64) -> Result<Vec<EnsembleRecord>> {
        let mut obs = ReplicaObserver::new(self);
        self.integ
            .run_replica(&self.mean, &self.run_options(), seed, replica, &mut obs)?;
        Ok(obs.finish(replica))
    }

    /// Replicas `0..replicas` on a pool of `workers` threads; results are in
    /// replica order whatever the scheduling.
    pub fn run(&self, seed: u64, replicas: u64, workers: usize) -> Result<Ensemble> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| invalid("workers", e.to_string()))?;
        let rows = pool.install(|| {
            (0..replicas)
                .into_par_iter()
                .map(|r| self.run_replica(seed, r))
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(Ensemble { rows })
    }
}

struct ReplicaObserver<'a> {
    plan: &'a LabPlan,
    pairing: Vec<f64>,
    ew: Vec<f64>,
    qv: Vec<Vec<f64>>,
    cross: Vec<Vec<f64>>,
    mild: Vec<f64>,
    probes: Probes,
}

impl<'a> ReplicaObserver<'a> {
    fn new(plan: &'a LabPlan) -> Self {
        let k = plan.tests.len();
        let m = plan.integ.params().m;
        Self {
            plan,
            pairing: vec![0.0; k],
            ew: vec![0.0; k],
            qv: vec![vec![0.0; m * m]; k],
            cross: vec![vec![0.0; m * m]; k],
            mild: vec![0.0; k],
            probes: Probes {
                concentration_h: vec![0.0; plan.concentration.len()],
                concentration_j: vec![0.0; plan.concentration.len()],
                two_point: vec![[0.0; 2]; plan.two_point.len()],
                moment_points: vec![0.0; plan.moment_cells.len()],
            },
        }
    }

    fn finish(self, replica: u64) -> Vec<EnsembleRecord> {
        let plan = self.plan;
        let rho = plan.integ.params().rho;
        let mut probes = Some(self.probes);
        (0..plan.tests.len())
            .map(|i| EnsembleRecord {
                replica,
                rho,
                psi_id: plan.specs[i].id.clone(),
                phi_id: plan.specs[plan.tests[i].partner].id.clone(),
                pairing: self.pairing[i],
                pairing_ew: self.ew[i],
                qv_m: self.qv[i].clone(),
                qv_cross: self.cross[i].clone(),
                mild_gap: plan.opts.mild_tracker.then_some(self.mild[i]),
                probes: if i == 0 { probes.take() } else { None },
            })
            .collect()
    }
}

impl StepObserver for ReplicaObserver<'_> {
    fn observe(&mut self, v: &StepView<'_>) -> Result<()> {
        let plan = self.plan;
        let p = plan.integ.params();
        let (m, cells) = (p.m, p.grid.cells());
        let area = p.grid.cell_area();
        let n = v.step;
        let w = plan.weights[n];
        let gamma = p.gamma;
        let last = n == p.n_steps();

        for (i, t) in plan.tests.iter().enumerate() {
            let cap = &t.cap;
            let c = cap.component;
            let tn = cap.time_profile[n];
            if tn != 0.0 {
                let u = &v.u[c * cells..(c + 1) * cells];
                let ubar = v.mean.component(c);
                let s: f64 = cap.space.iter().zip(u).zip(ubar).map(|((s, a), b)| s * (a - b)).sum();
                self.pairing[i] += w * tn * s * area / gamma;
                if let Some(mild) = v.mild {
                    let tu = &mild[c * cells..(c + 1) * cells];
                    let r: f64 = cap.space.iter().zip(tu).zip(u).map(|((s, a), b)| s * (a - b)).sum();
                    self.mild[i] += w * tn * r * area / gamma;
                }
            }
            // the same function as partner φ of the EW pairing
            if let Some(hat) = v.ew_bar_hat {
                if tn != 0.0 && plan.tests.iter().any(|o| o.partner == i) {
                    let uh = &hat[c * cells..(c + 1) * cells];
                    let s = plan.integ.spectral().parseval_dot(&cap.space_hat, uh);
                    for (j, o) in plan.tests.iter().enumerate() {
                        if o.partner == i {
                            self.ew[j] += w * tn * s * area;
                        }
                    }
                }
            }
            if last || t.smoothed[n].is_empty() {
                continue;
            }
            let g = &t.smoothed[n];
            let phi = &plan.tests[t.partner].integrand[n];
            let jbar = &plan.limit.ew.jbar[n];
            for a in 0..m {
                for b in 0..m {
                    let mut sq = 0.0;
                    let mut cr = 0.0;
                    for cell in 0..cells {
                        let mut ss = 0.0;
                        let mut sj = 0.0;
                        for k in 0..m {
                            let sak = v.sigma_u[(a * m + k) * cells + cell];
                            ss += sak * v.sigma_u[(b * m + k) * cells + cell];
                            sj += sak * jbar[(b * m + k) * cells + cell];
                        }
                        let gc = g[cell];
                        sq += gc * gc * ss;
                        if !phi.is_empty() {
                            cr += gc * phi[cell] * sj;
                        }
                    }
                    self.qv[i][a * m + b] += sq * p.dt * area;
                    self.cross[i][a * m + b] += cr * p.dt * area;
                }
            }
        }

        for (k, c) in plan.concentration.iter().enumerate() {
            if c.step != n {
                continue;
            }
            let sig = v.sigma_u;
            self.probes.concentration_h[k] = weighted_sum(
                &c.kernel,
                |cell| (0..m).map(|j| sig[j * cells + cell].powi(2)).sum(),
                area,
            );
            self.probes.concentration_j[k] = weighted_sum(&c.kernel, |cell| sig[cell] * c.f[cell], area);
        }
        for (k, tp) in plan.two_point.iter().enumerate() {
            if tp.step == n {
                self.probes.two_point[k] = [tp.g.apply(v.u[tp.x]), tp.g.apply(v.u[tp.y])];
            }
        }
        for (k, (step, cell)) in plan.moment_cells.iter().enumerate() {
            if *step == n {
                self.probes.moment_points[k] = (0..m).map(|c| v.u[c * cells + cell].powi(2)).sum::<f64>().sqrt();
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// ensembles and summaries

/// Rows of every replica, in replica order.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub rows: Vec<Vec<EnsembleRecord>>,
}

impl Ensemble {
    pub fn replicas(&self) -> usize {
        self.rows.len()
    }

    /// Column of one per-test quantity.
    pub fn column(&self, test: usize, f: impl Fn(&EnsembleRecord) -> f64) -> Vec<f64> {
        self.rows.iter().map(|r| f(&r[test])).collect()
    }

    pub fn probes(&self) -> Vec<&Probes> {
        self.rows.iter().filter_map(|r| r[0].probes.as_ref()).collect()
    }

    /// NDJSON, one row per replica × test function.
    pub fn write_ndjson<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        for rows in &self.rows {
            for r in rows {
                serde_json::to_writer(&mut w, r)?;
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSummary {
    pub psi_id: String,
    pub phi_id: String,
    pub replicas: usize,
    pub mean_pairing: Estimate,
    pub var_pairing: Estimate,
    /// Ensemble mean of `[M]_t` (pairing component).
    pub mean_qv_m: Estimate,
    /// Mean of `(P − P̄)²·n/(n−1) − [M]_t`: zero under the Itô isometry.
    pub isometry: Estimate,
    pub n_limit: f64,
    pub nbar_limit: f64,
    pub n_nbar_limit: f64,
    /// `|Var(pairing) − [N]_t| / [N]_t`.
    pub var_gap: f64,
    pub gaussianity: Option<GaussianityReport>,
    pub cov_ew: Estimate,
    /// `|Cov(pairing, ⟨φ,Ū⟩) − [N,N̄]_t| / |[N,N̄]_t|`.
    pub cov_gap: f64,
    pub mean_qv_cross: Estimate,
    /// `|mean [M]_t − [N]_t|`.
    pub qv_gap: f64,
    /// `|mean [M,N̄]_t − [N,N̄]_t|`.
    pub qv_cross_gap: f64,
    /// `E|γ⁻¹⟨ψ, 𝒯u − u⟩|²` with the mild tracker.
    pub mild_gap: Option<Estimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationSummary {
    pub spec: ConcentrationSpec,
    pub mean_h: Estimate,
    pub var_h: Estimate,
    pub target_h: f64,
    pub distance_h: f64,
    pub mean_j: Estimate,
    pub var_j: Estimate,
    pub target_j: f64,
    pub distance_j: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoPointSummary {
    pub spec: TwoPointSpec,
    pub estimate: TwoPointEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub rho: f64,
    pub gamma: f64,
    pub dt: f64,
    pub replicas: usize,
    pub tests: Vec<TestSummary>,
    pub concentration: Vec<ConcentrationSummary>,
    pub two_point: Vec<TwoPointSummary>,
    pub moments: Option<MomentProbe>,
}

/// Ensemble variance with an exact zero for identical samples.
fn variance_or_zero(x: &[f64]) -> Estimate {
    if x.iter().all(|v| *v == x[0]) {
        Estimate::new(0.0, 0.0)
    } else {
        variance_estimate(x)
    }
}

/// Reduce an ensemble in replica order.
pub fn summarize(plan: &LabPlan, ens: &Ensemble) -> Result<EnsembleSummary> {
    let nrep = ens.replicas();
    if nrep < 2 {
        return Err(Error::InsufficientSamples("summaries need at least two replicas".into()));
    }
    let p = plan.integ.params();
    let m = p.m;
    let mut tests = Vec::new();
    for (i, t) in plan.tests.iter().enumerate() {
        let c = t.cap.component;
        let cp = plan.tests[t.partner].cap.component;
        let lim = plan.limits(i)?;
        let pairing = ens.column(i, |r| r.pairing);
        let ew = ens.column(i, |r| r.pairing_ew);
        let qv = ens.column(i, |r| r.qv_m[c * m + c]);
        let cross = ens.column(i, |r| r.qv_cross[c * m + cp]);
        let pbar = crate::stats::mean(&pairing);
        let nf = nrep as f64;
        let d: Vec<f64> = pairing
            .iter()
            .zip(&qv)
            .map(|(x, q)| (x - pbar).powi(2) * nf / (nf - 1.0) - q)
            .collect();
        let var = variance_or_zero(&pairing);
        let n_limit = lim.n.get(c, c);
        let n_nbar = lim.n_nbar.get(c, cp);
        let cov = covariance_estimate(&pairing, &ew);
        let mean_qv = mean_estimate(&qv);
        let mean_cross = mean_estimate(&cross);
        let gaussianity = if nrep >= MIN_GAUSSIANITY_SAMPLES && n_limit > 0.0 {
            Some(gaussianity_report(&pairing, n_limit)?)
        } else {
            None
        };
        let mild_gap = plan.opts.mild_tracker.then(|| {
            let sq: Vec<f64> = ens.column(i, |r| r.mild_gap.unwrap_or(0.0).powi(2));
            mean_estimate(&sq)
        });
        tests.push(TestSummary {
            psi_id: plan.specs[i].id.clone(),
            phi_id: plan.specs[t.partner].id.clone(),
            replicas: nrep,
            mean_pairing: mean_estimate(&pairing),
            var_pairing: var,
            mean_qv_m: mean_qv,
            isometry: mean_estimate(&d),
            n_limit,
            nbar_limit: lim.nbar.get(cp, cp),
            n_nbar_limit: n_nbar,
            var_gap: (var.value - n_limit).abs() / n_limit,
            gaussianity,
            cov_ew: cov,
            cov_gap: (cov.value - n_nbar).abs() / n_nbar.abs(),
            mean_qv_cross: mean_cross,
            qv_gap: (mean_qv.value - n_limit).abs(),
            qv_cross_gap: (mean_cross.value - n_nbar).abs(),
            mild_gap,
        });
    }

    let probes = ens.probes();
    let mut concentration = Vec::new();
    for (k, (spec, prep)) in plan.probes.concentration.iter().zip(&plan.concentration).enumerate() {
        let h: Vec<f64> = probes.iter().map(|p| p.concentration_h[k]).collect();
        let j: Vec<f64> = probes.iter().map(|p| p.concentration_j[k]).collect();
        let (mh, mj) = (mean_estimate(&h), mean_estimate(&j));
        concentration.push(ConcentrationSummary {
            spec: spec.clone(),
            mean_h: mh,
            var_h: variance_or_zero(&h),
            target_h: prep.target_h,
            distance_h: (mh.value - prep.target_h).abs(),
            mean_j: mj,
            var_j: variance_or_zero(&j),
            target_j: prep.target_j,
            distance_j: (mj.value - prep.target_j).abs(),
        });
    }
    let mut two_point = Vec::new();
    for (k, (spec, prep)) in plan.probes.two_point.iter().zip(&plan.two_point).enumerate() {
        let gx: Vec<f64> = probes.iter().map(|p| p.two_point[k][0]).collect();
        let gy: Vec<f64> = probes.iter().map(|p| p.two_point[k][1]).collect();
        two_point.push(TwoPointSummary {
            spec: spec.clone(),
            estimate: two_point_correlation(&gx, &gy, prep.degenerate)?,
        });
    }
    let moments = if plan.moment_cells.is_empty() || probes.len() < 128 {
        None
    } else {
        let cols: Vec<Vec<f64>> = (0..plan.moment_cells.len())
            .map(|k| probes.iter().map(|p| p.moment_points[k]).collect())
            .collect();
        Some(moment_probe(&cols, 4.0)?)
    };
    Ok(EnsembleSummary {
        rho: p.rho,
        gamma: p.gamma,
        dt: p.dt,
        replicas: nrep,
        tests,
        concentration,
        two_point,
        moments,
    })
}

/// `E|𝒯u_t − u_t|²` per cell at the final time, for the H2 sweep.
pub fn residual_profile(
    integ: &Integrator,
    scheme: Scheme,
    noise_refine: u32,
    seed: u64,
    replicas: u64,
    workers: usize,
) -> Result<Vec<f64>> {
    let mean = integ.mean_path()?;
    let opts = RunOptions {
        scheme,
        mild_tracker: true,
        noise_refine,
        ..Default::default()
    };
    let last = integ.params().n_steps();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| invalid("workers", e.to_string()))?;
    let per: Vec<Vec<f64>> = pool.install(|| {
        (0..replicas)
            .into_par_iter()
            .map(|r| {
                let mut out = Vec::new();
                let mut obs = |v: &StepView<'_>| -> Result<()> {
                    if v.step == last {
                        let mild = v.mild.expect("tracker on");
                        out = mild.iter().zip(v.u).map(|(a, b)| (a - b).powi(2)).collect();
                    }
                    Ok(())
                };
                integ.run_replica(&mean, &opts, seed, r, &mut obs)?;
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let len = per.first().map_or(0, Vec::len);
    let mut acc = vec![0.0; len];
    for r in &per {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= replicas.max(1) as f64);
    Ok(acc)
}
