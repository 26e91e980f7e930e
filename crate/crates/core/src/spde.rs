//! Exponential time stepping for the attenuated stochastic heat equation,
//! its deterministic mean field, the coupled Edwards–Wilkinson pair and the
//! mild-form residual trackers.
//!
//! Two noise conventions are supported:
//!
//! * post-smoothed: `u ← 𝒢_Δt u + γ_ρ 𝒢_{Δt+ρ}[σ(u)ΔW]`
//! * pre-smoothed:  `u ← 𝒢_Δt [u + γ_ρ σ(u) 𝒢_ρ ΔW]`
//!
//! Replica state is kept in spectral form between steps, so a post-smoothed
//! step costs one forward and one inverse transform per component.

use std::f64::consts::PI;
use std::io::{Read, Write};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::noise::{Channel, NoiseIncrement, NoiseStream};
use crate::sigma::SigmaSpec;
use crate::stats::{mean_estimate, Estimate};
use crate::torus::{Field, Spectral, SpectralScratch, TorusGrid};

fn check_rho(rho: f64) -> Result<()> {
    if !(rho.is_finite() && rho > 0.0) {
        return Err(invalid("rho", format!("must be positive, got {rho}")));
    }
    Ok(())
}

/// Attenuation `γ_ρ = (4π / log(1 + 1/ρ))^{1/2}`.
pub fn gamma_rho(rho: f64) -> Result<f64> {
    check_rho(rho)?;
    Ok((4.0 * PI / (1.0 / rho).ln_1p()).sqrt())
}

/// `𝖫(τ) = log(1 + τ)`.
pub fn log_scale(tau: f64) -> Result<f64> {
    if !(tau.is_finite() && tau > -1.0) {
        return Err(invalid("tau", format!("must exceed -1, got {tau}")));
    }
    Ok(tau.ln_1p())
}

/// `𝖲_ρ(τ) = 𝖫(τ/ρ) / 𝖫(1/ρ)`.
pub fn exponent_of_time(rho: f64, tau: f64) -> Result<f64> {
    check_rho(rho)?;
    if !(tau.is_finite() && tau >= 0.0) {
        return Err(invalid("tau", format!("must be >= 0, got {tau}")));
    }
    Ok((tau / rho).ln_1p() / (1.0 / rho).ln_1p())
}

/// `𝖳_ρ(q) = ρ[(1/ρ + 1)^q − 1]`, the inverse of [`exponent_of_time`].
pub fn time_of_exponent(rho: f64, q: f64) -> Result<f64> {
    check_rho(rho)?;
    if !(0.0..=1.0).contains(&q) {
        return Err(invalid("q", format!("must lie in [0, 1], got {q}")));
    }
    Ok(rho * (q * (1.0 / rho).ln_1p()).exp_m1())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleValues {
    /// `𝖲_ρ(τ)`
    pub exponent: f64,
    /// `𝖳_ρ(q)`
    pub time: f64,
    /// `𝖫(τ)`
    pub log: f64,
}

pub fn scale_functions(rho: f64, tau: f64, q: f64) -> Result<ScaleValues> {
    Ok(ScaleValues {
        exponent: exponent_of_time(rho, tau)?,
        time: time_of_exponent(rho, q)?,
        log: log_scale(tau)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    PostSmoothed,
    PreSmoothed,
}

/// Validated simulation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SimParams {
    pub grid: TorusGrid,
    pub rho: f64,
    pub dt: f64,
    pub t_max: f64,
    pub m: usize,
    pub gamma: f64,
    pub sigma: SigmaSpec,
    pub u0: Field,
}

impl SimParams {
    pub fn new(grid: TorusGrid, rho: f64, dt: f64, t_max: f64, sigma: SigmaSpec, u0: Field) -> Result<Self> {
        check_rho(rho)?;
        if !(dt.is_finite() && dt > 0.0) {
            return Err(invalid("dt", format!("must be positive, got {dt}")));
        }
        let tol = 1e-12;
        if dt > rho / 4.0 * (1.0 + tol) {
            return Err(invalid("dt", format!("need dt <= rho/4 = {}, got {dt}", rho / 4.0)));
        }
        if grid.dx() > rho.sqrt() / 2.0 * (1.0 + tol) {
            return Err(invalid("grid", format!("need dx <= sqrt(rho)/2 = {}, got {}", rho.sqrt() / 2.0, grid.dx())));
        }
        if !(t_max.is_finite() && t_max > 0.0) {
            return Err(invalid("t_max", format!("must be positive, got {t_max}")));
        }
        let steps = (t_max / dt).round();
        if (steps * dt - t_max).abs() > 1e-9 * t_max {
            return Err(invalid("dt", format!("must divide t_max = {t_max}")));
        }
        if u0.grid() != &grid {
            return Err(Error::Shape("initial field lives on a different grid".into()));
        }
        if u0.m() != sigma.m() {
            return Err(Error::Shape(format!("u0 has {} components, sigma expects {}", u0.m(), sigma.m())));
        }
        if !u0.is_finite() {
            return Err(Error::NonFinite("initial field".into()));
        }
        Ok(Self {
            grid,
            rho,
            dt,
            t_max,
            m: sigma.m(),
            gamma: gamma_rho(rho)?,
            sigma,
            u0,
        })
    }

    pub fn n_steps(&self) -> usize {
        (self.t_max / self.dt).round() as usize
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.dt
    }

    /// Step index of time `t`, which must be a step boundary.
    pub fn step_of(&self, t: f64) -> Result<usize> {
        let k = (t / self.dt).round();
        if !(0.0..=self.n_steps() as f64).contains(&k) || (k * self.dt - t).abs() > 1e-9 * self.dt.max(t) {
            return Err(invalid("t", format!("{t} is not a step boundary in [0, {}]", self.t_max)));
        }
        Ok(k as usize)
    }
}

/// `𝒢_t u₀`.
pub fn mean_field(u0: &Field, t: f64) -> Result<Field> {
    crate::torus::heat_propagate(u0, t)
}

/// Deterministic mean field `ū_n = 𝒢_{t_n} u₀` at every step boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanPath {
    pub fields: Vec<Field>,
}

impl MeanPath {
    /// Built by the integrator's own recursion `û ← û·𝒢_Δt`, so that a run
    /// with zero noise reproduces it bit for bit.
    pub fn new(p: &SimParams, spectral: &Spectral) -> Result<Self> {
        p.u0.ensure_finite("u0")?;
        let cells = p.grid.cells();
        let mult = spectral.heat_multiplier(p.dt);
        let mut scratch = spectral.scratch();
        let mut hat = vec![Complex64::new(0.0, 0.0); p.u0.values().len()];
        for (d, o) in p.u0.values().chunks(cells).zip(hat.chunks_mut(cells)) {
            spectral.forward_real(d, o, &mut scratch);
        }
        let mut fields = Vec::with_capacity(p.n_steps() + 1);
        fields.push(p.u0.clone());
        let mut out = vec![0.0; hat.len()];
        for _ in 0..p.n_steps() {
            for h in hat.chunks_mut(cells) {
                for (v, k) in h.iter_mut().zip(&mult) {
                    *v *= k;
                }
            }
            for (h, o) in hat.chunks(cells).zip(out.chunks_mut(cells)) {
                spectral.inverse_real(h, o, &mut scratch);
            }
            fields.push(Field::from_values(p.grid, p.m, out.clone())?);
        }
        Ok(Self { fields })
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    /// The `m`-vector `ū_n(cell)`.
    pub fn at(&self, step: usize, cell: usize) -> Vec<f64> {
        let f = &self.fields[step];
        (0..f.m()).map(|c| f.component(c)[cell]).collect()
    }
}

/// Coefficient fields `(J̄₁∘ū_n, J̃₁∘ū_n)` for every step, stored entry-major
/// with `m²` entries per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct EwCoefficients {
    pub m: usize,
    pub jbar: Vec<Vec<f64>>,
    pub jtilde: Vec<Vec<f64>>,
}

impl EwCoefficients {
    /// Evaluate `f(ū) -> (J̄₁, J̃₁)` cellwise along the mean path.
    pub fn from_mean(mean: &MeanPath, f: impl Fn(&[f64]) -> Result<(Vec<f64>, Vec<f64>)>) -> Result<Self> {
        let first = mean.fields.first().ok_or_else(|| Error::Missing("empty mean path".into()))?;
        let m = first.m();
        let mm = m * m;
        let cells = first.grid().cells();
        let mut jbar = Vec::with_capacity(mean.len());
        let mut jtilde = Vec::with_capacity(mean.len());
        let mut w = vec![0.0; m];
        for field in &mean.fields {
            let mut a = vec![0.0; mm * cells];
            let mut b = vec![0.0; mm * cells];
            for cell in 0..cells {
                for (c, wc) in w.iter_mut().enumerate() {
                    *wc = field.component(c)[cell];
                }
                let (jb, jt) = f(&w)?;
                if jb.len() != mm || jt.len() != mm {
                    return Err(Error::Shape("coefficient callback returned the wrong size".into()));
                }
                for e in 0..mm {
                    a[e * cells + cell] = jb[e];
                    b[e * cells + cell] = jt[e];
                }
            }
            jbar.push(a);
            jtilde.push(b);
        }
        Ok(Self { m, jbar, jtilde })
    }

    /// Same value at every cell and step.
    pub fn constant(m: usize, steps: usize, cells: usize, jbar: &[f64], jtilde: &[f64]) -> Self {
        let spread = |v: &[f64]| v.iter().flat_map(|x| std::iter::repeat(*x).take(cells)).collect::<Vec<_>>();
        Self {
            m,
            jbar: vec![spread(jbar); steps + 1],
            jtilde: vec![spread(jtilde); steps + 1],
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        let sc = |v: &Vec<Vec<f64>>| v.iter().map(|f| f.iter().map(|x| x * k).collect()).collect();
        Self {
            m: self.m,
            jbar: sc(&self.jbar),
            jtilde: sc(&self.jtilde),
        }
    }
}

/// Per-replica switches for [`Integrator::run_replica`].
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions<'a> {
    pub scheme: Scheme,
    /// Evolve `Ū` with these coefficients.
    pub ew: Option<&'a EwCoefficients>,
    /// Also evolve `Ũ` (draws the independent `W̃` channel).
    pub ew_tilde: bool,
    /// Track the refined mild operator `𝒯` alongside the trajectory. Noise
    /// is then drawn as two half-step pieces per step.
    pub mild_tracker: bool,
    /// Draw each increment as the sum of this many base increments (see
    /// [`NoiseStream::sample_refined_into`]); `0` and `1` mean no
    /// refinement. Must be even with the mild tracker, unless `<= 1`.
    pub noise_refine: u32,
}

/// What an observer sees at step boundary `n`, before the increment of
/// step `n` is applied.
pub struct StepView<'a> {
    pub step: usize,
    pub t: f64,
    pub grid: &'a TorusGrid,
    pub m: usize,
    pub u: &'a [f64],
    pub mean: &'a Field,
    /// `σ(u_n)`, entry-major, `m²` entries per cell.
    pub sigma_u: &'a [f64],
    /// `ΔW_n`, absent at the final boundary.
    pub noise: Option<&'a [f64]>,
    pub noise_tilde: Option<&'a [f64]>,
    /// The two half-step pieces of `ΔW_n` in split-noise mode.
    pub noise_halves: Option<(&'a [f64], &'a [f64])>,
    pub ew_bar_hat: Option<&'a [Complex64]>,
    pub ew_tilde_hat: Option<&'a [Complex64]>,
    /// `𝒯u` at this boundary when the mild tracker is on.
    pub mild: Option<&'a [f64]>,
    integ: &'a Integrator,
}

impl StepView<'_> {
    pub fn integrator(&self) -> &Integrator {
        self.integ
    }

    pub fn u_field(&self) -> Field {
        Field::from_values(*self.grid, self.m, self.u.to_vec()).expect("shape checked by the integrator")
    }

    pub fn ew_bar(&self) -> Option<Field> {
        self.ew_bar_hat.map(|h| self.integ.physical(h))
    }

    pub fn ew_tilde(&self) -> Option<Field> {
        self.ew_tilde_hat.map(|h| self.integ.physical(h))
    }
}

pub trait StepObserver {
    fn observe(&mut self, view: &StepView<'_>) -> Result<()>;
}

impl<F: FnMut(&StepView<'_>) -> Result<()>> StepObserver for F {
    fn observe(&mut self, view: &StepView<'_>) -> Result<()> {
        self(view)
    }
}

/// Observer that ignores everything.
pub struct NoObserver;

impl StepObserver for NoObserver {
    fn observe(&mut self, _: &StepView<'_>) -> Result<()> {
        Ok(())
    }
}

struct Multipliers {
    dt: Vec<f64>,
    dt_rho: Vec<f64>,
    rho: Vec<f64>,
    half: Vec<f64>,
    half_rho: Vec<f64>,
}

struct Work {
    scratch: SpectralScratch,
    hat: Vec<Complex64>,
    prod: Vec<f64>,
    smooth: Vec<f64>,
}

/// Precomputed transforms and multipliers for one [`SimParams`].
pub struct Integrator {
    params: SimParams,
    spectral: Spectral,
    mult: Multipliers,
}

impl std::fmt::Debug for Integrator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Integrator").field("params", &self.params).finish()
    }
}

impl Integrator {
    pub fn new(params: SimParams) -> Self {
        let spectral = Spectral::new(params.grid);
        let (dt, rho) = (params.dt, params.rho);
        let mult = Multipliers {
            dt: spectral.heat_multiplier(dt),
            dt_rho: spectral.heat_multiplier(dt + rho),
            rho: spectral.heat_multiplier(rho),
            half: spectral.heat_multiplier(0.5 * dt),
            half_rho: spectral.heat_multiplier(0.5 * dt + rho),
        };
        Self { params, spectral, mult }
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn spectral(&self) -> &Spectral {
        &self.spectral
    }

    pub fn mean_path(&self) -> Result<MeanPath> {
        MeanPath::new(&self.params, &self.spectral)
    }

    fn cells(&self) -> usize {
        self.params.grid.cells()
    }

    fn work(&self) -> Work {
        let len = self.params.m * self.cells();
        Work {
            scratch: self.spectral.scratch(),
            hat: vec![Complex64::new(0.0, 0.0); self.cells()],
            prod: vec![0.0; len],
            smooth: vec![0.0; len],
        }
    }

    /// Spectrum of an `m`-component physical array.
    pub fn spectrum(&self, data: &[f64]) -> Vec<Complex64> {
        let cells = self.cells();
        let mut out = vec![Complex64::new(0.0, 0.0); data.len()];
        let mut scratch = self.spectral.scratch();
        for (d, o) in data.chunks(cells).zip(out.chunks_mut(cells)) {
            self.spectral.forward_real(d, o, &mut scratch);
        }
        out
    }

    /// Physical field of an `m`-component spectrum.
    pub fn physical(&self, hat: &[Complex64]) -> Field {
        let cells = self.cells();
        let mut out = vec![0.0; hat.len()];
        let mut scratch = self.spectral.scratch();
        for (h, o) in hat.chunks(cells).zip(out.chunks_mut(cells)) {
            self.spectral.inverse_real(h, o, &mut scratch);
        }
        Field::from_values(self.params.grid, hat.len() / cells, out).expect("whole components")
    }

    /// `σ(u)` cellwise, entry-major.
    fn sigma_field(&self, u: &[f64], out: &mut [f64]) {
        let m = self.params.m;
        let mm = m * m;
        let cells = self.cells();
        let mut w = [0.0; 16];
        let mut s = [0.0; 256];
        assert!(m <= 16, "component count too large");
        for cell in 0..cells {
            for c in 0..m {
                w[c] = u[c * cells + cell];
            }
            self.params.sigma.evaluate_into(&w[..m], &mut s[..mm]);
            for e in 0..mm {
                out[e * cells + cell] = s[e];
            }
        }
    }

    /// `out = σ ξ` pointwise, with `σ` entry-major.
    fn sigma_times(&self, sig: &[f64], xi: &[f64], out: &mut [f64]) {
        let m = self.params.m;
        let cells = self.cells();
        if m == 1 {
            for ((o, s), x) in out.iter_mut().zip(sig).zip(xi) {
                *o = s * x;
            }
            return;
        }
        out.iter_mut().for_each(|v| *v = 0.0);
        for a in 0..m {
            for b in 0..m {
                let s = &sig[(a * m + b) * cells..(a * m + b + 1) * cells];
                let x = &xi[b * cells..(b + 1) * cells];
                let o = &mut out[a * cells..(a + 1) * cells];
                for ((o, s), x) in o.iter_mut().zip(s).zip(x) {
                    *o += s * x;
                }
            }
        }
    }

    /// `out = 𝒢_ρ ξ` componentwise.
    fn smooth_noise(&self, xi: &[f64], out: &mut [f64], w: &mut Work) {
        out.copy_from_slice(xi);
        for c in out.chunks_mut(self.cells()) {
            self.spectral.apply_multiplier_real(c, &self.mult.rho, &mut w.scratch);
        }
    }

    /// Advance `u_hat` by one step with increment `xi` (density convention),
    /// using `σ = sig`. With `half`, the step length is `Δt/2` (used for the
    /// non-anticipating continuation).
    fn advance(&self, scheme: Scheme, u_hat: &mut [Complex64], sig: &[f64], xi: &[f64], half: bool, w: &mut Work) {
        let cells = self.cells();
        let g = self.params.gamma;
        let (m_dt, m_dt_rho) = if half {
            (&self.mult.half, &self.mult.half_rho)
        } else {
            (&self.mult.dt, &self.mult.dt_rho)
        };
        let pre = scheme == Scheme::PreSmoothed && !self.params.sigma.is_constant();
        let mut prod = std::mem::take(&mut w.prod);
        if pre {
            let mut smooth = std::mem::take(&mut w.smooth);
            self.smooth_noise(xi, &mut smooth, w);
            self.sigma_times(sig, &smooth, &mut prod);
            w.smooth = smooth;
        } else {
            self.sigma_times(sig, xi, &mut prod);
        }
        for (c, uh) in u_hat.chunks_mut(cells).enumerate() {
            self.spectral.forward_real(&prod[c * cells..(c + 1) * cells], &mut w.hat, &mut w.scratch);
            if pre {
                for ((u, h), k) in uh.iter_mut().zip(&w.hat).zip(m_dt) {
                    *u = (*u + h * g) * k;
                }
            } else {
                for (((u, h), k), kr) in uh.iter_mut().zip(&w.hat).zip(m_dt).zip(m_dt_rho) {
                    *u = *u * k + h * g * kr;
                }
            }
        }
        w.prod = prod;
    }

    /// `hat ← (hat + 𝓕[coef·xi])·𝒢_Δt`, one component block at a time.
    fn advance_ew(&self, hat: &mut [Complex64], coef: &[f64], xi: &[f64], w: &mut Work) {
        let cells = self.cells();
        let mut prod = std::mem::take(&mut w.prod);
        self.sigma_times(coef, xi, &mut prod);
        for (c, uh) in hat.chunks_mut(cells).enumerate() {
            self.spectral.forward_real(&prod[c * cells..(c + 1) * cells], &mut w.hat, &mut w.scratch);
            for ((u, h), k) in uh.iter_mut().zip(&w.hat).zip(&self.mult.dt) {
                *u = (*u + h) * k;
            }
        }
        w.prod = prod;
    }

    fn to_physical(&self, hat: &[Complex64], out: &mut [f64], w: &mut Work) {
        let cells = self.cells();
        for (h, o) in hat.chunks(cells).zip(out.chunks_mut(cells)) {
            self.spectral.inverse_real(h, o, &mut w.scratch);
        }
    }

    fn check_field(&self, f: &Field) -> Result<()> {
        if f.grid() != &self.params.grid || f.m() != self.params.m {
            return Err(Error::Shape("field does not match the simulation grid".into()));
        }
        Ok(())
    }

    /// One step of either scheme on physical fields.
    pub fn step(&self, scheme: Scheme, u: &Field, dw: &NoiseIncrement) -> Result<Field> {
        self.check_field(u)?;
        self.check_field(&dw.field)?;
        if !u.is_finite() || !dw.field.is_finite() {
            return Err(Error::NonFinite("step input".into()));
        }
        if (dw.dt - self.params.dt).abs() > 1e-12 * self.params.dt {
            return Err(invalid("dt", "increment was drawn for a different step length"));
        }
        let mut w = self.work();
        let mut sig = vec![0.0; self.params.m * self.params.m * self.cells()];
        self.sigma_field(u.values(), &mut sig);
        let mut u_hat = self.spectrum(u.values());
        self.advance(scheme, &mut u_hat, &sig, dw.field.values(), false, &mut w);
        let out = self.physical(&u_hat);
        if !out.is_finite() {
            return Err(Error::BlowUp {
                step: 0,
                replica: 0,
                reason: "non-finite field after step".into(),
            });
        }
        Ok(out)
    }

    /// One step of the EW pair on physical fields; `coeffs` are `m²`-entry
    /// matrix fields (stored as fields with `m²` components).
    pub fn step_ew(
        &self,
        state: (&Field, &Field),
        dw: &NoiseIncrement,
        dw_tilde: &NoiseIncrement,
        coeffs: (&Field, &Field),
    ) -> Result<(Field, Field)> {
        for f in [state.0, state.1, &dw.field, &dw_tilde.field] {
            self.check_field(f)?;
        }
        let mm = self.params.m * self.params.m;
        if coeffs.0.m() != mm || coeffs.1.m() != mm {
            return Err(Error::Shape(format!("coefficient fields need {mm} entries")));
        }
        let mut w = self.work();
        let mut bar = self.spectrum(state.0.values());
        let mut tilde = self.spectrum(state.1.values());
        self.advance_ew(&mut bar, coeffs.0.values(), dw.field.values(), &mut w);
        self.advance_ew(&mut tilde, coeffs.1.values(), dw_tilde.field.values(), &mut w);
        Ok((self.physical(&bar), self.physical(&tilde)))
    }

    /// Run one replica from `u₀` to `t_max`, calling `obs` at every step
    /// boundary. Returns the final field.
    pub fn run_replica(
        &self,
        mean: &MeanPath,
        opts: &RunOptions<'_>,
        seed: u64,
        replica: u64,
        obs: &mut dyn StepObserver,
    ) -> Result<Field> {
        let p = &self.params;
        let n_steps = p.n_steps();
        if mean.len() != n_steps + 1 {
            return Err(Error::Shape("mean path length does not match the step count".into()));
        }
        if let Some(ew) = opts.ew {
            if ew.m != p.m || ew.jbar.len() != n_steps + 1 {
                return Err(Error::Shape("EW coefficients do not match the run".into()));
            }
        }
        let cells = self.cells();
        let len = p.m * cells;
        let mut w = self.work();
        let mut u = p.u0.values().to_vec();
        let mut u_hat = self.spectrum(&u);
        let mut sig = vec![0.0; p.m * p.m * cells];
        let mut noise = vec![0.0; len];
        let mut noise_a = vec![0.0; len];
        let mut noise_b = vec![0.0; len];
        let mut noise_t = vec![0.0; len];
        let mut noise_tmp = vec![0.0; len];
        let refine = opts.noise_refine.max(1);
        if opts.mild_tracker && refine > 1 && refine % 2 == 1 {
            return Err(invalid("noise_refine", "must be even when the mild tracker splits steps"));
        }
        let zero_hat = || vec![Complex64::new(0.0, 0.0); len];
        let mut bar_hat = opts.ew.map(|_| zero_hat());
        let mut tilde_hat = (opts.ew.is_some() && opts.ew_tilde).then(zero_hat);
        let mut mild_hat = opts.mild_tracker.then(|| u_hat.clone());
        let mut mild = opts.mild_tracker.then(|| u.clone());
        let mut half_hat = opts.mild_tracker.then(zero_hat);
        let mut half = vec![0.0; len];
        let mut sig_half = vec![0.0; sig.len()];
        let mut w_stream = NoiseStream::new(seed, replica, Channel::W);
        let mut t_stream = NoiseStream::new(seed, replica, Channel::WTilde);

        for n in 0..=n_steps {
            self.sigma_field(&u, &mut sig);
            let last = n == n_steps;
            if !last {
                if opts.mild_tracker {
                    if refine > 1 {
                        w_stream.sample_refined_split_into(p.dt, refine, &p.grid, p.m, &mut noise_a, &mut noise_b, &mut noise_tmp);
                    } else {
                        w_stream.sample_split_into(p.dt, &p.grid, p.m, &mut noise_a, &mut noise_b);
                    }
                    for ((o, a), b) in noise.iter_mut().zip(&noise_a).zip(&noise_b) {
                        *o = a + b;
                    }
                } else {
                    w_stream.sample_refined_into(p.dt, refine, &p.grid, p.m, &mut noise, &mut noise_tmp);
                }
                if tilde_hat.is_some() {
                    t_stream.sample_refined_into(p.dt, refine, &p.grid, p.m, &mut noise_t, &mut noise_tmp);
                }
            }
            obs.observe(&StepView {
                step: n,
                t: p.time(n),
                grid: &p.grid,
                m: p.m,
                u: &u,
                mean: &mean.fields[n],
                sigma_u: &sig,
                noise: (!last).then_some(&noise[..]),
                noise_tilde: (!last && tilde_hat.is_some()).then_some(&noise_t[..]),
                noise_halves: (!last && opts.mild_tracker).then_some((&noise_a[..], &noise_b[..])),
                ew_bar_hat: bar_hat.as_deref(),
                ew_tilde_hat: tilde_hat.as_deref(),
                mild: mild.as_deref(),
                integ: self,
            })?;
            if last {
                break;
            }
            if let (Some(mh), Some(hh)) = (mild_hat.as_mut(), half_hat.as_mut()) {
                // continuation over the first half step, then the refined
                // mild sum with the kernel held at t_n
                hh.copy_from_slice(&u_hat);
                self.advance(opts.scheme, hh, &sig, &noise_a, true, &mut w);
                self.to_physical(hh, &mut half, &mut w);
                self.sigma_field(&half, &mut sig_half);
                let mut prod = std::mem::take(&mut w.prod);
                let mut prod_b = std::mem::take(&mut w.smooth);
                self.sigma_times(&sig, &noise_a, &mut prod);
                self.sigma_times(&sig_half, &noise_b, &mut prod_b);
                for (a, b) in prod.iter_mut().zip(&prod_b) {
                    *a += b;
                }
                let g = p.gamma;
                for (c, mh) in mh.chunks_mut(cells).enumerate() {
                    self.spectral.forward_real(&prod[c * cells..(c + 1) * cells], &mut w.hat, &mut w.scratch);
                    for (((v, h), k), kr) in mh.iter_mut().zip(&w.hat).zip(&self.mult.dt).zip(&self.mult.dt_rho) {
                        *v = *v * k + h * g * kr;
                    }
                }
                w.prod = prod;
                w.smooth = prod_b;
            }
            self.advance(opts.scheme, &mut u_hat, &sig, &noise, false, &mut w);
            if let (Some(bh), Some(ew)) = (bar_hat.as_mut(), opts.ew) {
                self.advance_ew(bh, &ew.jbar[n], &noise, &mut w);
            }
            if let (Some(th), Some(ew)) = (tilde_hat.as_mut(), opts.ew) {
                self.advance_ew(th, &ew.jtilde[n], &noise_t, &mut w);
            }
            self.to_physical(&u_hat, &mut u, &mut w);
            if let (Some(mv), Some(mh)) = (mild.as_mut(), mild_hat.as_ref()) {
                self.to_physical(mh, mv, &mut w);
            }
            if let Some(bad) = u.iter().position(|v| !v.is_finite()) {
                return Err(Error::BlowUp {
                    step: n + 1,
                    replica,
                    reason: format!("non-finite value at cell {}", bad % cells),
                });
            }
        }
        Field::from_values(p.grid, p.m, u)
    }
}

/// Post-smoothed step `u_{n+1} = 𝒢_Δt u_n + γ_ρ 𝒢_{Δt+ρ}[σ(u_n)ΔW_n]`.
pub fn step_post_smoothed(u: &Field, dw: &NoiseIncrement, p: &SimParams) -> Result<Field> {
    Integrator::new(p.clone()).step(Scheme::PostSmoothed, u, dw)
}

/// Pre-smoothed step `u_{n+1} = 𝒢_Δt [u_n + γ_ρ σ(u_n) 𝒢_ρ ΔW_n]`.
pub fn step_pre_smoothed(u: &Field, dw: &NoiseIncrement, p: &SimParams) -> Result<Field> {
    Integrator::new(p.clone()).step(Scheme::PreSmoothed, u, dw)
}

/// `Ū ← 𝒢_Δt[Ū + J̄ ΔW]`, `Ũ ← 𝒢_Δt[Ũ + J̃ ΔW̃]`. No attenuation and no
/// ρ-smoothing.
pub fn step_ew_pair(
    state: (&Field, &Field),
    dw: &NoiseIncrement,
    dw_tilde: &NoiseIncrement,
    coeffs: (&Field, &Field),
    p: &SimParams,
) -> Result<(Field, Field)> {
    Integrator::new(p.clone()).step_ew(state, dw, dw_tilde, coeffs)
}

/// Pointwise variance of `∑_{j=1}^{N} 𝒢_{jΔt+offset}[ΔW]` for unit
/// coefficient: `Δt/L² ∑_j ∑_k exp(−|k|²(jΔt + offset))`. This is the exact
/// lattice value for the constant-coefficient schemes.
pub fn lattice_noise_variance(spectral: &Spectral, dt: f64, steps: usize, offset: f64) -> f64 {
    let area = spectral.grid().side().powi(2);
    let mut total = 0.0;
    for k2 in spectral.k2() {
        // geometric sum over j
        let r = (-k2 * dt).exp();
        let first = (-k2 * (dt + offset)).exp();
        let s = if r < 1.0 {
            first * (1.0 - r.powi(steps as i32)) / (1.0 - r)
        } else {
            steps as f64
        };
        total += s;
    }
    dt * total / area
}

/// Continuum value `(1/4π) log((t + s)/s)` of `∫₀ᵗ ∫ G_{t−r+s}² dx dr`.
pub fn continuum_noise_variance(t: f64, s: f64) -> f64 {
    ((t + s) / s).ln() / (4.0 * PI)
}

/// Stored samples of one replica.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub scheme: Scheme,
    pub seed: u64,
    pub replica: u64,
    pub steps: Vec<usize>,
    pub times: Vec<f64>,
    pub u: Vec<Field>,
    pub mean: Vec<Field>,
    pub ew_bar: Vec<Field>,
    pub ew_tilde: Vec<Field>,
    pub mild: Vec<Field>,
    pub history: Option<NoiseHistory>,
}

/// Every state `u_n` and both half-step noise pieces of every step.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseHistory {
    pub states: Vec<Vec<f64>>,
    pub first_half: Vec<Vec<f64>>,
    pub second_half: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn index_of_time(&self, t: f64) -> Result<usize> {
        self.times
            .iter()
            .position(|s| (s - t).abs() <= 1e-9 * t.abs().max(1.0))
            .ok_or_else(|| Error::Missing(format!("no stored sample at t = {t}")))
    }

    /// `U = Ū + Ũ` at sample `k`.
    pub fn ew_total(&self, k: usize) -> Result<Field> {
        let (a, b) = (
            self.ew_bar.get(k).ok_or_else(|| Error::Missing("EW component not recorded".into()))?,
            self.ew_tilde.get(k).ok_or_else(|| Error::Missing("EW fluctuation not recorded".into()))?,
        );
        let v = a.values().iter().zip(b.values()).map(|(x, y)| x + y).collect();
        Field::from_values(*a.grid(), a.m(), v)
    }
}

/// Run one replica and keep the fields at `sample_times`. With
/// `retain_history` (requires `opts.mild_tracker`) the full noise history is
/// kept for [`mild_residual`].
pub fn simulate_trajectory(
    integ: &Integrator,
    mean: &MeanPath,
    opts: &RunOptions<'_>,
    seed: u64,
    replica: u64,
    sample_times: &[f64],
    retain_history: bool,
) -> Result<Trajectory> {
    let p = integ.params();
    if retain_history && !opts.mild_tracker {
        return Err(invalid("retain_history", "needs the split-noise mode of the mild tracker"));
    }
    let mut steps = sample_times.iter().map(|t| p.step_of(*t)).collect::<Result<Vec<_>>>()?;
    steps.sort_unstable();
    steps.dedup();
    let mut traj = Trajectory {
        scheme: opts.scheme,
        seed,
        replica,
        times: steps.iter().map(|s| p.time(*s)).collect(),
        steps: steps.clone(),
        u: vec![],
        mean: vec![],
        ew_bar: vec![],
        ew_tilde: vec![],
        mild: vec![],
        history: retain_history.then(|| NoiseHistory {
            states: vec![],
            first_half: vec![],
            second_half: vec![],
        }),
    };
    let cells = p.grid.cells();
    let mut obs = |v: &StepView<'_>| -> Result<()> {
        if let Some(h) = traj.history.as_mut() {
            h.states.push(v.u.to_vec());
            if let Some((a, b)) = v.noise_halves {
                h.first_half.push(a.to_vec());
                h.second_half.push(b.to_vec());
            }
        }
        if steps.binary_search(&v.step).is_ok() {
            traj.u.push(v.u_field());
            traj.mean.push(v.mean.clone());
            if let Some(f) = v.ew_bar() {
                traj.ew_bar.push(f);
            }
            if let Some(f) = v.ew_tilde() {
                traj.ew_tilde.push(f);
            }
            if let Some(f) = v.mild {
                traj.mild.push(Field::from_values(p.grid, f.len() / cells, f.to_vec())?);
            }
        }
        Ok(())
    };
    integ.run_replica(mean, opts, seed, replica, &mut obs)?;
    Ok(traj)
}

/// `𝒯u_t − u_t` recomputed from the retained history, where
///
/// `𝒯u_t = 𝒢_t u₀ + γ_ρ ∑_n 𝒢_{t−t_n+ρ}[σ(u_n)ΔW_n' + σ(u_{n+½})ΔW_n'']`
///
/// with `ΔW'`, `ΔW''` the two half-step pieces and `u_{n+½}` the
/// non-anticipating continuation of `u_n` over the first half. For the
/// post-smoothed scheme this isolates the freezing of `σ` over a step; the
/// pre-smoothed scheme adds the smoothing gap.
pub fn mild_residual(traj: &Trajectory, integ: &Integrator, t: f64) -> Result<Field> {
    let p = integ.params();
    let hist = traj
        .history
        .as_ref()
        .ok_or_else(|| Error::Missing("trajectory was run without noise history".into()))?;
    let k = p.step_of(t)?;
    if hist.states.len() <= k || hist.first_half.len() < k {
        return Err(Error::Missing(format!("history ends before t = {t}")));
    }
    let cells = p.grid.cells();
    let len = p.m * cells;
    let mut w = integ.work();
    let mut a_hat = integ.spectrum(p.u0.values());
    let mut sig = vec![0.0; p.m * p.m * cells];
    let mut sig_half = sig.clone();
    let mut half = vec![0.0; len];
    let mut prod = vec![0.0; len];
    let mut prod_b = vec![0.0; len];
    for n in 0..k {
        let u_n = &hist.states[n];
        integ.sigma_field(u_n, &mut sig);
        let mut hh = integ.spectrum(u_n);
        integ.advance(traj.scheme, &mut hh, &sig, &hist.first_half[n], true, &mut w);
        integ.to_physical(&hh, &mut half, &mut w);
        integ.sigma_field(&half, &mut sig_half);
        integ.sigma_times(&sig, &hist.first_half[n], &mut prod);
        integ.sigma_times(&sig_half, &hist.second_half[n], &mut prod_b);
        for (a, b) in prod.iter_mut().zip(&prod_b) {
            *a += b;
        }
        for (c, ah) in a_hat.chunks_mut(cells).enumerate() {
            integ.spectral.forward_real(&prod[c * cells..(c + 1) * cells], &mut w.hat, &mut w.scratch);
            for (((v, h), kk), kr) in ah.iter_mut().zip(&w.hat).zip(&integ.mult.dt).zip(&integ.mult.dt_rho) {
                *v = *v * kk + h * p.gamma * kr;
            }
        }
    }
    let mut out = integ.physical(&a_hat);
    for (o, u) in out.values_mut().iter_mut().zip(&hist.states[k]) {
        *o -= u;
    }
    Ok(out)
}

/// Empirical `E|u|^ℓ` at each probed `(t, x)` and the supremum over probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentProbe {
    pub ell: f64,
    pub moments: Vec<Estimate>,
    pub sup: f64,
}

/// `samples[i]` holds the ensemble of `u` at probe `i`.
pub fn moment_probe(samples: &[Vec<f64>], ell: f64) -> Result<MomentProbe> {
    if !(ell.is_finite() && ell > 0.0) {
        return Err(invalid("ell", format!("must be positive, got {ell}")));
    }
    if samples.is_empty() {
        return Err(Error::InsufficientSamples("no probe points".into()));
    }
    let mut moments = Vec::with_capacity(samples.len());
    for s in samples {
        if s.len() < 128 {
            return Err(Error::InsufficientSamples(format!("moment probe needs >= 128 replicas, got {}", s.len())));
        }
        let powered: Vec<f64> = s.iter().map(|v| v.abs().powf(ell)).collect();
        moments.push(mean_estimate(&powered));
    }
    let sup = moments.iter().fold(f64::NEG_INFINITY, |a, e| a.max(e.value));
    Ok(MomentProbe { ell, moments, sup })
}

/// Header of a binary snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub n: u64,
    pub m: u64,
    pub t: f64,
    pub rho: f64,
    pub seed: u64,
    pub values: Vec<f64>,
}

/// Flat little-endian snapshot: `n, m` (u64), `t, ρ` (f64), `seed` (u64),
/// then the component-major row-major values.
pub fn write_snapshot<W: Write>(mut w: W, field: &Field, t: f64, rho: f64, seed: u64) -> Result<()> {
    w.write_all(&(field.grid().n() as u64).to_le_bytes())?;
    w.write_all(&(field.m() as u64).to_le_bytes())?;
    w.write_all(&t.to_le_bytes())?;
    w.write_all(&rho.to_le_bytes())?;
    w.write_all(&seed.to_le_bytes())?;
    for v in field.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_snapshot<R: Read>(mut r: R) -> Result<Snapshot> {
    let mut b = [0u8; 8];
    let mut next = |r: &mut R| -> Result<[u8; 8]> {
        r.read_exact(&mut b)?;
        Ok(b)
    };
    let n = u64::from_le_bytes(next(&mut r)?);
    let m = u64::from_le_bytes(next(&mut r)?);
    let t = f64::from_le_bytes(next(&mut r)?);
    let rho = f64::from_le_bytes(next(&mut r)?);
    let seed = u64::from_le_bytes(next(&mut r)?);
    let count = (n * n * m) as usize;
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        values.push(f64::from_le_bytes(next(&mut r)?));
    }
    Ok(Snapshot { n, m, t, rho, seed, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::variance_estimate;

    fn grid() -> TorusGrid {
        TorusGrid::new(4.0, 32).unwrap()
    }

    fn params(sigma: SigmaSpec, u0: Field, rho: f64, t: f64) -> SimParams {
        SimParams::new(*u0.grid(), rho, rho / 4.0, t, sigma, u0).unwrap()
    }

    fn bump(g: TorusGrid) -> Field {
        Field::from_fn(g, 1, |_, x, y| 1.0 + 0.5 * (std::f64::consts::TAU * x / 4.0).cos() * (-(y * y)).exp())
    }

    #[test]
    fn gamma_values() {
        // sqrt(4π / ln 2) evaluated independently
        assert!((gamma_rho(1.0).unwrap() - 4.257868077724905).abs() < 1e-12);
        for rho in [1e-3, 0.025, 0.3, 7.0] {
            let g = gamma_rho(rho).unwrap();
            assert!((g * g * (1.0 / rho).ln_1p() - 4.0 * PI).abs() < 1e-12);
        }
        assert!(gamma_rho(0.01).unwrap() < gamma_rho(0.1).unwrap());
        assert!(gamma_rho(0.0).is_err() && gamma_rho(-1.0).is_err());
    }

    #[test]
    fn scale_function_identities() {
        for rho in [1e-3, 1e-2, 1e-1] {
            assert!((time_of_exponent(rho, 1.0).unwrap() - 1.0).abs() < 1e-12);
            assert_eq!(time_of_exponent(rho, 0.0).unwrap(), 0.0);
            for k in 1..10 {
                let q = k as f64 / 10.0;
                let t = time_of_exponent(rho, q).unwrap();
                assert!((exponent_of_time(rho, t).unwrap() - q).abs() < 1e-12);
            }
        }
        let v = scale_functions(0.1, 2.0, 0.5).unwrap();
        assert!((v.log - 3f64.ln()).abs() < 1e-15);
        assert!(time_of_exponent(0.1, 1.5).is_err());
        assert!(exponent_of_time(0.1, -1.0).is_err());
    }

    #[test]
    fn parameter_invariants() {
        let g = grid();
        let u0 = Field::zeros(g, 1);
        let s = SigmaSpec::constant_scalar(1.0).unwrap();
        assert!(SimParams::new(g, 0.1, 0.03, 1.0, s.clone(), u0.clone()).is_err());
        // dx = 0.125 needs rho >= 0.0625
        assert!(SimParams::new(g, 0.05, 0.01, 1.0, s.clone(), u0.clone()).is_err());
        assert!(SimParams::new(g, 0.1, 0.025, 1.01, s.clone(), u0.clone()).is_err());
        let p = SimParams::new(g, 0.1, 0.025, 1.0, s, u0).unwrap();
        assert_eq!(p.n_steps(), 40);
        assert_eq!(p.step_of(0.5).unwrap(), 20);
        assert!(p.step_of(0.51).is_err());
        assert_eq!(p.gamma, gamma_rho(0.1).unwrap());
    }

    #[test]
    fn noise_free_steps_are_heat_steps() {
        let g = grid();
        let u0 = bump(g);
        let p = params(SigmaSpec::zero(1), u0.clone(), 0.1, 1.0);
        let dw = NoiseStream::new(3, 0, Channel::W).increment_at(0, p.dt, &g, 1).unwrap();
        let heat = crate::torus::heat_propagate(&u0, p.dt).unwrap();
        for f in [step_post_smoothed, step_pre_smoothed] {
            assert!(f(&u0, &dw, &p).unwrap().max_abs_diff(&heat) < 1e-12);
        }
        // zero increment with nonzero σ
        let p = params(SigmaSpec::abs_linear(1, 0.5).unwrap(), u0.clone(), 0.1, 1.0);
        let zero = NoiseIncrement {
            field: Field::zeros(g, 1),
            dt: p.dt,
        };
        assert!(step_post_smoothed(&u0, &zero, &p).unwrap().max_abs_diff(&heat) < 1e-10);
        assert!(step_pre_smoothed(&u0, &zero, &p).unwrap().max_abs_diff(&heat) < 1e-10);
    }

    #[test]
    fn constant_sigma_pre_equals_post_bitwise() {
        let g = grid();
        let u0 = bump(g);
        let p = params(SigmaSpec::constant_scalar(0.7).unwrap(), u0.clone(), 0.1, 1.0);
        let dw = NoiseStream::new(5, 2, Channel::W).increment_at(4, p.dt, &g, 1).unwrap();
        let a = step_post_smoothed(&u0, &dw, &p).unwrap();
        let b = step_pre_smoothed(&u0, &dw, &p).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn whole_runs_without_noise_reproduce_heat_flow() {
        let g = grid();
        let u0 = bump(g);
        let p = params(SigmaSpec::zero(1), u0.clone(), 0.1, 1.0);
        let integ = Integrator::new(p.clone());
        let mean = integ.mean_path().unwrap();
        let ew = EwCoefficients::constant(1, p.n_steps(), g.cells(), &[0.0], &[0.0]);
        let heat = crate::torus::heat_propagate(&u0, 1.0).unwrap();
        for scheme in [Scheme::PostSmoothed, Scheme::PreSmoothed] {
            let opts = RunOptions {
                scheme,
                ew: Some(&ew),
                ew_tilde: true,
                mild_tracker: true,
                noise_refine: 2,
            };
            let out = integ.run_replica(&mean, &opts, 1, 0, &mut NoObserver).unwrap();
            assert!(out.max_abs_diff(&heat) < 1e-10);
        }
        assert!(mean.fields[40].max_abs_diff(&heat) < 1e-14);
        assert!((mean_field(&u0, 1.0).unwrap().mean(0) - u0.mean(0)).abs() < 1e-12);
    }

    fn ensemble_at(integ: &Integrator, opts: &RunOptions<'_>, reps: u64, cells: &[usize]) -> Vec<Vec<f64>> {
        let mean = integ.mean_path().unwrap();
        let mut out = vec![Vec::new(); cells.len()];
        for r in 0..reps {
            let f = integ.run_replica(&mean, opts, 11, r, &mut NoObserver).unwrap();
            for (o, c) in out.iter_mut().zip(cells) {
                o.push(f.values()[*c]);
            }
        }
        out
    }

    #[test]
    fn constant_sigma_variance() {
        let g = grid();
        let c = 0.8;
        let (rho, t) = (0.1, 0.5);
        let p = params(SigmaSpec::constant_scalar(c).unwrap(), Field::zeros(g, 1), rho, t);
        let integ = Integrator::new(p.clone());
        let lattice = p.gamma.powi(2) * c * c * lattice_noise_variance(integ.spectral(), p.dt, p.n_steps(), rho);
        let continuum = p.gamma.powi(2) * c * c * continuum_noise_variance(t, rho);
        // quadrature check of the lattice sum against the continuum integral
        assert!((lattice / continuum - 1.0).abs() < 0.1, "{lattice} {continuum}");
        let samples = ensemble_at(&integ, &RunOptions::default(), 512, &[0, 17 * 32 + 5, 600]);
        for s in &samples {
            let v = variance_estimate(s);
            assert!(v.within(lattice, 5.0), "{v:?} vs {lattice}");
            assert!(v.within(continuum, 5.0), "{v:?} vs {continuum}");
        }
    }

    #[test]
    fn ew_pair_variances_and_independence() {
        let g = grid();
        let (cb, ct) = (0.6, 0.9);
        let p = params(SigmaSpec::constant_scalar(1.0).unwrap(), Field::zeros(g, 1), 0.1, 0.5);
        let integ = Integrator::new(p.clone());
        let mean = integ.mean_path().unwrap();
        let ew = EwCoefficients::constant(1, p.n_steps(), g.cells(), &[cb], &[ct]);
        let opts = RunOptions {
            ew: Some(&ew),
            ew_tilde: true,
            ..Default::default()
        };
        let lat = lattice_noise_variance(integ.spectral(), p.dt, p.n_steps(), 0.0);
        let cell = 300;
        let (mut bar, mut tilde, mut total) = (vec![], vec![], vec![]);
        for r in 0..512 {
            let traj = simulate_trajectory(&integ, &mean, &opts, 4, r, &[0.5], false).unwrap();
            let (a, b) = (traj.ew_bar[0].values()[cell], traj.ew_tilde[0].values()[cell]);
            bar.push(a);
            tilde.push(b);
            total.push(traj.ew_total(0).unwrap().values()[cell]);
        }
        let (vb, vt, vu) = (variance_estimate(&bar), variance_estimate(&tilde), variance_estimate(&total));
        assert!(vb.within(cb * cb * lat, 5.0), "{vb:?} {}", cb * cb * lat);
        assert!(vt.within(ct * ct * lat, 5.0), "{vt:?} {}", ct * ct * lat);
        assert!(vu.within(vb.value + vt.value, 5.0), "{vu:?}");
    }

    #[test]
    fn ew_pair_zero_fluctuation_and_linearity() {
        let g = grid();
        let p = params(SigmaSpec::constant_scalar(1.0).unwrap(), Field::zeros(g, 1), 0.1, 0.25);
        let integ = Integrator::new(p.clone());
        let mean = integ.mean_path().unwrap();
        let coef = EwCoefficients::from_mean(&mean, |_| Ok((vec![0.7], vec![0.0]))).unwrap();
        let run = |ew: &EwCoefficients| {
            let opts = RunOptions {
                ew: Some(ew),
                ew_tilde: true,
                ..Default::default()
            };
            simulate_trajectory(&integ, &mean, &opts, 9, 3, &[0.25], false).unwrap()
        };
        let a = run(&coef);
        assert!(a.ew_tilde[0].values().iter().all(|v| *v == 0.0));
        let coef = EwCoefficients::constant(1, p.n_steps(), g.cells(), &[0.7], &[0.3]);
        let (a, b) = (run(&coef), run(&coef.scaled(2.0)));
        for (x, y) in a.ew_bar[0].values().iter().zip(b.ew_bar[0].values()) {
            assert_eq!(2.0 * x, *y);
        }
        for (x, y) in a.ew_tilde[0].values().iter().zip(b.ew_tilde[0].values()) {
            assert_eq!(2.0 * x, *y);
        }
        // single-step form
        let s = NoiseStream::new(1, 0, Channel::W).increment_at(0, p.dt, &g, 1).unwrap();
        let st = NoiseStream::new(1, 0, Channel::WTilde).increment_at(0, p.dt, &g, 1).unwrap();
        let u = bump(g);
        let (c1, c2) = (Field::constant(g, 1, 0.4), Field::constant(g, 1, 1.1));
        let (x1, x2) = step_ew_pair((&u, &u), &s, &st, (&c1, &c2), &p).unwrap();
        let u2 = Field::from_values(g, 1, u.values().iter().map(|v| 2.0 * v).collect()).unwrap();
        let (d1, d2) = (Field::constant(g, 1, 0.8), Field::constant(g, 1, 2.2));
        let (y1, y2) = step_ew_pair((&u2, &u2), &s, &st, (&d1, &d2), &p).unwrap();
        assert!(x1.values().iter().zip(y1.values()).all(|(a, b)| 2.0 * a == *b));
        assert!(x2.values().iter().zip(y2.values()).all(|(a, b)| 2.0 * a == *b));
    }

    #[test]
    fn noise_channels_are_consumed_as_logged() {
        let g = grid();
        let p = params(SigmaSpec::abs_linear(1, 0.5).unwrap(), bump(g), 0.1, 0.25);
        let integ = Integrator::new(p.clone());
        let mean = integ.mean_path().unwrap();
        let ew = EwCoefficients::constant(1, p.n_steps(), g.cells(), &[0.5], &[0.5]);
        let mut log_w = vec![];
        let mut log_t = vec![];
        let mut states = vec![];
        let mut obs = |v: &StepView<'_>| -> Result<()> {
            if let Some(n) = v.noise {
                log_w.push(n.to_vec());
            }
            if let Some(n) = v.noise_tilde {
                log_t.push(n.to_vec());
            }
            states.push(v.u.to_vec());
            Ok(())
        };
        let opts = RunOptions {
            ew: Some(&ew),
            ew_tilde: true,
            ..Default::default()
        };
        integ.run_replica(&mean, &opts, 21, 6, &mut obs).unwrap();
        let (sw, st) = (NoiseStream::new(21, 6, Channel::W), NoiseStream::new(21, 6, Channel::WTilde));
        for (n, (a, b)) in log_w.iter().zip(&log_t).enumerate() {
            assert_eq!(a, sw.increment_at(n as u64, p.dt, &g, 1).unwrap().field.values());
            assert_eq!(b, st.increment_at(n as u64, p.dt, &g, 1).unwrap().field.values());
        }
        assert_eq!(log_w.len(), p.n_steps());
        // the EW pair does not perturb u
        let mut plain = vec![];
        let mut obs = |v: &StepView<'_>| -> Result<()> {
            plain.push(v.u.to_vec());
            Ok(())
        };
        integ.run_replica(&mean, &RunOptions::default(), 21, 6, &mut obs).unwrap();
        assert_eq!(plain, states);
    }

    #[test]
    fn mean_field_is_the_ensemble_mean() {
        let g = grid();
        let p = params(SigmaSpec::abs_linear(1, 0.5).unwrap(), bump(g), 0.1, 0.5);
        let integ = Integrator::new(p.clone());
        let ubar = mean_field(&p.u0, 0.5).unwrap();
        let cells = [0, 100, 529];
        let samples = ensemble_at(&integ, &RunOptions::default(), 256, &cells);
        for (s, c) in samples.iter().zip(cells) {
            assert!(mean_estimate(s).within(ubar.values()[c], 5.0));
        }
    }

    #[test]
    fn mild_residual_vanishes_for_constant_sigma() {
        let g = grid();
        let p = params(SigmaSpec::constant_scalar(1.3).unwrap(), bump(g), 0.1, 0.5);
        let integ = Integrator::new(p.clone());
        let mean = integ.mean_path().unwrap();
        let opts = RunOptions {
            mild_tracker: true,
            ..Default::default()
        };
        let traj = simulate_trajectory(&integ, &mean, &opts, 2, 0, &[0.25, 0.5], true).unwrap();
        for t in [0.25, 0.5] {
            assert!(mild_residual(&traj, &integ, t).unwrap().max_abs() < 1e-10);
        }
        let no_hist = simulate_trajectory(&integ, &mean, &opts, 2, 0, &[0.5], false).unwrap();
        assert!(matches!(mild_residual(&no_hist, &integ, 0.5), Err(Error::Missing(_))));
    }

    #[test]
    fn streamed_and_recomputed_residuals_agree() {
        let g = grid();
        for scheme in [Scheme::PostSmoothed, Scheme::PreSmoothed] {
            let p = params(SigmaSpec::abs_linear(1, 0.5).unwrap(), bump(g), 0.1, 0.25);
            let integ = Integrator::new(p.clone());
            let mean = integ.mean_path().unwrap();
            let opts = RunOptions {
                scheme,
                mild_tracker: true,
                ..Default::default()
            };
            let traj = simulate_trajectory(&integ, &mean, &opts, 8, 1, &[0.25], true).unwrap();
            let offline = mild_residual(&traj, &integ, 0.25).unwrap();
            let streamed: Vec<f64> = traj.mild[0].values().iter().zip(traj.u[0].values()).map(|(a, b)| a - b).collect();
            let d = offline.values().iter().zip(&streamed).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
            assert!(d < 1e-12, "{d}");
            assert!(offline.max_abs() > 0.0);
        }
    }

    #[test]
    fn residual_shrinks_under_step_halving() {
        let g = grid();
        let rho = 0.1;
        let mut sups = vec![];
        for div in [4.0, 8.0, 16.0] {
            let p = SimParams::new(g, rho, rho / div, 0.5, SigmaSpec::abs_linear(1, 0.5).unwrap(), bump(g)).unwrap();
            let integ = Integrator::new(p);
            let mean = integ.mean_path().unwrap();
            let opts = RunOptions {
                mild_tracker: true,
                ..Default::default()
            };
            let mut acc = vec![0.0; g.cells()];
            let reps = 64;
            for r in 0..reps {
                let traj = simulate_trajectory(&integ, &mean, &opts, 13, r, &[0.5], false).unwrap();
                for ((a, m), u) in acc.iter_mut().zip(traj.mild[0].values()).zip(traj.u[0].values()) {
                    *a += (m - u).powi(2) / reps as f64;
                }
            }
            sups.push(acc.iter().fold(0.0f64, |a, v| a.max(*v)));
        }
        assert!(crate::stats::strictly_decreasing(&sups), "{sups:?}");
    }

    // pointwise E|u_pre − u_post|² at t = 1; the first rung moves by less
    // than one standard error
    #[test]
    fn pre_post_coupling_gap_shrinks_with_rho() {
        let g = TorusGrid::new(4.0, 64).unwrap();
        let mut gaps = vec![];
        for rho in [0.1, 0.05, 0.025] {
            let p = params(SigmaSpec::abs_linear(1, 0.5).unwrap(), bump(g), rho, 1.0);
            let integ = Integrator::new(p.clone());
            let mean = integ.mean_path().unwrap();
            let mut acc = 0.0;
            let reps = 300;
            for r in 0..reps {
                let post = integ.run_replica(&mean, &RunOptions::default(), 17, r, &mut NoObserver).unwrap();
                let opts = RunOptions {
                    scheme: Scheme::PreSmoothed,
                    ..Default::default()
                };
                let pre = integ.run_replica(&mean, &opts, 17, r, &mut NoObserver).unwrap();
                let d: f64 = post.values().iter().zip(pre.values()).map(|(a, b)| (a - b).powi(2)).sum();
                acc += d / g.cells() as f64 / reps as f64;
            }
            gaps.push(acc);
        }
        assert!(crate::stats::strictly_decreasing(&gaps), "{gaps:?}");
    }

    #[test]
    fn moment_probe_oracles() {
        let g = grid();
        let c = 0.5;
        let p = params(SigmaSpec::constant_scalar(c).unwrap(), Field::zeros(g, 1), 0.1, 0.5);
        let integ = Integrator::new(p.clone());
        let var = p.gamma.powi(2) * c * c * lattice_noise_variance(integ.spectral(), p.dt, p.n_steps(), p.rho);
        let samples = ensemble_at(&integ, &RunOptions::default(), 256, &[0, 400]);
        let probe = moment_probe(&samples, 4.0).unwrap();
        for e in &probe.moments {
            assert!(e.within(3.0 * var * var, 5.0), "{e:?} {}", 3.0 * var * var);
        }
        // σ ≡ 0: the probe is |ū|⁴
        let p = params(SigmaSpec::zero(1), bump(g), 0.1, 0.5);
        let integ = Integrator::new(p.clone());
        let samples = ensemble_at(&integ, &RunOptions::default(), 128, &[7]);
        let ubar = mean_field(&p.u0, 0.5).unwrap().values()[7];
        let probe = moment_probe(&samples, 4.0).unwrap();
        assert!((probe.sup - ubar.powi(4)).abs() < 1e-10);
        assert!(moment_probe(&[vec![1.0; 100]], 4.0).is_err());
    }

    #[test]
    fn blow_up_reports_the_step() {
        let g = grid();
        let p = params(SigmaSpec::abs_linear(1, 1e200).unwrap(), Field::constant(g, 1, 1e200), 0.1, 0.25);
        let integ = Integrator::new(p);
        let mean = integ.mean_path().unwrap();
        let err = integ.run_replica(&mean, &RunOptions::default(), 0, 7, &mut NoObserver).unwrap_err();
        assert!(matches!(err, Error::BlowUp { step: 1, replica: 7, .. }), "{err}");
    }

    #[test]
    fn snapshot_round_trip() {
        let g = grid();
        let f = bump(g);
        let mut buf = Vec::new();
        write_snapshot(&mut buf, &f, 0.5, 0.1, 42).unwrap();
        assert_eq!(buf.len(), 40 + 8 * g.cells());
        assert_eq!(&buf[..8], &32u64.to_le_bytes());
        let s = read_snapshot(&buf[..]).unwrap();
        assert_eq!((s.n, s.m, s.t, s.rho, s.seed), (32, 1, 0.5, 0.1, 42));
        assert_eq!(s.values, f.values());
    }
}
