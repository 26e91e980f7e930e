//! Periodic square torus, lattice fields, and the spectral heat semigroup.
//!
//! Grid points sit at `x_i = (i - n/2)·Δx`, so the fundamental domain is
//! `[-L/2, L/2)²` and the origin is a grid point. All heat-kernel
//! convolutions are Fourier multipliers `exp(-|k|² s / 2)` over the dual
//! lattice `(2π/L)·ℤ²`, which is the exact periodization of the planar kernel.
//!
//! Transforms are unnormalized forward and normalized inverse. Spectral
//! buffers are stored transposed (`[k_y][k_x]`); every multiplier used here is
//! symmetric under that swap, so callers never see the difference.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TorusGrid {
    side: f64,
    n: usize,
}

impl TorusGrid {
    pub fn new(side: f64, n: usize) -> Result<Self> {
        if !(side.is_finite() && side > 0.0) {
            return Err(invalid("side", format!("must be positive, got {side}")));
        }
        if n < 8 || !n.is_power_of_two() {
            return Err(invalid("n", format!("must be a power of two >= 8, got {n}")));
        }
        Ok(Self { side, n })
    }

    /// Grid with a prescribed spacing; `side / dx` must be a power of two.
    pub fn with_spacing(side: f64, dx: f64) -> Result<Self> {
        let n = (side / dx).round();
        if ((n * dx) - side).abs() > 1e-12 * side {
            return Err(invalid("dx", format!("{dx} does not divide side {side}")));
        }
        Self::new(side, n as usize)
    }

    pub fn side(&self) -> f64 {
        self.side
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dx(&self) -> f64 {
        self.side / self.n as f64
    }

    pub fn cell_area(&self) -> f64 {
        let dx = self.dx();
        dx * dx
    }

    pub fn cells(&self) -> usize {
        self.n * self.n
    }

    /// Signed lattice coordinate of index `i`, centred so that index `n/2` is 0.
    pub fn lattice_coord(&self, i: usize) -> i64 {
        i as i64 - (self.n / 2) as i64
    }

    pub fn coord(&self, i: usize) -> f64 {
        self.lattice_coord(i) as f64 * self.dx()
    }

    /// Grid index nearest to the physical coordinate `x` (wrapped).
    pub fn index_of(&self, x: f64) -> usize {
        let k = (x / self.dx()).round() as i64 + (self.n / 2) as i64;
        k.rem_euclid(self.n as i64) as usize
    }

    /// Dual-lattice wavenumber of FFT index `i`.
    pub fn wavenumber(&self, i: usize) -> f64 {
        let n = self.n as i64;
        let f = if (i as i64) < n / 2 { i as i64 } else { i as i64 - n };
        2.0 * PI / self.side * f as f64
    }

    /// Shortest periodic displacement from `a` to `b` along one axis.
    pub fn wrap_delta(&self, a: f64, b: f64) -> f64 {
        let d = b - a;
        d - self.side * (d / self.side).round()
    }
}

/// An `m`-component real field on the torus, stored component-major then
/// row-major: `values[(c * n + i) * n + j]` is component `c` at `(x_i, y_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: TorusGrid,
    m: usize,
    values: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: TorusGrid, m: usize) -> Self {
        Self {
            grid,
            m,
            values: vec![0.0; m * grid.cells()],
        }
    }

    pub fn constant(grid: TorusGrid, m: usize, value: f64) -> Self {
        Self {
            grid,
            m,
            values: vec![value; m * grid.cells()],
        }
    }

    pub fn from_values(grid: TorusGrid, m: usize, values: Vec<f64>) -> Result<Self> {
        if m == 0 || values.len() != m * grid.cells() {
            return Err(Error::Shape(format!(
                "expected {} values for m={m}, got {}",
                m * grid.cells(),
                values.len()
            )));
        }
        Ok(Self { grid, m, values })
    }

    /// Field sampled from `f(component, x, y)` at grid points.
    pub fn from_fn(grid: TorusGrid, m: usize, f: impl Fn(usize, f64, f64) -> f64) -> Self {
        let n = grid.n();
        let mut values = Vec::with_capacity(m * n * n);
        for c in 0..m {
            for i in 0..n {
                let x = grid.coord(i);
                for j in 0..n {
                    values.push(f(c, x, grid.coord(j)));
                }
            }
        }
        Self { grid, m, values }
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn component(&self, c: usize) -> &[f64] {
        let len = self.grid.cells();
        &self.values[c * len..(c + 1) * len]
    }

    pub fn component_mut(&mut self, c: usize) -> &mut [f64] {
        let len = self.grid.cells();
        &mut self.values[c * len..(c + 1) * len]
    }

    pub fn at(&self, c: usize, i: usize, j: usize) -> f64 {
        let n = self.grid.n();
        self.values[(c * n + i) * n + j]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self, c: usize) -> f64 {
        let comp = self.component(c);
        comp.iter().sum::<f64>() / comp.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Field) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |acc, (a, b)| acc.max((a - b).abs()))
    }

    /// `∑ f·g Δx²` for component `c`.
    pub fn integral_against(&self, c: usize, weight: &[f64]) -> f64 {
        let comp = self.component(c);
        comp.iter().zip(weight).map(|(a, b)| a * b).sum::<f64>() * self.grid.cell_area()
    }

    /// Cyclic shift by whole cells: `out(i, j) = self(i - di, j - dj)`.
    pub fn shifted(&self, di: i64, dj: i64) -> Field {
        let n = self.grid.n() as i64;
        let mut out = Field::zeros(self.grid, self.m);
        for c in 0..self.m {
            let src = self.component(c);
            let dst = out.component_mut(c);
            for i in 0..n {
                let si = (i - di).rem_euclid(n);
                for j in 0..n {
                    let sj = (j - dj).rem_euclid(n);
                    dst[(i * n + j) as usize] = src[(si * n + sj) as usize];
                }
            }
        }
        out
    }

    pub(crate) fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatKernelSpec {
    pub s: f64,
}

impl HeatKernelSpec {
    pub fn new(s: f64) -> Result<Self> {
        if !(s.is_finite() && s >= 0.0) {
            return Err(invalid("s", format!("duration must be >= 0, got {s}")));
        }
        Ok(Self { s })
    }
}

/// Normalized indicator of the square `[-ξ/2, ξ/2]²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxMollifierSpec {
    pub xi: f64,
}

impl BoxMollifierSpec {
    pub fn new(xi: f64) -> Result<Self> {
        if !(xi.is_finite() && xi > 0.0) {
            return Err(invalid("xi", format!("side must be positive, got {xi}")));
        }
        Ok(Self { xi })
    }

    /// Number of cells per side; rejects non-integer `ξ/Δx`.
    pub fn cells(&self, grid: &TorusGrid) -> Result<usize> {
        let k = self.xi / grid.dx();
        let kr = k.round();
        if kr < 1.0 || (k - kr).abs() > 1e-9 * k.max(1.0) {
            return Err(invalid(
                "xi",
                format!("xi/dx = {k} is not a positive integer"),
            ));
        }
        if kr as usize > grid.n() {
            return Err(invalid("xi", "block wider than the torus"));
        }
        Ok(kr as usize)
    }
}

/// Planar heat kernel `(2πs)⁻¹ exp(-|x|²/2s)`.
pub fn kernel_eval(spec: HeatKernelSpec, x: [f64; 2]) -> Result<f64> {
    if spec.s <= 0.0 {
        return Err(invalid("s", "kernel needs s > 0"));
    }
    let r2 = x[0] * x[0] + x[1] * x[1];
    Ok((-r2 / (2.0 * spec.s)).exp() / (2.0 * PI * spec.s))
}

/// Periodized heat kernel on a torus of side `side`, summing image copies
/// until they fall below double precision.
pub fn kernel_eval_wrapped(spec: HeatKernelSpec, x: [f64; 2], side: f64) -> Result<f64> {
    if spec.s <= 0.0 {
        return Err(invalid("s", "kernel needs s > 0"));
    }
    Ok(wrapped_gauss_1d(spec.s, x[0], side) * wrapped_gauss_1d(spec.s, x[1], side))
}

/// One-dimensional periodized Gaussian density of variance `s`.
pub(crate) fn wrapped_gauss_1d(s: f64, x: f64, side: f64) -> f64 {
    let x = x - side * (x / side).round();
    let images = ((2.0 * s * 40.0).sqrt() / side).ceil() as i64 + 1;
    let norm = 1.0 / (2.0 * PI * s).sqrt();
    (-images..=images)
        .map(|j| {
            let y = x + j as f64 * side;
            (-y * y / (2.0 * s)).exp()
        })
        .sum::<f64>()
        * norm
}

/// Field holding the wrapped kernel `G_s(x - centre)` at every grid point.
pub fn wrapped_kernel_field(grid: &TorusGrid, s: f64, centre: [f64; 2]) -> Result<Field> {
    let spec = HeatKernelSpec::new(s)?;
    if spec.s == 0.0 {
        return Err(invalid("s", "kernel needs s > 0"));
    }
    let side = grid.side();
    let n = grid.n();
    let gx: Vec<f64> = (0..n)
        .map(|i| wrapped_gauss_1d(s, grid.coord(i) - centre[0], side))
        .collect();
    let gy: Vec<f64> = (0..n)
        .map(|j| wrapped_gauss_1d(s, grid.coord(j) - centre[1], side))
        .collect();
    let mut values = Vec::with_capacity(n * n);
    for a in &gx {
        for b in &gy {
            values.push(a * b);
        }
    }
    Field::from_values(*grid, 1, values)
}

/// FFT plans and wavenumbers for one grid. Cheap to clone and share.
#[derive(Clone)]
pub struct Spectral {
    grid: TorusGrid,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    k2: Arc<Vec<f64>>,
    scratch_len: usize,
}

impl std::fmt::Debug for Spectral {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Spectral").field("grid", &self.grid).finish()
    }
}

/// Per-worker scratch for [`Spectral`] transforms.
#[derive(Debug, Clone, Default)]
pub struct SpectralScratch {
    fft: Vec<Complex64>,
    buf: Vec<Complex64>,
}

impl Spectral {
    pub fn new(grid: TorusGrid) -> Self {
        let n = grid.n();
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let scratch_len = fwd
            .get_inplace_scratch_len()
            .max(inv.get_inplace_scratch_len());
        let mut k2 = vec![0.0; n * n];
        for a in 0..n {
            let ka = grid.wavenumber(a);
            for b in 0..n {
                let kb = grid.wavenumber(b);
                k2[a * n + b] = ka * ka + kb * kb;
            }
        }
        Self {
            grid,
            fwd,
            inv,
            k2: Arc::new(k2),
            scratch_len,
        }
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    /// `|k|²` in spectral layout.
    pub fn k2(&self) -> &[f64] {
        &self.k2
    }

    pub fn scratch(&self) -> SpectralScratch {
        SpectralScratch {
            fft: vec![Complex64::new(0.0, 0.0); self.scratch_len],
            buf: vec![Complex64::new(0.0, 0.0); self.grid.cells()],
        }
    }

    /// Heat multiplier `exp(-|k|² s / 2)` in spectral layout.
    pub fn heat_multiplier(&self, s: f64) -> Vec<f64> {
        self.k2.iter().map(|k2| (-0.5 * k2 * s).exp()).collect()
    }

    /// Laplacian symbol `-|k|²`.
    pub fn laplacian_multiplier(&self) -> Vec<f64> {
        self.k2.iter().map(|k2| -k2).collect()
    }

    fn check_scratch(&self, scratch: &mut SpectralScratch) {
        if scratch.fft.len() < self.scratch_len {
            scratch.fft.resize(self.scratch_len, Complex64::new(0.0, 0.0));
        }
        if scratch.buf.len() != self.grid.cells() {
            scratch.buf.resize(self.grid.cells(), Complex64::new(0.0, 0.0));
        }
    }

    /// Unnormalized forward transform in place (physical → spectral).
    pub fn forward(&self, data: &mut [Complex64], scratch: &mut SpectralScratch) {
        self.check_scratch(scratch);
        let n = self.grid.n();
        let s = &mut scratch.fft[..self.scratch_len];
        self.fwd.process_with_scratch(data, s);
        transpose_in_place(data, n);
        self.fwd.process_with_scratch(data, s);
    }

    /// Normalized inverse transform in place (spectral → physical).
    pub fn inverse(&self, data: &mut [Complex64], scratch: &mut SpectralScratch) {
        self.check_scratch(scratch);
        let n = self.grid.n();
        let s = &mut scratch.fft[..self.scratch_len];
        self.inv.process_with_scratch(data, s);
        transpose_in_place(data, n);
        self.inv.process_with_scratch(data, s);
        let norm = 1.0 / (n * n) as f64;
        for v in data.iter_mut() {
            *v *= norm;
        }
    }

    /// Forward transform of a real array into `out`.
    pub fn forward_real(&self, input: &[f64], out: &mut [Complex64], scratch: &mut SpectralScratch) {
        for (o, v) in out.iter_mut().zip(input) {
            *o = Complex64::new(*v, 0.0);
        }
        self.forward(out, scratch);
    }

    /// Inverse transform of `spec` writing the real part into `out`; `spec` is
    /// left untouched.
    pub fn inverse_real(&self, spec: &[Complex64], out: &mut [f64], scratch: &mut SpectralScratch) {
        self.check_scratch(scratch);
        let mut buf = std::mem::take(&mut scratch.buf);
        buf.copy_from_slice(spec);
        self.inverse(&mut buf, scratch);
        for (o, v) in out.iter_mut().zip(&buf) {
            *o = v.re;
        }
        scratch.buf = buf;
    }

    /// Apply a real spectral multiplier to a real array in place.
    pub fn apply_multiplier_real(&self, data: &mut [f64], mult: &[f64], scratch: &mut SpectralScratch) {
        self.check_scratch(scratch);
        let mut buf = std::mem::take(&mut scratch.buf);
        for (o, v) in buf.iter_mut().zip(data.iter()) {
            *o = Complex64::new(*v, 0.0);
        }
        self.forward(&mut buf, scratch);
        for (b, m) in buf.iter_mut().zip(mult) {
            *b *= *m;
        }
        self.inverse(&mut buf, scratch);
        for (o, v) in data.iter_mut().zip(&buf) {
            *o = v.re;
        }
        scratch.buf = buf;
    }

    /// `∑ₓ f(x) g(x)` for real `f`, `g` from their spectra (Parseval).
    pub fn parseval_dot(&self, f_hat: &[Complex64], g_hat: &[Complex64]) -> f64 {
        let s: f64 = f_hat
            .iter()
            .zip(g_hat)
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum();
        s / self.grid.cells() as f64
    }

    /// Heat semigroup applied to every component.
    pub fn heat_propagate(&self, f: &Field, s: f64) -> Result<Field> {
        if !(s.is_finite() && s >= 0.0) {
            return Err(invalid("s", format!("duration must be >= 0, got {s}")));
        }
        self.check_grid(f)?;
        f.ensure_finite("heat_propagate input")?;
        if s == 0.0 {
            return Ok(f.clone());
        }
        let mult = self.heat_multiplier(s);
        let mut out = f.clone();
        let mut scratch = self.scratch();
        for c in 0..f.m() {
            self.apply_multiplier_real(out.component_mut(c), &mult, &mut scratch);
        }
        Ok(out)
    }

    /// Spectral Laplacian of each component.
    pub fn laplacian(&self, f: &Field) -> Result<Field> {
        self.check_grid(f)?;
        let mult = self.laplacian_multiplier();
        let mut out = f.clone();
        let mut scratch = self.scratch();
        for c in 0..f.m() {
            self.apply_multiplier_real(out.component_mut(c), &mult, &mut scratch);
        }
        Ok(out)
    }

    fn check_grid(&self, f: &Field) -> Result<()> {
        if f.grid() != &self.grid {
            return Err(Error::Shape("field grid differs from transform grid".into()));
        }
        Ok(())
    }
}

fn transpose_in_place(data: &mut [Complex64], n: usize) {
    const BLOCK: usize = 16;
    for bi in (0..n).step_by(BLOCK) {
        for bj in (bi..n).step_by(BLOCK) {
            for i in bi..(bi + BLOCK).min(n) {
                let start = if bi == bj { i + 1 } else { bj };
                for j in start..(bj + BLOCK).min(n) {
                    data.swap(i * n + j, j * n + i);
                }
            }
        }
    }
}

/// Heat semigroup `𝒢_s f`. Builds transform plans per call; hold a
/// [`Spectral`] when propagating repeatedly.
pub fn heat_propagate(f: &Field, s: f64) -> Result<Field> {
    Spectral::new(*f.grid()).heat_propagate(f, s)
}

/// One-dimensional stencil (offset, weight) for a block of `k` cells. Even
/// blocks average the two half-cell-shifted stencils, giving `k + 1` taps with
/// half weight at the ends.
fn box_stencil(k: usize) -> Vec<(i64, f64)> {
    let w = 1.0 / k as f64;
    if k % 2 == 1 {
        let h = (k / 2) as i64;
        (-h..=h).map(|o| (o, w)).collect()
    } else {
        let h = (k / 2) as i64;
        (-h..=h)
            .map(|o| (o, if o.abs() == h { 0.5 * w } else { w }))
            .collect()
    }
}

fn convolve_1d_periodic(src: &[f64], dst: &mut [f64], stencil: &[(i64, f64)]) {
    let n = src.len() as i64;
    for i in 0..n {
        let mut acc = 0.0;
        for &(o, w) in stencil {
            acc += w * src[(i + o).rem_euclid(n) as usize];
        }
        dst[i as usize] = acc;
    }
}

/// Uniform average over the `(ξ/Δx)²` block centred on each cell.
pub fn box_smooth(f: &Field, spec: BoxMollifierSpec) -> Result<Field> {
    let grid = *f.grid();
    let k = spec.cells(&grid)?;
    if k == 1 {
        return Ok(f.clone());
    }
    let stencil = box_stencil(k);
    let n = grid.n();
    let mut out = f.clone();
    let mut row = vec![0.0; n];
    let mut col = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    for c in 0..f.m() {
        let data = out.component_mut(c);
        for i in 0..n {
            row.copy_from_slice(&data[i * n..(i + 1) * n]);
            convolve_1d_periodic(&row, &mut tmp, &stencil);
            data[i * n..(i + 1) * n].copy_from_slice(&tmp);
        }
        for j in 0..n {
            for i in 0..n {
                col[i] = data[i * n + j];
            }
            convolve_1d_periodic(&col, &mut tmp, &stencil);
            for i in 0..n {
                data[i * n + j] = tmp[i];
            }
        }
    }
    Ok(out)
}

/// Discrete `‖G_s * S_ξ − G_s‖_{L¹}` on `grid`.
///
/// Both the sampled wrapped kernel and the box stencil factor across the two
/// axes, so the 2D box smoothing is carried out as a pair of 1D convolutions
/// and the L¹ sum runs over the outer product. This equals
/// `box_smooth(wrapped_kernel_field(..))` summed cell by cell.
pub fn kernel_l1_gap(grid: &TorusGrid, s: f64, xi: f64) -> Result<f64> {
    if !(s.is_finite() && s > 0.0) {
        return Err(invalid("s", format!("must be positive, got {s}")));
    }
    let spec = BoxMollifierSpec::new(xi)?;
    if xi > s.sqrt() * (1.0 + 1e-12) {
        return Err(invalid("xi", format!("xi = {xi} exceeds sqrt(s) = {}", s.sqrt())));
    }
    let half = 0.5 * grid.side();
    if (-half * half / (2.0 * s)).exp() > 1e-12 {
        return Err(invalid(
            "grid",
            format!("torus side {} too small for s = {s}", grid.side()),
        ));
    }
    let k = spec.cells(grid)?;
    let n = grid.n();
    let g: Vec<f64> = (0..n)
        .map(|i| wrapped_gauss_1d(s, grid.coord(i), grid.side()))
        .collect();
    let mut a = vec![0.0; n];
    convolve_1d_periodic(&g, &mut a, &box_stencil(k));
    let mut total = 0.0;
    for i in 0..n {
        let (ai, gi) = (a[i], g[i]);
        let mut row = 0.0;
        for j in 0..n {
            row += (ai * a[j] - gi * g[j]).abs();
        }
        total += row;
    }
    Ok(total * grid.cell_area())
}

/// Observed constants `gap·s/ξ²` over a `(s, ξ)` sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelGapRow {
    pub s: f64,
    pub xi: f64,
    pub gap: f64,
    pub ratio: f64,
}

pub fn kernel_gap_sweep(grid: &TorusGrid, durations: &[f64], sides: &[f64]) -> Result<Vec<KernelGapRow>> {
    let mut rows = Vec::new();
    for &s in durations {
        for &xi in sides {
            let gap = kernel_l1_gap(grid, s, xi)?;
            rows.push(KernelGapRow {
                s,
                xi,
                gap,
                ratio: gap * s / (xi * xi),
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> TorusGrid {
        TorusGrid::new(8.0, 64).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(TorusGrid::new(8.0, 4).is_err());
        assert!(TorusGrid::new(8.0, 48).is_err());
        assert!(TorusGrid::new(-1.0, 64).is_err());
        let g = TorusGrid::new(16.0, 256).unwrap();
        assert_eq!(g.dx(), 16.0 / 256.0);
        assert_eq!(g.coord(128), 0.0);
        assert_eq!(g.index_of(0.0), 128);
        assert_eq!(TorusGrid::with_spacing(8.0, 0.0625).unwrap().n(), 128);
    }

    #[test]
    fn heat_zero_duration_is_identity() {
        let g = grid();
        let f = Field::from_fn(g, 1, |_, x, y| (x * 1.3).sin() + y * y * 0.01);
        let out = heat_propagate(&f, 0.0).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn heat_preserves_constants() {
        let g = grid();
        let f = Field::constant(g, 2, 3.25);
        let out = heat_propagate(&f, 0.7).unwrap();
        assert!(out.max_abs_diff(&f) < 1e-13);
    }

    #[test]
    fn heat_decays_fourier_mode() {
        let g = grid();
        let k = 2.0 * PI / g.side();
        let s = 0.83;
        let f = Field::from_fn(g, 1, |_, x, _| (k * x).cos());
        let out = heat_propagate(&f, s).unwrap();
        let expect = Field::from_fn(g, 1, |_, x, _| (k * x).cos() * (-k * k * s / 2.0).exp());
        assert!(out.max_abs_diff(&expect) < 1e-10);
    }

    #[test]
    fn heat_rejects_bad_input() {
        let g = grid();
        let f = Field::constant(g, 1, 1.0);
        assert!(heat_propagate(&f, -0.1).is_err());
        let mut bad = f.clone();
        bad.values_mut()[3] = f64::NAN;
        assert!(matches!(heat_propagate(&bad, 0.1), Err(Error::NonFinite(_))));
    }

    #[test]
    fn kernel_at_origin() {
        let v = kernel_eval(HeatKernelSpec::new(1.0).unwrap(), [0.0, 0.0]).unwrap();
        assert!((v - 1.0 / (2.0 * PI)).abs() < 1e-15);
        assert!((v - 0.159_154_9).abs() < 1e-7);
        assert!(kernel_eval(HeatKernelSpec::new(0.0).unwrap(), [0.0, 0.0]).is_err());
    }

    #[test]
    fn wrapped_kernel_normalized() {
        let g = grid();
        for s in [0.1, 0.5, 1.0, 3.0] {
            let k = wrapped_kernel_field(&g, s, [0.0, 0.0]).unwrap();
            let mass: f64 = k.values().iter().sum::<f64>() * g.cell_area();
            assert!((mass - 1.0).abs() < 1e-10, "s={s} mass={mass}");
        }
    }

    #[test]
    fn kernel_semigroup_on_grid() {
        let g = grid();
        let sp = Spectral::new(g);
        let (s, t) = (0.5, 0.3);
        let a = wrapped_kernel_field(&g, s, [0.0, 0.0]).unwrap();
        let b = wrapped_kernel_field(&g, t, [0.0, 0.0]).unwrap();
        let mut scratch = sp.scratch();
        let n2 = g.cells();
        let mut ah = vec![Complex64::new(0.0, 0.0); n2];
        let mut bh = vec![Complex64::new(0.0, 0.0); n2];
        sp.forward_real(a.values(), &mut ah, &mut scratch);
        sp.forward_real(b.values(), &mut bh, &mut scratch);
        // Both kernels are centred on the origin (index n/2), so the circular
        // convolution is centred on index n; undo with a half-period shift.
        let prod: Vec<Complex64> = ah.iter().zip(&bh).map(|(x, y)| x * y).collect();
        let mut conv = vec![0.0; n2];
        sp.inverse_real(&prod, &mut conv, &mut scratch);
        let conv = Field::from_values(g, 1, conv.iter().map(|v| v * g.cell_area()).collect())
            .unwrap()
            .shifted((g.n() / 2) as i64, (g.n() / 2) as i64);
        let c = wrapped_kernel_field(&g, s + t, [0.0, 0.0]).unwrap();
        assert!(conv.max_abs_diff(&c) < 1e-9);
    }

    #[test]
    fn box_smooth_identities() {
        let g = grid();
        let f = Field::constant(g, 1, 2.5);
        let spec = BoxMollifierSpec::new(4.0 * g.dx()).unwrap();
        assert!(box_smooth(&f, spec).unwrap().max_abs_diff(&f) < 1e-14);
        let h = Field::from_fn(g, 1, |_, x, y| x.sin() * y.cos());
        let one = BoxMollifierSpec::new(g.dx()).unwrap();
        assert_eq!(box_smooth(&h, one).unwrap(), h);
        assert!(box_smooth(&h, BoxMollifierSpec::new(1.5 * g.dx()).unwrap()).is_err());
    }

    #[test]
    fn box_smooth_spreads_delta_symmetrically() {
        let g = grid();
        let dx2 = g.cell_area();
        let c = g.n() / 2;
        let mut f = Field::zeros(g, 1);
        f.component_mut(0)[c * g.n() + c] = 1.0 / dx2;
        let out = box_smooth(&f, BoxMollifierSpec::new(4.0 * g.dx()).unwrap()).unwrap();
        let mass: f64 = out.values().iter().sum::<f64>() * dx2;
        assert!((mass - 1.0).abs() < 1e-13);
        let full = 1.0 / (16.0 * dx2);
        for di in -2i64..=2 {
            for dj in -2i64..=2 {
                let v = out.at(0, (c as i64 + di) as usize, (c as i64 + dj) as usize);
                let wi = if di.abs() == 2 { 0.5 } else { 1.0 };
                let wj = if dj.abs() == 2 { 0.5 } else { 1.0 };
                assert!((v - full * wi * wj).abs() < 1e-12 * full);
            }
        }
        assert_eq!(out.at(0, c + 3, c), 0.0);
    }

    #[test]
    fn box_smooth_commutes_with_shifts() {
        let g = grid();
        let f = Field::from_fn(g, 1, |_, x, y| (0.7 * x).sin() * (1.0 + 0.2 * y).cos() + 0.1 * x);
        for k in [2usize, 3, 4] {
            let spec = BoxMollifierSpec::new(k as f64 * g.dx()).unwrap();
            let a = box_smooth(&f.shifted(3, -5), spec).unwrap();
            let b = box_smooth(&f, spec).unwrap().shifted(3, -5);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn separable_gap_matches_2d_box_smoothing() {
        let g = TorusGrid::new(8.0, 128).unwrap();
        let (s, xi) = (0.25, 0.25);
        let k = wrapped_kernel_field(&g, s, [0.0, 0.0]).unwrap();
        let sm = box_smooth(&k, BoxMollifierSpec::new(xi).unwrap()).unwrap();
        let direct: f64 = sm
            .values()
            .iter()
            .zip(k.values())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * g.cell_area();
        let fast = kernel_l1_gap(&g, s, xi).unwrap();
        assert!((direct - fast).abs() < 1e-12 * direct.max(1e-300));
    }

    #[test]
    fn gap_vanishes_at_single_cell_and_grows() {
        let g = TorusGrid::new(16.0, 1024).unwrap();
        let dx = g.dx();
        assert_eq!(kernel_l1_gap(&g, 1.0, dx).unwrap(), 0.0);
        let gaps: Vec<f64> = [2.0, 4.0, 8.0, 16.0]
            .iter()
            .map(|k| kernel_l1_gap(&g, 1.0, k * dx).unwrap())
            .collect();
        assert!(gaps.windows(2).all(|w| w[0] < w[1]), "{gaps:?}");
        assert!(kernel_l1_gap(&g, 0.25, 0.6).is_err());
        assert!(kernel_l1_gap(&TorusGrid::new(4.0, 256).unwrap(), 1.0, 0.25).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn field() -> impl Strategy<Value = Field> {
            proptest::collection::vec(0.0f64..2.0, 64 * 64).prop_map(|v| Field::from_values(grid(), 1, v).unwrap())
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn heat_semigroup(f in field(), s in 0.0f64..4.0, t in 0.0f64..4.0) {
                let a = heat_propagate(&heat_propagate(&f, s).unwrap(), t).unwrap();
                let b = heat_propagate(&f, s + t).unwrap();
                prop_assert!(a.max_abs_diff(&b) < 1e-10);
            }

            #[test]
            fn heat_conserves_mass_and_sign(f in field(), s in 0.0f64..4.0) {
                let h = heat_propagate(&f, s).unwrap();
                prop_assert!((h.mean(0) - f.mean(0)).abs() < 1e-12);
                // below ~8Δx² the band-limited kernel rings negative
                if s >= 8.0 * grid().dx().powi(2) {
                    prop_assert!(h.values().iter().all(|v| *v >= -1e-12));
                }
            }

            #[test]
            fn box_smooth_shift_equivariant(f in field(), k in 1usize..6, di in -8i64..8, dj in -8i64..8) {
                let spec = BoxMollifierSpec::new(k as f64 * grid().dx()).unwrap();
                let a = box_smooth(&f.shifted(di, dj), spec).unwrap();
                let b = box_smooth(&f, spec).unwrap().shifted(di, dj);
                prop_assert_eq!(a, b);
            }
        }
    }
}
