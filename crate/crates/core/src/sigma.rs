//! Admissible nonlinearities `σ: ℝᵐ → PSD(m)` and the small amount of
//! symmetric-matrix algebra the rest of the crate needs.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::noise::ScalarStream;

/// Asymmetry tolerance relative to the largest entry.
const SYMMETRY_TOL: f64 = 1e-12;
/// Negative eigenvalues down to `-CLAMP_TOL·λ_max` are clamped to zero.
pub const CLAMP_TOL: f64 = 1e-10;

/// Symmetric positive-semidefinite `m×m` matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsdMatrix {
    m: usize,
    data: Vec<f64>,
}

impl PsdMatrix {
    /// Checks symmetry only; definiteness is checked where it matters
    /// (square roots, eigenvalue queries).
    pub fn new(m: usize, data: Vec<f64>) -> Result<Self> {
        if m == 0 || data.len() != m * m {
            return Err(Error::Shape(format!("need {} entries for m={m}", m * m)));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix entry".into()));
        }
        let a = Self { m, data };
        let asym = a.asymmetry();
        if asym > SYMMETRY_TOL * a.max_entry().max(1.0) {
            return Err(Error::NotSymmetric(asym));
        }
        Ok(a)
    }

    pub fn scalar(v: f64) -> Self {
        Self { m: 1, data: vec![v] }
    }

    pub fn identity(m: usize) -> Self {
        Self::scaled_identity(m, 1.0)
    }

    pub fn scaled_identity(m: usize, v: f64) -> Self {
        let mut data = vec![0.0; m * m];
        for i in 0..m {
            data[i * m + i] = v;
        }
        Self { m, data }
    }

    pub fn diag(values: &[f64]) -> Self {
        let m = values.len();
        let mut data = vec![0.0; m * m];
        for (i, v) in values.iter().enumerate() {
            data[i * m + i] = *v;
        }
        Self { m, data }
    }

    pub fn zeros(m: usize) -> Self {
        Self {
            m,
            data: vec![0.0; m * m],
        }
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.m + j]
    }

    fn max_entry(&self) -> f64 {
        self.data.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    pub fn asymmetry(&self) -> f64 {
        let m = self.m;
        let mut worst: f64 = 0.0;
        for i in 0..m {
            for j in (i + 1)..m {
                worst = worst.max((self.data[i * m + j] - self.data[j * m + i]).abs());
            }
        }
        worst
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.m).map(|i| self.data[i * self.m + i]).sum()
    }

    pub fn matmul(&self, other: &PsdMatrix) -> Vec<f64> {
        let m = self.m;
        let mut out = vec![0.0; m * m];
        for i in 0..m {
            for k in 0..m {
                let a = self.data[i * m + k];
                for j in 0..m {
                    out[i * m + j] += a * other.data[k * m + j];
                }
            }
        }
        out
    }

    /// `A²` (symmetric for symmetric `A`).
    pub fn square(&self) -> PsdMatrix {
        let mut sq = PsdMatrix {
            m: self.m,
            data: self.matmul(self),
        };
        sq.symmetrize();
        sq
    }

    pub fn symmetrize(&mut self) {
        let m = self.m;
        for i in 0..m {
            for j in (i + 1)..m {
                let v = 0.5 * (self.data[i * m + j] + self.data[j * m + i]);
                self.data[i * m + j] = v;
                self.data[j * m + i] = v;
            }
        }
    }

    pub fn mul_vec(&self, v: &[f64], out: &mut [f64]) {
        let m = self.m;
        for i in 0..m {
            out[i] = (0..m).map(|j| self.data[i * m + j] * v[j]).sum();
        }
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        if self.m == 1 {
            return vec![self.data[0]];
        }
        let mat = DMatrix::from_row_slice(self.m, self.m, &self.data);
        let mut ev: Vec<f64> = SymmetricEigen::new(mat).eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        ev
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues()[0]
    }

    pub fn sub(&self, other: &PsdMatrix) -> Vec<f64> {
        self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect()
    }
}

/// Unique PSD square root via symmetric eigendecomposition. Slightly negative
/// eigenvalues (relative size below [`CLAMP_TOL`]) are clamped to zero.
pub fn matrix_sqrt_psd(a: &PsdMatrix) -> Result<PsdMatrix> {
    let asym = a.asymmetry();
    if asym > 1e-9 * a.max_entry().max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }
    let m = a.dim();
    if m == 1 {
        let v = a.data[0];
        let tol = CLAMP_TOL * v.abs().max(f64::MIN_POSITIVE);
        if v < -tol && v < -1e-300 {
            return Err(Error::NotPsd(v));
        }
        return Ok(PsdMatrix::scalar(v.max(0.0).sqrt()));
    }
    let mut sym = a.clone();
    sym.symmetrize();
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(m, m, &sym.data));
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let mut roots = Vec::with_capacity(m);
    for &l in eig.eigenvalues.iter() {
        if l < -CLAMP_TOL * lmax {
            return Err(Error::NotPsd(l));
        }
        roots.push(l.max(0.0).sqrt());
    }
    let v = &eig.eigenvectors;
    let mut data = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            data[i * m + j] = (0..m).map(|k| v[(i, k)] * roots[k] * v[(j, k)]).sum();
        }
    }
    let mut root = PsdMatrix { m, data };
    root.symmetrize();
    Ok(root)
}

/// Scalar building block, `ℝ → [0, ∞)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ScalarSigma {
    Constant(f64),
    AbsLinear(f64),
    Saturating(f64, f64),
}

impl ScalarSigma {
    #[inline]
    pub fn value(&self, w: f64) -> f64 {
        match *self {
            ScalarSigma::Constant(c) => c,
            ScalarSigma::AbsLinear(beta) => beta * w.abs(),
            ScalarSigma::Saturating(c0, c1) => c0 + c1 * w.abs().tanh(),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            ScalarSigma::Constant(c) => c >= 0.0 && c.is_finite(),
            ScalarSigma::AbsLinear(b) => b >= 0.0 && b.is_finite(),
            ScalarSigma::Saturating(c0, c1) => c0 >= 0.0 && c1 >= 0.0 && c0.is_finite() && c1.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(invalid("sigma", format!("negative or non-finite parameter in {self:?}")))
        }
    }

    fn from_parts(variant: &str, params: &[f64]) -> Result<Self> {
        let need = |k: usize| -> Result<()> {
            if params.len() == k {
                Ok(())
            } else {
                Err(invalid("sigma.params", format!("`{variant}` takes {k} parameter(s), got {}", params.len())))
            }
        };
        let s = match variant {
            "constant" => {
                need(1)?;
                ScalarSigma::Constant(params[0])
            }
            "abs_linear" => {
                need(1)?;
                ScalarSigma::AbsLinear(params[0])
            }
            "saturating" => {
                need(2)?;
                ScalarSigma::Saturating(params[0], params[1])
            }
            other => return Err(invalid("sigma.variant", format!("unknown variant `{other}`"))),
        };
        s.validate()?;
        Ok(s)
    }

    fn to_parts(self) -> (&'static str, Vec<f64>) {
        match self {
            ScalarSigma::Constant(c) => ("constant", vec![c]),
            ScalarSigma::AbsLinear(b) => ("abs_linear", vec![b]),
            ScalarSigma::Saturating(a, b) => ("saturating", vec![a, b]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SigmaKind {
    /// `σ ≡ c` for a fixed PSD matrix.
    Constant(PsdMatrix),
    /// `σ(w) = β|w|·I`.
    AbsLinear { beta: f64 },
    /// `σ(w) = (c₀ + c₁ tanh|w|)·I`.
    Saturating { c0: f64, c1: f64 },
    /// `σ(w) = diag(σ₁(w₁), …, σₘ(wₘ))`.
    Diagonal(Vec<ScalarSigma>),
}

/// Registered nonlinearity with its dimension. Serializes as
/// `{"variant": name, "params": [...], "m": m}`; the diagonal variant lists
/// scalar `components` instead of `params`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SigmaConfig", into = "SigmaConfig")]
pub struct SigmaSpec {
    m: usize,
    kind: SigmaKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SigmaConfig {
    pub variant: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub params: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub components: Vec<SigmaConfig>,
}

impl TryFrom<SigmaConfig> for SigmaSpec {
    type Error = Error;

    fn try_from(c: SigmaConfig) -> Result<Self> {
        match c.variant.as_str() {
            "diagonal" => {
                let comps = c
                    .components
                    .iter()
                    .map(|s| ScalarSigma::from_parts(&s.variant, &s.params))
                    .collect::<Result<Vec<_>>>()?;
                SigmaSpec::diagonal(comps)
            }
            "constant" => {
                let m = c.m.unwrap_or_else(|| (c.params.len() as f64).sqrt().round() as usize).max(1);
                if c.params.len() == 1 {
                    SigmaSpec::constant(PsdMatrix::scaled_identity(m, c.params[0]))
                } else {
                    SigmaSpec::constant(PsdMatrix::new(m, c.params.clone())?)
                }
            }
            v => {
                let s = ScalarSigma::from_parts(v, &c.params)?;
                let m = c.m.unwrap_or(1);
                match s {
                    ScalarSigma::AbsLinear(beta) => SigmaSpec::abs_linear(m, beta),
                    ScalarSigma::Saturating(c0, c1) => SigmaSpec::saturating(m, c0, c1),
                    ScalarSigma::Constant(_) => unreachable!(),
                }
            }
        }
    }
}

impl From<SigmaSpec> for SigmaConfig {
    fn from(s: SigmaSpec) -> Self {
        let m = Some(s.m);
        match s.kind {
            SigmaKind::Constant(c) => SigmaConfig {
                variant: "constant".into(),
                params: c.data.clone(),
                m,
                components: vec![],
            },
            SigmaKind::AbsLinear { beta } => SigmaConfig {
                variant: "abs_linear".into(),
                params: vec![beta],
                m,
                components: vec![],
            },
            SigmaKind::Saturating { c0, c1 } => SigmaConfig {
                variant: "saturating".into(),
                params: vec![c0, c1],
                m,
                components: vec![],
            },
            SigmaKind::Diagonal(list) => SigmaConfig {
                variant: "diagonal".into(),
                params: vec![],
                m,
                components: list
                    .into_iter()
                    .map(|x| {
                        let (v, p) = x.to_parts();
                        SigmaConfig {
                            variant: v.into(),
                            params: p,
                            m: None,
                            components: vec![],
                        }
                    })
                    .collect(),
            },
        }
    }
}

impl SigmaSpec {
    pub fn constant(c: PsdMatrix) -> Result<Self> {
        if c.min_eigenvalue() < -CLAMP_TOL * c.frobenius() {
            return Err(Error::NotPsd(c.min_eigenvalue()));
        }
        Ok(Self {
            m: c.dim(),
            kind: SigmaKind::Constant(c),
        })
    }

    pub fn constant_scalar(c: f64) -> Result<Self> {
        ScalarSigma::Constant(c).validate()?;
        Self::constant(PsdMatrix::scalar(c))
    }

    pub fn abs_linear(m: usize, beta: f64) -> Result<Self> {
        ScalarSigma::AbsLinear(beta).validate()?;
        check_m(m)?;
        Ok(Self {
            m,
            kind: SigmaKind::AbsLinear { beta },
        })
    }

    pub fn saturating(m: usize, c0: f64, c1: f64) -> Result<Self> {
        ScalarSigma::Saturating(c0, c1).validate()?;
        check_m(m)?;
        Ok(Self {
            m,
            kind: SigmaKind::Saturating { c0, c1 },
        })
    }

    pub fn diagonal(components: Vec<ScalarSigma>) -> Result<Self> {
        check_m(components.len())?;
        for c in &components {
            c.validate()?;
        }
        Ok(Self {
            m: components.len(),
            kind: SigmaKind::Diagonal(components),
        })
    }

    pub fn zero(m: usize) -> Self {
        Self {
            m,
            kind: SigmaKind::Constant(PsdMatrix::zeros(m)),
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn kind(&self) -> &SigmaKind {
        &self.kind
    }

    /// Short identifier used in reports.
    pub fn label(&self) -> String {
        let c: SigmaConfig = self.clone().into();
        if c.components.is_empty() {
            format!("{}({})", c.variant, join(&c.params))
        } else {
            let parts: Vec<String> = c
                .components
                .iter()
                .map(|s| format!("{}({})", s.variant, join(&s.params)))
                .collect();
            format!("diagonal[{}]", parts.join(","))
        }
    }

    /// Scalar view for `m = 1`.
    pub fn as_scalar(&self) -> Option<ScalarSigma> {
        if self.m != 1 {
            return None;
        }
        Some(match &self.kind {
            SigmaKind::Constant(c) => ScalarSigma::Constant(c.data[0]),
            SigmaKind::AbsLinear { beta } => ScalarSigma::AbsLinear(*beta),
            SigmaKind::Saturating { c0, c1 } => ScalarSigma::Saturating(*c0, *c1),
            SigmaKind::Diagonal(v) => v[0],
        })
    }

    /// Scalar components when `σ` is diagonal (any `m`, including `m = 1`).
    pub fn diagonal_components(&self) -> Option<Vec<ScalarSigma>> {
        match &self.kind {
            SigmaKind::Diagonal(v) => Some(v.clone()),
            _ => self.as_scalar().map(|s| vec![s]),
        }
    }

    /// True when `σ(w)` does not depend on `w`.
    pub fn is_constant(&self) -> bool {
        match &self.kind {
            SigmaKind::Constant(_) => true,
            SigmaKind::Diagonal(v) => v.iter().all(|s| matches!(s, ScalarSigma::Constant(_))),
            SigmaKind::AbsLinear { beta } => *beta == 0.0,
            SigmaKind::Saturating { c1, .. } => *c1 == 0.0,
        }
    }

    pub fn evaluate(&self, w: &[f64]) -> Result<PsdMatrix> {
        if w.len() != self.m {
            return Err(Error::Shape(format!("sigma expects {} components, got {}", self.m, w.len())));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sigma argument".into()));
        }
        let mut out = vec![0.0; self.m * self.m];
        self.evaluate_into(w, &mut out);
        Ok(PsdMatrix { m: self.m, data: out })
    }

    /// Allocation-free evaluation into a row-major `m×m` buffer.
    pub fn evaluate_into(&self, w: &[f64], out: &mut [f64]) {
        let m = self.m;
        match &self.kind {
            SigmaKind::Constant(c) => out.copy_from_slice(&c.data),
            SigmaKind::AbsLinear { beta } => {
                out.iter_mut().for_each(|v| *v = 0.0);
                let s = beta * norm(w);
                for i in 0..m {
                    out[i * m + i] = s;
                }
            }
            SigmaKind::Saturating { c0, c1 } => {
                out.iter_mut().for_each(|v| *v = 0.0);
                let s = c0 + c1 * norm(w).tanh();
                for i in 0..m {
                    out[i * m + i] = s;
                }
            }
            SigmaKind::Diagonal(list) => {
                out.iter_mut().for_each(|v| *v = 0.0);
                for (i, s) in list.iter().enumerate() {
                    out[i * m + i] = s.value(w[i]);
                }
            }
        }
    }

    /// `σ(w)·ξ` without allocating.
    pub fn apply(&self, w: &[f64], xi: &[f64], out: &mut [f64]) {
        match &self.kind {
            SigmaKind::Constant(c) => c.mul_vec(xi, out),
            SigmaKind::AbsLinear { beta } => {
                let s = beta * norm(w);
                out.iter_mut().zip(xi).for_each(|(o, x)| *o = s * x);
            }
            SigmaKind::Saturating { c0, c1 } => {
                let s = c0 + c1 * norm(w).tanh();
                out.iter_mut().zip(xi).for_each(|(o, x)| *o = s * x);
            }
            SigmaKind::Diagonal(list) => {
                for (i, s) in list.iter().enumerate() {
                    out[i] = s.value(w[i]) * xi[i];
                }
            }
        }
    }
}

fn check_m(m: usize) -> Result<()> {
    if m == 0 {
        return Err(invalid("m", "dimension must be >= 1"));
    }
    Ok(())
}

fn norm(w: &[f64]) -> f64 {
    if w.len() == 1 {
        w[0].abs()
    } else {
        w.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn join(p: &[f64]) -> String {
    p.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    /// Largest sampled Frobenius difference quotient.
    pub lipschitz: f64,
    /// Growth rate of `|σ(w)|_F` at `|w| = radius`, from the difference
    /// between radii `radius` and `2·radius`, maximized over directions.
    pub slope: f64,
}

impl LipschitzEstimate {
    pub fn slope_subcritical(&self) -> bool {
        self.slope < 1.0
    }
}

/// Monte Carlo Lipschitz bound and asymptotic slope of `σ`.
pub fn lipschitz_estimate(spec: &SigmaSpec, radius: f64, samples: usize, seed: u64) -> Result<LipschitzEstimate> {
    if samples < 1000 {
        return Err(invalid("samples", format!("need at least 1000, got {samples}")));
    }
    if !(radius.is_finite() && radius > 0.0) {
        return Err(invalid("radius", "must be positive"));
    }
    let m = spec.m();
    let mut rng = ScalarStream::new(seed, 0x5147, 0);
    let point = |rng: &mut ScalarStream| -> Vec<f64> {
        let mut dir: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
        let len = norm(&dir).max(1e-300);
        // half uniform in the ball, half log-uniform in radius so that the
        // neighbourhood of the origin is resolved
        let u = rng.uniform();
        let r = if rng.uniform() < 0.5 {
            radius * u.powf(1.0 / m as f64)
        } else {
            radius * (-12.0 * u).exp()
        };
        dir.iter_mut().for_each(|v| *v *= r / len);
        dir
    };
    let mut buf_a = vec![0.0; m * m];
    let mut buf_b = vec![0.0; m * m];
    let mut lip: f64 = 0.0;
    for k in 0..samples {
        let a = point(&mut rng);
        let b = if k % 3 == 0 {
            point(&mut rng)
        } else if k % 3 == 1 {
            let f = if k % 2 == 0 { rng.uniform() } else { 1.0 + 1e-3 * (rng.uniform() - 0.5) };
            a.iter().map(|v| v * f).collect()
        } else {
            let h = 1e-4 * radius;
            a.iter().map(|v| v + h * rng.normal()).collect()
        };
        let d = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        if d == 0.0 {
            continue;
        }
        spec.evaluate_into(&a, &mut buf_a);
        spec.evaluate_into(&b, &mut buf_b);
        let diff = buf_a.iter().zip(&buf_b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        lip = lip.max(diff / d);
    }
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for i in 0..m {
        for sgn in [1.0, -1.0] {
            let mut e = vec![0.0; m];
            e[i] = sgn;
            dirs.push(e);
        }
    }
    if m > 1 {
        for _ in 0..(samples / 10) {
            let mut e: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
            let len = norm(&e).max(1e-300);
            e.iter_mut().for_each(|v| *v /= len);
            dirs.push(e);
        }
    }
    let mut slope = f64::NEG_INFINITY;
    for e in &dirs {
        let near: Vec<f64> = e.iter().map(|v| v * radius).collect();
        let far: Vec<f64> = e.iter().map(|v| v * 2.0 * radius).collect();
        spec.evaluate_into(&near, &mut buf_a);
        spec.evaluate_into(&far, &mut buf_b);
        let fa = buf_a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let fb = buf_b.iter().map(|v| v * v).sum::<f64>().sqrt();
        slope = slope.max((fb - fa) / radius);
    }
    Ok(LipschitzEstimate { lipschitz: lip, slope })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn evaluate_variants() {
        let c = SigmaSpec::constant(PsdMatrix::diag(&[1.0, 2.0])).unwrap();
        assert_eq!(c.evaluate(&[5.0, -3.0]).unwrap(), PsdMatrix::diag(&[1.0, 2.0]));
        let a = SigmaSpec::abs_linear(1, 0.5).unwrap();
        assert_eq!(a.evaluate(&[2.0]).unwrap().get(0, 0), 1.0);
        assert_eq!(a.evaluate(&[-2.0]).unwrap().get(0, 0), 1.0);
        assert!(a.evaluate(&[1.0, 2.0]).is_err());
        assert!(a.evaluate(&[f64::NAN]).is_err());
    }

    #[test]
    fn saturating_flattens() {
        let s = SigmaSpec::saturating(1, 1.0, 1.0).unwrap();
        let v10 = s.evaluate(&[10.0]).unwrap().frobenius();
        let v20 = s.evaluate(&[20.0]).unwrap().frobenius();
        assert!((v20 - 2.0).abs() < 1e-12);
        assert!((v20 - v10) / 10.0 < 1e-9);
        let est = lipschitz_estimate(&s, 10.0, 2000, 1).unwrap();
        assert!(est.slope_subcritical());
        assert!(est.slope.abs() < 1e-9);
    }

    #[test]
    fn sqrt_known_cases() {
        let i = PsdMatrix::identity(3);
        assert!(matrix_sqrt_psd(&i).unwrap().sub(&i).iter().all(|v| v.abs() < 1e-14));
        let r = matrix_sqrt_psd(&PsdMatrix::diag(&[4.0, 9.0])).unwrap();
        assert!((r.get(0, 0) - 2.0).abs() < 1e-14 && (r.get(1, 1) - 3.0).abs() < 1e-14);
        assert!(r.get(0, 1).abs() < 1e-14);
    }

    #[test]
    fn sqrt_rejects_bad_matrices() {
        let asym = PsdMatrix { m: 2, data: vec![1.0, 0.5, 0.0, 1.0] };
        assert!(matches!(matrix_sqrt_psd(&asym), Err(Error::NotSymmetric(_))));
        let neg = PsdMatrix::diag(&[1.0, -0.1]);
        assert!(matches!(matrix_sqrt_psd(&neg), Err(Error::NotPsd(_))));
        let tiny = PsdMatrix::diag(&[1.0, -1e-13]);
        assert_eq!(matrix_sqrt_psd(&tiny).unwrap().get(1, 1), 0.0);
        assert!(PsdMatrix::new(2, vec![1.0, 2.0, 3.0, 1.0]).is_err());
    }

    #[test]
    fn lipschitz_abs_linear() {
        let half = lipschitz_estimate(&SigmaSpec::abs_linear(1, 0.5).unwrap(), 5.0, 4000, 2).unwrap();
        assert!((half.lipschitz - 0.5).abs() < 1e-9, "{half:?}");
        assert!((half.slope - 0.5).abs() < 1e-12);
        let steep = lipschitz_estimate(&SigmaSpec::abs_linear(1, 1.2).unwrap(), 5.0, 4000, 2).unwrap();
        assert!((steep.slope - 1.2).abs() < 1e-12);
        assert!(!steep.slope_subcritical());
        let c = lipschitz_estimate(&SigmaSpec::constant_scalar(0.7).unwrap(), 5.0, 1000, 2).unwrap();
        assert_eq!(c.lipschitz, 0.0);
        assert_eq!(c.slope, 0.0);
        assert!(lipschitz_estimate(&SigmaSpec::constant_scalar(0.7).unwrap(), 5.0, 999, 2).is_err());
    }

    #[test]
    fn config_round_trip_and_unknown_variant() {
        let d = SigmaSpec::diagonal(vec![ScalarSigma::AbsLinear(0.5), ScalarSigma::Saturating(0.1, 0.2)]).unwrap();
        let json = serde_json::to_string(&d).unwrap();
        let back: SigmaSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, d);
        let bad = serde_json::from_str::<SigmaSpec>(r#"{"variant":"cubic","params":[1.0]}"#);
        assert!(bad.is_err());
        let a: SigmaSpec = serde_json::from_str(r#"{"variant":"abs_linear","params":[0.5]}"#).unwrap();
        assert_eq!(a, SigmaSpec::abs_linear(1, 0.5).unwrap());
    }

    fn any_spec() -> impl Strategy<Value = SigmaSpec> {
        prop_oneof![
            (0.0f64..2.0, 1usize..4).prop_map(|(b, m)| SigmaSpec::abs_linear(m, b).unwrap()),
            (0.0f64..2.0, 0.0f64..2.0, 1usize..4).prop_map(|(a, b, m)| SigmaSpec::saturating(m, a, b).unwrap()),
            (0.0f64..2.0, 0.0f64..2.0, 0.0f64..2.0).prop_map(|(a, b, c)| SigmaSpec::diagonal(vec![
                ScalarSigma::AbsLinear(a),
                ScalarSigma::Saturating(b, c),
                ScalarSigma::Constant(a),
            ])
            .unwrap()),
            (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0).prop_map(|(a, b, c)| {
                // B·Bᵀ is PSD
                let bm = [a, b, c, 1.0];
                let d = vec![
                    bm[0] * bm[0] + bm[1] * bm[1],
                    bm[0] * bm[2] + bm[1] * bm[3],
                    bm[0] * bm[2] + bm[1] * bm[3],
                    bm[2] * bm[2] + bm[3] * bm[3],
                ];
                SigmaSpec::constant(PsdMatrix::new(2, d).unwrap()).unwrap()
            }),
        ]
    }

    proptest! {
        #[test]
        fn evaluate_is_symmetric_psd(spec in any_spec(), w in proptest::collection::vec(-50.0f64..50.0, 3)) {
            let w = &w[..spec.m()];
            let s = spec.evaluate(w).unwrap();
            prop_assert!(s.asymmetry() <= 1e-12);
            prop_assert!(s.min_eigenvalue() >= -1e-10);
        }

        #[test]
        fn frobenius_grows_at_most_linearly(spec in any_spec(), w in proptest::collection::vec(-50.0f64..50.0, 3)) {
            let w = &w[..spec.m()];
            let lip = lipschitz_estimate(&spec, 60.0, 1000, 3).unwrap().lipschitz;
            let at0 = spec.evaluate(&vec![0.0; spec.m()]).unwrap().frobenius();
            let at_w = spec.evaluate(w).unwrap().frobenius();
            let r = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(at_w <= at0 + lip * r * (1.0 + 1e-9) + 1e-12);
        }

        #[test]
        fn sqrt_reconstructs(entries in proptest::collection::vec(-3.0f64..3.0, 9)) {
            let m = 3;
            let mut a = vec![0.0; 9];
            for i in 0..m { for j in 0..m { for k in 0..m {
                a[i * m + j] += entries[i * m + k] * entries[j * m + k];
            }}}
            let a = PsdMatrix::new(m, a).unwrap();
            let r = matrix_sqrt_psd(&a).unwrap();
            prop_assert!(r.min_eigenvalue() >= -1e-10);
            let back = r.square();
            let err = back.sub(&a).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(err < 1e-9 * a.frobenius().max(1e-12));
        }
    }
}
