//! Monte Carlo for the forward equation `dZ_q = H_{1−q}(Z_q)^{1/2} dB_q`,
//! binned conditional expectations, the limit coefficient tables and a
//! Picard iteration for the decoupling field when `m > 1`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::flow::{csv_err, FlowTable};
use crate::noise::ScalarStream;
use crate::sigma::{matrix_sqrt_psd, PsdMatrix, SigmaSpec, CLAMP_TOL};

const DOMAIN_PATHS: u32 = 0x0F00;
const PATH_BLOCK: usize = 512;
/// Bins with fewer samples are marked invalid.
pub const MIN_BIN_SAMPLES: usize = 30;
/// Largest tolerated fraction of invalid bins.
pub const MAX_INVALID_FRACTION: f64 = 0.2;

/// `H_q(z)` as a function of flow time `q` and position `z ∈ ℝᵐ`.
pub trait DecouplingField: Sync {
    fn m(&self) -> usize;
    /// Half-width of the region where the field is tabulated.
    fn half_width(&self) -> f64;
    /// Row-major `m×m` value of `H_q(z)`.
    fn h_into(&self, q: f64, z: &[f64], out: &mut [f64]);

    /// PSD root of `H_q(z)`; diagonal values skip the eigendecomposition.
    fn root_into(&self, q: f64, z: &[f64], out: &mut [f64]) -> Result<()> {
        let m = self.m();
        self.h_into(q, z, out);
        if m == 1 {
            out[0] = out[0].max(0.0).sqrt();
            return Ok(());
        }
        let diagonal = (0..m).all(|i| (0..m).all(|j| i == j || out[i * m + j] == 0.0));
        if diagonal {
            for i in 0..m {
                out[i * m + i] = out[i * m + i].max(0.0).sqrt();
            }
            return Ok(());
        }
        let root = matrix_sqrt_psd(&PsdMatrix::new(m, out.to_vec())?)?;
        out.copy_from_slice(root.data());
        Ok(())
    }
}

impl DecouplingField for FlowTable {
    fn m(&self) -> usize {
        1
    }

    fn half_width(&self) -> f64 {
        FlowTable::half_width(self)
    }

    fn h_into(&self, q: f64, z: &[f64], out: &mut [f64]) {
        out[0] = self.eval(q, z[0]);
    }
}

/// `H_q ≡ σ²`, the starting point of the Picard iteration.
pub struct SigmaSquared<'a> {
    pub sigma: &'a SigmaSpec,
    pub half_width: f64,
}

impl DecouplingField for SigmaSquared<'_> {
    fn m(&self) -> usize {
        self.sigma.m()
    }

    fn half_width(&self) -> f64 {
        self.half_width
    }

    fn h_into(&self, _q: f64, z: &[f64], out: &mut [f64]) {
        let m = self.m();
        let mut s = vec![0.0; m * m];
        self.sigma.evaluate_into(z, &mut s);
        square_into(m, &s, out);
    }
}

fn square_into(m: usize, s: &[f64], out: &mut [f64]) {
    for i in 0..m {
        for j in 0..m {
            out[i * m + j] = (0..m).map(|k| s[i * m + k] * s[k * m + j]).sum();
        }
    }
}

/// Initial law of the paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Start {
    Point(Vec<f64>),
    /// Uniform on the box, stratified so that every bin of `bins` receives
    /// the same number of starts.
    Stratified(BinGrid),
}

/// Equal-width tensor bins on `[lo, hi]ᵐ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinGrid {
    pub m: usize,
    pub lo: f64,
    pub hi: f64,
    pub per_axis: usize,
}

impl BinGrid {
    pub fn new(m: usize, lo: f64, hi: f64, per_axis: usize) -> Result<Self> {
        if !(hi > lo) || per_axis == 0 || m == 0 {
            return Err(invalid("bins", "need lo < hi and at least one bin"));
        }
        Ok(Self { m, lo, hi, per_axis })
    }

    pub fn symmetric(m: usize, half_width: f64, per_axis: usize) -> Result<Self> {
        Self::new(m, -half_width, half_width, per_axis)
    }

    pub fn len(&self) -> usize {
        self.per_axis.pow(self.m as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.per_axis as f64
    }

    pub fn axis_centre(&self, k: usize) -> f64 {
        self.lo + (k as f64 + 0.5) * self.width()
    }

    pub fn centre(&self, idx: usize) -> Vec<f64> {
        let mut rest = idx;
        let mut c = vec![0.0; self.m];
        for d in (0..self.m).rev() {
            c[d] = self.axis_centre(rest % self.per_axis);
            rest /= self.per_axis;
        }
        c
    }

    pub fn index_of(&self, z: &[f64]) -> Option<usize> {
        let mut idx = 0;
        for v in z {
            let k = ((v - self.lo) / self.width()).floor();
            if !(k >= 0.0 && k < self.per_axis as f64) {
                return None;
            }
            idx = idx * self.per_axis + k as usize;
        }
        Some(idx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathParams {
    pub n_paths: usize,
    pub dq: f64,
    /// Starting time of the forward equation (0 for the full horizon).
    pub q0: f64,
    /// End time (1 for the full horizon).
    pub q1: f64,
    /// Times at which path values are retained; `q1` is always included.
    pub record: Vec<f64>,
    pub seed: u64,
    /// Separates independent path families under one seed.
    pub family: u32,
}

impl PathParams {
    pub fn new(n_paths: usize, dq: f64, seed: u64) -> Self {
        Self {
            n_paths,
            dq,
            q0: 0.0,
            q1: 1.0,
            record: vec![0.0, 1.0],
            seed,
            family: 0,
        }
    }
}

/// Retained path values, layout `[path][record][component]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZPathEnsemble {
    pub m: usize,
    pub n_paths: usize,
    pub dq: f64,
    pub q0: f64,
    pub q1: f64,
    pub start: Start,
    pub record: Vec<f64>,
    pub values: Vec<f64>,
    /// `∫ tr H_{1−q}(Z_q) dq` along each path (left-point rule).
    pub ito: Vec<f64>,
    pub seed: u64,
}

impl ZPathEnsemble {
    pub fn record_index(&self, q: f64) -> Result<usize> {
        self.record
            .iter()
            .position(|t| (t - q).abs() < 1e-9)
            .ok_or_else(|| Error::Missing(format!("paths were not recorded at q = {q}")))
    }

    pub fn at(&self, path: usize, rec: usize) -> &[f64] {
        let base = (path * self.record.len() + rec) * self.m;
        &self.values[base..base + self.m]
    }

    /// Component `c` of every path at record `rec`.
    pub fn column(&self, rec: usize, c: usize) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.at(p, rec)[c]).collect()
    }
}

/// Euler–Maruyama `Z_{q+Δq} = Z_q + H_{1−q}(Z_q)^{1/2} ΔB`.
///
/// Each path draws from its own counter-based stream, so the output does not
/// depend on how blocks are scheduled. A path leaving `10·B` aborts the run.
pub fn simulate_paths<F: DecouplingField + ?Sized>(field: &F, start: &Start, p: &PathParams) -> Result<ZPathEnsemble> {
    let m = field.m();
    if p.n_paths == 0 {
        return Err(invalid("n_paths", "must be positive"));
    }
    if !(p.dq > 0.0 && p.dq <= 1e-2) {
        return Err(invalid("dq", format!("need 0 < dq <= 1e-2, got {}", p.dq)));
    }
    if !(0.0 <= p.q0 && p.q0 < p.q1 && p.q1 <= 1.0) {
        return Err(invalid("q0", "need 0 <= q0 < q1 <= 1"));
    }
    match start {
        Start::Point(b) if b.len() != m => return Err(Error::Shape("start point dimension".into())),
        Start::Stratified(g) if g.m != m => return Err(Error::Shape("start bins dimension".into())),
        _ => {}
    }
    let n_steps = ((p.q1 - p.q0) / p.dq).round().max(1.0) as usize;
    let dq = (p.q1 - p.q0) / n_steps as f64;
    let mut record: Vec<f64> = p.record.iter().copied().filter(|t| *t >= p.q0 - 1e-12 && *t <= p.q1 + 1e-12).collect();
    if !record.iter().any(|t| (t - p.q1).abs() < 1e-12) {
        record.push(p.q1);
    }
    record.sort_by(|a, b| a.total_cmp(b));
    record.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let rec_steps: Vec<usize> = record.iter().map(|t| ((t - p.q0) / dq).round() as usize).collect();
    let nr = record.len();
    let limit = 10.0 * field.half_width();

    let mut values = vec![0.0; p.n_paths * nr * m];
    let mut ito = vec![0.0; p.n_paths];
    let stride = nr * m;
    values
        .par_chunks_mut(PATH_BLOCK * stride)
        .zip(ito.par_chunks_mut(PATH_BLOCK))
        .enumerate()
        .try_for_each(|(block, (vals, itos))| -> Result<()> {
            let mut z = vec![0.0; m];
            let mut root = vec![0.0; m * m];
            let mut h = vec![0.0; m * m];
            let mut xi = vec![0.0; m];
            for (k, (row, acc)) in vals.chunks_mut(stride).zip(itos.iter_mut()).enumerate() {
                let path = block * PATH_BLOCK + k;
                let mut rng = ScalarStream::new(p.seed, DOMAIN_PATHS + p.family, path as u64);
                match start {
                    Start::Point(b) => z.copy_from_slice(b),
                    Start::Stratified(g) => {
                        let c = g.centre(path % g.len());
                        let w = g.width();
                        for d in 0..m {
                            z[d] = c[d] + w * (rng.uniform() - 0.5);
                        }
                    }
                }
                let mut next_rec = 0;
                let mut tr_int = 0.0;
                for step in 0..=n_steps {
                    while next_rec < nr && rec_steps[next_rec] == step {
                        row[next_rec * m..(next_rec + 1) * m].copy_from_slice(&z);
                        next_rec += 1;
                    }
                    if step == n_steps {
                        break;
                    }
                    let q = p.q0 + step as f64 * dq;
                    field.h_into(1.0 - q, &z, &mut h);
                    tr_int += (0..m).map(|i| h[i * m + i]).sum::<f64>() * dq;
                    field.root_into(1.0 - q, &z, &mut root)?;
                    let sq = dq.sqrt();
                    for x in xi.iter_mut() {
                        *x = rng.normal() * sq;
                    }
                    for i in 0..m {
                        z[i] += (0..m).map(|j| root[i * m + j] * xi[j]).sum::<f64>();
                    }
                    if let Some(v) = z.iter().find(|v| !(v.abs() <= limit)) {
                        return Err(Error::RangeExceeded { value: *v, limit });
                    }
                }
                *acc = tr_int;
            }
            Ok(())
        })?;
    Ok(ZPathEnsemble {
        m,
        n_paths: p.n_paths,
        dq,
        q0: p.q0,
        q1: p.q1,
        start: start.clone(),
        record,
        values,
        ito,
        seed: p.seed,
    })
}

/// Binned estimate of `E[g(Z_end) | Z_q ∈ bin]` for a vector-valued `g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalTable {
    pub bins: BinGrid,
    /// Output dimension of `g`.
    pub d: usize,
    pub count: Vec<usize>,
    pub valid: Vec<bool>,
    /// `mean[bin·d + e]`.
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
}

impl ConditionalTable {
    pub fn valid_bins(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.count.len()).filter(|i| self.valid[*i])
    }
}

/// Per-bin accumulators `(count, Σg, Σg²)` over paths, merged in path order.
fn bin_sums(
    ens: &ZPathEnsemble,
    rec_cond: usize,
    bins: &BinGrid,
    d: usize,
    g: &(dyn Fn(usize, &mut [f64]) + Sync),
) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let nb = bins.len();
    let partial: Vec<(Vec<usize>, Vec<f64>, Vec<f64>)> = (0..ens.n_paths)
        .collect::<Vec<_>>()
        .par_chunks(PATH_BLOCK)
        .map(|chunk| {
            let mut count = vec![0usize; nb];
            let mut s1 = vec![0.0; nb * d];
            let mut s2 = vec![0.0; nb * d];
            let mut out = vec![0.0; d];
            for &path in chunk {
                let Some(b) = bins.index_of(ens.at(path, rec_cond)) else {
                    continue;
                };
                g(path, &mut out);
                count[b] += 1;
                for e in 0..d {
                    s1[b * d + e] += out[e];
                    s2[b * d + e] += out[e] * out[e];
                }
            }
            (count, s1, s2)
        })
        .collect();
    let mut count = vec![0usize; nb];
    let mut s1 = vec![0.0; nb * d];
    let mut s2 = vec![0.0; nb * d];
    for (c, a, b) in partial {
        for i in 0..nb {
            count[i] += c[i];
        }
        for i in 0..nb * d {
            s1[i] += a[i];
            s2[i] += b[i];
        }
    }
    (count, s1, s2)
}

/// `E[g(Z_end) | Z_q = b]` (end time of the ensemble, normally 1) by equal-width binning of `Z_q`. When the paths
/// start from a point and `q` is the start time the table has a single bin
/// around that point.
pub fn estimate_conditional(
    ens: &ZPathEnsemble,
    q: f64,
    bins: &BinGrid,
    d: usize,
    g: &(dyn Fn(&[f64], &mut [f64]) + Sync),
) -> Result<ConditionalTable> {
    let rec_cond = ens.record_index(q)?;
    let rec_end = ens.record_index(ens.q1)?;
    let bins = match (&ens.start, (q - ens.q0).abs() < 1e-12) {
        (Start::Point(b), true) => {
            let w = bins.width();
            BinGrid::new(ens.m, b[0] - 0.5 * w, b[0] + 0.5 * w, 1)?
        }
        _ => bins.clone(),
    };
    let (count, s1, s2) = bin_sums(ens, rec_cond, &bins, d, &|path, out| g(ens.at(path, rec_end), out));
    finish_table(bins, d, count, s1, s2)
}

fn finish_table(bins: BinGrid, d: usize, count: Vec<usize>, s1: Vec<f64>, s2: Vec<f64>) -> Result<ConditionalTable> {
    let nb = bins.len();
    let valid: Vec<bool> = count.iter().map(|c| *c >= MIN_BIN_SAMPLES).collect();
    let invalid_frac = valid.iter().filter(|v| !**v).count() as f64 / nb as f64;
    if invalid_frac > MAX_INVALID_FRACTION {
        return Err(Error::InsufficientSamples(format!(
            "{:.0}% of bins have fewer than {MIN_BIN_SAMPLES} samples",
            100.0 * invalid_frac
        )));
    }
    let mut mean = vec![f64::NAN; nb * d];
    let mut se = vec![f64::NAN; nb * d];
    for b in 0..nb {
        if count[b] == 0 {
            continue;
        }
        let n = count[b] as f64;
        for e in 0..d {
            let mu = s1[b * d + e] / n;
            mean[b * d + e] = mu;
            let var = if n > 1.0 { ((s2[b * d + e] / n - mu * mu) * n / (n - 1.0)).max(0.0) } else { 0.0 };
            se[b * d + e] = (var / n).sqrt();
        }
    }
    Ok(ConditionalTable {
        bins,
        d,
        count,
        valid,
        mean,
        se,
    })
}

/// Binned tables of `J̄₁ = E[σ(Z₁)|Z₀]`, `J̃₁ = Var[σ(Z₁)|Z₀]^{1/2}` and
/// `J₁ = H₁^{1/2}`, all `m×m` row-major per bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JTable {
    pub m: usize,
    pub bins: BinGrid,
    pub count: Vec<usize>,
    pub valid: Vec<bool>,
    pub jbar: Vec<f64>,
    pub jtilde: Vec<f64>,
    pub j1: Vec<f64>,
    pub se_jbar: Vec<f64>,
    /// Standard error of the entries of `J̃₁²`.
    pub se_jtilde_sq: Vec<f64>,
    /// `J₁² − J̄₁² − J̃₁²` per entry.
    pub identity_residual: Vec<f64>,
    /// Standard error of `identity_residual`, from the paired samples
    /// `σ²(Z₁) − H₁(Z₀)`.
    pub se_identity: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JValues {
    pub jbar: f64,
    pub jtilde: f64,
    pub j1: f64,
}

impl JTable {
    /// Coefficients given in closed form on a bin grid (`m = 1`).
    pub fn from_fn(bins: BinGrid, f: impl Fn(f64) -> (f64, f64)) -> Result<Self> {
        if bins.m != 1 {
            return Err(invalid("bins", "closed-form tables are scalar"));
        }
        let nb = bins.len();
        let (mut jbar, mut jtilde, mut j1) = (vec![0.0; nb], vec![0.0; nb], vec![0.0; nb]);
        for i in 0..nb {
            let (a, b) = f(bins.axis_centre(i));
            jbar[i] = a;
            jtilde[i] = b;
            j1[i] = (a * a + b * b).sqrt();
        }
        Ok(Self {
            m: 1,
            count: vec![usize::MAX; nb],
            valid: vec![true; nb],
            jbar,
            jtilde,
            j1,
            se_jbar: vec![0.0; nb],
            se_jtilde_sq: vec![0.0; nb],
            identity_residual: vec![0.0; nb],
            se_identity: vec![0.0; nb],
            bins,
        })
    }

    /// Scalar coefficients at `b`, linearly interpolated between valid bin
    /// centres. Values outside the span of valid centres are an error.
    pub fn eval(&self, b: f64) -> Result<JValues> {
        if self.m != 1 {
            return Err(Error::Shape("scalar lookup on a matrix table".into()));
        }
        let centres: Vec<usize> = (0..self.bins.len()).filter(|i| self.valid[*i]).collect();
        let first = *centres.first().ok_or_else(|| Error::Missing("no valid bins".into()))?;
        let last = *centres.last().unwrap();
        let (c0, c1) = (self.bins.axis_centre(first), self.bins.axis_centre(last));
        let tol = 1e-12 * (1.0 + b.abs());
        if b < c0 - tol || b > c1 + tol {
            return Err(Error::RangeExceeded {
                value: b,
                limit: c0.abs().max(c1.abs()),
            });
        }
        if first == last {
            return Ok(self.node(first));
        }
        let pos = centres.partition_point(|i| self.bins.axis_centre(*i) <= b).clamp(1, centres.len() - 1);
        let (i, j) = (centres[pos - 1], centres[pos]);
        let (x0, x1) = (self.bins.axis_centre(i), self.bins.axis_centre(j));
        let f = ((b - x0) / (x1 - x0)).clamp(0.0, 1.0);
        let (a, c) = (self.node(i), self.node(j));
        let lerp = |u: f64, v: f64| u * (1.0 - f) + v * f;
        Ok(JValues {
            jbar: lerp(a.jbar, c.jbar),
            jtilde: lerp(a.jtilde, c.jtilde),
            j1: lerp(a.j1, c.j1),
        })
    }

    fn node(&self, i: usize) -> JValues {
        JValues {
            jbar: self.jbar[i],
            jtilde: self.jtilde[i],
            j1: self.j1[i],
        }
    }

    /// Fraction of valid bins whose identity residual lies within `k`
    /// standard errors in every entry.
    pub fn identity_pass_fraction(&self, k: f64) -> f64 {
        let mm = self.m * self.m;
        let valid: Vec<usize> = (0..self.bins.len()).filter(|i| self.valid[*i]).collect();
        let ok = valid
            .iter()
            .filter(|&&b| (0..mm).all(|e| self.identity_residual[b * mm + e].abs() <= k * self.se_identity[b * mm + e]))
            .count();
        ok as f64 / valid.len().max(1) as f64
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mm = self.m * self.m;
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..self.m).map(|d| format!("b{d}")).collect();
        header.extend(["count".into(), "valid".into()]);
        for name in ["jbar", "jtilde", "j1", "se_jbar", "se_jtilde_sq", "identity_residual", "se_identity"] {
            for e in 0..mm {
                header.push(if mm == 1 { name.to_string() } else { format!("{name}_{}{}", e / self.m, e % self.m) });
            }
        }
        wr.write_record(&header).map_err(csv_err)?;
        for b in 0..self.bins.len() {
            let mut row: Vec<String> = self.bins.centre(b).iter().map(|v| format!("{v}")).collect();
            row.push(format!("{}", self.count[b]));
            row.push(format!("{}", self.valid[b]));
            for col in [&self.jbar, &self.jtilde, &self.j1, &self.se_jbar, &self.se_jtilde_sq, &self.identity_residual, &self.se_identity]
            {
                for e in 0..mm {
                    row.push(format!("{:e}", col[b * mm + e]));
                }
            }
            wr.write_record(&row).map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JTableParams {
    pub n_paths: usize,
    pub n_bins: usize,
    /// Half-width of the start region and of the bin grid.
    pub range: f64,
    pub dq: f64,
    pub seed: u64,
}

impl Default for JTableParams {
    fn default() -> Self {
        Self {
            n_paths: 100_000,
            n_bins: 64,
            range: 4.0,
            dq: 5e-3,
            seed: 0,
        }
    }
}

/// Tabulates `J̄₁`, `J̃₁` and `J₁` over bins of the start point.
///
/// `J₁²` in each bin is the average of `H₁(Z₀)` over the same starts that
/// feed the conditional moments of `σ(Z₁)`, so the identity residual is a
/// pure Monte Carlo error.
pub fn j_tables<F: DecouplingField + ?Sized>(spec: &SigmaSpec, field: &F, p: &JTableParams) -> Result<JTable> {
    let m = spec.m();
    if field.m() != m {
        return Err(Error::Shape("decoupling field and sigma dimensions differ".into()));
    }
    let mm = m * m;
    let bins = BinGrid::symmetric(m, p.range, p.n_bins)?;
    let mut pp = PathParams::new(p.n_paths, p.dq, p.seed);
    pp.family = 1;
    let ens = simulate_paths(field, &Start::Stratified(bins.clone()), &pp)?;
    let rec_end = ens.record_index(1.0)?;
    // per sample: σ(Z₁) (mm), σ(Z₁)² (mm), H₁(Z₀) (mm), σ(Z₁)² − H₁(Z₀) (mm)
    let d = 4 * mm;
    let g = |path: usize, out: &mut [f64]| {
        let mut s = vec![0.0; mm];
        spec.evaluate_into(ens.at(path, rec_end), &mut s);
        let (a, rest) = out.split_at_mut(mm);
        let (sq, rest) = rest.split_at_mut(mm);
        let (h1, diff) = rest.split_at_mut(mm);
        a.copy_from_slice(&s);
        square_into(m, &s, sq);
        field.h_into(1.0, ens.at(path, 0), h1);
        for e in 0..mm {
            diff[e] = sq[e] - h1[e];
        }
    };
    let (count, s1, s2) = bin_sums(&ens, 0, &bins, d, &g);
    let table = finish_table(bins.clone(), d, count, s1, s2)?;
    let nb = bins.len();
    let mut out = JTable {
        m,
        bins,
        count: table.count.clone(),
        valid: table.valid.clone(),
        jbar: vec![f64::NAN; nb * mm],
        jtilde: vec![f64::NAN; nb * mm],
        j1: vec![f64::NAN; nb * mm],
        se_jbar: vec![f64::NAN; nb * mm],
        se_jtilde_sq: vec![f64::NAN; nb * mm],
        identity_residual: vec![f64::NAN; nb * mm],
        se_identity: vec![f64::NAN; nb * mm],
    };
    for b in 0..nb {
        if !table.valid[b] {
            continue;
        }
        let n = table.count[b] as f64;
        let at = |k: usize, e: usize| table.mean[b * d + k * mm + e];
        let mean_s: Vec<f64> = (0..mm).map(|e| at(0, e)).collect();
        let mean_sq: Vec<f64> = (0..mm).map(|e| at(1, e)).collect();
        let mean_h1: Vec<f64> = (0..mm).map(|e| at(2, e)).collect();
        let mut jbar_sq = vec![0.0; mm];
        square_into(m, &mean_s, &mut jbar_sq);
        // 1/n normalization keeps J̄² + J̃² equal to the sample mean of σ²
        let var: Vec<f64> = (0..mm).map(|e| mean_sq[e] - jbar_sq[e]).collect();
        let mut var_m = PsdMatrix::new(m, symmetrized(m, &var))
            .map_err(|_| Error::NotSymmetric(asym(m, &var)))?;
        var_m.symmetrize();
        let scale = var_m.frobenius().max(mean_sq.iter().map(|v| v.abs()).fold(0.0, f64::max));
        let jt = if var_m.frobenius() <= CLAMP_TOL * scale {
            PsdMatrix::zeros(m)
        } else {
            matrix_sqrt_psd(&var_m).or_else(|e| match e {
                Error::NotPsd(l) if l.abs() <= CLAMP_TOL * scale => Ok(PsdMatrix::zeros(m)),
                other => Err(other),
            })?
        };
        let j1 = matrix_sqrt_psd(&PsdMatrix::new(m, symmetrized(m, &mean_h1))?)?;
        for e in 0..mm {
            let k = b * mm + e;
            out.jbar[k] = mean_s[e];
            out.jtilde[k] = jt.data()[e];
            out.j1[k] = j1.data()[e];
            out.se_jbar[k] = table.se[b * d + e];
            let sd_sq = table.se[b * d + mm + e] * (n).sqrt();
            out.se_jtilde_sq[k] = (sd_sq * sd_sq / n + 4.0 * mean_s[e].powi(2) * table.se[b * d + e].powi(2)).sqrt();
            out.identity_residual[k] = mean_h1[e] - jbar_sq[e] - var[e];
            out.se_identity[k] = table.se[b * d + 3 * mm + e];
        }
    }
    Ok(out)
}

fn symmetrized(m: usize, a: &[f64]) -> Vec<f64> {
    let mut out = a.to_vec();
    for i in 0..m {
        for j in (i + 1)..m {
            let v = 0.5 * (a[i * m + j] + a[j * m + i]);
            out[i * m + j] = v;
            out[j * m + i] = v;
        }
    }
    out
}

fn asym(m: usize, a: &[f64]) -> f64 {
    let mut w: f64 = 0.0;
    for i in 0..m {
        for j in 0..m {
            w = w.max((a[i * m + j] - a[j * m + i]).abs());
        }
    }
    w
}

const MAX_TAPS: usize = 8;

#[derive(Debug, Clone, Copy, Default)]
struct Stencil {
    idx: [usize; MAX_TAPS],
    w: [f64; MAX_TAPS],
    len: usize,
}

impl Stencil {
    fn push(&mut self, i: usize, w: f64) {
        self.idx[self.len] = i;
        self.w[self.len] = w;
        self.len += 1;
    }
}

/// Cramer's rule for a symmetric positive definite 3×3 system.
fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> [f64; 3] {
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(a);
    let mut x = [0.0; 3];
    for (c, xc) in x.iter_mut().enumerate() {
        let mut ac = a;
        for r in 0..3 {
            ac[r][c] = b[r];
        }
        *xc = det(ac) / d;
    }
    x
}

/// Largest dimension supported by [`GridFlowTable`].
pub const MAX_GRID_M: usize = 4;

/// Decoupling field tabulated on bin centres of `[−B, B]ᵐ` at a few flow
/// times. Between centres interpolation is quadratic Lagrange per axis;
/// beyond the outer centres a least-squares quadratic over the outer eight
/// nodes takes over. Linear in `q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFlowTable {
    pub m: usize,
    pub bins: BinGrid,
    /// Half-width of the region where the continuation beyond the bins is
    /// trusted; paths beyond ten times this abort.
    pub extent: f64,
    pub q_grid: Vec<f64>,
    /// `values[k][node·m² + e]`.
    pub values: Vec<Vec<f64>>,
    pub se: Vec<Vec<f64>>,
}

impl GridFlowTable {
    fn axis_stencil(&self, x: f64) -> Stencil {
        let n = self.bins.per_axis;
        let w = self.bins.width();
        let t = (x - self.bins.lo) / w - 0.5;
        let mut st = Stencil::default();
        if n < 3 {
            let i = t.round().clamp(0.0, (n - 1) as f64) as usize;
            st.push(i, 1.0);
            return st;
        }
        let last = (n - 1) as f64;
        if t >= 0.0 && t <= last {
            let mid = (t.round() as i64).clamp(1, n as i64 - 2) as usize;
            let s = t - mid as f64;
            // Lagrange basis on nodes −1, 0, 1
            st.push(mid - 1, 0.5 * s * (s - 1.0));
            st.push(mid, 1.0 - s * s);
            st.push(mid + 1, 0.5 * s * (s + 1.0));
            return st;
        }
        // Outside the centres: least-squares quadratic through the outer
        // nodes. A three-point fit would turn bin noise into curvature.
        let k = n.min(MAX_TAPS);
        let (first, u) = if t < 0.0 { (0, t) } else { (n - k, t - (n - k) as f64) };
        let mut ata = [[0.0f64; 3]; 3];
        for j in 0..k {
            let v = [1.0, j as f64, (j * j) as f64];
            for a in 0..3 {
                for b in 0..3 {
                    ata[a][b] += v[a] * v[b];
                }
            }
        }
        // y = (AᵀA)⁻¹ [1, u, u²]; weight_j = ⟨v_j, y⟩
        let y = solve3(ata, [1.0, u, u * u]);
        for j in 0..k {
            let jf = j as f64;
            st.push(first + j, y[0] + y[1] * jf + y[2] * jf * jf);
        }
        st
    }

    fn slice_into(&self, k: usize, z: &[f64], out: &mut [f64]) {
        let m = self.m;
        let mm = m * m;
        let mut stencils = [Stencil::default(); MAX_GRID_M];
        for (s, x) in stencils.iter_mut().zip(z) {
            *s = self.axis_stencil(*x);
        }
        let stencils = &stencils[..m];
        out.iter_mut().for_each(|v| *v = 0.0);
        let total: usize = stencils.iter().map(|s| s.len).product();
        for combo in 0..total {
            let mut rest = combo;
            let mut node = 0;
            let mut weight = 1.0;
            for st in stencils.iter() {
                let c = rest % st.len;
                rest /= st.len;
                node = node * self.bins.per_axis + st.idx[c];
                weight *= st.w[c];
            }
            if weight == 0.0 {
                continue;
            }
            let vals = &self.values[k][node * mm..(node + 1) * mm];
            for e in 0..mm {
                out[e] += weight * vals[e];
            }
        }
        for i in 0..m {
            out[i * m + i] = out[i * m + i].max(0.0);
        }
    }

    /// Relative L2 distance to `reference(q, z)` over all nodes with `q > 0`.
    pub fn relative_l2(&self, reference: impl Fn(f64, &[f64], &mut [f64])) -> f64 {
        let mm = self.m * self.m;
        let (mut num, mut den) = (0.0, 0.0);
        let mut r = vec![0.0; mm];
        for (k, q) in self.q_grid.iter().enumerate().skip(1) {
            for node in 0..self.bins.len() {
                reference(*q, &self.bins.centre(node), &mut r);
                for e in 0..mm {
                    num += (self.values[k][node * mm + e] - r[e]).powi(2);
                    den += r[e] * r[e];
                }
            }
        }
        (num / den.max(f64::MIN_POSITIVE)).sqrt()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let m = self.m;
        let mm = m * m;
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["q".to_string()];
        header.extend((0..m).map(|d| format!("b{d}")));
        for name in ["H", "se"] {
            for e in 0..mm {
                header.push(if mm == 1 { name.into() } else { format!("{name}_{}{}", e / m, e % m) });
            }
        }
        wr.write_record(&header).map_err(csv_err)?;
        for (k, q) in self.q_grid.iter().enumerate() {
            for node in 0..self.bins.len() {
                let mut row = vec![format!("{q}")];
                row.extend(self.bins.centre(node).iter().map(|v| format!("{v}")));
                row.extend((0..mm).map(|e| format!("{:e}", self.values[k][node * mm + e])));
                row.extend((0..mm).map(|e| format!("{:e}", self.se[k][node * mm + e])));
                wr.write_record(&row).map_err(csv_err)?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

impl DecouplingField for GridFlowTable {
    fn m(&self) -> usize {
        self.m
    }

    fn half_width(&self) -> f64 {
        self.extent
    }

    fn h_into(&self, q: f64, z: &[f64], out: &mut [f64]) {
        let nq = self.q_grid.len();
        if q <= self.q_grid[0] || nq == 1 {
            return self.slice_into(0, z, out);
        }
        if q >= self.q_grid[nq - 1] {
            return self.slice_into(nq - 1, z, out);
        }
        let k = self.q_grid.partition_point(|v| *v <= q) - 1;
        let f = (q - self.q_grid[k]) / (self.q_grid[k + 1] - self.q_grid[k]);
        let mut hi = [0.0; MAX_GRID_M * MAX_GRID_M];
        let hi = &mut hi[..out.len()];
        self.slice_into(k, z, out);
        self.slice_into(k + 1, z, hi);
        for (o, h) in out.iter_mut().zip(hi.iter()) {
            *o = *o * (1.0 - f) + h * f;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicardParams {
    pub iterations: usize,
    /// Paths per `q`-slice.
    pub n_paths: usize,
    /// Half-width of the bin grid.
    pub half_width: f64,
    /// Half-width of the trusted continuation region (see [`GridFlowTable::extent`]).
    pub extent: f64,
    pub bins_per_axis: usize,
    pub dq: f64,
    pub store_dq: f64,
    pub seed: u64,
}

impl Default for PicardParams {
    fn default() -> Self {
        Self {
            iterations: 5,
            n_paths: 100_000,
            half_width: 2.0,
            extent: 16.0,
            bins_per_axis: 16,
            dq: 1e-2,
            store_dq: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicardResult {
    pub table: GridFlowTable,
    /// Sup-norm difference between successive iterates.
    pub differences: Vec<f64>,
    pub converged: bool,
}

/// Fixed-point iteration `H ← E[σ²(Z₁) | Z_{1−q} = ·]` with `Z` driven by the
/// previous iterate.
///
/// Within one iteration the slices are filled backwards: paths restart
/// stratified at `1 − q_j`, run to `1 − q_{j−1}` and regress the new value
/// at slice `j − 1`. By the tower property this is the same map as
/// regressing `σ²(Z₁)` directly, with much lighter tails. All iterations
/// reuse the same random numbers so that iterate differences reflect the
/// map rather than resampling.
pub fn picard_flow_mc(spec: &SigmaSpec, p: &PicardParams) -> Result<PicardResult> {
    if p.iterations < 2 {
        return Err(invalid("iterations", "need at least 2"));
    }
    let m = spec.m();
    if m > MAX_GRID_M {
        return Err(invalid("m", format!("grid tables support m <= {MAX_GRID_M}")));
    }
    let mm = m * m;
    let bins = BinGrid::symmetric(m, p.half_width, p.bins_per_axis)?;
    let n_slices = (1.0 / p.store_dq).round() as usize;
    if n_slices == 0 || ((n_slices as f64) * p.store_dq - 1.0).abs() > 1e-9 {
        return Err(invalid("store_dq", "must divide 1"));
    }
    let q_grid: Vec<f64> = (0..=n_slices).map(|k| k as f64 * p.store_dq).collect();
    let sigma_sq = SigmaSquared {
        sigma: spec,
        half_width: p.half_width,
    };
    let mut node_sq = vec![0.0; bins.len() * mm];
    for node in 0..bins.len() {
        sigma_sq.h_into(0.0, &bins.centre(node), &mut node_sq[node * mm..(node + 1) * mm]);
    }
    let mut table = GridFlowTable {
        m,
        bins: bins.clone(),
        extent: p.extent.max(p.half_width),
        q_grid: q_grid.clone(),
        values: vec![node_sq.clone(); q_grid.len()],
        se: vec![vec![0.0; node_sq.len()]; q_grid.len()],
    };
    let mut differences = Vec::with_capacity(p.iterations);
    for _ in 0..p.iterations {
        let mut next = table.clone();
        for (k, q) in q_grid.iter().enumerate().skip(1) {
            let mut pp = PathParams::new(p.n_paths, p.dq, p.seed);
            pp.q0 = 1.0 - q;
            pp.q1 = 1.0 - q_grid[k - 1];
            pp.record = vec![pp.q0, pp.q1];
            pp.family = 16 + k as u32;
            let ens = simulate_paths(&table, &Start::Stratified(bins.clone()), &pp)?;
            let prev = &next;
            let g = |z: &[f64], out: &mut [f64]| {
                if k == 1 {
                    let mut s = [0.0; MAX_GRID_M * MAX_GRID_M];
                    spec.evaluate_into(z, &mut s[..mm]);
                    square_into(m, &s[..mm], out);
                } else {
                    prev.slice_into(k - 1, z, out);
                }
            };
            let cond = estimate_conditional(&ens, pp.q0, &bins, mm, &g)?;
            for node in 0..bins.len() {
                if cond.valid[node] {
                    let vals = symmetrized(m, &cond.mean[node * mm..(node + 1) * mm]);
                    next.values[k][node * mm..(node + 1) * mm].copy_from_slice(&vals);
                    next.se[k][node * mm..(node + 1) * mm].copy_from_slice(&cond.se[node * mm..(node + 1) * mm]);
                }
            }
        }
        let diff = next
            .values
            .iter()
            .flatten()
            .zip(table.values.iter().flatten())
            .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        let scale = next.values.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
        differences.push(diff);
        table = next;
        if diff <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
    }
    let converged = differences.len() < 4 || differences.windows(2).skip(2).all(|w| w[1] < w[0]);
    Ok(PicardResult {
        table,
        differences,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{solve_flow, FlowParams};
    use crate::sigma::ScalarSigma;
    use crate::stats::mean_estimate;

    fn abs_flow(beta: f64) -> FlowTable {
        let p = FlowParams {
            half_width: 8.0,
            db: 0.05,
            dq: 1e-2,
            q_max: 1.0,
            store_dq: 5e-3,
        };
        solve_flow(&ScalarSigma::AbsLinear(beta), &p).unwrap()
    }

    #[test]
    fn constant_sigma_paths_are_brownian() {
        let flow = solve_flow(&ScalarSigma::Constant(0.8), &FlowParams { db: 0.1, ..FlowParams::default() }).unwrap();
        let ens = simulate_paths(&flow, &Start::Point(vec![0.3]), &PathParams::new(20_000, 1e-2, 4)).unwrap();
        let z1 = ens.column(ens.record_index(1.0).unwrap(), 0);
        let m = mean_estimate(&z1);
        assert!(m.within(0.3, 5.0));
        let v = crate::stats::variance_estimate(&z1);
        assert!(v.within(0.64, 5.0), "{v:?}");
        let c = estimate_conditional(&ens, 0.0, &BinGrid::symmetric(1, 4.0, 64).unwrap(), 1, &|_z, out| out[0] = 0.8).unwrap();
        assert!((c.mean[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn abs_linear_second_moment_and_martingale() {
        let beta: f64 = 0.5;
        let flow = abs_flow(beta);
        let ens = simulate_paths(&flow, &Start::Point(vec![1.0]), &PathParams::new(50_000, 5e-3, 1)).unwrap();
        let z1 = ens.column(ens.record_index(1.0).unwrap(), 0);
        assert!(mean_estimate(&z1).within(1.0, 5.0));
        let sq: Vec<f64> = z1.iter().map(|z| z * z).collect();
        assert!(mean_estimate(&sq).within(1.0 / (1.0 - beta * beta), 5.0));
        // path-level Itô isometry
        let diff: Vec<f64> = z1.iter().zip(&ens.ito).map(|(z, i)| (z - 1.0).powi(2) - i).collect();
        assert!(mean_estimate(&diff).within(0.0, 5.0));
        // conditioning at the start point returns the start
        let c = estimate_conditional(&ens, 0.0, &BinGrid::symmetric(1, 4.0, 64).unwrap(), 1, &|z, out| out[0] = z[0]).unwrap();
        assert!((c.mean[0] - 1.0).abs() < 5.0 * c.se[0]);
    }

    #[test]
    fn runs_are_reproducible_and_range_checked() {
        let flow = abs_flow(0.5);
        let p = PathParams::new(2_000, 1e-2, 9);
        let a = simulate_paths(&flow, &Start::Point(vec![1.0]), &p).unwrap();
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap()
            .install(|| simulate_paths(&flow, &Start::Point(vec![1.0]), &p).unwrap());
        assert_eq!(a, b);
        let far = simulate_paths(&flow, &Start::Point(vec![79.9]), &p);
        assert!(matches!(far, Err(Error::RangeExceeded { .. })));
        assert!(simulate_paths(&flow, &Start::Point(vec![1.0]), &PathParams::new(10, 0.02, 0)).is_err());
    }

    #[test]
    fn sparse_bins_are_rejected() {
        let flow = abs_flow(0.5);
        let ens = simulate_paths(&flow, &Start::Point(vec![1.0]), &PathParams::new(1_000, 1e-2, 2)).unwrap();
        let bins = BinGrid::symmetric(1, 4.0, 64).unwrap();
        assert!(estimate_conditional(&ens, 1.0, &bins, 1, &|z, o| o[0] = z[0]).is_err());
    }

    #[test]
    fn conditional_sigma_squared_matches_flow() {
        let beta = 0.5;
        let flow = abs_flow(beta);
        let bins = BinGrid::symmetric(1, 4.0, 32).unwrap();
        let ens = simulate_paths(&flow, &Start::Stratified(bins.clone()), &PathParams::new(64_000, 5e-3, 3)).unwrap();
        let c = estimate_conditional(&ens, 0.0, &bins, 1, &|z, o| o[0] = (beta * z[0]).powi(2)).unwrap();
        let lip = 2.0 * beta * beta * 4.0 / (1.0 - beta * beta);
        for b in c.valid_bins() {
            let x = bins.axis_centre(b);
            let h1 = flow.eval(1.0, x);
            let tol = 3.0 * c.se[b] + 2.0 * flow.db * lip + bins.width().powi(2) * beta * beta / (12.0 * 0.75);
            assert!((c.mean[b] - h1).abs() < tol, "bin {b}: {} vs {h1}", c.mean[b]);
        }
    }

    #[test]
    fn constant_j_tables() {
        let spec = SigmaSpec::constant_scalar(0.6).unwrap();
        let flow = solve_flow(&ScalarSigma::Constant(0.6), &FlowParams { db: 0.1, ..FlowParams::default() }).unwrap();
        let jt = j_tables(&spec, &flow, &JTableParams { n_paths: 8_000, n_bins: 16, ..JTableParams::default() }).unwrap();
        for b in 0..16 {
            assert!((jt.jbar[b] - 0.6).abs() < 1e-14);
            assert_eq!(jt.jtilde[b], 0.0);
            assert!((jt.j1[b] - 0.6).abs() < 1e-14);
        }
        let v = jt.eval(0.1).unwrap();
        assert!((v.jbar - 0.6).abs() < 1e-14);
        assert!(jt.eval(10.0).is_err());
    }

    #[test]
    fn abs_linear_j_tables() {
        let beta: f64 = 0.5;
        let spec = SigmaSpec::abs_linear(1, beta).unwrap();
        let flow = abs_flow(beta);
        let jt = j_tables(&spec, &flow, &JTableParams { n_paths: 64_000, n_bins: 32, ..JTableParams::default() }).unwrap();
        assert!(jt.identity_pass_fraction(3.0) >= 0.9, "{}", jt.identity_pass_fraction(3.0));
        for b in 0..32 {
            let x = jt.bins.axis_centre(b);
            let w = jt.bins.width();
            // bin average of b²/3
            let exact = (x * x + w * w / 12.0) / 3.0;
            assert!((jt.j1[b].powi(2) - exact).abs() < 2e-2 * exact.max(0.1), "{b} {} {exact}", jt.j1[b].powi(2));
        }
        let mut buf = Vec::new();
        jt.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("b0,count,valid,jbar,jtilde,j1"));
    }

    #[test]
    fn quadratic_grid_interpolation_is_exact_for_quadratics() {
        let bins = BinGrid::symmetric(2, 2.0, 8).unwrap();
        let f = |z: &[f64]| [0.3 * z[0] * z[0], 0.0, 0.0, 0.1 * z[1] * z[1] + 0.2 * z[0]];
        let vals: Vec<f64> = (0..bins.len()).flat_map(|n| f(&bins.centre(n))).collect();
        let t = GridFlowTable {
            m: 2,
            bins,
            extent: 2.0,
            q_grid: vec![0.0],
            values: vec![vals.clone()],
            se: vec![vals],
        };
        let mut out = [0.0; 4];
        for z in [[0.13, -1.7], [2.9, 0.4], [-3.5, -2.6]] {
            t.h_into(0.0, &z, &mut out);
            let e = f(&z);
            for k in 0..4 {
                assert!((out[k] - e[k].max(if k == 0 || k == 3 { 0.0 } else { f64::MIN })).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn picard_constant_is_immediate() {
        let spec = SigmaSpec::constant_scalar(0.7).unwrap();
        let r = picard_flow_mc(&spec, &PicardParams { n_paths: 2_000, bins_per_axis: 8, ..PicardParams::default() }).unwrap();
        assert_eq!(r.differences.len(), 1);
        assert!(r.differences[0] < 1e-12);
        assert!(r.converged);
        assert!(picard_flow_mc(&spec, &PicardParams { iterations: 1, ..PicardParams::default() }).is_err());
    }

    #[test]
    fn picard_scalar_abs_linear() {
        let beta: f64 = 0.5;
        let spec = SigmaSpec::abs_linear(1, beta).unwrap();
        let p = PicardParams {
            iterations: 5,
            n_paths: 100_000,
            half_width: 3.0,
            bins_per_axis: 32,
            ..PicardParams::default()
        };
        let r = picard_flow_mc(&spec, &p).unwrap();
        let err = r.table.relative_l2(|q, z, out| out[0] = crate::flow::abs_linear_closed_form(beta, q, z[0]));
        assert!(err < 0.05, "{err} {:?}", r.differences);
    }

    #[test]
    fn picard_diagonal_matches_componentwise() {
        let spec = SigmaSpec::diagonal(vec![ScalarSigma::AbsLinear(0.5), ScalarSigma::AbsLinear(0.3)]).unwrap();
        let p = PicardParams {
            iterations: 4,
            n_paths: 100_000,
            half_width: 3.0,
            bins_per_axis: 16,
            ..PicardParams::default()
        };
        let r = picard_flow_mc(&spec, &p).unwrap();
        let err = r.table.relative_l2(|q, z, out| {
            out.iter_mut().for_each(|v| *v = 0.0);
            out[0] = crate::flow::abs_linear_closed_form(0.5, q, z[0]);
            out[3] = crate::flow::abs_linear_closed_form(0.3, q, z[1]);
        });
        assert!(err < 0.05, "{err} {:?}", r.differences);
    }
}
