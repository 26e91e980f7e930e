//! Finite-difference solver for the scalar decoupling flow
//! `∂_q H = ½ H ∂²_b H`, `H_0 = σ²`, and the subcriticality verdict built on it.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::sigma::{lipschitz_estimate, ScalarSigma, SigmaSpec};

/// Growth cap beyond which the flow is declared blown up.
pub const BLOW_UP_CAP: f64 = 1e6;
/// Smallest admissible adaptive step.
pub const MIN_DQ: f64 = 1e-9;
/// Fraction of the parabolic stability limit `Δb²/max H` used per step.
pub const CFL: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    /// Half-width `B` of the `b` grid.
    pub half_width: f64,
    pub db: f64,
    /// Upper bound on the adaptive step.
    pub dq: f64,
    pub q_max: f64,
    /// Spacing of stored snapshots in `q`.
    pub store_dq: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            half_width: 8.0,
            db: 0.01,
            dq: 1e-3,
            q_max: 1.0,
            store_dq: 0.01,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.db > 0.0 && self.db <= 0.1) {
            return Err(invalid("db", format!("grid too coarse or empty (db = {}, need 0 < db <= 0.1)", self.db)));
        }
        if !(self.half_width >= 4.0 * self.db && self.half_width.is_finite()) {
            return Err(invalid("half_width", "must cover several cells"));
        }
        let cells = 2.0 * self.half_width / self.db;
        if (cells - cells.round()).abs() > 1e-6 * cells {
            return Err(invalid("db", "must divide 2·half_width"));
        }
        if !(self.dq > 0.0 && self.q_max > 0.0 && self.store_dq > 0.0) {
            return Err(invalid("dq", "steps and horizon must be positive"));
        }
        Ok(())
    }
}

/// Snapshots of `H_q(b)` on a uniform `b` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowTable {
    pub b_min: f64,
    pub db: f64,
    pub nb: usize,
    pub q_grid: Vec<f64>,
    /// `h[k][i] = H_{q_k}(b_i)`.
    pub h: Vec<Vec<f64>>,
    /// Lipschitz constant of `√H_q` over the inner 90% of the grid.
    pub lip_root: Vec<f64>,
    pub blow_up_q: Option<f64>,
    pub blow_up_reason: Option<String>,
    pub steps: usize,
    pub min_step: f64,
}

impl FlowTable {
    pub fn b(&self, i: usize) -> f64 {
        self.b_min + i as f64 * self.db
    }

    pub fn b_grid(&self) -> Vec<f64> {
        (0..self.nb).map(|i| self.b(i)).collect()
    }

    pub fn half_width(&self) -> f64 {
        -self.b_min
    }

    pub fn q_last(&self) -> f64 {
        *self.q_grid.last().unwrap()
    }

    /// True when the table reaches `q` without blow-up.
    pub fn covers(&self, q: f64) -> bool {
        self.q_last() >= q - 1e-12 && self.blow_up_q.map_or(true, |bq| bq > q)
    }

    fn slice_at(&self, k: usize, b: f64) -> f64 {
        let h = &self.h[k];
        let x = (b - self.b_min) / self.db;
        let last = self.nb - 1;
        let v = if x < 0.0 {
            quad_extrapolate(h[0], h[1], h[2], -x)
        } else if x > last as f64 {
            quad_extrapolate(h[last], h[last - 1], h[last - 2], x - last as f64)
        } else {
            let i = (x.floor() as usize).min(last - 1);
            let f = x - i as f64;
            h[i] * (1.0 - f) + h[i + 1] * f
        };
        v.max(0.0)
    }

    /// `H_q(b)`, piecewise linear in `(q, b)` inside the table and
    /// continued quadratically from the three outermost cells beyond `±B`.
    pub fn eval(&self, q: f64, b: f64) -> f64 {
        let nq = self.q_grid.len();
        if nq == 1 || q <= self.q_grid[0] {
            return self.slice_at(0, b);
        }
        if q >= self.q_grid[nq - 1] {
            return self.slice_at(nq - 1, b);
        }
        let k = match self.q_grid.binary_search_by(|v| v.total_cmp(&q)) {
            Ok(k) => return self.slice_at(k, b),
            Err(k) => k - 1,
        };
        let f = (q - self.q_grid[k]) / (self.q_grid[k + 1] - self.q_grid[k]);
        self.slice_at(k, b) * (1.0 - f) + self.slice_at(k + 1, b) * f
    }

    /// Long-format CSV with columns `q,b,H,lip_root`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["q", "b", "H", "lip_root"]).map_err(csv_err)?;
        for (k, q) in self.q_grid.iter().enumerate() {
            for i in 0..self.nb {
                wr.write_record(&[
                    format!("{q}"),
                    format!("{}", self.b(i)),
                    format!("{:e}", self.h[k][i]),
                    format!("{:e}", self.lip_root[k]),
                ])
                .map_err(csv_err)?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Quadratic through `(0,f0)`, `(-1,f1)`, `(-2,f2)`, evaluated at `t ≥ 0` cells outward.
fn quad_extrapolate(f0: f64, f1: f64, f2: f64, t: f64) -> f64 {
    let d1 = f0 - f1;
    let d2 = f0 - 2.0 * f1 + f2;
    f0 + t * d1 + 0.5 * t * (t + 1.0) * d2
}

fn lip_root(h: &[f64], b_min: f64, db: f64) -> f64 {
    let inner = 0.9 * (-b_min);
    let mut lip: f64 = 0.0;
    for i in 0..h.len() - 1 {
        let (b0, b1) = (b_min + i as f64 * db, b_min + (i + 1) as f64 * db);
        if b0.abs() <= inner + 1e-12 && b1.abs() <= inner + 1e-12 {
            lip = lip.max((h[i + 1].max(0.0).sqrt() - h[i].max(0.0).sqrt()).abs() / db);
        }
    }
    lip
}

/// Explicit march of `∂_q H = ½ H ∂²_b H` from `H_0 = σ²`.
///
/// The step is `min(dq, CFL·Δb²/max H)`, clipped to land on snapshot times.
/// At `±B` the second derivative is copied from the neighbouring node
/// (vanishing third derivative), which is exact for quadratic profiles.
pub fn solve_flow(sigma: &ScalarSigma, params: &FlowParams) -> Result<FlowTable> {
    params.validate()?;
    let nb = (2.0 * params.half_width / params.db).round() as usize + 1;
    let b_min = -params.half_width;
    let db = params.db;
    let mut h: Vec<f64> = (0..nb)
        .map(|i| {
            let s = sigma.value(b_min + i as f64 * db);
            s * s
        })
        .collect();
    let mut d2 = vec![0.0; nb];
    let mut table = FlowTable {
        b_min,
        db,
        nb,
        q_grid: vec![0.0],
        lip_root: vec![lip_root(&h, b_min, db)],
        h: vec![h.clone()],
        blow_up_q: None,
        blow_up_reason: None,
        steps: 0,
        min_step: f64::INFINITY,
    };
    let n_store = (params.q_max / params.store_dq - 1e-9).ceil() as usize;
    let inv_db2 = 1.0 / (db * db);
    let mut q = 0.0;
    'outer: for k in 1..=n_store {
        let target = (k as f64 * params.store_dq).min(params.q_max);
        while q < target - 1e-14 {
            let hmax = h.iter().fold(0.0f64, |a, v| a.max(*v));
            if h.iter().any(|v| !v.is_finite()) {
                table.blow_up_q = Some(q);
                table.blow_up_reason = Some("non-finite value".into());
                break 'outer;
            }
            if hmax > BLOW_UP_CAP {
                table.blow_up_q = Some(q);
                table.blow_up_reason = Some(format!("max H exceeded {BLOW_UP_CAP:e}"));
                break 'outer;
            }
            let stable = if hmax > 0.0 { CFL * db * db / hmax } else { f64::INFINITY };
            if stable < MIN_DQ {
                table.blow_up_q = Some(q);
                table.blow_up_reason = Some(format!("stable step fell below {MIN_DQ:e}"));
                break 'outer;
            }
            let free = params.dq.min(stable);
            table.min_step = table.min_step.min(free);
            let step = free.min(target - q);
            for i in 1..nb - 1 {
                d2[i] = (h[i - 1] - 2.0 * h[i] + h[i + 1]) * inv_db2;
            }
            d2[0] = d2[1];
            d2[nb - 1] = d2[nb - 2];
            for i in 0..nb {
                h[i] += 0.5 * step * h[i] * d2[i];
            }
            if let Some(v) = h.iter().find(|v| **v < 0.0) {
                table.blow_up_q = Some(q);
                table.blow_up_reason = Some(format!("positivity lost (H = {v:e})"));
                break 'outer;
            }
            q += step;
            table.steps += 1;
        }
        q = target;
        table.q_grid.push(q);
        table.lip_root.push(lip_root(&h, b_min, db));
        table.h.push(h.clone());
    }
    Ok(table)
}

/// `β²b²/(1 − β²q)`.
pub fn abs_linear_closed_form(beta: f64, q: f64, b: f64) -> f64 {
    beta * beta * b * b / (1.0 - beta * beta * q)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubcriticalityVerdict {
    /// Last stable `q` of the flow (or the horizon when no blow-up occurred).
    pub q_estimate: Option<f64>,
    pub slope: f64,
    /// `None` when the flow could not be solved.
    pub subcritical: Option<bool>,
    pub note: Option<String>,
}

/// Parameters for the horizon used to locate finite-`q` blow-up.
pub fn subcriticality_params() -> FlowParams {
    FlowParams {
        half_width: 8.0,
        db: 0.05,
        dq: 1e-2,
        q_max: 6.0,
        store_dq: 0.01,
    }
}

/// `Q_estimate > 1` and asymptotic slope `< 1`. Scalar and diagonal
/// nonlinearities go through the finite-difference flow componentwise.
pub fn subcriticality_check(spec: &SigmaSpec, params: &FlowParams) -> Result<SubcriticalityVerdict> {
    let slope = lipschitz_estimate(spec, 100.0, 2000, 0)?.slope;
    let comps = match spec.diagonal_components() {
        Some(c) => c,
        None => {
            return Ok(SubcriticalityVerdict {
                q_estimate: None,
                slope,
                subcritical: None,
                note: Some("undetermined: flow solver needs a scalar or diagonal nonlinearity".into()),
            })
        }
    };
    let mut q_est = params.q_max;
    for c in &comps {
        match solve_flow(c, params) {
            Ok(t) => {
                if let Some(bq) = t.blow_up_q {
                    q_est = q_est.min(bq);
                }
            }
            Err(e) => {
                return Ok(SubcriticalityVerdict {
                    q_estimate: None,
                    slope,
                    subcritical: None,
                    note: Some(format!("undetermined: {e}")),
                })
            }
        }
    }
    Ok(SubcriticalityVerdict {
        q_estimate: Some(q_est),
        slope,
        subcritical: Some(q_est > 1.0 && slope < 1.0),
        note: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_rel_err(t: &FlowTable, beta: f64) -> f64 {
        let mut worst: f64 = 0.0;
        for (k, q) in t.q_grid.iter().enumerate() {
            for i in 0..t.nb {
                let b = t.b(i);
                if b.abs() > 4.0 + 1e-9 || b.abs() < 0.5 {
                    continue;
                }
                let exact = abs_linear_closed_form(beta, *q, b);
                worst = worst.max((t.h[k][i] - exact).abs() / exact);
            }
        }
        worst
    }

    #[test]
    fn constant_sigma_is_stationary() {
        let t = solve_flow(&ScalarSigma::Constant(0.7), &FlowParams::default()).unwrap();
        assert!(t.blow_up_q.is_none());
        for row in &t.h {
            assert!(row.iter().all(|v| *v == 0.7 * 0.7));
        }
        assert_eq!(t.lip_root.last(), Some(&0.0));
    }

    #[test]
    fn abs_linear_matches_closed_form() {
        let p = FlowParams {
            half_width: 5.0,
            ..FlowParams::default()
        };
        let t = solve_flow(&ScalarSigma::AbsLinear(0.5), &p).unwrap();
        assert!(t.blow_up_q.is_none());
        assert_eq!(t.h[0][t.nb / 2 + 100], 0.25);
        assert!(max_rel_err(&t, 0.5) < 1e-3);
        // √H = β|b|/√(1−β²q)
        let lip = *t.lip_root.last().unwrap();
        assert!((lip - 0.5 / 0.75f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn refinement_reduces_error() {
        let err = |db: f64| {
            let p = FlowParams {
                half_width: 5.0,
                db,
                dq: 1.0,
                q_max: 1.0,
                store_dq: 0.05,
            };
            max_rel_err(&solve_flow(&ScalarSigma::AbsLinear(0.7), &p).unwrap(), 0.7)
        };
        let (coarse, fine) = (err(0.1), err(0.05));
        assert!(coarse / fine >= 3.0, "{coarse} {fine}");
    }

    #[test]
    fn blow_up_near_pole() {
        let p = FlowParams {
            db: 0.05,
            dq: 1e-2,
            ..FlowParams::default()
        };
        let t = solve_flow(&ScalarSigma::AbsLinear(1.2), &p).unwrap();
        let bq = t.blow_up_q.expect("blow-up expected");
        assert!((bq - 1.0 / 1.44).abs() < 0.05, "{bq}");
        assert!(t.h.iter().flatten().all(|v| *v >= 0.0));
    }

    #[test]
    fn coarse_grid_rejected() {
        let p = FlowParams {
            db: 0.2,
            ..FlowParams::default()
        };
        assert!(solve_flow(&ScalarSigma::AbsLinear(0.5), &p).is_err());
    }

    #[test]
    fn interpolation_and_extension() {
        let p = FlowParams {
            half_width: 2.0,
            db: 0.05,
            store_dq: 0.1,
            ..FlowParams::default()
        };
        let t = solve_flow(&ScalarSigma::AbsLinear(0.5), &p).unwrap();
        for (q, b) in [(0.35, 1.23), (0.5, 3.0), (1.0, -6.0)] {
            let exact = abs_linear_closed_form(0.5, q, b);
            assert!((t.eval(q, b) - exact).abs() < 2e-3 * exact, "{q} {b}");
        }
    }

    #[test]
    fn verdicts() {
        let p = subcriticality_params();
        let half = subcriticality_check(&SigmaSpec::abs_linear(1, 0.5).unwrap(), &p).unwrap();
        assert_eq!(half.subcritical, Some(true));
        assert!((half.q_estimate.unwrap() - 4.0).abs() < 0.4);
        assert!((half.slope - 0.5).abs() < 1e-9);
        let steep = subcriticality_check(&SigmaSpec::abs_linear(1, 1.2).unwrap(), &p).unwrap();
        assert_eq!(steep.subcritical, Some(false));
        let c = subcriticality_check(&SigmaSpec::constant_scalar(1.0).unwrap(), &p).unwrap();
        assert_eq!(c.q_estimate, Some(6.0));
        assert_eq!(c.subcritical, Some(true));
        let sat = subcriticality_check(&SigmaSpec::saturating(2, 1.0, 1.0).unwrap(), &p).unwrap();
        assert_eq!(sat.subcritical, None);
    }

    #[test]
    fn csv_layout() {
        let p = FlowParams {
            half_width: 1.0,
            db: 0.1,
            q_max: 0.02,
            ..FlowParams::default()
        };
        let t = solve_flow(&ScalarSigma::Constant(1.0), &p).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("q,b,H,lip_root"));
        assert_eq!(lines.count(), 3 * 21);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn coarse() -> FlowParams {
            FlowParams { half_width: 4.0, db: 0.1, dq: 1e-2, q_max: 0.5, store_dq: 0.05 }
        }

        fn sigma() -> impl Strategy<Value = ScalarSigma> {
            prop_oneof![
                (0.0f64..2.0).prop_map(ScalarSigma::Constant),
                (0.0f64..0.9).prop_map(ScalarSigma::AbsLinear),
                (0.0f64..1.0, 0.0f64..1.0).prop_map(|(a, b)| ScalarSigma::Saturating(a, b)),
            ]
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn starts_at_sigma_squared_and_stays_nonnegative(s in sigma()) {
                let t = solve_flow(&s, &coarse()).unwrap();
                for i in 0..t.nb {
                    let v = s.value(t.b(i));
                    prop_assert_eq!(t.h[0][i], v * v);
                }
                prop_assert!(t.h.iter().flatten().all(|h| *h >= 0.0 && h.is_finite()));
            }
        }
    }
}
