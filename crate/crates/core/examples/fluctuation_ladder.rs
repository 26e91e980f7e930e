//! Pairing ensembles `⟨ψ, (u − ū)/γ_ρ⟩` along a short ρ-ladder, against the
//! deterministic limits `[N]` and `[N, N̄]` of the Gaussian fluctuation field.
//!
//! Usage: `fluctuation_ladder [replicas]` (default 96).

use std::f64::consts::PI;

use shelab::experiment::ExperimentConfig;
use shelab::lab::{abs_linear_j_table, summarize, LabOptions, LabPlan, TestFunctionSpec};
use shelab::sigma::SigmaSpec;
use shelab::spde::{Integrator, SimParams};
use shelab::torus::{Field, TorusGrid};

fn main() -> shelab::Result<()> {
    let replicas: u64 = std::env::args().nth(1).map(|s| s.parse().expect("replica count")).unwrap_or(96);
    let (side, n, beta) = (4.0, 64, 0.5);
    let ladder = [0.1, 0.05];
    // every rung draws from one noise path sampled at this step
    let base_dt = ladder[1] / 8.0;

    let mut psi = TestFunctionSpec::new("psi", [0.0, 0.0], 1.0, 0.25, 0.75);
    psi.partner = Some("phi".into());
    let phi = TestFunctionSpec::new("phi", [0.5, 0.0], 0.75, 0.2, 0.8);
    let coeffs = abs_linear_j_table(beta, 8.0, 321)?;

    println!("abs_linear({beta}), L = {side}, n = {n}, {replicas} replicas");
    println!("{:>6} {:>5} {:>11} {:>10} {:>8} {:>11} {:>10} {:>10}", "rho", "test", "Var", "[N]", "gap", "E[M]", "Cov EW", "[N,Nbar]");
    for rho in ladder {
        let grid = TorusGrid::new(side, n)?;
        let u0 = Field::from_fn(grid, 1, |_, x, _| 1.0 + 0.5 * (2.0 * PI * x / side).cos());
        let dt = rho / 4.0;
        let integ = Integrator::new(SimParams::new(grid, rho, dt, 1.0, SigmaSpec::abs_linear(1, beta)?, u0)?);
        let opts = LabOptions { noise_refine: (dt / base_dt).round() as u32, ..Default::default() };
        let plan = LabPlan::new(integ, &[psi.clone(), phi.clone()], &coeffs, ExperimentConfig::default_probes(side), opts)?;
        let ens = plan.run(1, replicas, 1)?;
        let s = summarize(&plan, &ens)?;
        for t in &s.tests {
            println!(
                "{rho:>6} {:>5} {:>11.4e} {:>10.4e} {:>8.4} {:>11.4e} {:>10.4e} {:>10.4e}",
                t.psi_id, t.var_pairing.value, t.n_limit, t.var_gap, t.mean_qv_m.value, t.cov_ew.value, t.n_nbar_limit
            );
        }
        for c in &s.concentration {
            println!(
                "        concentration s = {}: Var h {:.3e}, Var j {:.3e}, |mean h - target| {:.3e}",
                c.spec.s, c.var_h.value, c.var_j.value, c.distance_h
            );
        }
    }
    Ok(())
}
