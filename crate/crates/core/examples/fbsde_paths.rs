//! Forward paths `dZ = H_{1−q}(Z)^{1/2} dB` driven by a solved flow, and
//! the conditional tables `J̄₁`, `J̃₁`, `J₁` over the start point.

use shelab::fbsde::{j_tables, simulate_paths, JTableParams, PathParams, Start};
use shelab::flow::{solve_flow, FlowParams};
use shelab::lab::abs_linear_fbsde_moment;
use shelab::sigma::{ScalarSigma, SigmaSpec};
use shelab::stats::mean_estimate;

fn main() -> shelab::Result<()> {
    let beta = 0.5;
    let spec = SigmaSpec::abs_linear(1, beta)?;
    let flow = solve_flow(
        &ScalarSigma::AbsLinear(beta),
        &FlowParams { half_width: 8.0, db: 0.05, dq: 1e-2, q_max: 1.0, store_dq: 5e-3 },
    )?;

    let b = 1.0;
    let mut p = PathParams::new(40_000, 5e-3, 11);
    p.record = vec![0.0, 0.5, 1.0];
    let paths = simulate_paths(&flow, &Start::Point(vec![b]), &p)?;
    println!("Z_0 = {b}, {} paths", paths.n_paths);
    for q in [0.5, 1.0] {
        let z = paths.column(paths.record_index(q)?, 0);
        let m1 = mean_estimate(&z);
        let sq: Vec<f64> = z.iter().map(|x| x * x).collect();
        let m2 = mean_estimate(&sq);
        println!("  q = {q}: E[Z] = {:.4} ± {:.4}, E[Z^2] = {:.4} ± {:.4}", m1.value, m1.se, m2.value, m2.se);
    }
    println!("  at q = 1: E[Z^2] exact {:.4}", b * b / (1.0 - beta * beta));
    let z1 = paths.column(paths.record_index(1.0)?, 0);
    let m4: Vec<f64> = z1.iter().map(|x| x.powi(4)).collect();
    let m4 = mean_estimate(&m4);
    println!("  E|Z_1|^4 = {:.3} ± {:.3}, exact {:.3}", m4.value, m4.se, abs_linear_fbsde_moment(beta, b, 4.0));

    let jp = JTableParams { n_paths: 32_000, n_bins: 16, range: 4.0, dq: 5e-3, seed: 3 };
    let t = j_tables(&spec, &flow, &jp)?;
    println!("\n{:>6} {:>8} {:>8} {:>8} {:>10} {:>9}", "b", "Jbar", "Jtilde", "J1", "residual", "se");
    for i in (0..t.bins.len()).filter(|i| t.valid[*i]) {
        println!(
            "{:>6.2} {:>8.4} {:>8.4} {:>8.4} {:>10.2e} {:>9.2e}",
            t.bins.axis_centre(i),
            t.jbar[i],
            t.jtilde[i],
            t.j1[i],
            t.identity_residual[i],
            t.se_identity[i]
        );
    }
    println!("identity J1^2 = Jbar^2 + Jtilde^2 within 3 SE on {:.0}% of bins", 100.0 * t.identity_pass_fraction(3.0));
    Ok(())
}
