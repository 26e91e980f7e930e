//! The registered nonlinearities, their JSON form, PSD roots and the
//! Lipschitz/slope diagnostics used by the subcriticality gate.

use shelab::sigma::{lipschitz_estimate, matrix_sqrt_psd, PsdMatrix, ScalarSigma, SigmaSpec};

fn main() -> shelab::Result<()> {
    let models = vec![
        SigmaSpec::constant_scalar(0.5)?,
        SigmaSpec::abs_linear(1, 0.5)?,
        SigmaSpec::abs_linear(1, 1.2)?,
        SigmaSpec::saturating(2, 0.2, 0.6)?,
        SigmaSpec::diagonal(vec![ScalarSigma::AbsLinear(0.4), ScalarSigma::Constant(0.3)])?,
    ];
    println!("{:<40} {:>9} {:>7} {:>6}  json", "model", "Lipschitz", "slope", "< 1");
    for s in &models {
        let est = lipschitz_estimate(s, 100.0, 2000, 1)?;
        println!(
            "{:<40} {:>9.4} {:>7.4} {:>6}  {}",
            s.label(),
            est.lipschitz,
            est.slope,
            est.slope_subcritical(),
            serde_json::to_string(s)?
        );
    }

    // evaluation at a point of R^2
    let sat = &models[3];
    let w = [0.5, -2.0];
    let m = sat.evaluate(&w)?;
    println!("\n{} at {w:?}: {:?}", sat.label(), m.data());

    let xi = [1.0, 1.0];
    let mut out = [0.0; 2];
    models[4].apply(&w, &xi, &mut out);
    println!("{} applied to {xi:?} at {w:?}: {out:?}", models[4].label());

    // PSD square root of a full matrix
    let a = PsdMatrix::new(2, vec![2.0, 1.0, 1.0, 2.0])?;
    let r = matrix_sqrt_psd(&a)?;
    let back = r.square();
    println!("\nsqrt of [[2,1],[1,2]] = {:.6?}", r.data());
    println!("square of the root     = {:.6?}", back.data());
    println!("eigenvalues {:?}", a.eigenvalues());

    // a round trip through the config form
    let parsed: SigmaSpec = serde_json::from_str(r#"{"variant": "abs_linear", "params": [0.5]}"#)?;
    println!("\nparsed {} (constant: {})", parsed.label(), parsed.is_constant());
    Ok(())
}
