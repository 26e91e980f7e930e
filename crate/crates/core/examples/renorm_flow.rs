//! The renormalization flow `∂_q H = ½ H ∂²_b H` from `H_0 = σ²`.
//!
//! abs_linear(β) has the closed form `β²b²/(1 − β²q)`, which blows up at
//! `q = 1/β²`; the saturating model flows smoothly.

use shelab::experiment::flow_closed_form_error;
use shelab::flow::{abs_linear_closed_form, solve_flow, subcriticality_check, subcriticality_params, FlowParams};
use shelab::sigma::{ScalarSigma, SigmaSpec};

fn main() -> shelab::Result<()> {
    let params = FlowParams::default();
    for beta in [0.3, 0.5, 0.7] {
        let t = solve_flow(&ScalarSigma::AbsLinear(beta), &params)?;
        println!(
            "abs_linear({beta}): {} steps, H_1(2) = {:.6} (exact {:.6}), max rel err {:.2e}",
            t.steps,
            t.eval(1.0, 2.0),
            abs_linear_closed_form(beta, 1.0, 2.0),
            flow_closed_form_error(&t, beta)
        );
    }

    let mut long = subcriticality_params();
    long.q_max = 1.0;
    let beta = 1.2;
    let t = solve_flow(&ScalarSigma::AbsLinear(beta), &long)?;
    println!(
        "\nabs_linear({beta}): blow-up at q = {:?} ({}), predicted {:.4}",
        t.blow_up_q,
        t.blow_up_reason.as_deref().unwrap_or("none"),
        1.0 / (beta * beta)
    );

    let sat = solve_flow(&ScalarSigma::Saturating(0.2, 0.6), &params)?;
    println!("\nsaturating(0.2, 0.6), H_q(b):");
    println!("{:>5} {}", "q", [0.0, 0.5, 1.0, 2.0, 4.0].map(|b| format!("{:>9}", format!("b={b}"))).join(""));
    for q in [0.0, 0.25, 0.5, 1.0] {
        let row: String = [0.0, 0.5, 1.0, 2.0, 4.0].iter().map(|b| format!("{:>9.5}", sat.eval(q, *b))).collect();
        println!("{q:>5} {row}");
    }
    println!("Lipschitz constant of sqrt H along q: {:.4?}", &sat.lip_root[..5.min(sat.lip_root.len())]);

    println!();
    for s in [SigmaSpec::abs_linear(1, 0.5)?, SigmaSpec::abs_linear(1, 1.2)?, SigmaSpec::saturating(1, 0.2, 0.6)?] {
        let v = subcriticality_check(&s, &subcriticality_params())?;
        println!(
            "{:<22} subcritical {:?}, Q_estimate {:?}, slope {:.3}",
            s.label(),
            v.subcritical,
            v.q_estimate,
            v.slope
        );
    }
    Ok(())
}
