//! Acceptance suite: one PASS/FAIL line per criterion 1..=10.
//!
//! Reduced desk scale for one core: L = 8, n = 128 (Δx = 1/16), 512
//! replicas, ρ ∈ {0.1, 0.05, 0.025}. Run directories land under the cargo
//! target tmpdir so the tables can be inspected afterwards.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use shelab::experiment::{run, ExperimentConfig, GridConfig, Kind, LadderRow, Verdict};
use shelab::io::{read_manifest, read_table};
use shelab::lab::TestFunctionSpec;
use shelab::sigma::SigmaSpec;
use shelab::spde::Scheme;

const SIDE: f64 = 8.0;
const N: usize = 128;
const REPLICAS: u64 = 512;
const LADDER: [f64; 3] = [0.1, 0.05, 0.025];
const SEED: u64 = 2024;
/// Torus doubling tolerance, in combined standard errors.
const DOUBLING_SE: f64 = 2.0;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn base(kind: Kind, name: &str) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.kind = Some(kind);
    c.seed = SEED;
    c.out = Some(root().join(name));
    c.grid = GridConfig { side: SIDE, n: N };
    c.rho_ladder = LADDER.to_vec();
    c.replicas = REPLICAS;
    c
}

fn exec(cfg: ExperimentConfig) -> Vec<Verdict> {
    let name = cfg.out.clone().unwrap().display().to_string();
    let t0 = Instant::now();
    match run(cfg, true) {
        Ok(o) => {
            eprintln!("  [{name}: {:.0} s]", t0.elapsed().as_secs_f64());
            o.verdicts
        }
        Err(e) => vec![Verdict::new("error", name, false, e.to_string())],
    }
}

/// "6a" and "9-H1" both file under their leading number.
fn criterion_of(v: &Verdict) -> u32 {
    let digits: String = v.criterion.chars().take_while(|c| c.is_ascii_digit()).collect();
    digits.parse().unwrap_or(0)
}

fn ladder_cfg() -> ExperimentConfig {
    base(Kind::Fluctuations, "ladder")
}

fn doubling(small: &[LadderRow], noise_base_dt: f64) -> Vec<Verdict> {
    let mut c = base(Kind::Fluctuations, "doubled");
    c.grid = GridConfig { side: 2.0 * SIDE, n: 2 * N };
    // cos(2π·mode·x/L): same initial profile on the doubled torus
    c.initial.mode *= 2;
    c.rho_ladder = vec![LADDER[0]];
    c.noise_base_dt = Some(noise_base_dt);
    let mut v = exec(c.clone());
    v.retain(|x| x.criterion == "error");
    if !v.is_empty() {
        return v;
    }
    let big: Vec<LadderRow> = match read_table(c.out.as_ref().unwrap(), "ladder") {
        Ok(t) => t,
        Err(e) => return vec![Verdict::new("error", "doubled ladder table", false, e.to_string())],
    };
    for b in &big {
        let Some(s) = small.iter().find(|s| s.rho == b.rho && s.test == b.test) else {
            v.push(Verdict::new("10", format!("{} missing on the small torus", b.test), false, String::new()));
            continue;
        };
        let stats = [
            ("Var(pairing)", s.var_pairing, s.var_pairing_se, b.var_pairing, b.var_pairing_se),
            ("Cov(pairing, EW)", s.cov_ew, s.cov_ew_se, b.cov_ew, b.cov_ew_se),
            ("mean [M]", s.mean_qv_m, s.mean_qv_m_se, b.mean_qv_m, b.mean_qv_m_se),
        ];
        for (label, a, sa, c, sc) in stats {
            let z = (a - c).abs() / (sa * sa + sc * sc).sqrt();
            v.push(Verdict::new(
                "10",
                format!("{}: {label} stable under L {SIDE} -> {} at rho {}", b.test, 2.0 * SIDE, b.rho),
                z < DOUBLING_SE,
                format!("{a:.4e} vs {c:.4e}, z = {z:.2}"),
            ));
        }
    }
    v
}

fn determinism() -> Vec<Verdict> {
    let mut files = Vec::new();
    for w in [1usize, 8] {
        let mut c = base(Kind::Fluctuations, &format!("workers_{w}"));
        c.rho_ladder = vec![0.1, 0.05];
        c.replicas = 24;
        c.workers = w;
        let v = exec(c.clone());
        if let Some(e) = v.into_iter().find(|x| x.criterion == "error") {
            return vec![e];
        }
        match read_manifest(c.out.as_ref().unwrap()) {
            Ok(m) => files.push(m.files),
            Err(e) => return vec![Verdict::new("error", "manifest", false, e.to_string())],
        }
    }
    vec![Verdict::new(
        "10",
        "checksums identical for workers 1 and 8",
        files[0] == files[1] && !files[0].is_empty(),
        format!("{} files compared", files[0].len()),
    )]
}

fn main() {
    let t0 = Instant::now();
    let mut all: Vec<Verdict> = Vec::new();

    eprintln!("criterion 1: kernel gap");
    all.extend(exec(base(Kind::KernelCheck, "kernel")));

    eprintln!("criteria 2, 3: flow");
    all.extend(exec(base(Kind::Flow, "flow")));

    eprintln!("criterion 4: FBSDE");
    all.extend(exec(base(Kind::Fbsde, "fbsde")));

    eprintln!("criterion 5: constant sigma");
    let mut c = base(Kind::Fluctuations, "constant");
    c.sigma = SigmaSpec::constant_scalar(0.5).unwrap();
    c.rho_ladder = vec![LADDER[0]];
    all.extend(exec(c).into_iter().filter(|v| v.criterion == "5" || v.criterion == "error"));

    eprintln!("criteria 6, 7, 8, H1: abs_linear(0.5) ladder");
    let lc = ladder_cfg();
    all.extend(exec(lc.clone()));

    eprintln!("criterion 9: H2 residual");
    let mut c = base(Kind::Simulate, "residual");
    c.rho_ladder = vec![LADDER[0]];
    c.replicas = 8;
    c.simulate.snapshot_replicas = 0;
    all.extend(exec(c).into_iter().filter(|v| v.criterion == "9-H2" || v.criterion == "error"));

    eprintln!("criterion 9: H3 pre-smoothed gap");
    let mut c = base(Kind::Fluctuations, "mild");
    c.lab.scheme = Scheme::PreSmoothed;
    c.lab.mild_tracker = true;
    c.replicas = 256;
    c.lab.test_functions = vec![TestFunctionSpec::new("psi", [0.0, 0.0], 2.0, 0.25, 0.75)];
    all.extend(exec(c).into_iter().filter(|v| v.criterion == "9-H3" || v.criterion == "error"));

    eprintln!("criterion 10: determinism and torus doubling");
    all.extend(determinism());
    let mut resolved = lc.clone();
    resolved.resolve();
    match read_table::<LadderRow>(lc.out.as_ref().unwrap(), "ladder") {
        Ok(rows) => all.extend(doubling(&rows, resolved.noise_base_dt.expect("resolved"))),
        Err(e) => all.push(Verdict::new("error", "ladder table", false, e.to_string())),
    }

    let mut by: BTreeMap<u32, Vec<&Verdict>> = (1..=10).map(|k| (k, Vec::new())).collect();
    for v in &all {
        by.entry(criterion_of(v)).or_default().push(v);
    }
    println!();
    let mut failed = Vec::new();
    for (k, vs) in &by {
        for v in vs {
            println!("    {}", v.line());
        }
        let pass = !vs.is_empty() && vs.iter().all(|v| v.pass);
        if !pass {
            failed.push(*k);
        }
        let tag = if *k == 0 { "errors".to_string() } else { format!("criterion {k}") };
        println!("{} {tag} ({} checks)", if pass { "PASS" } else { "FAIL" }, vs.len());
    }
    println!(
        "\nacceptance: {}/10 criteria pass in {:.0} s{}",
        (1..=10).filter(|k| !failed.contains(k)).count(),
        t0.elapsed().as_secs_f64(),
        if failed.is_empty() { String::new() } else { format!("; failing: {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
