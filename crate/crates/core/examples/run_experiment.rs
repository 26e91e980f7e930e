//! Drive a packaged experiment from code rather than the command line.
//!
//! Usage: `run_experiment [out_dir]`; defaults to a directory under the
//! system temp dir. Runs the flow experiment, then reads back the manifest
//! and one table.

use shelab::experiment::{run, ExperimentConfig, FlowRow, Kind};
use shelab::io::{read_manifest, read_table};

fn main() -> shelab::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("shelab_run_experiment"));

    let mut cfg = ExperimentConfig::from_json_str(
        r#"{
            "schema_version": 1,
            "kind": "flow",
            "flow": {"betas": [0.4, 0.6], "blow_up_betas": [1.5], "subcriticality_betas": [0.6]}
        }"#,
    )?;
    cfg.out = Some(out);
    assert_eq!(cfg.kind()?, Kind::Flow);

    let outcome = run(cfg, true)?;
    for v in &outcome.verdicts {
        println!("{}", v.line());
    }
    println!("exit code would be {}", outcome.exit_code());

    let m = read_manifest(&outcome.dir)?;
    println!("\n{} ({}) in {:.2} s; files:", m.kind, m.artifact_version, m.wall_clock_seconds);
    for (f, sha) in &m.files {
        println!("  {f:<28} {}", &sha[..16]);
    }
    let rows: Vec<FlowRow> = read_table(&outcome.dir, "flow_errors")?;
    println!("\nflow_errors.csv: {rows:?}");
    Ok(())
}
