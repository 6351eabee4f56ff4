//! Runs every acceptance criterion and prints one PASS/FAIL line each.
//!
//! A red criterion is reported, not fatal: the process fails only when the
//! harness itself cannot run. `ICD_ACCEPTANCE_ONLY=2,4` limits the set.

use std::io::Write;

use icd_cli::acceptance::{run_one, Lab};
use icd_cli::RunConfig;

fn main() {
    let only: Vec<usize> = std::env::var("ICD_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut cfg = RunConfig::default();
    cfg.sync();
    let mut lab = Lab::new(&cfg).expect("acceptance setup");
    let mut passed = 0;
    let mut total = 0;
    println!("acceptance: criteria 1-12, seed {}", cfg.seed);
    for id in 1..=12 {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        run_one(&mut lab, id, |r| {
            total += 1;
            passed += r.pass as usize;
            println!("{}", r.line());
            let _ = std::io::stdout().flush();
        });
    }
    println!("acceptance: {passed}/{total} criteria pass");
}
