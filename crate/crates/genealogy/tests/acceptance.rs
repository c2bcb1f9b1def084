//! Acceptance criteria at their stated scale and tolerance.
//!
//! Runs without the libtest harness so that the per-criterion lines are always
//! printed. Filter with `cargo test --test acceptance -- <name>...`.

use std::process::ExitCode;
use std::time::Instant;

use anyhow::Result;
use genealogy::verification::{self as v, Role, TestReport};

type Criterion = (&'static str, &'static str, fn() -> Result<TestReport>);

const CRITERIA: [Criterion; 6] = [
    ("1", "moment identity", || v::test_moment_recursion(&Default::default())),
    ("2", "generalized branching", || v::test_generalized_branching(&Default::default())),
    ("3", "Feynman-Kac duality", || v::test_duality(&Default::default())),
    ("4", "algebra suite", || v::test_algebra_suite(&Default::default())),
    ("5", "monotone approximation", || v::test_monotone_approximation(&Default::default())),
    ("6", "calibration", || v::test_calibration(&Default::default())),
];

fn describe(r: &TestReport) {
    for row in r.rows.iter().filter(|row| !row.pass && row.role != Role::Alternate) {
        println!(
            "    failed: {} lhs={:.6e} rhs={:.6e} z={:?} residual={:?} tol={:.3e}",
            row.label, row.lhs, row.rhs, row.z, row.residual, row.tolerance
        );
    }
    for note in &r.notes {
        println!("    note: {note}");
    }
}

fn body(filters: Vec<String>) -> bool {
    let mut ok = true;
    for (id, name, run) in CRITERIA {
        let key = format!("criterion_{id}_{}", name.replace([' ', '-'], "_").to_lowercase());
        if !filters.is_empty() && !filters.iter().any(|f| key.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        match run() {
            Ok(r) => {
                let checked = r.rows.iter().filter(|row| row.role != Role::Alternate).count();
                println!(
                    "{} criterion {id} ({name}): {}/{} rows pass [{:.1}s]",
                    if r.pass { "PASS" } else { "FAIL" },
                    checked - r.failures(),
                    checked,
                    start.elapsed().as_secs_f64()
                );
                describe(&r);
                ok &= r.pass;
            }
            Err(e) => {
                println!("FAIL criterion {id} ({name}): error: {e:#}");
                ok = false;
            }
        }
    }
    ok
}

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    rayon::ThreadPoolBuilder::new().stack_size(128 << 20).build_global().expect("rayon pool");
    let ok = std::thread::Builder::new()
        .stack_size(512 << 20)
        .spawn(move || body(filters))
        .expect("spawn")
        .join()
        .unwrap_or(false);
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
