//! The seven acceptance criteria, one PASS/FAIL line each. Runs without the
//! libtest harness so the lines are always shown.

use std::process::ExitCode;

use boundary_rl::verify::{Verifier, CHECKS};

fn main() -> ExitCode {
    let mut verifier = Verifier::new(0);
    let results = verifier.run_all();
    assert_eq!(results.len(), CHECKS.len());
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
