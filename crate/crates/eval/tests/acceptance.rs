//! Acceptance criteria 1 to 10, one suite each. Prints one line per
//! criterion and fails if any of them does.

use charedit_eval::{run_suite, Suite, Workbench};

#[test]
fn acceptance() {
    let wb = Workbench::new(0);
    let mut failures = Vec::new();
    for suite in Suite::ALL {
        let line = match run_suite(suite, &wb) {
            Ok(report) => {
                let v = &report.verdicts[0];
                let mark = if report.passed() { "PASS" } else { "FAIL" };
                if !report.passed() {
                    failures.push(suite.id());
                }
                format!("criterion {:>2} [{mark}] {}: {}", v.criterion, v.name, v.detail)
            }
            Err(e) => {
                failures.push(suite.id());
                format!("criterion {:>2} [FAIL] {}: error: {e}", suite.criterion(), suite.id())
            }
        };
        println!("{line}");
    }
    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}
