use spowl_core::oracles::{run_suite, suites};

#[test]
fn every_oracle_suite_passes() {
    let mut failed = Vec::new();
    for suite in suites() {
        let report = run_suite(&suite);
        println!("{report}");
        if !report.passed {
            failed.push(report.name);
        }
    }
    assert!(failed.is_empty(), "failing suites: {failed:?}");
}
