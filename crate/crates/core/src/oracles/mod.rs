//! Independent reference checks for the core numerics and algorithms.
//!
//! Each suite recomputes a quantity by a separate route (finite differences,
//! brute-force enumeration, naive filters, closed forms) and compares it with
//! the library's answer. `spowl oracle-check` runs them all.

mod codecs;
mod ensemble;
mod gradients;
mod planning;
mod selection;
mod tables;

use std::time::Instant;

pub use codecs::codec_round_trips;
pub use ensemble::ensemble_cost_targets;
pub use gradients::{check_gradient, finite_differences, FdCheck, FD_FLOOR, FD_STEP, FD_TOLERANCE};
pub use planning::planner_vs_exhaustive;
pub use selection::{naive_select_elites, select_elites_vs_naive};
pub use tables::{lagrangian_table, LagrangianCase, PenaltyCase, LAGRANGIAN_CASES, PENALTY_CASES};

/// Outcome of one oracle suite.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub name: &'static str,
    pub passed: bool,
    /// Human-readable measurements behind the verdict.
    pub detail: String,
    pub seconds: f64,
}

impl OracleReport {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail, seconds: 0.0 }
    }

    fn failed(name: &'static str, err: crate::Error) -> Self {
        Self::new(name, false, format!("error: {err}"))
    }
}

impl std::fmt::Display for OracleReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {} ({:.2}s): {}", self.name, self.seconds, self.detail)
    }
}

pub struct Suite {
    pub name: &'static str,
    pub run: fn() -> OracleReport,
}

pub fn suites() -> Vec<Suite> {
    vec![
        Suite { name: "finite-differences", run: finite_differences },
        Suite { name: "lagrangian-table", run: lagrangian_table },
        Suite { name: "select-elites", run: select_elites_vs_naive },
        Suite { name: "planner-exhaustive", run: planner_vs_exhaustive },
        Suite { name: "codecs", run: codec_round_trips },
        Suite { name: "ensemble-cost-targets", run: ensemble_cost_targets },
    ]
}

/// Runs one suite and records its wall time.
pub fn run_suite(suite: &Suite) -> OracleReport {
    let start = Instant::now();
    let mut report = (suite.run)();
    report.seconds = start.elapsed().as_secs_f64();
    report
}

pub fn run_all() -> Vec<OracleReport> {
    suites().iter().map(run_suite).collect()
}
