use super::OracleReport;
use crate::safe_policy::{penalty_update, psi_and_multiplier, LagrangianState};

/// One row of the multiplier table: inputs and the exact expected outputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LagrangianCase {
    pub lambda: f64,
    pub mu: f64,
    pub delta: f64,
    pub psi: f64,
    pub next_lambda: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PenaltyCase {
    pub mu: f64,
    pub nu: f64,
    pub next_mu: f64,
}

const fn case(lambda: f64, mu: f64, delta: f64, psi: f64, next_lambda: f64) -> LagrangianCase {
    LagrangianCase { lambda, mu, delta, psi, next_lambda }
}

/// Hand-evaluated with dyadic inputs so every expected value is exact.
pub const LAGRANGIAN_CASES: [LagrangianCase; 10] = [
    case(0.0, 1.0, 0.5, 0.125, 0.5),
    case(1.0, 1.0, -2.0, -0.5, 0.0),
    case(1.0, 2.0, -0.5, -0.25, 0.0),
    case(2.0, 4.0, 0.25, 0.625, 3.0),
    case(0.0, 1.0, -1.0, 0.0, 0.0),
    case(3.0, 2.0, -2.0, -2.25, 0.0),
    case(0.5, 1.0, 0.0, 0.0, 0.5),
    case(1.0, 8.0, -0.0625, -0.046875, 0.5),
    case(4.0, 1.0, -8.0, -8.0, 0.0),
    case(0.0, 1.0, 0.0, 0.0, 0.0),
];

pub const PENALTY_CASES: [PenaltyCase; 5] = [
    PenaltyCase { mu: 1.0, nu: 0.5, next_mu: 1.5 },
    PenaltyCase { mu: 0.5, nu: 0.5, next_mu: 1.0 },
    PenaltyCase { mu: 2.0, nu: 0.0, next_mu: 2.0 },
    PenaltyCase { mu: 0.25, nu: 1.0, next_mu: 1.0 },
    PenaltyCase { mu: 1.0, nu: 0.25, next_mu: 1.25 },
];

/// Exact comparison of the multiplier and penalty updates with the table.
pub fn lagrangian_table() -> OracleReport {
    let mut failures = Vec::new();
    let (mut active, mut inactive) = (0, 0);
    for c in LAGRANGIAN_CASES {
        let state = LagrangianState { lambda: c.lambda, mu: c.mu, nu: 0.0, budget: 0.0, k: 0 };
        if c.lambda + c.mu * c.delta >= 0.0 {
            active += 1;
        } else {
            inactive += 1;
        }
        let got = psi_and_multiplier(c.delta, &state);
        if got != (c.psi, c.next_lambda) {
            failures.push(format!("{c:?} gave {got:?}"));
        }
    }
    let mut floored = 0;
    for c in PENALTY_CASES {
        let state = LagrangianState { lambda: 0.0, mu: c.mu, nu: c.nu, budget: 0.0, k: 7 };
        if c.mu * (c.nu + 1.0) < 1.0 {
            floored += 1;
        }
        let next = penalty_update(&state);
        if next.mu != c.next_mu || next.k != 8 {
            failures.push(format!("{c:?} gave mu {} k {}", next.mu, next.k));
        }
    }
    let covered = active > 0 && inactive > 0 && floored > 0;
    let detail = format!(
        "{} multiplier cases ({active} active, {inactive} inactive), {} penalty cases ({floored} at the floor){}",
        LAGRANGIAN_CASES.len(),
        PENALTY_CASES.len(),
        if failures.is_empty() { String::new() } else { format!("; mismatches: {}", failures.join(", ")) }
    );
    OracleReport::new("lagrangian-table", failures.is_empty() && covered, detail)
}
