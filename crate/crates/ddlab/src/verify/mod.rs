//! Independent verification oracles: finite-difference gradient checks and
//! brute-force enumerations that cross-check the analytic implementations.
//! The `ddlab verify` subcommand runs these suites; the acceptance tests pin
//! them to their tolerances.

pub mod enumerate;
pub mod fd;

/// Outcome of one verification suite.
#[derive(Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl SuiteResult {
    pub fn pass(name: &'static str, detail: impl Into<String>) -> Self {
        SuiteResult {
            name,
            passed: true,
            detail: detail.into(),
        }
    }

    pub fn fail(name: &'static str, detail: impl Into<String>) -> Self {
        SuiteResult {
            name,
            passed: false,
            detail: detail.into(),
        }
    }

    pub fn from(name: &'static str, r: Result<String, String>) -> Self {
        match r {
            Ok(d) => SuiteResult::pass(name, d),
            Err(d) => SuiteResult::fail(name, d),
        }
    }
}
