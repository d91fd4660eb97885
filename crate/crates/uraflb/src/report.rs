//! Result carriers shared by the bounds and the CLI.

use serde::{Deserialize, Serialize};

/// What a bound evaluation produced: the value (a probability or an
/// energy-per-bit in dB), its Monte-Carlo standard error, and the optimizer
/// choices that achieved it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    pub value: f64,
    pub se: f64,
    pub samples: usize,
    pub seed: u64,
    /// Feasible result or an explicit infeasibility at the bracket ceiling.
    pub feasible: bool,
    pub trace: OptTrace,
}

impl BoundReport {
    pub fn infeasible(samples: usize, seed: u64) -> Self {
        BoundReport {
            value: f64::INFINITY,
            se: f64::INFINITY,
            samples,
            seed,
            feasible: false,
            trace: OptTrace::default(),
        }
    }
}

/// Optimizer attribution: which knob settings achieved the reported value.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OptTrace {
    pub p_star: Option<f64>,
    pub p_prime_star: Option<f64>,
    pub r_prime_star: Option<usize>,
    pub k_l: Option<usize>,
    pub k_u: Option<usize>,
    pub rho_star: Option<f64>,
    pub ka_tilde_star: Option<usize>,
    /// Which theorem achieved a converse envelope.
    pub source: Option<String>,
    /// Conservative mass added by skipped cells.
    pub skipped_mass: Option<f64>,
}
