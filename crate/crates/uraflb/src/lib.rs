//! Finite-blocklength achievability and converse bounds on the minimum
//! energy-per-bit for unsourced random access over MIMO quasi-static
//! Rayleigh fading with a random, unknown number of active users, plus a
//! Monte-Carlo link simulator that serves as an independent empirical
//! check on the bounds.

pub mod achievability;
pub mod codebook;
pub mod config;
pub mod converse;
pub mod ka_bounds;
pub mod linalg;
pub mod model;
pub mod numerics;
pub mod report;
pub mod simulator;

pub use model::{
    CodebookEnsemble, ErrorTargets, KaDistribution, McConfig, MSize, Scenario,
};
pub use report::{BoundReport, OptTrace};
