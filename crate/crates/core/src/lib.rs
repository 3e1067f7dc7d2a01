//! Distributed model predictive control over bit-rate-limited networks.
//!
//! The crate is organised bottom-up:
//! [`quantizer`] → [`problem`] → [`optimizer`] → [`dmpc`] → [`conditions`]
//! → [`refinement`] → [`sim`], with [`cli`] on top.

pub mod cli;
pub mod conditions;
pub mod dmpc;
pub mod linalg;
pub mod optimizer;
pub mod problem;
pub mod quantizer;
pub mod refinement;
pub mod scenario;
pub mod sim;

pub use conditions::{BoundConstants, DesignInputs, GainSet, RateDesign};
pub use dmpc::DmpcSpec;
pub use optimizer::{OptimizerConfig, BitLedger};
pub use problem::{CommGraph, DistributedProblem, ProblemConstants};
pub use quantizer::{Codeword, UniformQuantizer};
