//! Attention-based construction policies for routing problems.
//!
//! The crate builds tours for the TSP and for capacitated, prize-collecting,
//! and orienteering variants with a learned encoder-decoder policy, trains it
//! with REINFORCE against a greedy-rollout baseline, and ships classical
//! heuristics plus exact small-instance solvers for reference costs.

pub mod array;
pub mod error;
pub mod heuristics;
pub mod io;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod problems;
pub mod rng;
pub mod rollout;
pub mod tape;
pub mod train;

pub use array::Array;
pub use error::{Error, Result};
pub use optim::{AdamConfig, Grads, ParamStore};
pub use tape::{Tape, Var};
