//! Nonanticipative rate-distortion function (NRDF) solver for finite-alphabet,
//! possibly time-varying Markov sources.
//!
//! The bound is computed in two passes:
//!
//! * [`backward::backward_pass`] sweeps stages `t = n..1` over a discretized
//!   belief space, solving every (current belief, next belief, branch) cell
//!   with the dynamic alternating minimization in [`am_stage`].
//! * [`forward::forward_pass`] walks forward from stage 0 along the best belief
//!   trajectory and reports per-stage rates, distortions and policies.
//!
//! All matrices are column-stochastic: the conditioning variable indexes
//! columns and every column is a probability vector. Logarithms are natural
//! (rates in nats) unless a caller converts.

pub mod am_stage;
pub mod backward;
pub mod error;
pub mod forward;
pub mod grid;
pub mod model;

pub use error::{Error, Result};
