//! Near-optimal control of two-point boundary problems for control-affine
//! plants with unknown drift. The problem is split into a forward regulator
//! (leaving `x0`) and a backward regulator (arriving at `xT`), each learned
//! online by filtered policy iteration, then composed over the horizon.
//! Model-based oracles (Riccati, closed forms, Pontryagin shooting) check
//! the learned results.

// Negated comparisons such as `!(x > 0.0)` are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod composer;
pub mod config;
pub mod critic;
pub mod dynamics;
pub mod error;
pub mod learner;
pub mod linalg;
pub mod oracle;
pub mod sim;
pub mod verify;
