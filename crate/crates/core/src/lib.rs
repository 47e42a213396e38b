//! Federated fine-tuning of bottleneck adapters on a frozen backbone, with
//! optimal-transport alignment of adapters before they are fused.
//!
//! The crate is a desk-scale laboratory: a toy tanh backbone, synthetic
//! heterogeneous client tasks, exact and entropic OT solvers, the server-
//! and client-side alignment/integration operators, a deterministic round
//! orchestrator, and a CLI that runs experiments and self-checks.

pub mod cli;
pub mod data;
pub mod error;
pub mod fedsim;
pub mod model;
pub mod numerics;
pub mod ot;
pub mod pia;
pub mod verify;

pub use error::{Error, Result};
