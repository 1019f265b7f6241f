//! Core kernels for trust-scored federated distillation.
//!
//! Everything in this crate is a pure function of its inputs (plus an
//! explicitly passed RNG), needs only `alloc`, and is shared by the
//! simulator, CLI, and file-format code in the `rifle` crate.
//!
//! The round protocol, in terms of this crate:
//!
//! 1. [`client::ClientState::local_round`] trains each client on its shard.
//! 2. [`client::ClientState::emit_update`] sends logits on the public set
//!    (and optionally a final-layer gradient).
//! 3. [`server::score_clients`] / [`server::trust_weights`] turn KL divergence
//!    against the server reference into aggregation weights.
//! 4. [`server::aggregate_teacher`] builds the teacher distribution and
//!    [`server::ServerState::distill_global`] distills it into the heavy model.
//! 5. [`server::ServerState::detect`] flags clients whose KL to the server did
//!    not shrink after the update.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod client;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod server;

pub use client::{AttackProfile, ClientState, ClientUpdate};
pub use data::{Dataset, PartitionPlan};
pub use error::{Error, Result};
pub use metrics::{CostModel, RoundMetrics};
pub use model::{DenseModel, ForwardTrace, Gradients};
pub use numerics::{LogitBatch, Matrix, ProbBatch, PROB_EPS};
pub use server::{ClientTrust, DeltaMode, DistillParams, ServerState, TrustLedger};
