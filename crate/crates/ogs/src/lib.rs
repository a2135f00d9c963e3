//! Orthogonal gradient selection at desk scale.
//!
//! This crate selects fine-tuning data by gradient geometry instead of
//! filtering heuristics: a cached anchor gradient defines the general
//! capability to protect, candidate samples are scored by how orthogonal or
//! conflicting their gradients are against it, and a small reinforcement
//! learning policy (PPO with a Lagrangian constraint) learns which gradient
//! cluster to train on and how much conflict-aware replay to mix in. The
//! policy is trained on a cheap navigator model and applied to a larger
//! target model with plain SGD, so the target never pays per-step geometry
//! costs.
//!
//! Module map:
//!
//! - [`model`]: dense networks, per-sample gradients, SGD.
//! - [`geometry`]: anchor gradients, orthogonality/conflict scores.
//! - [`selection`]: selection strategies, batch mixing, clustering.
//! - [`policy`]: the CMDP formulation and PPO-Lagrangian optimizer.
//! - [`pipeline`]: preprocessing, policy learning, and target application.
//! - [`mod@bench`]: synthetic conflict-structured tasks plus baseline selectors.
//! - [`verify`]: executable checks of the scaling, optimality, overhead, and
//!   transferability properties the method relies on.
//! - [`config`] / [`cli`]: file configuration and the command-line surface.
//!
//! The runnable examples under `examples/` walk through each capability; the
//! `ogs` binary exposes the same flows as subcommands.

pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod geometry;
pub mod model;
pub mod pipeline;
pub mod policy;
pub mod report;
pub mod seed;
pub mod selection;
pub mod verify;

pub use error::{Error, Result};
