//! Outdoor cellular localization from telco measurement reports (MRs), with
//! transfer learning across coverage domains.
//!
//! The pipeline: raw MR records are partitioned into per-serving-station
//! *domains* expressed in relative coordinates ([`domain`]), domains are
//! compared with a composite signal + trajectory distance ([`distance`]),
//! positions are recovered with a multi-output regression forest ([`forest`]),
//! and label-scarce domains borrow structure from similar well-labeled ones
//! via structure transfer ([`stl`]). A grid fingerprint baseline
//! ([`fingerprint`]), a deterministic synthetic world generator ([`synth`])
//! and an experiment harness ([`eval`]) round out the toolkit. The `tloc`
//! binary exposes every stage as a subcommand.
//!
//! All randomness flows through seeded ChaCha8 generators; identical inputs
//! and seeds reproduce identical outputs, bit for bit.

pub mod config;
pub mod distance;
pub mod domain;
pub mod error;
pub mod eval;
pub mod fingerprint;
pub mod forest;
pub mod geo;
pub mod lsh;
pub mod mr;
pub mod stl;
pub mod synth;

pub use error::TlocError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, TlocError>;
