//! Auditing query-based systems against attribute and membership inference.
//!
//! The crate simulates a Diffix-style counting interface ([`qbs`]), builds
//! shadow fleets and privacy games on top of it ([`game`]), searches for
//! query multisets that leak a target's secret ([`search`]) and explains
//! what was found ([`analysis`]). [`experiment`] wires these into per-user
//! runs.

pub mod analysis;
pub mod data;
pub mod error;
pub mod experiment;
pub mod game;
pub mod inference;
pub mod qbs;
pub mod query;
pub mod search;
pub mod seed;

pub use error::{Error, Result};
