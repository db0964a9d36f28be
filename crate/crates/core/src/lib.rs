//! Outcome-oriented model of selling a valuable good.
//!
//! - [`kernel`]: instruction sequences, threads, `use`/`apply`, interleaving.
//! - [`price`]: the seller's price sheet, acceptance threshold and checks.
//! - [`decision`]: decision types, the startup decision outcome and its
//!   audience fragments.
//! - [`protocol`]: the selling-thread state machine driven by owner replies.
//! - [`market`]: seeded buyer arrivals and bids, Monte-Carlo certainty
//!   estimates.
//!
//! The crate is `no_std` and needs only `alloc`.
#![no_std]

extern crate alloc;

pub mod decision;
pub mod kernel;
pub mod market;
pub mod price;
pub mod protocol;
