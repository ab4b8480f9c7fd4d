//! Federated prompt learning for a frozen dual encoder.
//!
//! The crate simulates a server and `K` clients that jointly learn per-block
//! text and visual prompts for a frozen two-tower transformer classifier.
//! Each federated round has two stages: clients first tune their local
//! prompts under a KL pull towards the shared global prompts, then train
//! lightweight attention aggregators that fuse all local prompts into the
//! next global prompts. Only prompts and aggregator weights ever cross the
//! client/server boundary, and every transmission is routed through the wire
//! codec so byte counts are exact.
//!
//! The crate is `no_std`-compatible (with `alloc`); the default `std` feature
//! switches float math to the platform intrinsics and enables wall-clock
//! timing. IO, file formats and the CLI live in the companion `plan-cli`
//! crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod agg;
pub mod blob;
pub mod data;
pub mod encoder;
pub mod error;
pub mod fed;
mod fmath;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod wire;

pub use error::{Error, Result};
