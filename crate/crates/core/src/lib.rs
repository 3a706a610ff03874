//! Head-aware KV-cache compression for autoregressive decoders.
//!
//! The engine classifies every attention head as *local* or *global* once the
//! cache has been prefilled, then keeps only the conditional tokens plus a
//! recent window for local heads while global heads retain a `ρ·N` token
//! budget managed by stratified token eviction.
//!
//! This crate is `no_std` (with `alloc`) and contains only the algorithmic
//! core. File formats, the sweep harness and the command-line front end live
//! in the `headkv` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod analysis;
pub mod attention;
pub mod cache;
pub mod config;
mod error;
pub mod eviction;
pub mod grouping;
pub mod matrix;
pub mod metrics;
pub mod pipeline;
pub mod synth;
pub mod trace;

pub use cache::{GridSpec, HeadAddr, HeadCache, HeadClass, HeadLayout, TokenRecord};
pub use config::CompressionConfig;
pub use error::{Error, Result};
pub use eviction::Policy;
pub use matrix::Matrix;
