//! Core algorithms for the MTmixAtt multi-scenario ranking architecture.
//!
//! The crate is `no_std` (it needs `alloc`) and contains everything that is
//! pure computation: a small reverse-mode tensor tape, AutoToken feature
//! grouping, head-wise learnable token mixing, the shared dense and
//! scenario-sparse mixture-of-experts layers, MLoRA-style scenario heads, the
//! multi-scenario BCE objective, a synthetic click/conversion generator, exact
//! AUC/GAUC, and the training loop. File formats, configuration files and the
//! command line live in the `mtmixatt` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autotoken;
pub mod config;
pub mod data;
mod error;
pub mod gradcheck;
pub mod graph;
pub mod heads;
pub mod metrics;
pub mod mixing;
pub mod model;
pub mod moe;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod topk;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, OpKind, Var};
pub use tensor::Tensor;
