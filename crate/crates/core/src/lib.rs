//! Contrastive expert activation inspection for toy mixture-of-experts models,
//! plus an adaptive retrieval pipeline driven by the experts it finds.
//!
//! The crate is organised bottom-up: [`moe`] runs the model and exposes gate
//! values, [`trace`] captures them, [`ceai`] turns two trace sets into a
//! contrastive profile and a scenario classifier, [`steering`] overrides
//! routing, [`synthworld`] builds worlds with planted ground truth, and
//! [`ragpipe`] / [`experiments`] put the pieces together.

pub mod ceai;
pub mod config;
pub mod error;
pub mod experiments;
pub mod moe;
pub mod ragpipe;
pub mod rng;
pub mod steering;
pub mod synthworld;
pub mod trace;

pub use error::{Error, Result};
