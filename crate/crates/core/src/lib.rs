#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod experiments;
pub mod io;
pub mod latentmap;
pub mod metrics;
pub mod operators;
pub mod optim;
pub mod oracle;
pub mod parallel;
pub mod phantom;
pub mod prior;
pub mod rng;
pub mod sampler;
pub mod schedule;

pub use error::{Error, Result};
