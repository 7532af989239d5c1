//! Deep kernel fusion for tensor graphs: span analysis, layered fusion,
//! schedule propagation and tuning, shared-memory planning, block-level
//! code generation and a simulator that checks the result against a
//! reference interpreter.

pub mod error;
pub mod exec;
pub mod fixtures;
pub mod fusion;
pub mod ir;
pub mod kernelgen;
pub mod pipeline;
pub mod random;
pub mod schedule;
pub mod smem;
pub mod span;
pub mod tuning;

pub use error::{Error, Result};
