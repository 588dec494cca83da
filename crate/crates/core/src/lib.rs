//! Data pipeline and evaluation harness for OpenMP code world models.
//!
//! The crate covers the whole lifecycle of a run: problem and candidate
//! generation through chat-completion endpoints ([`explore`]), ground-truth
//! tool runs under ThreadSanitizer and Caliper ([`toolchain`]), hindsight
//! reasoning-trace synthesis ([`cot`]), SFT dataset export ([`dataset`]),
//! benchmark evaluation ([`eval`]) and the race-fixing agent loop ([`fix`]).
//!
//! Everything that touches a model goes through [`gateway::Gateway`], which
//! journals every completion under the run directory so that re-running a
//! stage replays instead of re-querying.

pub mod config;
pub mod cot;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod explore;
pub mod fix;
pub mod gateway;
pub mod model;
pub mod pipeline;
pub mod prompts;
pub mod store;
pub mod tokens;
pub mod toolchain;

pub use error::{Error, Result};
