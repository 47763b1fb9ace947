//! Code-switching language identification: audio front end, corpus
//! handling, sampling schedules, models, metrics and training loops.

pub mod corpus;
pub mod dsp;
mod error;
mod language;
pub mod metrics;
pub mod models;
pub mod sampler;
pub mod trainer;

pub use error::{CoreError, Result};
pub use language::Language;
