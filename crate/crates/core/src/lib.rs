//! Knowledge-guided state-space pre-training for EEG: data handling,
//! preprocessing, band-power targets, the S4 backbone, objectives and the
//! pre-training / fine-tuning harness.

pub mod bandpower;
pub mod corpus;
pub mod error;
pub mod network;
pub mod nn;
pub mod objectives;
pub mod preprocess;
pub mod report;
pub mod ssm;
pub mod training;

pub use error::{Error, Result};
