//! Graph-guided structure-aware prompting for multiple-choice commonsense QA.

pub mod dataset;
pub mod encoder;
pub mod error;
pub mod gnn;
pub mod graph;
pub mod harness;
pub mod hmpr;
pub mod knowledge;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod prompt;
pub mod synth;
pub mod text;
pub mod trainer;
pub mod verify;

pub use error::{GsapError, Result};
