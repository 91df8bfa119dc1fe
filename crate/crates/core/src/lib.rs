pub mod affix;
pub mod corpus;
pub mod dynamics;
pub mod error;
pub mod exploration;
pub mod par;
pub mod pipeline;
pub mod similarity;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
