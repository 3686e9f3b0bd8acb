//! Exemplar-guided image translation with local masks and highway adaptive
//! instance normalization.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod hadain;
pub mod imageio;
pub mod networks;
pub mod objectives;
pub mod training;

pub use error::{LomitError, Result};
