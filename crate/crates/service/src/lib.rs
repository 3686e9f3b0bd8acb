//! Command-line tools and the HTTP API for local-mask image translation.

pub mod api;
pub mod cli;
pub mod inference;
