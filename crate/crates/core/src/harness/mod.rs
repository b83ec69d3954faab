//! Configuration, artifact writers and experiment drivers.

pub mod config;
pub mod experiments;
pub mod svg;
pub mod table;
