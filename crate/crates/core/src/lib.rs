pub mod config;
pub mod embedding;
pub mod error;
pub mod evaluate;
pub mod geometry;
pub mod index;
pub mod ingest;
pub mod pipeline;
pub mod posegraph;
pub mod rng;
pub mod slam;
pub mod supervision;
pub mod synthworld;
