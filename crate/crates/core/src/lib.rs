pub mod bpe;
pub mod corpus;
pub mod error;
pub mod rng;
pub mod noising;
pub mod tape;
pub mod model;
pub mod checkpoint;
pub mod config;
pub mod train;
pub mod decoding;
pub mod metrics;
pub mod tasks;
pub mod synthetic;
