pub mod graph;
pub mod loss;
pub mod privacy;
pub mod projection;
pub mod rng;
pub mod engine;
pub mod dataset;
pub mod bounds;
pub mod config;
pub mod experiment;
