pub mod confounding;
pub mod dataset;
pub mod engine;
pub mod gps;
pub mod linalg;
pub mod rng;
pub mod simlab;
pub mod sumtrees;
