pub mod apps;
pub mod bounds;
pub mod experiment;
pub mod hashing;
pub mod metrics;
pub mod packed;
pub mod pipeline;
pub mod sketch;
pub mod traces;
