pub mod models;
pub mod tensor;
pub mod pruning;
pub mod datasets;
pub mod metrics;
pub mod train;
pub mod tickets;
pub mod harness;
