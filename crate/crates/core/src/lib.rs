pub mod data;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;
