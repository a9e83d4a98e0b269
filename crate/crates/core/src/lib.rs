pub mod alignment;
pub mod audit;
pub mod engine;
pub mod eventmon;
pub mod harness;
pub mod personas;
pub mod pipeline;
pub mod worldstate;
