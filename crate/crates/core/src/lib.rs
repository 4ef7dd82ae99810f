pub mod gridworld;
pub mod scalar;
pub mod encoder;
pub mod llm;
pub mod prompts;
pub mod memory;
pub mod world_graph;
pub mod controller;
pub mod harness;

pub use scalar::Scalar;

pub type Memory = memory::EpisodicMemory<f64>;
pub type Buffer = memory::EpisodeBuffer<f64>;
pub type Shared = memory::SharedMemory<f64>;
