//! Multimodal knowledge-graph retrieval-augmented generation engine.

pub mod backends;
pub mod corpus;
pub mod extraction;
pub mod fusion;
pub mod scenegraph;
pub mod text;
pub mod index;
pub mod objectives;
pub mod retrieval;
pub mod harness;
pub mod pipeline;
pub mod synth;
