//! Semantic SLAM with max-mixture data association.
//!
//! A pose graph over SE(2) keyframes and point landmarks is grown one
//! keyframe at a time. Every detection is scored against the current map
//! using class beliefs and marginal covariances, and ambiguous detections
//! enter the graph as max-mixture factors that pick their dominant
//! association during optimization.

pub mod association;
pub mod error;
pub mod evalio;
pub mod factor_graph;
pub mod geometry;
pub mod mixture;
pub mod pipeline;
pub mod simulator;

pub use error::{Result, SlamError};
