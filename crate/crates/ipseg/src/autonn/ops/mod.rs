//! Differentiable operations recorded on the graph.

pub mod act;
pub mod basic;
pub mod conv;
pub mod norm;
pub mod pool;
