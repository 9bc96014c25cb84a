//! Synthetic relational scenes and a small joint-attention encoder trained
//! with and without the congruence regularizer.

pub mod model;
pub mod scenes;
pub mod train;
pub mod eval;
