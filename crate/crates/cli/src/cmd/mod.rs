pub mod eval;
pub mod predict;
pub mod simplify;
pub mod stats;
pub mod train;
