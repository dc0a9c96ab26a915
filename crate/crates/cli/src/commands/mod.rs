pub mod bench;
pub mod data;
pub mod eval;
pub mod sample;
pub mod train;
