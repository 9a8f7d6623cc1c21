pub mod cli;
pub mod data;
pub mod eval;
pub mod model;
pub mod tensor;
pub mod train;
pub mod weaklabel;
