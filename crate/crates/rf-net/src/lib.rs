pub mod cli;
pub mod data;
pub mod descriptor;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod tensor;
pub mod training;
