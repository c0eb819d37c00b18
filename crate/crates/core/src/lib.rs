pub mod exec;
pub mod geometry;
pub mod lift;
pub mod mask;
pub mod dataset;
pub mod backend;
pub mod vision;
pub mod interpreter;
pub mod temporal;
pub mod eval;
pub mod service;
pub mod synthetic;
