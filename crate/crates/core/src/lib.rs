//! Boundary-first compiler and runtime for agent skill packages.

pub mod compile;
pub mod contract;
pub mod digest;
pub mod judge;
pub mod lowering;
pub mod markdown;
pub mod package;
pub mod provenance;
pub mod risk;
pub mod runtime;
pub mod sandbox;
pub mod shape;
pub mod store;
pub mod terms;
