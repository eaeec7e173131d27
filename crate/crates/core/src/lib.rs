//! Cluster-based generalized multiscale finite elements for second-order
//! elliptic problems with random coefficients.

pub mod clustering;
pub mod error;
pub mod fem;
pub mod fields;
pub mod grid;
pub mod linalg;
pub mod localreduce;
pub mod offline;
pub mod online;
pub mod rng;
pub mod solver;

pub use error::{Error, Result};
