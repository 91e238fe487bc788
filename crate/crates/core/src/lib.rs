//! Discretization-independent operator learning with neural bases.
//!
//! A model maps an input function sampled on any uniform grid to an output
//! function evaluated on any other grid: an encoder integrates the input
//! against learned basis functions, an MLP maps coefficients to
//! coefficients, and a reconstructor sums learned output basis functions.

pub mod grid;
pub mod model;
pub mod nets;
pub mod pde;
pub mod seed;
pub mod dataset;
pub mod train;
pub mod eval;
pub mod cli;
