//! Switching linear dynamical systems trained with structured variational
//! inference and continuous relaxations of the discrete switches.

pub mod checkpoint;
pub mod config;
pub mod diff;
pub mod distributions;
pub mod envs;
pub mod eval;
pub mod experiment;
pub mod dynamics;
pub mod inference;
pub mod model;
pub mod rng;
pub mod train;
