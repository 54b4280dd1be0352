//! Crank-Nicolson polylinear finite elements for the generalized Schrödinger
//! equation on a line or strip, closed by discrete transparent boundaries.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod coeffs;
pub mod config;
pub mod dtbc;
pub mod error;
pub mod fem;
pub mod linalg;
pub mod mesh;
pub mod stepper;
pub mod verify;

pub use config::{parse_config, RunConfig, Scenario};
pub use error::{Error, Result};
pub use fem::{assemble, AssembledForms, WaveField};
pub use linalg::C64;
pub use mesh::{SpaceMesh, TimeMesh, TransverseAxis};
pub use stepper::{run, BoundaryMode, Integrator, RunResult};
