//! Spectral toolkit for the fractional Schrödinger equation
//! `((-Δ_g)^s + V) u = f` on closed manifolds: forward solves, local
//! source-to-solution maps, Runge approximation and potential recovery.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod forward;
pub mod fractional;
pub mod inversion;
pub mod io;
pub mod measurement;
pub mod runge;
pub mod spectrum;

pub use error::{Error, Result};
pub use forward::{assemble, OperatorMatrix, Potential};
pub use fractional::{Field, FracParam};
pub use spectrum::{build_torus_spectrum, Grid, Region, Spectrum};
