//! Finite-element solver for the incompressible Navier-Stokes equations on
//! stacks of overlapping, non-matching triangular meshes.
//!
//! Meshes are stacked in order: each mesh hides the parts of the meshes below
//! it, and continuity across the resulting artificial interfaces is enforced
//! weakly with interior-penalty terms. Time stepping uses incremental
//! pressure-correction splitting (BDF2 or Crank-Nicolson) with
//! Adams-Bashforth treatment of convection.

pub mod assembly;
pub mod cases;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod ipcs;
pub mod linalg;
pub mod mesh;
pub mod multimesh;
pub mod postproc;
pub mod space;

pub use error::{Error, Result};
