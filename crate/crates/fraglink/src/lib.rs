//! fraglink: 3D-conditional equivariant diffusion for molecular linker design.
//!
//! Given a set of disconnected molecular fragments (optionally surrounded by a
//! protein pocket), the library generates the linker atoms that join them into
//! a single molecule. It contains the full stack needed to do that on a desk:
//! a variance-preserving noise schedule, an E(3)-equivariant graph network with
//! hand-derived gradients, the conditional training and sampling engines, a
//! linker-size classifier, geometry-to-chemistry evaluation (bond perception,
//! validity, rings, clashes, graph canonicalization, RMSD) and the file
//! formats plus CLI that tie everything together.
//!
//! Start with the guide in `book/` (also compiled as doc-tests, see
//! [`guide`]) or the README for the command-line workflow.

pub mod autodiff;
pub mod error;
pub mod geometry;
pub mod oracle;
pub mod rng;
pub mod schedule;

pub use error::{FraglinkError, Result};
pub mod cli;
pub mod egnn;
pub mod diffusion;
pub mod sizegnn;
pub mod chem;
