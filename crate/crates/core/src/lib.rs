//! Schrödinger systems on finite supports: a log-domain solver, the entropic
//! functionals built from it, the h-path process, moment measures via a
//! fixed-point iteration, and stability experiments.

pub mod error;
pub mod measure;
pub mod hpath;
pub mod numeric;
pub mod sampling;
pub mod functionals;
pub mod solver;
pub mod moment;
pub mod stability;
pub mod io;

pub use error::{Error, Result};
pub use measure::{
    bl_distance, make_grid, relative_entropy, w2_distance, Density, DiscreteMeasure, KernelKind,
    KernelSpec, Law, ProductMeasure, Support,
};
pub use solver::{solve, solve_with, Exhaustion, SchroedingerSolution, SolveOptions};
