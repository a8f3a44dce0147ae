//! Shared setup for the criterion benchmarks.

use h2slice_core::h2::TruncationControl;
use h2slice_core::mesh::Geometry;
use h2slice_core::problem::{build_problem, Problem, ProblemConfig};

pub fn square_problem(refinements: usize) -> Problem {
    build_problem(&ProblemConfig::new(Geometry::UnitSquare, refinements))
        .expect("reference problem assembles")
}

pub fn default_control() -> TruncationControl {
    TruncationControl::weighted(1e-8)
}
