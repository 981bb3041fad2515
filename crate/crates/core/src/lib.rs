//! Integrability checks and numerical action-angle coordinates for systems on
//! Poisson manifolds given in a single global chart.

pub mod expr;
pub mod chart;
pub mod cli;
pub mod flows;
pub mod geometry;
pub mod linalg;
pub mod par;
pub mod systems;
pub mod torus;
