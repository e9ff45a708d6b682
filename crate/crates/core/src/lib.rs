//! Diffuse-domain Tikhonov regularization for the elliptic Cauchy problem
//! on an annulus, with a sharp-interface reference solver.

pub mod assembly;
pub mod experiments;
pub mod geometry;
pub mod inversion;
pub mod mesh;
pub mod saddle_solver;
pub mod sparse;
