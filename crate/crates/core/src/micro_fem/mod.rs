mod element;
mod mesh;
mod solver;

pub use element::{element_quadrature, ElementKind, QuadPoint, GAUSS_2X2};
pub(crate) use mesh::to_hex;
pub use mesh::{Mesh, PeriodicPairs};
pub use solver::{
    average_stress, default_perturbation, perturbation_stiffness, solve_rve, BoundaryCondition,
    MicroSolution, NewtonOptions, QuadratureStressField, RveSolver,
};
