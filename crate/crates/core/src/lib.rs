//! Distributed model predictive control for agents with coupled state
//! constraints. Each agent keeps its predictions inside a consistency set
//! around a communicated reference and updates that reference every step.
//!
//! The set geometry and the Riccati solver are generic over the scalar
//! type; the solvers and the simulator run in `f64`. The aliases below are
//! the concrete types the rest of the crate uses.

pub mod constraints;
pub mod geometry;
pub mod model;
pub mod ocp;
pub mod protocol;
pub mod qp;
pub mod scalar;
pub mod simulator;
pub mod terminal;

pub use scalar::Real;

/// Scalar used by the optimization and simulation layers.
pub type Scalar = f64;
pub type BoxSet64 = geometry::BoxSet<Scalar>;
pub type Polytope64 = geometry::HPolytope<Scalar>;
pub type ConsistencySet64 = geometry::ConsistencySet<Scalar>;
pub type NormBall64 = geometry::NormBall<Scalar>;
