//! Numerical toolkit for the Enskog equation with external forces: it
//! computes bicharacteristic flows, evaluates the displaced hard-sphere
//! gain/loss collision integrals by quadrature, runs the Picard iteration of
//! the mild-solution operator in a Gaussian-weighted sup-norm space, and
//! certifies the estimate constants of the underlying theory at desk scale.

pub mod collision_kernel;
pub mod force_fields;
pub mod geom;
pub mod quadrature;
pub mod scalar;
pub mod weighted_space;

pub use scalar::Real;

/// Concrete double-precision aliases for the common instantiation.
pub type Vec3d = geom::Vec3<f64>;
pub type StateD = force_fields::PhaseState<f64>;
pub type FieldD = weighted_space::DistributionField<f64>;
pub type SchemeD = quadrature::QuadratureScheme<f64>;
