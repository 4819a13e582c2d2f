//! Variational search for periodic orbits of magnetic Tonelli systems on the
//! 2-sphere.
//!
//! The crate is `no_std` and only needs an allocator. Loops are closed
//! polygons on the unit sphere with a free period; their lifts to the
//! universal cover of the loop space carry an explicit flux ledger.

#![cfg_attr(not(test), no_std)]
// `!(x < y)` is used on purpose so that NaN takes the failure branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod critical_values;
pub mod error;
pub mod field;
pub mod flow;
mod linalg;
pub mod loop_space;
pub mod sphere_geom;
pub mod system;
pub mod tonelli;
pub mod variational;
pub mod vec3;

pub use error::{Error, Result};
pub use field::ScalarField;
pub use sphere_geom::{Metric, SpherePoint, SphericalTriangle, TangentVector, TwoForm, BASE_POINT};
pub use system::MagneticSystem;
pub use tonelli::{Drift, FiberBounds, Lagrangian, LagrangianKind};
pub use vec3::Vec3;
